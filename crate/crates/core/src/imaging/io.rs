//! Reading and writing 8-bit grayscale images as PNG or binary PGM (P5,
//! maxval 255). The format is chosen by file extension.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::GrayImage;

pub fn read_image(path: &Path) -> Result<GrayImage> {
    match extension(path) {
        Ext::Png => read_png(path),
        Ext::Pgm => read_pgm(path),
    }
}

pub fn write_image(path: &Path, img: &GrayImage) -> Result<()> {
    match extension(path) {
        Ext::Png => write_png(path, img),
        Ext::Pgm => write_pgm(path, img),
    }
}

enum Ext {
    Png,
    Pgm,
}

fn extension(path: &Path) -> Ext {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("pgm") => Ext::Pgm,
        _ => Ext::Png,
    }
}

fn read_png(path: &Path) -> Result<GrayImage> {
    let dynamic = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        other => Error::ImageFormat {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let luma = dynamic.into_luma8();
    GrayImage::new(
        luma.width() as usize,
        luma.height() as usize,
        luma.into_raw(),
    )
}

fn write_png(path: &Path, img: &GrayImage) -> Result<()> {
    let buffer = image::GrayImage::from_raw(
        img.width() as u32,
        img.height() as u32,
        img.pixels().to_vec(),
    )
    .expect("buffer length matches dimensions by construction");
    buffer.save(path).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        other => Error::ImageFormat {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let header = format!("P5\n{} {}\n255\n", img.width(), img.height());
    file.write_all(header.as_bytes())
        .and_then(|_| file.write_all(img.pixels()))
        .map_err(|e| Error::io(path, e))
}

fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: &str| Error::ImageFormat {
        path: path.to_path_buf(),
        message: message.to_string(),
    };

    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Option<(usize, usize)> {
        // Skips whitespace and '#' comments, returns (start, end) of the
        // next token.
        let mut i = pos;
        loop {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            break;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        pos = i;
        Some((start, i))
    };

    let (s, e) = token(&bytes).ok_or_else(|| bad("empty file"))?;
    if &bytes[s..e] != b"P5" {
        return Err(bad("not a binary PGM (missing P5 magic)"));
    }
    let mut read_number = |field: &str| -> Result<usize> {
        let (s, e) = token(&bytes).ok_or_else(|| bad(&format!("missing {field}")))?;
        std::str::from_utf8(&bytes[s..e])
            .ok()
            .and_then(|t| t.parse::<usize>().ok())
            .ok_or_else(|| bad(&format!("malformed {field}")))
    };
    let width = read_number("width")?;
    let height = read_number("height")?;
    let maxval = read_number("maxval")?;
    if maxval != 255 {
        return Err(bad(&format!("unsupported maxval {maxval}, expected 255")));
    }
    // A single whitespace byte separates the header from the raster.
    let data_start = pos + 1;
    let expected = width
        .checked_mul(height)
        .ok_or_else(|| bad("dimension overflow"))?;
    if bytes.len() < data_start + expected {
        return Err(bad("truncated raster data"));
    }
    GrayImage::new(
        width,
        height,
        bytes[data_start..data_start + expected].to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;

    fn random_img(seed: u64, w: usize, h: usize) -> GrayImage {
        let mut rng = SeedRng::new(seed);
        GrayImage::new(w, h, (0..w * h).map(|_| rng.byte()).collect()).unwrap()
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = random_img(3, 17, 9);
        write_image(&path, &img).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = random_img(4, 33, 12);
        write_image(&path, &img).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
    }

    #[test]
    fn pgm_header_is_canonical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = GrayImage::new(2, 1, vec![7, 250]).unwrap();
        write_image(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes, b"P5\n2 1\n255\n\x07\xfa");
    }

    #[test]
    fn missing_file_reports_io_error() {
        let err = read_image(Path::new("/nonexistent/img.png")).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn rejects_wrong_maxval() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        std::fs::write(&path, b"P5\n1 1\n65535\n\x00\x00").unwrap();
        assert!(matches!(
            read_image(&path),
            Err(Error::ImageFormat { .. })
        ));
    }
}
