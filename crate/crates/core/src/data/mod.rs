//! Subjects, manifests, bag assembly, augmentation and weighted sampling.
//!
//! A subject contributes the seven mid-stack axial FLAIR slices and one
//! grade (0-3) per biomarker. A bag holds the K original slices followed
//! by their K preprocessed counterparts; the grade comes from the chosen
//! biomarker.

mod synth;

pub use synth::{load_slice_grades, synth_dataset, SynthConfig, SynthDataset};

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imaging::{preprocess_slice, read_image, GrayImage};
use crate::rng::SeedRng;

/// Which lesion location's grade labels a bag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Biomarker {
    Pvwm,
    Dwm,
}

impl fmt::Display for Biomarker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Biomarker::Pvwm => "pvwm",
            Biomarker::Dwm => "dwm",
        })
    }
}

impl std::str::FromStr for Biomarker {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pvwm" => Ok(Biomarker::Pvwm),
            "dwm" => Ok(Biomarker::Dwm),
            other => Err(Error::Config(format!(
                "unknown biomarker {other:?}, expected pvwm or dwm"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subject {
    pub subject_id: String,
    pub slice_paths: Vec<PathBuf>,
    pub pvwm_grade: u8,
    pub dwm_grade: u8,
}

impl Subject {
    pub fn grade(&self, biomarker: Biomarker) -> u8 {
        match biomarker {
            Biomarker::Pvwm => self.pvwm_grade,
            Biomarker::Dwm => self.dwm_grade,
        }
    }
}

/// One record per subject. On-disk format: UTF-8, header line
/// `subject_id,slices,pvwm,dwm`, one comma-separated record per line with
/// the slice paths joined by `;`.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub subjects: Vec<Subject>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim() == "subject_id,slices,pvwm,dwm" => {}
            _ => {
                return Err(Error::ManifestFormat {
                    line: 1,
                    message: "expected header `subject_id,slices,pvwm,dwm`".into(),
                })
            }
        }

        let mut subjects = Vec::new();
        let mut seen = BTreeSet::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let line_no = idx + 1;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::ManifestFormat {
                    line: line_no,
                    message: format!("expected 4 fields, got {}", fields.len()),
                });
            }
            let subject_id = fields[0].trim().to_string();
            if subject_id.is_empty() {
                return Err(Error::ManifestFormat {
                    line: line_no,
                    message: "empty subject id".into(),
                });
            }
            if !seen.insert(subject_id.clone()) {
                return Err(Error::DuplicateSubject(subject_id));
            }
            let slice_paths: Vec<PathBuf> = fields[1]
                .split(';')
                .filter(|s| !s.trim().is_empty())
                .map(|s| base.join(s.trim()))
                .collect();
            if slice_paths.is_empty() {
                return Err(Error::ManifestFormat {
                    line: line_no,
                    message: format!("subject {subject_id:?} lists no slices"),
                });
            }
            let parse_grade = |text: &str| -> Result<u8> {
                let value: i64 = text.trim().parse().map_err(|_| Error::ManifestFormat {
                    line: line_no,
                    message: format!("malformed grade {text:?}"),
                })?;
                if !(0..=3).contains(&value) {
                    return Err(Error::GradeOutOfRange {
                        subject: subject_id.clone(),
                        grade: value,
                    });
                }
                Ok(value as u8)
            };
            let pvwm_grade = parse_grade(fields[2])?;
            let dwm_grade = parse_grade(fields[3])?;
            for slice in &slice_paths {
                if !slice.is_file() {
                    return Err(Error::MissingSlice(slice.clone()));
                }
            }
            subjects.push(Subject {
                subject_id,
                slice_paths,
                pvwm_grade,
                dwm_grade,
            });
        }
        Ok(Manifest { subjects })
    }

    /// Writes records with slice paths relative to the manifest's
    /// directory when possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let mut out = String::from("subject_id,slices,pvwm,dwm\n");
        for subject in &self.subjects {
            let slices: Vec<String> = subject
                .slice_paths
                .iter()
                .map(|p| {
                    p.strip_prefix(base)
                        .unwrap_or(p)
                        .to_string_lossy()
                        .into_owned()
                })
                .collect();
            out.push_str(&format!(
                "{},{},{},{}\n",
                subject.subject_id,
                slices.join(";"),
                subject.pvwm_grade,
                subject.dwm_grade
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Instances of one subject: K originals followed by their K preprocessed
/// counterparts (or just the originals when preprocessing is disabled),
/// labeled with the grade of one biomarker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bag {
    pub subject_id: String,
    pub instances: Vec<GrayImage>,
    /// Number of original slices; `instances[..original_count]` are the
    /// originals.
    pub original_count: usize,
    pub grade: u8,
}

impl Bag {
    pub fn originals(&self) -> &[GrayImage] {
        &self.instances[..self.original_count]
    }
}

/// Loads the subject's slices and builds the 2K-instance bag. With
/// `with_preprocessed` off, the bag holds only the K originals (the
/// preprocessing ablation).
pub fn assemble_bag(
    subject: &Subject,
    biomarker: Biomarker,
    with_preprocessed: bool,
) -> Result<Bag> {
    let grade = subject.grade(biomarker);
    if grade > 3 {
        return Err(Error::GradeOutOfRange {
            subject: subject.subject_id.clone(),
            grade: i64::from(grade),
        });
    }
    let mut originals = Vec::with_capacity(subject.slice_paths.len());
    for path in &subject.slice_paths {
        if !path.is_file() {
            return Err(Error::MissingSlice(path.clone()));
        }
        originals.push(read_image(path)?);
    }
    let (w, h) = (originals[0].width(), originals[0].height());
    for img in &originals {
        if img.width() != w || img.height() != h {
            return Err(Error::DimensionMismatch {
                subject: subject.subject_id.clone(),
                a: img.width(),
                b: img.height(),
                c: w,
                d: h,
            });
        }
    }
    let original_count = originals.len();
    let mut instances = originals.clone();
    if with_preprocessed {
        instances.extend(originals.iter().map(preprocess_slice));
    }
    Ok(Bag {
        subject_id: subject.subject_id.clone(),
        instances,
        original_count,
        grade,
    })
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Rotates about the image center by `angle_deg` with bilinear resampling;
/// samples falling outside the source are 0.
pub fn rotate_bilinear(img: &GrayImage, angle_deg: f64) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let rad = angle_deg.to_radians();
    let (sin, cos) = (rad.sin(), rad.cos());
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            // Inverse mapping: rotate the destination back by -angle.
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let mut acc = 0.0;
            for (oy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                for (ox, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                    let xi = x0 as isize + ox;
                    let yi = y0 as isize + oy;
                    let v = if xi >= 0 && (xi as usize) < w && yi >= 0 && (yi as usize) < h {
                        f64::from(img.get(xi as usize, yi as usize))
                    } else {
                        0.0
                    };
                    acc += wy * wx * v;
                }
            }
            out[y * w + x] = acc.round().clamp(0.0, 255.0) as u8;
        }
    }
    GrayImage::new(w, h, out).expect("same dimensions")
}

pub fn flip_horizontal(img: &GrayImage) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = img.get(w - 1 - x, y);
        }
    }
    GrayImage::new(w, h, out).expect("same dimensions")
}

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    /// Rotation angle bound in degrees; the draw is uniform in [-b, +b].
    pub max_rotation_deg: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation_deg: 10.0,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg.is_finite()) {
            return Err(Error::Config("max_rotation_deg must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip_prob must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// One rotation angle and one flip decision drawn per bag and applied
/// identically to every instance.
pub fn augment(bag: &Bag, config: &AugmentConfig, rng: &mut SeedRng) -> Bag {
    let angle = rng.range_f64(-config.max_rotation_deg, config.max_rotation_deg);
    let flip = rng.bool_with(config.flip_prob);
    let instances = bag
        .instances
        .iter()
        .map(|img| {
            let rotated = rotate_bilinear(img, angle);
            if flip {
                flip_horizontal(&rotated)
            } else {
                rotated
            }
        })
        .collect();
    Bag {
        subject_id: bag.subject_id.clone(),
        instances,
        original_count: bag.original_count,
        grade: bag.grade,
    }
}

// ---------------------------------------------------------------------------
// Weighted sampling
// ---------------------------------------------------------------------------

/// Infinite with-replacement index stream where subject i is drawn with
/// probability proportional to `1 / count(grade_i)`, balancing the grades
/// present in the list.
pub struct WeightedSampler {
    weights: Vec<f64>,
    rng: SeedRng,
}

impl WeightedSampler {
    pub fn new(grades: &[u8], rng: SeedRng) -> Result<Self> {
        if grades.is_empty() {
            return Err(Error::Contract(
                "weighted_sampler requires at least one subject".into(),
            ));
        }
        let mut counts = [0usize; 4];
        for &g in grades {
            if g > 3 {
                return Err(Error::Contract(format!("grade {g} out of range 0-3")));
            }
            counts[g as usize] += 1;
        }
        let weights = grades
            .iter()
            .map(|&g| 1.0 / counts[g as usize] as f64)
            .collect();
        Ok(WeightedSampler { weights, rng })
    }
}

impl Iterator for WeightedSampler {
    type Item = usize;
    fn next(&mut self) -> Option<usize> {
        Some(self.rng.weighted_index(&self.weights))
    }
}

pub fn weighted_sampler(grades: &[u8], rng: SeedRng) -> Result<WeightedSampler> {
    WeightedSampler::new(grades, rng)
}
