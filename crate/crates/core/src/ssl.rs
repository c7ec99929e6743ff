//! Self-supervised pretext corruptions. Each transform damages an image in
//! a way the reconstruction network must learn to undo: a monotone
//! intensity remap (appearance), per-window pixel shuffling (texture), and
//! noise painted inside or outside random rectangles (local continuity /
//! global layout).
//!
//! Every transform is a pure function of the image, its parameters and the
//! RNG state; the same seed always reproduces the same corruption.

use crate::error::{Error, Result};
use crate::imaging::GrayImage;
use crate::rng::SeedRng;

/// Which corruption a [`TransformSpec`] applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    NonLinearIntensity,
    LocalShuffle,
    InPaint,
    OutPaint,
}

/// One corruption with its application probability and parameters.
#[derive(Debug, Clone)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub probability: f64,
    pub params: TransformParams,
}

#[derive(Debug, Clone)]
pub enum TransformParams {
    /// The curve endpoints and interior points are drawn per call.
    NonLinear,
    /// Shuffle window size (width, height).
    Window(usize, usize),
    /// Rectangle count range and per-side fraction range.
    Paint(PaintParams),
}

#[derive(Debug, Clone)]
pub struct PaintParams {
    pub min_rects: usize,
    pub max_rects: usize,
    /// Rectangle side as a fraction of the image side, inclusive range.
    pub min_side_frac: f64,
    pub max_side_frac: f64,
}

impl Default for PaintParams {
    fn default() -> Self {
        PaintParams {
            min_rects: 1,
            max_rects: 3,
            min_side_frac: 0.25,
            max_side_frac: 0.5,
        }
    }
}

/// Full corruption schedule used by [`compose`].
#[derive(Debug, Clone)]
pub struct ComposeConfig {
    pub nonlinear_prob: f64,
    pub shuffle_prob: f64,
    pub shuffle_window: (usize, usize),
    /// `None` disables the painting stage entirely.
    pub paint: Option<PaintConfig>,
}

#[derive(Debug, Clone)]
pub struct PaintConfig {
    /// Probability of in-painting; out-painting otherwise.
    pub in_paint_prob: f64,
    pub params: PaintParams,
}

impl Default for ComposeConfig {
    fn default() -> Self {
        ComposeConfig {
            nonlinear_prob: 0.9,
            shuffle_prob: 0.5,
            shuffle_window: (4, 4),
            paint: Some(PaintConfig {
                in_paint_prob: 0.8,
                params: PaintParams::default(),
            }),
        }
    }
}

impl ComposeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("nonlinear_prob", self.nonlinear_prob),
            ("shuffle_prob", self.shuffle_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        if self.shuffle_window.0 < 1 || self.shuffle_window.1 < 1 {
            return Err(Error::Config("shuffle window sides must be >= 1".into()));
        }
        if let Some(paint) = &self.paint {
            if !(0.0..=1.0).contains(&paint.in_paint_prob) {
                return Err(Error::Config(format!(
                    "in_paint_prob must be in [0,1], got {}",
                    paint.in_paint_prob
                )));
            }
            let p = &paint.params;
            if p.min_rects > p.max_rects {
                return Err(Error::Config("paint rect count range is inverted".into()));
            }
            if !(p.min_side_frac > 0.0
                && p.min_side_frac <= p.max_side_frac
                && p.max_side_frac <= 1.0)
            {
                return Err(Error::Config("paint side fractions must satisfy 0 < min <= max <= 1".into()));
            }
        }
        Ok(())
    }
}

/// Axis-aligned rectangle, inclusive corners, guaranteed inside the image
/// it was drawn for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

// ---------------------------------------------------------------------------
// Non-linear intensity transformation
// ---------------------------------------------------------------------------

const BEZIER_STEPS: usize = 1000;

/// Builds the 256-entry intensity lookup for a cubic Bezier curve through
/// `points` (each (x, y) in [0,1]^2, x coordinates nondecreasing). The
/// curve is sampled at 1000 parameter steps; each intensity takes the y of
/// the sample with the nearest x.
pub fn bezier_intensity_map(points: [[f64; 2]; 4]) -> [u8; 256] {
    let mut xs = [0.0f64; BEZIER_STEPS];
    let mut ys = [0.0f64; BEZIER_STEPS];
    for (i, (x, y)) in xs.iter_mut().zip(ys.iter_mut()).enumerate() {
        let t = i as f64 / (BEZIER_STEPS - 1) as f64;
        let u = 1.0 - t;
        let w = [u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t];
        *x = w.iter().zip(&points).map(|(w, p)| w * p[0]).sum();
        *y = w.iter().zip(&points).map(|(w, p)| w * p[1]).sum();
    }

    let mut map = [0u8; 256];
    let mut cursor = 0usize;
    for (v, out) in map.iter_mut().enumerate() {
        let x = v as f64 / 255.0;
        // xs is nondecreasing, and target x values are increasing, so a
        // forward scan finds the nearest sample.
        while cursor + 1 < BEZIER_STEPS
            && (xs[cursor + 1] - x).abs() <= (xs[cursor] - x).abs()
        {
            cursor += 1;
        }
        *out = (ys[cursor] * 255.0).round().clamp(0.0, 255.0) as u8;
    }
    map
}

pub fn apply_intensity_map(img: &GrayImage, map: &[u8; 256]) -> GrayImage {
    let pixels = img.pixels().iter().map(|&p| map[p as usize]).collect();
    GrayImage::new(img.width(), img.height(), pixels).expect("same dimensions")
}

/// Draws the Bezier control points for one application: orientation is a
/// fair coin (identity-oriented (0,0)->(1,1) or inverting (0,1)->(1,0)),
/// interior x and y coordinates are uniform, sorted so the curve stays
/// monotone.
pub fn draw_bezier_points(rng: &mut SeedRng) -> [[f64; 2]; 4] {
    let invert = rng.bool_with(0.5);
    let (mut x1, mut x2) = (rng.uniform(), rng.uniform());
    if x1 > x2 {
        std::mem::swap(&mut x1, &mut x2);
    }
    let (mut y1, mut y2) = (rng.uniform(), rng.uniform());
    if y1 > y2 {
        std::mem::swap(&mut y1, &mut y2);
    }
    if invert {
        [[0.0, 1.0], [x1, y2], [x2, y1], [1.0, 0.0]]
    } else {
        [[0.0, 0.0], [x1, y1], [x2, y2], [1.0, 1.0]]
    }
}

/// Remaps all intensities through a random monotone curve.
pub fn nonlinear_intensity(img: &GrayImage, rng: &mut SeedRng) -> GrayImage {
    let points = draw_bezier_points(rng);
    apply_intensity_map(img, &bezier_intensity_map(points))
}

// ---------------------------------------------------------------------------
// Local pixel shuffling
// ---------------------------------------------------------------------------

/// Partitions the image into non-overlapping `window` tiles (edge tiles may
/// be smaller) and permutes the pixels uniformly within each tile.
pub fn local_shuffle(img: &GrayImage, window: (usize, usize), rng: &mut SeedRng) -> GrayImage {
    assert!(window.0 >= 1 && window.1 >= 1, "window sides must be >= 1");
    let mut out = img.clone();
    let (w, h) = (img.width(), img.height());
    let mut scratch: Vec<u8> = Vec::with_capacity(window.0 * window.1);
    for ty in (0..h).step_by(window.1) {
        for tx in (0..w).step_by(window.0) {
            let x_end = (tx + window.0).min(w);
            let y_end = (ty + window.1).min(h);
            scratch.clear();
            for y in ty..y_end {
                for x in tx..x_end {
                    scratch.push(img.get(x, y));
                }
            }
            rng.shuffle(&mut scratch);
            let mut it = scratch.iter();
            for y in ty..y_end {
                for x in tx..x_end {
                    out.set(x, y, *it.next().unwrap());
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// In-painting / out-painting
// ---------------------------------------------------------------------------

/// Draws `count` rectangles with sides in the configured fraction range,
/// each fully inside the image.
pub fn draw_rects(img: &GrayImage, params: &PaintParams, rng: &mut SeedRng) -> Vec<Rect> {
    let count = rng.range_usize(params.min_rects, params.max_rects);
    let (w, h) = (img.width(), img.height());
    (0..count)
        .map(|_| {
            let rw = ((rng.range_f64(params.min_side_frac, params.max_side_frac) * w as f64)
                .round() as usize)
                .clamp(1, w);
            let rh = ((rng.range_f64(params.min_side_frac, params.max_side_frac) * h as f64)
                .round() as usize)
                .clamp(1, h);
            let x0 = rng.range_usize(0, w - rw);
            let y0 = rng.range_usize(0, h - rh);
            Rect {
                x0,
                y0,
                x1: x0 + rw - 1,
                y1: y0 + rh - 1,
            }
        })
        .collect()
}

/// Replaces the pixels inside the given rectangles with uniform noise.
pub fn in_paint_rects(img: &GrayImage, rects: &[Rect], rng: &mut SeedRng) -> GrayImage {
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if rects.iter().any(|r| r.contains(x, y)) {
                out.set(x, y, rng.byte());
            }
        }
    }
    out
}

/// Replaces the pixels outside the union of the rectangles with noise.
pub fn out_paint_rects(img: &GrayImage, rects: &[Rect], rng: &mut SeedRng) -> GrayImage {
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if !rects.iter().any(|r| r.contains(x, y)) {
                out.set(x, y, rng.byte());
            }
        }
    }
    out
}

pub fn in_paint(img: &GrayImage, params: &PaintParams, rng: &mut SeedRng) -> GrayImage {
    let rects = draw_rects(img, params, rng);
    in_paint_rects(img, &rects, rng)
}

pub fn out_paint(img: &GrayImage, params: &PaintParams, rng: &mut SeedRng) -> GrayImage {
    let rects = draw_rects(img, params, rng);
    out_paint_rects(img, &rects, rng)
}

// ---------------------------------------------------------------------------
// Composition
// ---------------------------------------------------------------------------

/// Applies the corruption schedule and returns the `(corrupted, original)`
/// training pair. Intensity remap and shuffling fire independently with
/// their probabilities; then exactly one of in-/out-painting is applied
/// (when painting is enabled), chosen by a Bernoulli draw.
pub fn compose(img: &GrayImage, config: &ComposeConfig, rng: &mut SeedRng) -> (GrayImage, GrayImage) {
    let original = img.clone();
    let mut corrupted = img.clone();
    if rng.bool_with(config.nonlinear_prob) {
        corrupted = nonlinear_intensity(&corrupted, rng);
    }
    if rng.bool_with(config.shuffle_prob) {
        corrupted = local_shuffle(&corrupted, config.shuffle_window, rng);
    }
    if let Some(paint) = &config.paint {
        corrupted = if rng.bool_with(paint.in_paint_prob) {
            in_paint(&corrupted, &paint.params, rng)
        } else {
            out_paint(&corrupted, &paint.params, rng)
        };
    }
    (corrupted, original)
}
