//! Synthetic lesion-phantom dataset. Each subject gets seven axial
//! phantom slices: dark background, a grey brain ellipse with a darker
//! ventricle, and bright lesion blobs whose count, size and confluence
//! grow with the slice grade (0 none, 1 punctate dots, 2 a halo band
//! around the ventricle, 3 large confluent regions). The subject grade is
//! the maximum of its slice grades; the per-slice grades are written to a
//! sidecar file as hidden ground truth for attention sanity checks.
//!
//! Per-subject intensity gain/offset jitter imitates scanner variation:
//! raw slices of the same grade differ in brightness, which is the
//! variation the preprocessing step is meant to absorb.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imaging::{write_image, GrayImage};
use crate::rng::SeedRng;

use super::{Manifest, Subject};

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub slices_per_subject: usize,
    pub side: usize,
    /// Subject-grade probabilities; the default follows the 172/84/29/15
    /// healthy-to-severe profile of a 300-subject clinical population.
    pub class_profile: [f64; 4],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 120,
            slices_per_subject: 7,
            side: 64,
            class_profile: [172.0 / 300.0, 84.0 / 300.0, 29.0 / 300.0, 15.0 / 300.0],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 8 {
            return Err(Error::Contract(format!(
                "synth requires at least 8 subjects, got {}",
                self.n_subjects
            )));
        }
        if self.slices_per_subject == 0 {
            return Err(Error::Config("slices_per_subject must be >= 1".into()));
        }
        if self.side < 32 {
            return Err(Error::Config("phantom side must be >= 32".into()));
        }
        if self.class_profile.iter().any(|&p| p < 0.0)
            || self.class_profile.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config("class profile must be nonnegative and nonzero".into()));
        }
        Ok(())
    }
}

/// Generator output: the manifest plus the hidden per-slice grades.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub manifest: Manifest,
    pub slice_grades: BTreeMap<String, Vec<u8>>,
    pub manifest_path: PathBuf,
}

/// Writes `n_subjects` phantom subjects under `out_dir` (slice PNGs, a
/// `manifest.csv`, and `slice_grades.csv`).
pub fn synth_dataset(config: &SynthConfig, out_dir: &Path, seed: u64) -> Result<SynthDataset> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut subjects = Vec::with_capacity(config.n_subjects);
    let mut slice_grades = BTreeMap::new();
    for index in 0..config.n_subjects {
        let subject_id = format!("s{index:04}");
        let mut rng = SeedRng::child(seed, &format!("synth-subject-{index}"));
        let grade = draw_grade(&config.class_profile, &mut rng);
        let grades = draw_slice_grades(grade, config.slices_per_subject, &mut rng);

        let mut slice_paths = Vec::with_capacity(grades.len());
        // One gain/offset per subject: the scanner-setting jitter.
        let gain = rng.range_f64(0.82, 1.18);
        let offset = rng.range_f64(-12.0, 12.0);
        for (k, &slice_grade) in grades.iter().enumerate() {
            let img = render_slice(config.side, slice_grade, gain, offset, &mut rng);
            let path = out_dir.join(format!("{subject_id}_slice{k}.png"));
            write_image(&path, &img)?;
            slice_paths.push(path);
        }

        debug_assert_eq!(grade, *grades.iter().max().expect("nonempty"));
        subjects.push(Subject {
            subject_id: subject_id.clone(),
            slice_paths,
            pvwm_grade: grade,
            dwm_grade: grade,
        });
        slice_grades.insert(subject_id, grades);
    }

    let manifest = Manifest { subjects };
    let manifest_path = out_dir.join("manifest.csv");
    manifest.save(&manifest_path)?;

    let mut sidecar = String::from("subject_id,slice_grades\n");
    for (id, grades) in &slice_grades {
        let joined: Vec<String> = grades.iter().map(|g| g.to_string()).collect();
        sidecar.push_str(&format!("{id},{}\n", joined.join(";")));
    }
    let sidecar_path = out_dir.join("slice_grades.csv");
    std::fs::write(&sidecar_path, sidecar).map_err(|e| Error::io(&sidecar_path, e))?;

    Ok(SynthDataset {
        manifest,
        slice_grades,
        manifest_path,
    })
}

/// Reads the hidden slice grades written by [`synth_dataset`].
pub fn load_slice_grades(path: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (id, grades) = line.split_once(',').ok_or_else(|| Error::ManifestFormat {
            line: idx + 1,
            message: "expected `subject_id,slice_grades`".into(),
        })?;
        let grades: Vec<u8> = grades
            .split(';')
            .map(|g| g.trim().parse::<u8>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::ManifestFormat {
                line: idx + 1,
                message: "malformed slice grade".into(),
            })?;
        out.insert(id.to_string(), grades);
    }
    Ok(out)
}

fn draw_grade(profile: &[f64; 4], rng: &mut SeedRng) -> u8 {
    rng.weighted_index(profile) as u8
}

/// Per-slice grades whose maximum equals the subject grade: one to three
/// slices carry the full grade, the rest are drawn low.
fn draw_slice_grades(grade: u8, slices: usize, rng: &mut SeedRng) -> Vec<u8> {
    let mut grades = vec![0u8; slices];
    if grade == 0 {
        return grades;
    }
    let carriers = rng.range_usize(1, 3.min(slices));
    let mut order: Vec<usize> = (0..slices).collect();
    rng.shuffle(&mut order);
    for &slot in order.iter().take(carriers) {
        grades[slot] = grade;
    }
    // Remaining slices get lower grades, biased towards healthy.
    for &slot in order.iter().skip(carriers) {
        let weights: Vec<f64> = (0..grade).map(|g| if g == 0 { 6.0 } else { 1.0 }).collect();
        grades[slot] = rng.weighted_index(&weights) as u8;
    }
    grades
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
    /// Normalized squared radius, 1.0 on the boundary.
    fn radius2(&self, x: f64, y: f64) -> f64 {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy
    }
}

fn render_slice(side: usize, grade: u8, gain: f64, offset: f64, rng: &mut SeedRng) -> GrayImage {
    let s = side as f64;
    let brain = Ellipse {
        cx: s / 2.0 + rng.range_f64(-1.5, 1.5),
        cy: s / 2.0 + rng.range_f64(-1.5, 1.5),
        rx: s * rng.range_f64(0.36, 0.42),
        ry: s * rng.range_f64(0.40, 0.46),
    };
    let ventricle = Ellipse {
        cx: brain.cx + rng.range_f64(-1.0, 1.0),
        cy: brain.cy + rng.range_f64(-1.0, 1.0),
        rx: s * rng.range_f64(0.09, 0.12),
        ry: s * rng.range_f64(0.13, 0.17),
    };

    // Lesion geometry per grade.
    let mut dots: Vec<Ellipse> = Vec::new();
    let mut halo: Option<(f64, f64, f64)> = None; // (inner scale, outer scale, arc coverage)
    match grade {
        1 => {
            let count = rng.range_usize(2, 4);
            for _ in 0..count {
                let angle = rng.range_f64(0.0, std::f64::consts::TAU);
                let ring = rng.range_f64(1.35, 1.8);
                let r = rng.range_f64(1.0, 2.0);
                dots.push(Ellipse {
                    cx: ventricle.cx + ventricle.rx * ring * angle.cos(),
                    cy: ventricle.cy + ventricle.ry * ring * angle.sin(),
                    rx: r,
                    ry: r,
                });
            }
        }
        2 => {
            halo = Some((1.05, rng.range_f64(1.35, 1.55), rng.range_f64(0.7, 1.0)));
        }
        3 => {
            halo = Some((1.05, rng.range_f64(1.5, 1.8), 1.0));
            let count = rng.range_usize(2, 3);
            for _ in 0..count {
                let angle = rng.range_f64(0.0, std::f64::consts::TAU);
                let ring = rng.range_f64(1.5, 2.2);
                let r = rng.range_f64(4.5, 7.5);
                dots.push(Ellipse {
                    cx: ventricle.cx + ventricle.rx * ring * angle.cos(),
                    cy: ventricle.cy + ventricle.ry * ring * angle.sin(),
                    rx: r,
                    ry: r * rng.range_f64(0.7, 1.0),
                });
            }
        }
        _ => {}
    }
    let halo_phase = rng.range_f64(0.0, std::f64::consts::TAU);

    let mut pixels = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f64, y as f64);
            let mut value = 10.0 + rng.normal() * 4.0; // background
            if brain.contains(fx, fy) {
                value = 95.0 + rng.normal() * 7.0;
                if ventricle.contains(fx, fy) {
                    value = 45.0 + rng.normal() * 5.0;
                }
                let mut lesion = false;
                if let Some((inner, outer, coverage)) = halo {
                    let r2 = ventricle.radius2(fx, fy);
                    if r2 > inner * inner && r2 < outer * outer {
                        let angle = (fy - ventricle.cy).atan2(fx - ventricle.cx);
                        let arc = ((angle - halo_phase).rem_euclid(std::f64::consts::TAU))
                            / std::f64::consts::TAU;
                        if arc <= coverage {
                            lesion = true;
                        }
                    }
                }
                if !lesion {
                    lesion = dots.iter().any(|d| d.contains(fx, fy));
                }
                if lesion {
                    value = 225.0 + rng.normal() * 8.0;
                }
            }
            let adjusted = value.mul_add(gain, offset);
            pixels.push(adjusted.round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage::new(side, side, pixels).expect("side * side pixels")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subject_grade_is_max_of_slice_grades() {
        let mut rng = SeedRng::new(3);
        for grade in 0..=3u8 {
            for _ in 0..32 {
                let grades = draw_slice_grades(grade, 7, &mut rng);
                assert_eq!(grades.len(), 7);
                assert_eq!(*grades.iter().max().unwrap(), grade);
            }
        }
    }

    #[test]
    fn all_zero_slice_grades_mean_grade_zero() {
        let mut rng = SeedRng::new(4);
        let grades = draw_slice_grades(0, 7, &mut rng);
        assert!(grades.iter().all(|&g| g == 0));
    }

    #[test]
    fn single_positive_slice_pattern_is_possible() {
        // [0,0,1,0,0,0,0]-style assignments must occur: exactly one
        // carrier slice with grade 1.
        let mut rng = SeedRng::new(5);
        let mut saw_single = false;
        for _ in 0..64 {
            let grades = draw_slice_grades(1, 7, &mut rng);
            if grades.iter().filter(|&&g| g == 1).count() == 1 {
                saw_single = true;
            }
        }
        assert!(saw_single);
    }

    #[test]
    fn generator_writes_consistent_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig {
            n_subjects: 10,
            ..SynthConfig::default()
        };
        let ds = synth_dataset(&config, dir.path(), 7).unwrap();
        assert_eq!(ds.manifest.subjects.len(), 10);
        for subject in &ds.manifest.subjects {
            assert_eq!(subject.slice_paths.len(), 7);
            assert_eq!(subject.pvwm_grade, subject.dwm_grade);
            let grades = &ds.slice_grades[&subject.subject_id];
            assert_eq!(*grades.iter().max().unwrap(), subject.pvwm_grade);
            for path in &subject.slice_paths {
                assert!(path.is_file());
            }
        }
        // Loadable through the public manifest and sidecar paths.
        let manifest = Manifest::load(&ds.manifest_path).unwrap();
        assert_eq!(manifest.subjects.len(), 10);
        let grades = load_slice_grades(&dir.path().join("slice_grades.csv")).unwrap();
        assert_eq!(grades, ds.slice_grades);
    }

    #[test]
    fn generator_is_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let config = SynthConfig {
            n_subjects: 8,
            ..SynthConfig::default()
        };
        synth_dataset(&config, dir_a.path(), 11).unwrap();
        synth_dataset(&config, dir_b.path(), 11).unwrap();
        let mut names: Vec<String> = std::fs::read_dir(dir_a.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert!(names.len() > 8);
        for name in names {
            let a = std::fs::read(dir_a.path().join(&name)).unwrap();
            let b = std::fs::read(dir_b.path().join(&name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
    }

    #[test]
    fn profile_shapes_class_counts() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig {
            n_subjects: 300,
            ..SynthConfig::default()
        };
        let ds = synth_dataset(&config, dir.path(), 1).unwrap();
        let mut counts = [0usize; 4];
        for s in &ds.manifest.subjects {
            counts[s.pvwm_grade as usize] += 1;
        }
        // Expected (172, 84, 29, 15) up to multinomial noise; allow 4
        // sigma per class.
        let expected = [172.0f64, 84.0, 29.0, 15.0];
        for (got, want) in counts.iter().zip(expected) {
            let p = want / 300.0;
            let sigma = (300.0 * p * (1.0 - p)).sqrt();
            assert!(
                (*got as f64 - want).abs() < 4.0 * sigma,
                "counts {counts:?} too far from expected"
            );
        }
    }

    #[test]
    fn rejects_fewer_than_eight_subjects() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig {
            n_subjects: 7,
            ..SynthConfig::default()
        };
        assert!(synth_dataset(&config, dir.path(), 1).is_err());
    }
}
