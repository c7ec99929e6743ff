//! Otsu threshold selection by exhaustive search over all 256 candidate
//! thresholds, minimizing the intra-class variance
//!
//! ```text
//! sigma2_w(t) = w0(t) * sigma2_0(t) + w1(t) * sigma2_1(t)
//! ```
//!
//! where class 0 holds intensities in [0, t] and class 1 holds (t, 255].
//! An empty class contributes 0 (its weight is 0). Ties are broken towards
//! the smallest threshold.

use super::GrayImage;

/// Outcome of the threshold search, with the per-class statistics at the
/// selected threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct OtsuResult {
    /// Selected threshold; the smallest minimizer of the intra-class
    /// variance.
    pub theta: u8,
    /// Intra-class variance at `theta`.
    pub intra_class_variance: f64,
    /// Occurrence probabilities of the two classes; they sum to 1.
    pub class_weights: (f64, f64),
    /// Mean intensity per class (0 for an empty class).
    pub class_means: (f64, f64),
    /// Intensity variance per class (0 for an empty class).
    pub class_variances: (f64, f64),
}

struct ClassStats {
    weight: f64,
    mean: f64,
    variance: f64,
}

/// Weight, mean and variance of the intensities in `bins` restricted to
/// `range`, as fractions of `total` pixels.
fn class_stats(bins: &[u64; 256], range: std::ops::RangeInclusive<usize>, total: f64) -> ClassStats {
    let mut count = 0u64;
    let mut sum = 0.0;
    for i in range.clone() {
        count += bins[i];
        sum += (i as f64) * (bins[i] as f64);
    }
    if count == 0 {
        return ClassStats {
            weight: 0.0,
            mean: 0.0,
            variance: 0.0,
        };
    }
    let mean = sum / count as f64;
    let mut var_sum = 0.0;
    for i in range {
        let d = i as f64 - mean;
        var_sum += d * d * (bins[i] as f64);
    }
    ClassStats {
        weight: count as f64 / total,
        mean,
        variance: var_sum / count as f64,
    }
}

/// Intra-class variance for a given threshold, straight from the class
/// definitions. Quadratic in the histogram size; fine for 256 bins.
pub fn intra_class_variance(bins: &[u64; 256], theta: u8, total: f64) -> f64 {
    let lo = class_stats(bins, 0..=theta as usize, total);
    let hi = if (theta as usize) < 255 {
        class_stats(bins, theta as usize + 1..=255, total)
    } else {
        ClassStats {
            weight: 0.0,
            mean: 0.0,
            variance: 0.0,
        }
    };
    lo.weight * lo.variance + hi.weight * hi.variance
}

/// Exhaustive search for the threshold minimizing the intra-class variance.
pub fn otsu_threshold(img: &GrayImage) -> OtsuResult {
    let bins = img.histogram();
    let total = (img.width() * img.height()) as f64;

    let mut best_theta = 0u8;
    let mut best_sigma = f64::INFINITY;
    for t in 0..=255u8 {
        let sigma = intra_class_variance(&bins, t, total);
        if sigma < best_sigma {
            best_sigma = sigma;
            best_theta = t;
        }
    }

    let lo = class_stats(&bins, 0..=best_theta as usize, total);
    let hi = if (best_theta as usize) < 255 {
        class_stats(&bins, best_theta as usize + 1..=255, total)
    } else {
        ClassStats {
            weight: 0.0,
            mean: 0.0,
            variance: 0.0,
        }
    };

    OtsuResult {
        theta: best_theta,
        intra_class_variance: best_sigma,
        class_weights: (lo.weight, hi.weight),
        class_means: (lo.mean, hi.mean),
        class_variances: (lo.variance, hi.variance),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;

    /// Independent brute-force evaluation used as the oracle: recomputes
    /// every class statistic from scratch per threshold, never sharing code
    /// with the search above beyond the histogram itself.
    fn brute_force_theta(img: &GrayImage) -> (u8, f64) {
        let bins = img.histogram();
        let n = (img.width() * img.height()) as f64;
        let mut best = (0u8, f64::INFINITY);
        for t in 0..=255usize {
            let mut sigma = 0.0;
            for (lo, hi) in [(0usize, t), (t + 1, 255)] {
                if lo > hi {
                    continue;
                }
                let count: u64 = bins[lo..=hi].iter().sum();
                if count == 0 {
                    continue;
                }
                let mean: f64 = bins[lo..=hi]
                    .iter()
                    .enumerate()
                    .map(|(k, &c)| (lo + k) as f64 * c as f64)
                    .sum::<f64>()
                    / count as f64;
                let omega = count as f64 / n;
                let var: f64 = bins[lo..=hi]
                    .iter()
                    .enumerate()
                    .map(|(k, &c)| {
                        let d = (lo + k) as f64 - mean;
                        d * d * (c as f64 / n)
                    })
                    .sum::<f64>()
                    / omega;
                sigma += omega * var;
            }
            if sigma < best.1 {
                best = (t as u8, sigma);
            }
        }
        best
    }

    /// Between-class variance w0 * w1 * (mu0 - mu1)^2; its maximizer must
    /// agree with the intra-class minimizer.
    fn between_class_theta(img: &GrayImage) -> u8 {
        let bins = img.histogram();
        let n = (img.width() * img.height()) as f64;
        let mut best = (0u8, f64::NEG_INFINITY);
        for t in 0..=255usize {
            let c0: u64 = bins[0..=t].iter().sum();
            let c1: u64 = if t < 255 {
                bins[t + 1..=255].iter().sum()
            } else {
                0
            };
            let m0 = if c0 > 0 {
                bins[0..=t]
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| i as f64 * c as f64)
                    .sum::<f64>()
                    / c0 as f64
            } else {
                0.0
            };
            let m1 = if c1 > 0 {
                bins[t + 1..=255]
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| (t + 1 + i) as f64 * c as f64)
                    .sum::<f64>()
                    / c1 as f64
            } else {
                0.0
            };
            let between = (c0 as f64 / n) * (c1 as f64 / n) * (m0 - m1) * (m0 - m1);
            if between > best.1 {
                best = (t as u8, between);
            }
        }
        best.0
    }

    fn random_image(rng: &mut SeedRng, w: usize, h: usize) -> GrayImage {
        let pixels = (0..w * h).map(|_| rng.byte()).collect();
        GrayImage::new(w, h, pixels).unwrap()
    }

    #[test]
    fn two_level_image_thresholds_at_zero() {
        let img = GrayImage::new(2, 2, vec![0, 0, 255, 255]).unwrap();
        let res = otsu_threshold(&img);
        assert_eq!(res.theta, 0);
        assert_eq!(res.intra_class_variance, 0.0);
        assert_eq!(res.class_weights, (0.5, 0.5));
        assert_eq!(res.class_means, (0.0, 255.0));
    }

    #[test]
    fn constant_image_picks_smallest_threshold_with_empty_low_class() {
        let img = GrayImage::filled(4, 4, 128).unwrap();
        let res = otsu_threshold(&img);
        assert_eq!(res.theta, 0);
        assert_eq!(res.class_weights.0, 0.0);
        assert_eq!(res.class_weights.1, 1.0);
        assert_eq!(res.intra_class_variance, 0.0);
    }

    #[test]
    fn matches_brute_force_on_seeded_image() {
        let mut rng = SeedRng::new(1234);
        let img = random_image(&mut rng, 32, 32);
        let (theta, sigma) = brute_force_theta(&img);
        let res = otsu_threshold(&img);
        assert_eq!(res.theta, theta);
        assert!((res.intra_class_variance - sigma).abs() < 1e-9);
    }

    #[test]
    fn matches_brute_force_on_many_small_images() {
        let mut rng = SeedRng::new(77);
        for _ in 0..50 {
            let w = rng.range_usize(1, 24);
            let h = rng.range_usize(1, 24);
            let img = random_image(&mut rng, w, h);
            assert_eq!(otsu_threshold(&img).theta, brute_force_theta(&img).0);
        }
    }

    #[test]
    fn intra_minimizer_equals_between_maximizer() {
        let mut rng = SeedRng::new(99);
        for _ in 0..30 {
            let w = rng.range_usize(2, 20);
            let h = rng.range_usize(2, 20);
            let img = random_image(&mut rng, w, h);
            assert_eq!(otsu_threshold(&img).theta, between_class_theta(&img));
        }
    }

    #[test]
    fn result_invariants_hold() {
        let mut rng = SeedRng::new(5);
        for _ in 0..20 {
            let img = random_image(&mut rng, 16, 16);
            let res = otsu_threshold(&img);
            assert!((res.class_weights.0 + res.class_weights.1 - 1.0).abs() < 1e-12);
            let recombined = res.class_weights.0 * res.class_variances.0
                + res.class_weights.1 * res.class_variances.1;
            assert!((recombined - res.intra_class_variance).abs() < 1e-9);
        }
    }
}
