//! Adjustable privacy knob: blocks the fraction rho of patch sites whose
//! similarity to the identity embedding is highest, then expands the binary
//! keep mask to pixel resolution by nearest-neighbor upsampling.
//!
//! The source formula X ⊙ Upsample(S > T) keeps high-similarity sites, while
//! the surrounding prose describes masking identity-related regions. The
//! default here blocks the top-rho sites by similarity; `literal_formula`
//! switches to the verbatim keep-high-similarity behavior.

use crate::error::{DeidError, Result};

pub const UPSAMPLE_FACTOR: usize = 16;

#[derive(Clone, Debug)]
pub struct BlockPlan {
    pub block_fraction: f64,
    pub threshold: f64,
    /// 1 = keep, 0 = block, at similarity-map resolution (h*w, row-major).
    pub keep_mask: Vec<u8>,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Set when the similarity map was constant and the quantile degenerate.
    pub degenerate: bool,
}

impl BlockPlan {
    pub fn upsampled_mask(&self) -> Vec<u8> {
        let (h, w) = (self.grid_h * UPSAMPLE_FACTOR, self.grid_w * UPSAMPLE_FACTOR);
        let mut out = vec![0u8; h * w];
        for i in 0..h {
            for j in 0..w {
                out[i * w + j] =
                    self.keep_mask[(i / UPSAMPLE_FACTOR) * self.grid_w + j / UPSAMPLE_FACTOR];
            }
        }
        out
    }
}

/// Empirical quantile with linear interpolation between order statistics,
/// exclusive convention: position level*(n+1) - 1, clamped to the data range.
/// The clamp puts the extreme levels exactly at the extreme order statistics,
/// so a vanishing tail fraction selects nothing.
pub fn quantile(values: &[f64], level: f64) -> f64 {
    assert!(!values.is_empty());
    assert!((0.0..=1.0).contains(&level));
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = (level * (sorted.len() + 1) as f64 - 1.0).clamp(0.0, (sorted.len() - 1) as f64);
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    } else {
        sorted[lo]
    }
}

/// Threshold T is the (1 - rho) quantile of S; sites strictly above T are
/// blocked, ties at T are kept. With `literal_formula` the comparison keeps
/// sites with S > T instead.
pub fn make_block_plan(
    s: &[f64],
    grid_h: usize,
    grid_w: usize,
    rho: f64,
    literal_formula: bool,
) -> Result<BlockPlan> {
    if s.len() != grid_h * grid_w {
        return Err(DeidError::Geometry(format!(
            "similarity map has {} sites, expected {grid_h}x{grid_w}",
            s.len()
        )));
    }
    if !(0.0..1.0).contains(&rho) || rho == 0.0 {
        return Err(DeidError::InvalidParameter(format!("block fraction {rho} outside (0, 1)")));
    }
    let degenerate = s.iter().all(|&v| v == s[0]);
    if degenerate {
        // Quantile carries no information; block the first ceil(rho*hw) sites.
        let n_block = (rho * s.len() as f64).ceil() as usize;
        let mut keep_mask = vec![1u8; s.len()];
        for m in keep_mask.iter_mut().take(n_block) {
            *m = 0;
        }
        return Ok(BlockPlan {
            block_fraction: rho,
            threshold: s[0],
            keep_mask,
            grid_h,
            grid_w,
            degenerate: true,
        });
    }
    let threshold = quantile(s, 1.0 - rho);
    let keep_mask: Vec<u8> = s
        .iter()
        .map(|&v| {
            let above = v > threshold;
            let keep = if literal_formula { above } else { !above };
            keep as u8
        })
        .collect();
    Ok(BlockPlan { block_fraction: rho, threshold, keep_mask, grid_h, grid_w, degenerate: false })
}

/// Zeroes blocked pixels; kept pixels pass through bit-identically.
pub fn apply_blocking(image: &[f64], plan: &BlockPlan) -> Result<Vec<f64>> {
    let mask = plan.upsampled_mask();
    if image.len() != mask.len() {
        return Err(DeidError::Geometry(format!(
            "image has {} pixels, plan covers {}",
            image.len(),
            mask.len()
        )));
    }
    Ok(image.iter().zip(&mask).map(|(&v, &m)| if m == 1 { v } else { 0.0 }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use numcore::Rng;

    #[test]
    fn median_split_blocks_upper_half() {
        let s = [0.1, 0.4, 0.6, 0.9];
        let plan = make_block_plan(&s, 2, 2, 0.5, false).unwrap();
        assert_eq!(plan.keep_mask, vec![1, 1, 0, 0]);
    }

    #[test]
    fn tiny_rho_blocks_nothing() {
        let s = [0.1, 0.4, 0.6, 0.9];
        let rho = 1.0 / (4.0 * 10.0);
        let plan = make_block_plan(&s, 2, 2, rho, false).unwrap();
        // Quantile sits essentially at the maximum; only values strictly
        // above it would be blocked.
        assert_eq!(plan.keep_mask.iter().filter(|&&m| m == 0).count(), 0);
    }

    #[test]
    fn blocked_set_matches_sort_oracle() {
        let mut rng = Rng::new(8);
        let s = rng.normal_vec(16);
        let plan = make_block_plan(&s, 4, 4, 0.25, false).unwrap();
        let mut order: Vec<usize> = (0..16).collect();
        order.sort_by(|&i, &j| s[j].partial_cmp(&s[i]).unwrap());
        let top4: std::collections::HashSet<usize> = order[..4].iter().cloned().collect();
        for (i, &m) in plan.keep_mask.iter().enumerate() {
            assert_eq!(m == 0, top4.contains(&i), "site {i}");
        }
    }

    #[test]
    fn literal_formula_keeps_high_similarity() {
        let s = [0.1, 0.4, 0.6, 0.9];
        let plan = make_block_plan(&s, 2, 2, 0.5, true).unwrap();
        assert_eq!(plan.keep_mask, vec![0, 0, 1, 1]);
    }

    #[test]
    fn degenerate_map_flagged_and_counted() {
        let s = [0.3; 16];
        let plan = make_block_plan(&s, 4, 4, 0.4, false).unwrap();
        assert!(plan.degenerate);
        assert_eq!(plan.keep_mask.iter().filter(|&&m| m == 0).count(), 7); // ceil(0.4*16)
    }

    #[test]
    fn apply_blocking_masks_exact_pixel_blocks() {
        let mut s = vec![0.0; 16];
        s[5] = 1.0; // block exactly one site
        let plan = make_block_plan(&s, 4, 4, 1.0 / 16.0, false).unwrap();
        let image: Vec<f64> = (0..64 * 64).map(|i| i as f64).collect();
        let out = apply_blocking(&image, &plan).unwrap();
        let mut zeroed = 0;
        for i in 0..64 {
            for j in 0..64 {
                let in_block = (16..32).contains(&i) && (16..32).contains(&j);
                if in_block {
                    assert_eq!(out[i * 64 + j], 0.0);
                    zeroed += 1;
                } else {
                    assert_eq!(out[i * 64 + j], image[i * 64 + j]);
                }
            }
        }
        assert_eq!(zeroed, 256);
    }

    #[test]
    fn idempotent_for_fixed_plan() {
        let mut rng = Rng::new(9);
        let s = rng.normal_vec(16);
        let plan = make_block_plan(&s, 4, 4, 0.7, false).unwrap();
        let image = rng.normal_vec(64 * 64);
        let once = apply_blocking(&image, &plan).unwrap();
        let twice = apply_blocking(&once, &plan).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn all_ones_and_all_zero_masks() {
        let plan = BlockPlan {
            block_fraction: 0.5,
            threshold: 0.0,
            keep_mask: vec![1; 16],
            grid_h: 4,
            grid_w: 4,
            degenerate: false,
        };
        let image: Vec<f64> = (0..64 * 64).map(|i| (i % 7) as f64).collect();
        assert_eq!(apply_blocking(&image, &plan).unwrap(), image);
        let plan0 = BlockPlan { keep_mask: vec![0; 16], ..plan };
        assert!(apply_blocking(&image, &plan0).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = [0.1; 16];
        assert!(make_block_plan(&s, 4, 5, 0.5, false).is_err());
        assert!(make_block_plan(&s, 4, 4, 0.0, false).is_err());
        assert!(make_block_plan(&s, 4, 4, 1.0, false).is_err());
        let plan = make_block_plan(&s, 4, 4, 0.5, false).unwrap();
        assert!(apply_blocking(&[0.0; 100], &plan).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert!((quantile(&v, 0.5) - 2.5).abs() < 1e-12);
        assert!((quantile(&v, 0.25) - 1.25).abs() < 1e-12);
    }
}
