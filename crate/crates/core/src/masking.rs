//! Spatio-temporal block masking with an exact masked-token count.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recording::montage::euclidean;
use crate::seed;
use crate::tokenizer::TokenGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub ratio: f64,
    pub spatial_radius_cm: f64,
    pub temporal_radius_s: f64,
    pub rng_seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            ratio: 0.55,
            spatial_radius_cm: 3.0,
            temporal_radius_s: 3.0,
            rng_seed: 0,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::InvalidConfig(format!("mask ratio {} outside (0, 1)", self.ratio)));
        }
        if !(self.spatial_radius_cm > 0.0) || !(self.temporal_radius_s > 0.0) {
            return Err(Error::InvalidConfig("mask radii must be positive".into()));
        }
        Ok(())
    }

    /// `⌊ρN⌋`.
    pub fn target(&self, n: usize) -> usize {
        (self.ratio * n as f64).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    /// Sorted masked token indices; `len() == ⌊ρN⌋`.
    pub masked: Vec<usize>,
    pub n_total: usize,
    /// Seeds in the order they were drawn.
    pub seeds_used: Vec<usize>,
    /// Sorted masked set before random restoration.
    pub blocked: Vec<usize>,
}

impl MaskPlan {
    /// Sorted complement of `masked`.
    pub fn visible(&self) -> Vec<usize> {
        let mut is_masked = vec![false; self.n_total];
        for &i in &self.masked {
            is_masked[i] = true;
        }
        (0..self.n_total).filter(|&i| !is_masked[i]).collect()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }
}

/// Whether `candidate` falls in the block centred on `seed`: electrode
/// distance within the spatial radius and patch-centre distance within the
/// temporal radius. Symmetric.
pub fn block_membership(grid: &TokenGrid, seed: usize, candidate: usize, cfg: &MaskConfig) -> bool {
    let a = &grid.tokens[seed].coord;
    let b = &grid.tokens[candidate].coord;
    let space = euclidean([a[0], a[1], a[2]], [b[0], b[1], b[2]]);
    let time = (grid.center_s(seed) - grid.center_s(candidate)).abs();
    space <= cfg.spatial_radius_cm && time <= cfg.temporal_radius_s
}

/// Plan with the rng stream derived from `cfg.rng_seed`.
pub fn plan_mask(grid: &TokenGrid, cfg: &MaskConfig) -> Result<MaskPlan> {
    plan_mask_with(grid, cfg, &mut seed::rng(cfg.rng_seed, "mask", &[]))
}

/// Draw unmasked seeds and mask their blocks until at least `⌊ρN⌋` tokens
/// are masked, then restore a uniformly random excess.
pub fn plan_mask_with(grid: &TokenGrid, cfg: &MaskConfig, rng: &mut ChaCha8Rng) -> Result<MaskPlan> {
    cfg.validate()?;
    let n = grid.len();
    let target = cfg.target(n);
    if n < 2 || target == 0 {
        return Err(Error::InvalidConfig(format!(
            "cannot mask floor({} * {n}) = {target} tokens",
            cfg.ratio
        )));
    }
    let mut is_masked = vec![false; n];
    let mut unmasked: Vec<usize> = (0..n).collect();
    let mut count = 0;
    let mut seeds_used = Vec::new();
    while count < target {
        let seed = unmasked[rng.gen_range(0..unmasked.len())];
        seeds_used.push(seed);
        for j in 0..n {
            if !is_masked[j] && block_membership(grid, seed, j, cfg) {
                is_masked[j] = true;
                count += 1;
            }
        }
        unmasked.retain(|&j| !is_masked[j]);
    }
    let blocked: Vec<usize> = (0..n).filter(|&i| is_masked[i]).collect();
    let mut masked = blocked.clone();
    masked.shuffle(rng);
    masked.truncate(target);
    masked.sort_unstable();
    Ok(MaskPlan {
        masked,
        n_total: n,
        seeds_used,
        blocked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recording::{MontageMap, Recording, STANDARD_1020};
    use crate::tokenizer::{patchify, TokenizerConfig};
    use ndarray::Array2;
    use proptest::prelude::*;

    fn grid(channels: &[&str], n_samples: usize) -> TokenGrid {
        let rec = Recording::new(
            "s",
            channels.iter().map(|s| s.to_string()).collect(),
            200.0,
            Array2::zeros((channels.len(), n_samples)),
            None,
            "t",
        )
        .unwrap();
        patchify(&rec, &TokenizerConfig::default(), &MontageMap::standard_1020()).unwrap()
    }

    #[test]
    fn full_montage_count() {
        let g = grid(&STANDARD_1020, 2000);
        assert_eq!(g.len(), 209);
        let plan = plan_mask(&g, &MaskConfig::default()).unwrap();
        assert_eq!(plan.masked.len(), 114);
    }

    #[test]
    fn all_but_one() {
        let g = grid(&["Cz", "Pz", "Fz"], 2000);
        let n = g.len();
        let cfg = MaskConfig {
            ratio: (n as f64 - 0.5) / n as f64,
            ..Default::default()
        };
        let plan = plan_mask(&g, &cfg).unwrap();
        assert_eq!(plan.masked.len(), n - 1);
        assert_eq!(plan.visible().len(), 1);
    }

    #[test]
    fn single_channel_block_has_width_seven() {
        let g = grid(&["Cz"], 200 + 180 * 19);
        let cfg = MaskConfig::default();
        let seed = 10;
        let members: Vec<usize> = (0..g.len()).filter(|&j| block_membership(&g, seed, j, &cfg)).collect();
        // oracle: centres 0.9 s apart, so |Δt| <= 3 s means |Δindex| <= 3
        let want: Vec<usize> = (0..g.len())
            .filter(|&j| ((j as f64 - seed as f64) * 0.9).abs() <= 3.0)
            .collect();
        assert_eq!(members, want);
        assert_eq!(members, (7..=13).collect::<Vec<_>>());
        let edge: Vec<usize> = (0..g.len()).filter(|&j| block_membership(&g, 1, j, &cfg)).collect();
        assert_eq!(edge, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn membership_thresholds() {
        let g = grid(&["Fp1", "O2", "Cz"], 200 + 180 * 10);
        let cfg = MaskConfig::default();
        let nt = g.n_time;
        assert!(block_membership(&g, 3, 3, &cfg));
        // same electrode, centres 6 patches (5.4 s) apart
        assert!(!block_membership(&g, 0, 6, &cfg));
        // Fp1 vs O2 at the same time
        let m = MontageMap::standard_1020();
        assert!(m.distance("Fp1", "O2").unwrap() > 3.0);
        assert!(!block_membership(&g, 2, nt + 2, &cfg));
    }

    #[test]
    fn rejects_degenerate_targets() {
        let g = grid(&["Cz"], 200);
        assert!(plan_mask(&g, &MaskConfig::default()).is_err());
        let g = grid(&["Cz", "Pz"], 200);
        let cfg = MaskConfig {
            ratio: 0.4,
            ..Default::default()
        };
        assert!(plan_mask(&g, &cfg).is_err());
        assert!(plan_mask(&g, &MaskConfig { ratio: 1.0, ..cfg }).is_err());
    }

    #[test]
    fn every_token_is_sometimes_masked() {
        let g = grid(&["Fp1", "Cz", "O2", "T3"], 200 + 180 * 9);
        let mut hits = vec![0usize; g.len()];
        for s in 0..300 {
            let cfg = MaskConfig {
                rng_seed: s,
                ..Default::default()
            };
            for i in plan_mask(&g, &cfg).unwrap().masked {
                hits[i] += 1;
            }
        }
        assert!(hits.iter().all(|&h| h > 0), "{hits:?}");
    }

    proptest! {
        #[test]
        fn exact_count_blocks_and_determinism(
            n_ch in 1usize..19,
            n_time in 1usize..12,
            ratio in 0.05f64..0.95,
            seed in any::<u64>(),
        ) {
            let g = grid(&STANDARD_1020[..n_ch], 200 + 180 * (n_time - 1));
            let cfg = MaskConfig { ratio, rng_seed: seed, ..Default::default() };
            let target = (ratio * g.len() as f64).floor() as usize;
            prop_assume!(g.len() >= 2 && target >= 1);
            let plan = plan_mask(&g, &cfg).unwrap();
            prop_assert_eq!(plan.masked.len(), target);
            prop_assert!(plan.masked.iter().all(|&i| i < g.len()));
            prop_assert!(plan.masked.iter().all(|i| plan.blocked.binary_search(i).is_ok()));
            for &i in &plan.blocked {
                prop_assert!(plan.seeds_used.iter().any(|&s| block_membership(&g, s, i, &cfg)));
            }
            prop_assert_eq!(plan_mask(&g, &cfg).unwrap(), plan);
        }

        #[test]
        fn membership_is_symmetric(a in 0usize..57, b in 0usize..57) {
            let g = grid(&["Fp1", "F3", "C3"], 200 + 180 * 18);
            let cfg = MaskConfig::default();
            prop_assert_eq!(block_membership(&g, a, b, &cfg), block_membership(&g, b, a, &cfg));
        }
    }
}
