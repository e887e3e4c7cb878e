//! Overlapping per-channel patches and their linear embeddings.
//!
//! Tokens are laid out channel-major: token `c * n_time + t` is patch `t` of
//! channel `c`, covering samples `[t * S, t * S + P)`.

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recording::{MontageMap, Recording};

/// Sample rate every tokenized recording must have.
pub const TOKEN_RATE_HZ: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub patch_samples: usize,
    pub overlap_samples: usize,
    pub embed_dim: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            patch_samples: 200,
            overlap_samples: 20,
            embed_dim: 64,
        }
    }
}

impl TokenizerConfig {
    pub fn step(&self) -> usize {
        self.patch_samples - self.overlap_samples
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_samples == 0 || self.overlap_samples >= self.patch_samples {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= overlap ({}) < patch ({})",
                self.overlap_samples, self.patch_samples
            )));
        }
        if self.embed_dim < 8 || self.embed_dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} must be even and >= 8",
                self.embed_dim
            )));
        }
        Ok(())
    }

    /// Number of whole patches in `n_samples`, or `None` if not even one fits.
    pub fn n_time(&self, n_samples: usize) -> Option<usize> {
        (n_samples >= self.patch_samples)
            .then(|| (n_samples - self.patch_samples) / self.step() + 1)
    }
}

/// Address and 4D coordinate of one token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub channel: usize,
    pub time: usize,
    /// First sample of the patch.
    pub start: usize,
    /// `(x, y, z)` in cm from the montage, then the patch index.
    pub coord: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub config: TokenizerConfig,
    pub channel_names: Vec<String>,
    pub n_channels: usize,
    pub n_time: usize,
    pub tokens: Vec<Token>,
    /// Row `i` is the raw patch of token `i` (`N × P`).
    pub patches: Array2<f64>,
    /// Row `i` is the embedding of token `i` (`N × D`) once [`embed`] ran.
    pub embeddings: Option<Array2<f64>>,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn patch(&self, i: usize) -> ArrayView1<'_, f64> {
        self.patches.row(i)
    }

    /// `N × 4` matrix of token coordinates.
    pub fn coords(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), 4), |(i, k)| self.tokens[i].coord[k])
    }

    /// Patch-center time of token `i`, in seconds.
    pub fn center_s(&self, i: usize) -> f64 {
        (self.tokens[i].start as f64 + self.config.patch_samples as f64 / 2.0) / TOKEN_RATE_HZ
    }
}

/// Cut every channel into overlapping patches and attach montage coordinates.
pub fn patchify(rec: &Recording, cfg: &TokenizerConfig, montage: &MontageMap) -> Result<TokenGrid> {
    cfg.validate()?;
    if rec.sample_rate_hz != TOKEN_RATE_HZ {
        return Err(Error::InvalidRecording(format!(
            "tokenizer expects {TOKEN_RATE_HZ} Hz, recording is {} Hz",
            rec.sample_rate_hz
        )));
    }
    let n_time = cfg.n_time(rec.n_samples()).ok_or(Error::TooShortForPatch {
        n_samples: rec.n_samples(),
        patch: cfg.patch_samples,
    })?;
    let positions = rec
        .channel_names
        .iter()
        .map(|name| montage.get(name).ok_or_else(|| Error::UnknownChannel(name.clone())))
        .collect::<Result<Vec<_>>>()?;

    let (p, s) = (cfg.patch_samples, cfg.step());
    let n = rec.n_channels() * n_time;
    let mut tokens = Vec::with_capacity(n);
    let mut patches = Array2::zeros((n, p));
    for (c, xyz) in positions.iter().enumerate() {
        for t in 0..n_time {
            let i = c * n_time + t;
            let start = t * s;
            patches
                .row_mut(i)
                .assign(&rec.signal.slice(ndarray::s![c, start..start + p]));
            tokens.push(Token {
                channel: c,
                time: t,
                start,
                coord: [xyz[0], xyz[1], xyz[2], t as f64],
            });
        }
    }
    Ok(TokenGrid {
        config: *cfg,
        channel_names: rec.channel_names.clone(),
        n_channels: rec.n_channels(),
        n_time,
        tokens,
        patches,
        embeddings: None,
    })
}

/// Learned patch projection `W_e` (`D × P`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    pub w_e: Array2<f64>,
}

impl EmbeddingParams {
    /// Gaussian init with variance `1 / P`.
    pub fn init<R: Rng + ?Sized>(cfg: &TokenizerConfig, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (cfg.patch_samples as f64).powf(-0.5)).unwrap();
        Self {
            w_e: Array2::from_shape_simple_fn((cfg.embed_dim, cfg.patch_samples), || {
                normal.sample(rng)
            }),
        }
    }
}

/// `embeddings[i] = W_e · patch[i]`.
pub fn embed(mut grid: TokenGrid, params: &EmbeddingParams) -> Result<TokenGrid> {
    if params.w_e.ncols() != grid.patches.ncols() {
        return Err(Error::Shape(format!(
            "W_e is {:?}, patches have {} samples",
            params.w_e.dim(),
            grid.patches.ncols()
        )));
    }
    grid.embeddings = Some(grid.patches.dot(&params.w_e.t()));
    Ok(grid)
}

/// Inverse of [`patchify`] on the covered span `(n_time - 1) * S + P`:
/// samples covered by one patch are copied, overlaps are averaged.
pub fn reconstruct(patches: &Array2<f64>, n_channels: usize, n_time: usize, cfg: &TokenizerConfig) -> Array2<f64> {
    let (p, s) = (cfg.patch_samples, cfg.step());
    let len = (n_time - 1) * s + p;
    let mut sum = Array2::<f64>::zeros((n_channels, len));
    let mut hits = vec![0u32; len];
    for t in 0..n_time {
        for h in &mut hits[t * s..t * s + p] {
            *h += 1;
        }
    }
    for c in 0..n_channels {
        for t in 0..n_time {
            let mut dst = sum.slice_mut(ndarray::s![c, t * s..t * s + p]);
            dst += &patches.row(c * n_time + t);
        }
    }
    for mut row in sum.axis_iter_mut(Axis(0)) {
        for (v, &h) in row.iter_mut().zip(&hits) {
            *v /= f64::from(h);
        }
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recording::STANDARD_1020;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(channels: &[&str], n: usize) -> Recording {
        let sig = Array2::from_shape_fn((channels.len(), n), |(c, j)| (c * 10_000 + j) as f64);
        Recording::new(
            "s",
            channels.iter().map(|s| s.to_string()).collect(),
            200.0,
            sig,
            None,
            "t",
        )
        .unwrap()
    }

    #[test]
    fn patch_starts_for_ten_seconds() {
        let rec = ramp(&["Cz"], 2000);
        let grid = patchify(&rec, &TokenizerConfig::default(), &MontageMap::standard_1020()).unwrap();
        let mut starts = Vec::new();
        let mut s = 0;
        while s + 200 <= 2000 {
            starts.push(s);
            s += 180;
        }
        assert_eq!(grid.n_time, starts.len());
        assert_eq!(grid.n_time, 11);
        for (tok, &want) in grid.tokens.iter().zip(&starts) {
            assert_eq!(tok.start, want);
            assert_eq!(grid.patch(tok.time)[0], want as f64);
        }
    }

    #[test]
    fn single_patch_is_whole_signal() {
        let rec = ramp(&["Cz", "Pz"], 200);
        let grid = patchify(&rec, &TokenizerConfig::default(), &MontageMap::standard_1020()).unwrap();
        assert_eq!(grid.n_time, 1);
        assert_eq!(grid.patch(1), rec.signal.row(1));
    }

    #[test]
    fn full_montage_token_count() {
        let rec = ramp(&STANDARD_1020, 2000);
        let montage = MontageMap::standard_1020();
        let grid = patchify(&rec, &TokenizerConfig::default(), &montage).unwrap();
        assert_eq!(grid.len(), 19 * 11);
        let mut seen = std::collections::HashSet::new();
        for tok in &grid.tokens {
            assert!(seen.insert((tok.channel, tok.time)));
            let xyz = montage.get(STANDARD_1020[tok.channel]).unwrap();
            assert_eq!(&tok.coord[..3], &xyz[..]);
            assert_eq!(tok.coord[3], tok.time as f64);
            assert_eq!(tok.start, tok.time * 180);
        }
    }

    #[test]
    fn rejects_short_and_unknown() {
        let montage = MontageMap::standard_1020();
        let cfg = TokenizerConfig::default();
        assert!(matches!(
            patchify(&ramp(&["Cz"], 199), &cfg, &montage),
            Err(Error::TooShortForPatch { .. })
        ));
        assert!(matches!(
            patchify(&ramp(&["Cz", "X9"], 400), &cfg, &montage),
            Err(Error::UnknownChannel(_))
        ));
    }

    #[test]
    fn embed_matches_naive_matvec() {
        let cfg = TokenizerConfig {
            embed_dim: 16,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = EmbeddingParams::init(&cfg, &mut rng);
        let sig = Array2::from_shape_simple_fn((3, 600), || rng.gen_range(-1.0..1.0));
        let rec = Recording::new("s", vec!["C3".into(), "Cz".into(), "C4".into()], 200.0, sig, None, "t").unwrap();
        let grid = embed(patchify(&rec, &cfg, &MontageMap::standard_1020()).unwrap(), &params).unwrap();
        let e = grid.embeddings.as_ref().unwrap();
        for i in 0..grid.len() {
            for d in 0..cfg.embed_dim {
                let mut acc = 0.0;
                for k in 0..cfg.patch_samples {
                    acc += params.w_e[[d, k]] * grid.patches[[i, k]];
                }
                assert!((e[[i, d]] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_and_zero_embeddings() {
        let cfg = TokenizerConfig {
            embed_dim: 200,
            ..Default::default()
        };
        let params = EmbeddingParams {
            w_e: Array2::eye(200),
        };
        let rec = ramp(&["O1"], 380);
        let grid = embed(patchify(&rec, &cfg, &MontageMap::standard_1020()).unwrap(), &params).unwrap();
        assert_eq!(grid.embeddings.as_ref().unwrap(), &grid.patches);

        let zero = Recording::new("s", vec!["O1".into()], 200.0, Array2::zeros((1, 380)), None, "t").unwrap();
        let grid = embed(patchify(&zero, &cfg, &MontageMap::standard_1020()).unwrap(), &params).unwrap();
        assert!(grid.embeddings.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_rejects_mismatched_width() {
        let rec = ramp(&["O1"], 400);
        let grid = patchify(&rec, &TokenizerConfig::default(), &MontageMap::standard_1020()).unwrap();
        let params = EmbeddingParams {
            w_e: Array2::zeros((8, 100)),
        };
        assert!(matches!(embed(grid, &params), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn embedding_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let cfg = TokenizerConfig { embed_dim: 8, ..Default::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = EmbeddingParams::init(&cfg, &mut rng);
            let p1 = Array2::from_shape_simple_fn((1, 200), || rng.gen_range(-1.0..1.0));
            let p2 = Array2::from_shape_simple_fn((1, 200), || rng.gen_range(-1.0..1.0));
            let lhs = (&p1 * a + &p2 * b).dot(&params.w_e.t());
            let rhs = p1.dot(&params.w_e.t()) * a + p2.dot(&params.w_e.t()) * b;
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() < 1e-9);
            }
        }

        #[test]
        fn overlap_average_reconstruction(n in 200usize..1500, overlap in 0usize..100) {
            let cfg = TokenizerConfig { patch_samples: 200, overlap_samples: overlap, embed_dim: 8 };
            let rec = Recording::new(
                "s",
                vec!["Cz".into(), "Fz".into()],
                200.0,
                Array2::from_shape_fn((2, n), |(c, j)| ((c + 1) * j) as f64 * 0.37 - 5.0),
                None,
                "t",
            ).unwrap();
            let grid = patchify(&rec, &cfg, &MontageMap::standard_1020()).unwrap();
            let recon = reconstruct(&grid.patches, 2, grid.n_time, &cfg);
            // patches are exact copies, so the mean over overlaps equals the signal
            for c in 0..2 {
                for j in 0..recon.ncols() {
                    prop_assert!((recon[[c, j]] - rec.signal[[c, j]]).abs() < 1e-9);
                }
            }
            // perturbing one copy in an overlap moves the reconstruction by the mean
            if overlap > 0 && grid.n_time > 1 {
                let mut pert = grid.patches.clone();
                pert[[0, 200 - overlap]] += 2.0;
                let r2 = reconstruct(&pert, 2, grid.n_time, &cfg);
                let j = 200 - overlap;
                prop_assert!((r2[[0, j]] - rec.signal[[0, j]] - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn channel_permutation_preserves_tokens(perm_seed in 0u64..500) {
            use rand::seq::SliceRandom;
            let names: Vec<&str> = vec!["Fp1", "Cz", "O2", "T3", "P4"];
            let mut order: Vec<usize> = (0..names.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let rec = ramp(&names, 740);
            let permuted: Vec<&str> = order.iter().map(|&i| names[i]).collect();
            let rec_p = rec.select_channels(&permuted).unwrap();
            let montage = MontageMap::standard_1020();
            let cfg = TokenizerConfig::default();
            let g = patchify(&rec, &cfg, &montage).unwrap();
            let gp = patchify(&rec_p, &cfg, &montage).unwrap();
            prop_assert_eq!(g.len(), gp.len());
            let key = |grid: &TokenGrid| {
                let mut v: Vec<String> = (0..grid.len())
                    .map(|i| format!("{:?}{:?}", grid.tokens[i].coord, grid.patch(i).to_vec()))
                    .collect();
                v.sort();
                v
            };
            prop_assert_eq!(key(&g), key(&gp));
        }
    }
}
