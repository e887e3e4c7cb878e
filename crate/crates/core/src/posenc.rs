//! 4D Fourier positional encoding over electrode position and patch index:
//! `PE(c) = LN(W_f [sin(Fᵀc); cos(Fᵀc)] + MLP(c))` with `c = (x, y, z, t)`.
//!
//! Spatial coordinates are in cm, `t` is the raw patch index. Weights are
//! stored `in × out`, so `W_f` is kept as its transpose (`2K × D`).

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{linear_weight, Bound, ParamStore};
use crate::tokenizer::TokenGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PosEncConfig {
    pub n_freq: usize,
    /// Angular frequency range in rad/cm for x, y and z.
    pub spatial_range: (f64, f64),
    /// Angular frequency range in rad/patch for t.
    pub temporal_range: (f64, f64),
}

impl Default for PosEncConfig {
    fn default() -> Self {
        Self {
            n_freq: 4,
            spatial_range: (2.0 * PI / 30.0, 2.0 * PI / 2.0),
            temporal_range: (2.0 * PI / 256.0, 2.0 * PI / 2.0),
        }
    }
}

impl PosEncConfig {
    /// `K = n_freq⁴`.
    pub fn k(&self) -> usize {
        self.n_freq.pow(4)
    }

    pub fn ranges(&self) -> [(f64, f64); 4] {
        [self.spatial_range, self.spatial_range, self.spatial_range, self.temporal_range]
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_freq == 0 {
            return Err(Error::InvalidConfig("n_freq must be >= 1".into()));
        }
        for (lo, hi) in self.ranges() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidConfig(format!("frequency range ({lo}, {hi}) must satisfy min < max")));
            }
        }
        Ok(())
    }
}

/// `4 × n_freq⁴` matrix whose columns enumerate the Cartesian product of
/// `n_freq` evenly spaced values per dimension (endpoints included; a single
/// value sits at the minimum). The last dimension varies fastest.
pub fn build_frequency_matrix(n_freq: usize, ranges: &[(f64, f64); 4]) -> Array2<f64> {
    let axis = |(lo, hi): (f64, f64)| -> Vec<f64> {
        if n_freq == 1 {
            vec![lo]
        } else {
            (0..n_freq)
                .map(|i| lo + (hi - lo) * i as f64 / (n_freq - 1) as f64)
                .collect()
        }
    };
    let axes: Vec<Vec<f64>> = ranges.iter().map(|&r| axis(r)).collect();
    let k = n_freq.pow(4);
    let mut f = Array2::zeros((4, k));
    for col in 0..k {
        let mut rem = col;
        for d in (0..4).rev() {
            f[[d, col]] = axes[d][rem % n_freq];
            rem /= n_freq;
        }
    }
    f
}

/// `[sin(C F), cos(C F)]` for coordinate rows `C` (`N × 4`).
pub fn fourier_features(coords: &Array2<f64>, freqs: &Array2<f64>) -> Array2<f64> {
    let phase = coords.dot(freqs);
    ndarray::concatenate![Axis(1), phase.mapv(f64::sin), phase.mapv(f64::cos)]
}

/// Learned parameters plus the fixed frequency matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PosEncParams {
    pub config: PosEncConfig,
    /// `4 × K`, fixed.
    pub freqs: Array2<f64>,
    /// `2K × D`.
    pub w_f: Array2<f64>,
    /// `4 × D`, `1 × D`, `D × D`, `1 × D`.
    pub mlp_w1: Array2<f64>,
    pub mlp_b1: Array2<f64>,
    pub mlp_w2: Array2<f64>,
    pub mlp_b2: Array2<f64>,
    /// Layer-norm scale and shift, `1 × D`.
    pub ln_gamma: Array2<f64>,
    pub ln_beta: Array2<f64>,
}

const TENSORS: [&str; 7] = ["w_f", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "ln_gamma", "ln_beta"];

impl PosEncParams {
    pub fn init<R: Rng + ?Sized>(config: PosEncConfig, dim: usize, rng: &mut R) -> Self {
        let k = config.k();
        Self {
            config,
            freqs: build_frequency_matrix(config.n_freq, &config.ranges()),
            w_f: linear_weight(rng, 2 * k, dim),
            mlp_w1: linear_weight(rng, 4, dim),
            mlp_b1: Array2::zeros((1, dim)),
            mlp_w2: linear_weight(rng, dim, dim),
            mlp_b2: Array2::zeros((1, dim)),
            ln_gamma: Array2::ones((1, dim)),
            ln_beta: Array2::zeros((1, dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_f.ncols()
    }

    fn tensors(&self) -> [&Array2<f64>; 7] {
        [
            &self.w_f,
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
            &self.ln_gamma,
            &self.ln_beta,
        ]
    }

    /// Write the learned tensors into `store` as `{prefix}.{name}`.
    pub fn insert_into(&self, store: &mut ParamStore, prefix: &str) {
        for (name, t) in TENSORS.iter().zip(self.tensors()) {
            store.insert(format!("{prefix}.{name}"), t.clone());
        }
    }

    /// Read the learned tensors back from `store`.
    pub fn from_store(config: PosEncConfig, store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |n: &str| store.require(&format!("{prefix}.{n}")).cloned();
        let p = Self {
            config,
            freqs: build_frequency_matrix(config.n_freq, &config.ranges()),
            w_f: get("w_f")?,
            mlp_w1: get("mlp_w1")?,
            mlp_b1: get("mlp_b1")?,
            mlp_w2: get("mlp_w2")?,
            mlp_b2: get("mlp_b2")?,
            ln_gamma: get("ln_gamma")?,
            ln_beta: get("ln_beta")?,
        };
        if p.w_f.nrows() != 2 * config.k() {
            return Err(Error::Shape(format!(
                "W_f has {} rows, expected 2K = {}",
                p.w_f.nrows(),
                2 * config.k()
            )));
        }
        Ok(p)
    }

    /// Encode coordinate rows (`N × 4`) into `N × D`.
    pub fn encode_coords(&self, coords: &Array2<f64>) -> Array2<f64> {
        let mut store = ParamStore::new();
        self.insert_into(&mut store, "pe");
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| false);
        let out = forward(&mut tape, &bound, "pe", &self.freqs, coords);
        tape.value(out).clone()
    }
}

/// Positional encodings of `coords` (`N × 4`) on `tape`, using parameters
/// bound under `prefix`.
pub fn forward(tape: &mut Tape, p: &Bound<'_>, prefix: &str, freqs: &Array2<f64>, coords: &Array2<f64>) -> Var {
    let v = |n: &str| p.var(&format!("{prefix}.{n}"));
    let ff = tape.constant(fourier_features(coords, freqs));
    let c = tape.constant(coords.clone());
    let fourier = tape.matmul(ff, v("w_f"));
    let h = tape.matmul(c, v("mlp_w1"));
    let h = tape.add_row(h, v("mlp_b1"));
    let h = tape.gelu(h);
    let m = tape.matmul(h, v("mlp_w2"));
    let m = tape.add_row(m, v("mlp_b2"));
    let pre = tape.add(fourier, m);
    let n = tape.layer_norm(pre);
    let n = tape.mul_row(n, v("ln_gamma"));
    tape.add_row(n, v("ln_beta"))
}

/// Encoding of one coordinate `(x, y, z, t)`.
pub fn encode(coord: [f64; 4], params: &PosEncParams) -> Array1<f64> {
    let c = Array2::from_shape_vec((1, 4), coord.to_vec()).unwrap();
    params.encode_coords(&c).row(0).to_owned()
}

/// One encoding row per token of `grid`.
pub fn encode_grid(grid: &TokenGrid, params: &PosEncParams) -> Array2<f64> {
    params.encode_coords(&grid.coords())
}
