//! Masked autoencoder: pre-norm transformer encoder over visible tokens,
//! decoder with a learned mask token, and an auxiliary path that pools the
//! per-layer feedforward outputs into one global vector and reconstructs each
//! masked patch from it.

pub mod checkpoint;
pub mod pretrain;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::params::{linear_weight, normal_matrix, Bound, ParamStore};
use crate::posenc::{self, build_frequency_matrix, PosEncConfig, PosEncParams};
use crate::seed;
use crate::tokenizer::{TokenGrid, TokenizerConfig};

pub use checkpoint::{Checkpoint, CheckpointKind};
pub use pretrain::{pretrain, PretrainConfig, PretrainOutcome, PretrainRun};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    /// Weight of the auxiliary loss.
    pub lambda: f64,
    pub patch_samples: usize,
    pub overlap_samples: usize,
    pub posenc: PosEncConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small enough to pretrain in minutes on one CPU.
    pub fn desk() -> Self {
        Self {
            dim: 64,
            encoder_layers: 4,
            decoder_layers: 2,
            heads: 4,
            ffn_expansion: 4,
            lambda: 0.1,
            patch_samples: 200,
            overlap_samples: 20,
            posenc: PosEncConfig::default(),
        }
    }

    pub fn paper() -> Self {
        Self {
            dim: 512,
            encoder_layers: 12,
            decoder_layers: 4,
            heads: 8,
            ..Self::desk()
        }
    }

    /// Gradient-check scale.
    pub fn tiny() -> Self {
        Self {
            dim: 8,
            encoder_layers: 2,
            decoder_layers: 1,
            heads: 2,
            ..Self::desk()
        }
    }

    pub fn tokenizer(&self) -> TokenizerConfig {
        TokenizerConfig {
            patch_samples: self.patch_samples,
            overlap_samples: self.overlap_samples,
            embed_dim: self.dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer().validate()?;
        self.posenc.validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad("dim must be divisible by heads");
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("encoder and decoder need at least one layer");
        }
        if self.ffn_expansion == 0 {
            return bad("ffn_expansion must be positive");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be nonnegative");
        }
        Ok(())
    }
}

/// Parameter name of encoder layer `l` (0-based).
pub fn encoder_prefix(l: usize) -> String {
    format!("enc.{l}")
}

/// Model input: raw patches and 4D coordinates of every token.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `N × P`.
    pub patches: Array2<f64>,
    /// `N × 4`.
    pub coords: Array2<f64>,
}

impl Sample {
    pub fn from_grid(grid: &TokenGrid) -> Self {
        Self {
            patches: grid.patches.clone(),
            coords: grid.coords(),
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.patches.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    freqs: Array2<f64>,
}

fn insert_block(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, hidden: usize) {
    store.insert(format!("{prefix}.ln1.g"), Array2::ones((1, d)));
    store.insert(format!("{prefix}.ln1.b"), Array2::zeros((1, d)));
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert(format!("{prefix}.attn.{w}"), linear_weight(rng, d, d));
    }
    store.insert(format!("{prefix}.attn.bo"), Array2::zeros((1, d)));
    store.insert(format!("{prefix}.ln2.g"), Array2::ones((1, d)));
    store.insert(format!("{prefix}.ln2.b"), Array2::zeros((1, d)));
    store.insert(format!("{prefix}.ffn.w1"), linear_weight(rng, d, hidden));
    store.insert(format!("{prefix}.ffn.b1"), Array2::zeros((1, hidden)));
    store.insert(format!("{prefix}.ffn.w2"), linear_weight(rng, hidden, d));
    store.insert(format!("{prefix}.ffn.b2"), Array2::zeros((1, d)));
}

impl Model {
    /// Fresh parameters drawn from the `init` substream of `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed, "init", &[]);
        let (d, p) = (config.dim, config.patch_samples);
        let hidden = d * config.ffn_expansion;
        let mut store = ParamStore::new();
        store.insert("embed.w_e", normal_matrix(&mut rng, d, p, (p as f64).powf(-0.5)));
        PosEncParams::init(config.posenc, d, &mut rng).insert_into(&mut store, "pe");
        for l in 0..config.encoder_layers {
            insert_block(&mut store, &mut rng, &encoder_prefix(l), d, hidden);
        }
        store.insert("enc.ln.g", Array2::ones((1, d)));
        store.insert("enc.ln.b", Array2::zeros((1, d)));
        store.insert("dec.mask_token", normal_matrix(&mut rng, 1, d, 0.02));
        for l in 0..config.decoder_layers {
            insert_block(&mut store, &mut rng, &format!("dec.{l}"), d, hidden);
        }
        store.insert("dec.ln.g", Array2::ones((1, d)));
        store.insert("dec.ln.b", Array2::zeros((1, d)));
        store.insert("dec.head.w", linear_weight(&mut rng, d, p));
        store.insert("dec.head.b", Array2::zeros((1, p)));
        store.insert("aux.proj.w", linear_weight(&mut rng, config.encoder_layers * d, d));
        store.insert("aux.proj.b", Array2::zeros((1, d)));
        store.insert("aux.query", normal_matrix(&mut rng, 1, d, (d as f64).powf(-0.5)));
        store.insert("aux.rec.w1", linear_weight(&mut rng, 2 * d, d));
        store.insert("aux.rec.b1", Array2::zeros((1, d)));
        store.insert("aux.rec.w2", linear_weight(&mut rng, d, p));
        store.insert("aux.rec.b2", Array2::zeros((1, p)));
        Self::from_params(config, store)
    }

    /// Wrap existing parameters after checking every expected tensor exists
    /// with the right shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Self::shapes(&config);
        for (name, shape) in &reference {
            let t = params.require(name)?;
            if t.dim() != *shape {
                return Err(Error::Shape(format!("{name} is {:?}, expected {shape:?}", t.dim())));
            }
        }
        for (name, t) in params.iter() {
            if !name.starts_with("head.") && t.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("non-finite values in {name}")));
            }
        }
        Ok(Self {
            freqs: build_frequency_matrix(config.posenc.n_freq, &config.posenc.ranges()),
            config,
            params,
        })
    }

    fn shapes(c: &ModelConfig) -> Vec<(String, (usize, usize))> {
        let (d, p, k) = (c.dim, c.patch_samples, c.posenc.k());
        let h = d * c.ffn_expansion;
        let mut v: Vec<(String, (usize, usize))> = vec![
            ("embed.w_e".into(), (d, p)),
            ("pe.w_f".into(), (2 * k, d)),
            ("pe.mlp_w1".into(), (4, d)),
            ("pe.mlp_w2".into(), (d, d)),
            ("dec.mask_token".into(), (1, d)),
            ("dec.head.w".into(), (d, p)),
            ("aux.proj.w".into(), (c.encoder_layers * d, d)),
            ("aux.query".into(), (1, d)),
            ("aux.rec.w1".into(), (2 * d, d)),
            ("aux.rec.w2".into(), (d, p)),
        ];
        let blocks = (0..c.encoder_layers)
            .map(encoder_prefix)
            .chain((0..c.decoder_layers).map(|l| format!("dec.{l}")));
        for b in blocks {
            v.push((format!("{b}.attn.wq"), (d, d)));
            v.push((format!("{b}.ffn.w1"), (d, h)));
            v.push((format!("{b}.ffn.w2"), (h, d)));
        }
        v
    }

    pub fn freqs(&self) -> &Array2<f64> {
        &self.freqs
    }

    pub fn posenc_params(&self) -> Result<PosEncParams> {
        PosEncParams::from_store(self.config.posenc, &self.params, "pe")
    }

    /// Inference-only encoding of an unmasked sample (`N × D`).
    pub fn encode(&self, sample: &Sample) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false);
        let v = encode_all(&mut tape, &p, self, sample)?;
        Ok(tape.value(v).clone())
    }

    /// Names of the parameters of the backbone that adaptation may fine-tune.
    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("embed.") || name.starts_with("pe.") || name.starts_with("enc.")
    }
}

struct Ctx<'a, 'b> {
    tape: &'a mut Tape,
    p: &'a Bound<'b>,
    cfg: &'a ModelConfig,
}

impl Ctx<'_, '_> {
    fn v(&self, name: &str) -> Var {
        self.p.var(name)
    }

    fn linear(&mut self, x: Var, w: &str, b: Option<&str>) -> Var {
        let y = self.tape.matmul(x, self.v(w));
        match b {
            Some(b) => self.tape.add_row(y, self.v(b)),
            None => y,
        }
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Var {
        let n = self.tape.layer_norm(x);
        let n = self.tape.mul_row(n, self.v(&format!("{prefix}.g")));
        self.tape.add_row(n, self.v(&format!("{prefix}.b")))
    }

    /// Pre-norm block; returns the new residual stream and the feedforward
    /// output that was added to it.
    fn block(&mut self, x: Var, prefix: &str) -> (Var, Var) {
        let d = self.cfg.dim;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let a = self.layer_norm(x, &format!("{prefix}.ln1"));
        let q = self.linear(a, &format!("{prefix}.attn.wq"), None);
        let k = self.linear(a, &format!("{prefix}.attn.wk"), None);
        let v = self.linear(a, &format!("{prefix}.attn.wv"), None);
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = self.tape.slice_cols(q, lo, hi);
            let kh = self.tape.slice_cols(k, lo, hi);
            let vh = self.tape.slice_cols(v, lo, hi);
            let kt = self.tape.transpose(kh);
            let s = self.tape.matmul(qh, kt);
            let s = self.tape.scale(s, 1.0 / (dh as f64).sqrt());
            let w = self.tape.softmax_rows(s);
            outs.push(self.tape.matmul(w, vh));
        }
        let o = self.tape.concat_cols(&outs);
        let o = self.linear(o, &format!("{prefix}.attn.wo"), Some(&format!("{prefix}.attn.bo")));
        let x = self.tape.add(x, o);
        let f = self.layer_norm(x, &format!("{prefix}.ln2"));
        let f = self.linear(f, &format!("{prefix}.ffn.w1"), Some(&format!("{prefix}.ffn.b1")));
        let f = self.tape.gelu(f);
        let f = self.linear(f, &format!("{prefix}.ffn.w2"), Some(&format!("{prefix}.ffn.b2")));
        (self.tape.add(x, f), f)
    }
}

/// Encoder output for the visible tokens plus each layer's feedforward output.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `N_vis × D`, after the final layer norm.
    pub out: Var,
    /// One `N_vis × D` entry per encoder layer.
    pub ffn: Vec<Var>,
}

/// Positional encodings of every token of `sample` (`N × D`).
pub fn positional_encodings(tape: &mut Tape, p: &Bound<'_>, model: &Model, sample: &Sample) -> Var {
    posenc::forward(tape, p, "pe", &model.freqs, &sample.coords)
}

/// Run the encoder over the tokens listed in `visible`.
pub fn forward_encode(
    tape: &mut Tape,
    p: &Bound<'_>,
    model: &Model,
    sample: &Sample,
    visible: &[usize],
    pe_all: Var,
) -> Result<Encoded> {
    if visible.is_empty() {
        return Err(Error::Empty("no visible tokens".into()));
    }
    let cfg = model.config;
    let mut cx = Ctx { tape, p, cfg: &cfg };
    let patches = cx.tape.constant(sample.patches.select(ndarray::Axis(0), visible));
    let w_t = cx.tape.transpose(cx.v("embed.w_e"));
    let e = cx.tape.matmul(patches, w_t);
    let pe = cx.tape.gather_rows(pe_all, visible);
    let mut h = cx.tape.add(e, pe);
    let mut ffn = Vec::with_capacity(cfg.encoder_layers);
    for l in 0..cfg.encoder_layers {
        let (next, f) = cx.block(h, &encoder_prefix(l));
        if cx.tape.value(next).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: l });
        }
        h = next;
        ffn.push(f);
    }
    let out = cx.layer_norm(h, "enc.ln");
    Ok(Encoded { out, ffn })
}

/// Reconstruct the masked patches (`|M| × P`, in `plan.masked` order).
pub fn forward_decode(
    tape: &mut Tape,
    p: &Bound<'_>,
    model: &Model,
    encoded: &Encoded,
    plan: &MaskPlan,
    pe_all: Var,
) -> Result<Var> {
    let visible = plan.visible();
    if tape.shape(encoded.out).0 != visible.len() || tape.shape(pe_all).0 != plan.n_total {
        return Err(Error::Shape("encoder output does not match the mask plan".into()));
    }
    let cfg = model.config;
    let mut cx = Ctx { tape, p, cfg: &cfg };
    // slot i reads row i of the encoder output, or the mask token in the last row
    let mut src = vec![visible.len(); plan.n_total];
    for (k, &i) in visible.iter().enumerate() {
        src[i] = k;
    }
    let pool = cx.tape.concat_rows(&[encoded.out, cx.v("dec.mask_token")]);
    let slots = cx.tape.gather_rows(pool, &src);
    let mut h = cx.tape.add(slots, pe_all);
    for l in 0..cfg.decoder_layers {
        h = cx.block(h, &format!("dec.{l}")).0;
    }
    let h = cx.layer_norm(h, "dec.ln");
    let hm = cx.tape.gather_rows(h, &plan.masked);
    Ok(cx.linear(hm, "dec.head.w", Some("dec.head.b")))
}

/// Pool the concatenated per-layer feedforward outputs with one learned
/// query and reconstruct each masked patch from the pooled vector and the
/// position's encoding. Returns `(x̂_aux, attention weights)`.
pub fn aux_pool_and_reconstruct(
    tape: &mut Tape,
    p: &Bound<'_>,
    model: &Model,
    encoded: &Encoded,
    plan: &MaskPlan,
    pe_all: Var,
) -> (Var, Var) {
    let cfg = model.config;
    let mut cx = Ctx { tape, p, cfg: &cfg };
    let cat = cx.tape.concat_cols(&encoded.ffn);
    let h = cx.linear(cat, "aux.proj.w", Some("aux.proj.b"));
    let ht = cx.tape.transpose(h);
    let s = cx.tape.matmul(cx.v("aux.query"), ht);
    let s = cx.tape.scale(s, 1.0 / (cfg.dim as f64).sqrt());
    let weights = cx.tape.softmax_rows(s);
    let global = cx.tape.matmul(weights, h);
    let rep = cx.tape.gather_rows(global, &vec![0; plan.masked.len()]);
    let pe_m = cx.tape.gather_rows(pe_all, &plan.masked);
    let z = cx.tape.concat_cols(&[rep, pe_m]);
    let z = cx.linear(z, "aux.rec.w1", Some("aux.rec.b1"));
    let z = cx.tape.gelu(z);
    (cx.linear(z, "aux.rec.w2", Some("aux.rec.b2")), weights)
}

/// `(1/|M|) Σ_i ‖x̂_i − x_i‖₁` over rows.
pub fn primary_loss(xhat: &Array2<f64>, x: &Array2<f64>) -> Result<f64> {
    if xhat.nrows() == 0 {
        return Err(Error::EmptyMask);
    }
    if xhat.dim() != x.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", xhat.dim(), x.dim())));
    }
    let total: f64 = xhat.iter().zip(x.iter()).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / xhat.nrows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_pri: f64,
    pub l_sec: f64,
    pub l_total: f64,
    pub lambda: f64,
    pub n_masked: usize,
}

/// `L_total = L_pri + λ L_sec`.
pub fn total_loss(l_pri: f64, l_sec: f64, lambda: f64) -> LossReport {
    LossReport {
        l_pri,
        l_sec,
        l_total: l_pri + lambda * l_sec,
        lambda,
        n_masked: 0,
    }
}

/// Every tape node of one pretraining forward pass.
#[derive(Debug, Clone)]
pub struct PretrainGraph {
    pub pe_all: Var,
    pub encoded: Encoded,
    pub recon: Var,
    pub aux_recon: Var,
    pub aux_weights: Var,
    pub l_pri: Var,
    pub l_sec: Var,
    pub l_total: Var,
}

/// Full forward pass with both losses on `tape`.
pub fn forward_pretrain(
    tape: &mut Tape,
    p: &Bound<'_>,
    model: &Model,
    sample: &Sample,
    plan: &MaskPlan,
) -> Result<PretrainGraph> {
    if plan.masked.is_empty() {
        return Err(Error::EmptyMask);
    }
    if plan.n_total != sample.n_tokens() {
        return Err(Error::Shape(format!(
            "plan covers {} tokens, sample has {}",
            plan.n_total,
            sample.n_tokens()
        )));
    }
    let visible = plan.visible();
    let pe_all = positional_encodings(tape, p, model, sample);
    let encoded = forward_encode(tape, p, model, sample, &visible, pe_all)?;
    let recon = forward_decode(tape, p, model, &encoded, plan, pe_all)?;
    let (aux_recon, aux_weights) = aux_pool_and_reconstruct(tape, p, model, &encoded, plan, pe_all);
    let target = sample.patches.select(ndarray::Axis(0), &plan.masked);
    let l_pri = tape.l1_loss(recon, target.clone());
    let l_sec = tape.l1_loss(aux_recon, target);
    let weighted = tape.scale(l_sec, model.config.lambda);
    let l_total = tape.add(l_pri, weighted);
    Ok(PretrainGraph {
        pe_all,
        encoded,
        recon,
        aux_recon,
        aux_weights,
        l_pri,
        l_sec,
        l_total,
    })
}

/// Losses and parameter gradients of a batch. Each sample contributes in
/// proportion to its masked-token count, so the batch loss is the L1 sum
/// over all masked patches divided by the total masked count. Samples run in
/// parallel; the reduction order is fixed.
pub fn batch_loss_and_grads(
    model: &Model,
    batch: &[(&Sample, &MaskPlan)],
    trainable: &(dyn Fn(&str) -> bool + Sync),
) -> Result<(LossReport, ParamStore)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    let parts: Vec<Result<(f64, f64, f64, usize, ParamStore)>> = batch
        .par_iter()
        .map(|(sample, plan)| {
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape, trainable);
            let g = forward_pretrain(&mut tape, &p, model, sample, plan)?;
            let grads = p.gradients(&tape.backward(g.l_total));
            Ok((
                tape.scalar(g.l_pri),
                tape.scalar(g.l_sec),
                tape.scalar(g.l_total),
                plan.masked.len(),
                grads,
            ))
        })
        .collect();
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let total_masked: usize = parts.iter().map(|p| p.3).sum();
    let mut report = LossReport {
        l_pri: 0.0,
        l_sec: 0.0,
        l_total: 0.0,
        lambda: model.config.lambda,
        n_masked: total_masked,
    };
    let mut grads: Option<ParamStore> = None;
    for (pri, sec, tot, m, g) in parts {
        let w = m as f64 / total_masked as f64;
        report.l_pri += w * pri;
        report.l_sec += w * sec;
        report.l_total += w * tot;
        match &mut grads {
            None => {
                let mut g = g;
                for (_, t) in g.iter_mut() {
                    *t *= w;
                }
                grads = Some(g);
            }
            Some(acc) => {
                for (name, t) in g.iter() {
                    let a = acc.get_mut(name).unwrap();
                    a.scaled_add(w, t);
                }
            }
        }
    }
    Ok((report, grads.unwrap()))
}

/// Encoder representations of every token with nothing masked (`N × D`).
pub fn encode_all(tape: &mut Tape, p: &Bound<'_>, model: &Model, sample: &Sample) -> Result<Var> {
    let all: Vec<usize> = (0..sample.n_tokens()).collect();
    let pe = positional_encodings(tape, p, model, sample);
    Ok(forward_encode(tape, p, model, sample, &all, pe)?.out)
}
