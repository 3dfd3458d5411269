//! Token-conditioned spatial gates and the additive logit mask.
//!
//! A gate head scores every (location, token) pair with a bilinear form
//! `scale · ⟨x_i W_feat, e_t W_tok⟩ + bias`. The sigmoid of that score is the
//! gate probability; it is hard-thresholded at 0.5 (strictly) with a
//! straight-through backward, and the hard gate becomes a bias of `0` (open)
//! or `-λ` (closed) on the attention logits.
//!
//! `-∞` is realised as a finite `λ`: a moderate value while training keeps
//! gradients flowing through closed logits, and a huge value at inference
//! drives closed weights to exactly zero after `exp` underflow. A location
//! whose gates are all closed would leave its softmax without support, so
//! such rows are reopened and counted.

use rand::Rng;

use crate::autodiff::{Tape, Var, GATE_THRESHOLD};
use crate::error::{shape_err, Error, Result};
use crate::params::{Graph, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const GATE_INIT_STD: f64 = 0.02;
/// Initial gate bias; `sigmoid(2) ≈ 0.88` so every gate starts open.
pub const GATE_INIT_BIAS: f64 = 2.0;
pub const GATE_INIT_SCALE: f64 = 1.0;

pub const LAMBDA_TRAIN: f64 = 10.0;
pub const LAMBDA_INFER: f64 = 1e9;

/// Whether a forward pass is part of training or sampling; selects `λ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// How gated blocks treat their gate heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateMode {
    #[default]
    Learned,
    /// Bypass the head and apply an all-open (zero) mask.
    ForcedOpen,
}

/// Finite stand-ins for `-∞` in training and inference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lambdas {
    pub train: f64,
    pub infer: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            train: LAMBDA_TRAIN,
            infer: LAMBDA_INFER,
        }
    }
}

impl Lambdas {
    pub fn for_mode(&self, mode: Mode) -> f64 {
        match mode {
            Mode::Train => self.train,
            Mode::Infer => self.infer,
        }
    }
}

/// Parameters of one gate head `f(X, e_t)`.
#[derive(Clone, Debug)]
pub struct GateHead {
    /// `d_model × C`: token embedding into feature-channel space.
    pub proj_tok: ParamId,
    /// `C × C`: per-location feature projection.
    pub proj_feat: ParamId,
    pub bias: ParamId,
    pub scale: ParamId,
    pub channels: usize,
    pub d_model: usize,
}

impl GateHead {
    pub fn init(store: &mut ParamStore, prefix: &str, d_model: usize, channels: usize, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Gate;
        let proj_tok = store.add(format!("{prefix}.proj_tok"), g, Tensor::randn([d_model, channels], GATE_INIT_STD, rng));
        let proj_feat = store.add(format!("{prefix}.proj_feat"), g, Tensor::randn([channels, channels], GATE_INIT_STD, rng));
        let bias = store.add(format!("{prefix}.bias"), g, Tensor::full([1], GATE_INIT_BIAS));
        let scale = store.add(format!("{prefix}.scale"), g, Tensor::full([1], GATE_INIT_SCALE));
        Self {
            proj_tok,
            proj_feat,
            bias,
            scale,
            channels,
            d_model,
        }
    }

    /// Gate probabilities `[B, N, T]` for features `[B·N, C]` and tokens
    /// `[B·T, d_model]`.
    pub fn probs(&self, g: &mut Graph, x: Var, tok: Var, batch: usize) -> Result<Var> {
        let (sx, st) = (g.shape(x).to_vec(), g.shape(tok).to_vec());
        if sx.len() != 2 || st.len() != 2 || sx[1] != self.channels || st[1] != self.d_model || sx[0] % batch != 0 || st[0] % batch != 0 {
            return shape_err("gate_forward", &sx, &st);
        }
        let (n, t) = (sx[0] / batch, st[0] / batch);
        let wf = g.param(self.proj_feat);
        let wt = g.param(self.proj_tok);
        let fp = g.matmul(x, wf)?;
        let tp = g.matmul(tok, wt)?;
        let fp = g.reshape(fp, &[batch, n, self.channels])?;
        let tp = g.reshape(tp, &[batch, t, self.channels])?;
        let tpt = g.transpose(tp)?;
        let dots = g.matmul(fp, tpt)?;
        let s = g.param(self.scale);
        let b = g.param(self.bias);
        let scaled = g.mul_scalar(dots, s)?;
        let score = g.add_scalar(scaled, b)?;
        Ok(g.sigmoid(score))
    }
}

/// Gate probabilities and hard gates laid out `[H, W, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateMap {
    pub probs: Tensor,
    pub hard: Tensor,
}

/// Additive attention bias `[N, T]` with entries in `{0, -λ}`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMatrix {
    pub bias: Tensor,
    pub lambda_used: f64,
    pub fallback_rows: usize,
}

impl MaskMatrix {
    /// All-open mask.
    pub fn open(n: usize, t: usize) -> Self {
        Self {
            bias: Tensor::zeros([n, t]),
            lambda_used: 0.0,
            fallback_rows: 0,
        }
    }
}

/// Evaluates a gate head on one feature map `x: [H, W, C]` and tokens
/// `tok: [T, d_model]`.
pub fn gate_forward(x: &Tensor, tok: &Tensor, head: &GateHead, store: &ParamStore) -> Result<GateMap> {
    let (h, w, c) = match x.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return shape_err("gate_forward", s, &[head.channels]),
    };
    let t = tok.shape().first().copied().unwrap_or(0);
    let mut g = Graph::inference(store);
    let xv = g.input(&[h * w, c], x.data().to_vec(), false)?;
    let tv = g.constant(tok);
    let p = head.probs(&mut g, xv, tv, 1)?;
    let probs = g.tensor(p).reshape([h, w, t])?;
    let hard = hard_gates(&probs);
    Ok(GateMap { probs, hard })
}

/// Indicator of `p > 0.5`, elementwise.
pub fn hard_gates(probs: &Tensor) -> Tensor {
    Tensor::new(
        probs.shape().to_vec(),
        probs.data().iter().map(|&p| if p > GATE_THRESHOLD { 1.0 } else { 0.0 }).collect(),
    )
    .expect("same shape")
}

/// Straight-through binarization on a tape.
pub fn binarize_ste(tape: &mut Tape, probs: Var) -> Var {
    tape.binarize_ste(probs)
}

/// Builds the additive mask from hard gates `[H, W, T]` (or `[N, T]`).
pub fn build_mask(hard: &Tensor, lambda: f64) -> Result<MaskMatrix> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("mask λ must be positive and finite, got {lambda}")));
    }
    let t = *hard.shape().last().unwrap_or(&0);
    if hard.shape().len() < 2 {
        return shape_err("build_mask", hard.shape(), &[]);
    }
    let n = hard.numel() / t;
    let mut tape = Tape::new();
    let hv = tape.input(&[n, t], hard.data().to_vec(), false)?;
    let (m, fallback_rows) = tape.mask_from_gates(hv, lambda)?;
    Ok(MaskMatrix {
        bias: tape.tensor(m),
        lambda_used: lambda,
        fallback_rows,
    })
}

/// Rows of `bias` in which every entry is at or below `-λ/2`.
pub fn fully_masked_rows(bias: &Tensor, lambda: f64) -> Vec<usize> {
    let t = *bias.shape().last().unwrap_or(&1);
    bias.data()
        .chunks(t)
        .enumerate()
        .filter(|(_, row)| lambda > 0.0 && row.iter().all(|&b| b <= -lambda / 2.0))
        .map(|(i, _)| i)
        .collect()
}

/// Graph outputs of one gated attention site.
#[derive(Clone, Copy, Debug)]
pub struct SiteGates {
    /// `[B, N, T]` probabilities.
    pub probs: Var,
    /// `[B, N, T]` hard gates (before fallback rewriting).
    pub hard: Var,
    /// `[B, N, T]` additive bias.
    pub mask: Var,
    pub fallback_rows: usize,
}

/// probs → hard (STE) → additive mask, all on the tape.
pub fn gate_mask(tape: &mut Tape, probs: Var, lambda: f64) -> Result<SiteGates> {
    let hard = tape.binarize_ste(probs);
    let (mask, fallback_rows) = tape.mask_from_gates(hard, lambda)?;
    Ok(SiteGates {
        probs,
        hard,
        mask,
        fallback_rows,
    })
}
