//! Masked multi-head cross-attention with a residual GELU feed-forward.
//!
//! Queries come from the flattened feature grid of the hosting UNet level,
//! keys and values from the caption tokens. One additive mask per site is
//! shared by every head. The block computes
//!
//! ```text
//! A     = concat_h softmax(Q_h K_hᵀ/√d_head + M) V_h · W_o
//! A_out = GELU(A W1 + b1) W2 + b2 + A
//! out   = X + A_out
//! ```

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::gate::{fully_masked_rows, gate_mask, GateHead, GateMode, Lambdas, MaskMatrix, Mode, SiteGates};
use crate::params::{Graph, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub n_tokens: usize,
    pub d_ff: usize,
}

impl AttnConfig {
    /// Config with the conventional `d_ff = 4·d_model`.
    pub fn new(d_model: usize, n_heads: usize, n_tokens: usize) -> Result<Self> {
        if n_heads == 0 || d_model == 0 || d_model % n_heads != 0 || n_tokens == 0 {
            return Err(Error::Config(format!(
                "d_model ({d_model}) must be a positive multiple of n_heads ({n_heads}) and n_tokens ({n_tokens}) positive"
            )));
        }
        Ok(Self {
            d_model,
            n_heads,
            d_head: d_model / n_heads,
            n_tokens,
            d_ff: 4 * d_model,
        })
    }

    pub fn with_d_ff(mut self, d_ff: usize) -> Self {
        self.d_ff = d_ff;
        self
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.d_head as f64).sqrt()
    }
}

/// Parameters of one gated cross-attention site.
#[derive(Clone, Debug)]
pub struct MaskAttnBlock {
    pub cfg: AttnConfig,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    /// `None` for the ungated baseline architecture.
    pub gate_head: Option<GateHead>,
    pub lambdas: Lambdas,
}

/// Result of [`MaskAttnBlock::block_forward`].
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub out: Var,
    /// Present when the gate head ran (gated block in learned mode).
    pub gates: Option<SiteGates>,
}

impl MaskAttnBlock {
    /// Registers the block's parameters. Backbone weights draw from
    /// `backbone`, the gate head (if any) from `gate`.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: AttnConfig,
        lambdas: Lambdas,
        backbone: &mut R,
        gate: Option<&mut R>,
    ) -> Self {
        let d = cfg.d_model;
        let std_d = 1.0 / (d as f64).sqrt();
        let bb = ParamGroup::Backbone;
        let mut mat = |store: &mut ParamStore, name: &str, r: usize, c: usize, std: f64| {
            store.add(format!("{prefix}.{name}"), bb, Tensor::randn([r, c], std, backbone))
        };
        let w_q = mat(store, "w_q", d, d, std_d);
        let w_k = mat(store, "w_k", d, d, std_d);
        let w_v = mat(store, "w_v", d, d, std_d);
        let w_o = mat(store, "w_o", d, d, std_d);
        let ffn_w1 = mat(store, "ffn_w1", d, cfg.d_ff, std_d);
        let ffn_w2 = mat(store, "ffn_w2", cfg.d_ff, d, 1.0 / (cfg.d_ff as f64).sqrt());
        let ffn_b1 = store.add(format!("{prefix}.ffn_b1"), bb, Tensor::zeros([cfg.d_ff]));
        let ffn_b2 = store.add(format!("{prefix}.ffn_b2"), bb, Tensor::zeros([d]));
        let gate_head = gate.map(|r| GateHead::init(store, &format!("{prefix}.gate"), d, d, r));
        Self {
            cfg,
            w_q,
            w_k,
            w_v,
            w_o,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
            gate_head,
            lambdas,
        }
    }

    fn check_inputs(&self, g: &Graph, x: Var, tok: Var, batch: usize) -> Result<(usize, usize)> {
        let (sx, st) = (g.shape(x), g.shape(tok));
        let d = self.cfg.d_model;
        match (sx, st) {
            ([rx, cx], [rt, ct]) if *cx == d && *ct == d && batch > 0 && rx % batch == 0 && rt % batch == 0 => {
                Ok((rx / batch, rt / batch))
            }
            _ => shape_err("mask_attn_block", sx, st),
        }
    }

    /// Head-aggregated masked attention `A`, `[B·N, d_model]`. `mask` is a
    /// `[B, N, T]` additive bias shared across heads.
    pub fn multi_head_forward(&self, g: &mut Graph, x: Var, tok: Var, batch: usize, mask: Option<Var>) -> Result<Var> {
        let (n, t) = self.check_inputs(g, x, tok, batch)?;
        if let Some(m) = mask {
            if g.shape(m) != [batch, n, t] {
                return shape_err("multi_head_forward", g.shape(m), &[batch, n, t]);
            }
        }
        let (wq, wk, wv, wo) = (g.param(self.w_q), g.param(self.w_k), g.param(self.w_v), g.param(self.w_o));
        let q = g.matmul(x, wq)?;
        let k = g.matmul(tok, wk)?;
        let v = g.matmul(tok, wv)?;
        let h = self.cfg.n_heads;
        let qh = g.split_heads(q, batch, h)?;
        let kh = g.split_heads(k, batch, h)?;
        let vh = g.split_heads(v, batch, h)?;
        let (att, _) = attend(g, qh, kh, vh, mask, self.cfg.scale())?;
        let merged = g.merge_heads(att, batch)?;
        g.matmul(merged, wo)
    }

    /// `GELU(A W1 + b1) W2 + b2 + A`.
    pub fn ffn_residual(&self, g: &mut Graph, a: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (g.param(self.ffn_w1), g.param(self.ffn_b1), g.param(self.ffn_w2), g.param(self.ffn_b2));
        let hdn = g.linear(a, w1, b1)?;
        let act = g.gelu(hdn);
        let y = g.linear(act, w2, b2)?;
        g.add(y, a)
    }

    /// Full site: gates → mask → attention → FFN, added onto the features.
    pub fn block_forward(&self, g: &mut Graph, x: Var, tok: Var, batch: usize, mode: Mode, gate_mode: GateMode) -> Result<BlockOutput> {
        let (n, t) = self.check_inputs(g, x, tok, batch)?;
        let (mask, gates) = match (&self.gate_head, gate_mode) {
            (None, _) => (None, None),
            (Some(_), GateMode::ForcedOpen) => (Some(g.constant(&Tensor::zeros([batch, n, t]))), None),
            (Some(head), GateMode::Learned) => {
                let probs = head.probs(g, x, tok, batch)?;
                let site = gate_mask(g, probs, self.lambdas.for_mode(mode))?;
                (Some(site.mask), Some(site))
            }
        };
        let a = self.multi_head_forward(g, x, tok, batch, mask)?;
        let a_out = self.ffn_residual(g, a)?;
        let out = g.add(x, a_out)?;
        Ok(BlockOutput { out, gates })
    }
}

/// Scaled dot-product attention over groups: `q [G,N,d]`, `k, v [G,T,d]`,
/// optional bias `[G',N,T]` with `G' | G`. Returns `(output, weights)`.
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, bias: Option<Var>, scale: f64) -> Result<(Var, Var)> {
    let kt = tape.transpose(k)?;
    let raw = tape.matmul(q, kt)?;
    let logits = tape.scale(raw, scale);
    let w = tape.softmax_with_bias(logits, bias)?;
    let out = tape.matmul(w, v)?;
    Ok((out, w))
}

fn single_head(q: &Tensor, k: &Tensor, v: &Tensor, m: &MaskMatrix) -> Result<(Tensor, Tensor)> {
    let (n, d) = match q.shape() {
        [n, d] => (*n, *d),
        s => return shape_err("masked_cross_attention", s, k.shape()),
    };
    let t = match (k.shape(), v.shape()) {
        ([t, dk], [tv, dv]) if *dk == d && tv == t && *dv == d => *t,
        _ => return shape_err("masked_cross_attention", k.shape(), v.shape()),
    };
    if m.bias.shape() != [n, t] {
        return shape_err("masked_cross_attention", m.bias.shape(), &[n, t]);
    }
    if let Some(&row) = fully_masked_rows(&m.bias, m.lambda_used).first() {
        return Err(Error::FullyMaskedRow { row });
    }
    let mut tape = Tape::new();
    let (qv, kv, vv, bv) = (tape.constant(q), tape.constant(k), tape.constant(v), tape.constant(&m.bias));
    let (out, w) = attend(&mut tape, qv, kv, vv, Some(bv), 1.0 / (d as f64).sqrt())?;
    Ok((tape.tensor(out), tape.tensor(w)))
}

/// Single-head `softmax(q kᵀ/√d + M) v` for `q [N×d]`, `k, v [T×d]`.
pub fn masked_cross_attention(q: &Tensor, k: &Tensor, v: &Tensor, m: &MaskMatrix) -> Result<Tensor> {
    single_head(q, k, v, m).map(|(o, _)| o)
}

/// The `[N×T]` attention weights of [`masked_cross_attention`].
pub fn attention_weights(q: &Tensor, k: &Tensor, m: &MaskMatrix) -> Result<Tensor> {
    single_head(q, k, k, m).map(|(_, w)| w)
}
