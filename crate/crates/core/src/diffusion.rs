//! Forward noising, the toy gated UNet denoiser, ε-prediction loss, and
//! DDPM / DDIM samplers.
//!
//! Latents are images mapped to `[-1, 1]`; there is no codec.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::attention::{AttnConfig, MaskAttnBlock};
use crate::autodiff::{ConvGeom, Var};
use crate::error::{shape_err, Error, Result};
use crate::gate::{GateMode, Lambdas, Mode, SiteGates};
use crate::params::{Graph, ParamGroup, ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

/// Image channels of the latent.
pub const LATENT_CHANNELS: usize = 3;

// ── noise schedule ──────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Linear β schedule from `beta_start` to `beta_end` over `t_steps` steps.
pub fn make_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_steps == 0 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "schedule needs T ≥ 1 and 0 < beta_start < beta_end < 1, got T={t_steps}, [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = (0..t_steps)
        .map(|i| {
            if t_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { betas, alphas, alpha_bar })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::StepOutOfRange { step: t, len: self.len() });
        }
        Ok(())
    }
}

/// `√ᾱ_t·z0 + √(1−ᾱ_t)·eps`.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check(t)?;
    if z0.shape() != eps.shape() {
        return shape_err("q_sample", z0.shape(), eps.shape());
    }
    let ab = sched.alpha_bar[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0.data().iter().zip(eps.data()).map(|(z, e)| a * z + b * e).collect();
    Tensor::new(z0.shape().to_vec(), data)
}

/// Batched [`q_sample`] over `[B, ...]` with one step per sample.
pub fn q_sample_batch(z0: &Tensor, t: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if z0.shape() != eps.shape() || z0.shape().first() != Some(&t.len()) {
        return shape_err("q_sample", z0.shape(), eps.shape());
    }
    let per = z0.numel() / t.len();
    let mut out = Vec::with_capacity(z0.numel());
    for (i, &ti) in t.iter().enumerate() {
        sched.check(ti)?;
        let ab = sched.alpha_bar[ti];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let r = i * per..(i + 1) * per;
        out.extend(z0.data()[r.clone()].iter().zip(&eps.data()[r]).map(|(z, e)| a * z + b * e));
    }
    Tensor::new(z0.shape().to_vec(), out)
}

// ── denoiser ────────────────────────────────────────────────────────────

/// Geometry of [`ToyUNet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    /// Side of the square latent; must be divisible by 4.
    pub latent_size: usize,
    pub c1: usize,
    pub c2: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Number of attention sites at the mid stage.
    pub sites: usize,
    /// Caption length.
    pub tokens: usize,
    pub vocab: usize,
    /// Whether sites carry gate heads.
    pub gated: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_size: 16,
            c1: 16,
            c2: 32,
            d_model: 64,
            n_heads: 2,
            d_ff: 256,
            sites: 2,
            tokens: crate::scenes::CAPTION_LEN,
            vocab: crate::scenes::VOCAB.len(),
            gated: true,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.latent_size == 0 || self.latent_size % 4 != 0 {
            return bad(format!("latent_size {} must be a positive multiple of 4", self.latent_size));
        }
        if self.c1 == 0 || self.c2 == 0 || self.d_ff == 0 || self.tokens == 0 || self.vocab == 0 {
            return bad("channel counts, d_ff, tokens and vocab must be positive".into());
        }
        if self.d_model < 2 || self.d_model % 2 != 0 {
            return bad(format!("d_model {} must be even", self.d_model));
        }
        AttnConfig::new(self.d_model, self.n_heads, self.tokens)?;
        Ok(())
    }

    pub fn mid_size(&self) -> usize {
        self.latent_size / 4
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    cin: usize,
    cout: usize,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

/// Small convolutional UNet with gated cross-attention at its lowest
/// resolution. Owns its parameters.
#[derive(Clone, Debug)]
pub struct ToyUNet {
    pub cfg: UNetConfig,
    pub store: ParamStore,
    pub blocks: Vec<MaskAttnBlock>,
    /// Whether gated sites use their learned gates or run fully open.
    pub gate_mode: GateMode,
    conv_in: ConvLayer,
    down1: ConvLayer,
    down2: ConvLayer,
    time1: Dense,
    time2: Dense,
    word_emb: ParamId,
    pos_emb: ParamId,
    /// Learned per-cell embedding of the mid grid, so queries know where
    /// they are.
    grid_pos: ParamId,
    up1: ConvLayer,
    up2: ConvLayer,
    conv_out: ConvLayer,
}

/// Graph outputs of [`ToyUNet::forward`].
#[derive(Clone, Debug)]
pub struct UNetOutput {
    /// `[B, 3, H, W]` noise prediction.
    pub eps: Var,
    /// Per site, in order; empty for ungated or forced-open models.
    pub sites: Vec<SiteGates>,
}

fn conv_layer(store: &mut ParamStore, name: &str, cin: usize, cout: usize, gain: f64, r: &mut impl Rng) -> ConvLayer {
    let fan_in = 9 * cin;
    let std = gain / (fan_in as f64).sqrt();
    let w = store.add(format!("{name}.w"), ParamGroup::Backbone, Tensor::randn([fan_in, cout], std, r));
    let b = store.add(format!("{name}.b"), ParamGroup::Backbone, Tensor::zeros([cout]));
    ConvLayer { w, b, cin, cout }
}

fn dense(store: &mut ParamStore, name: &str, din: usize, dout: usize, r: &mut impl Rng) -> Dense {
    let std = 1.0 / (din as f64).sqrt();
    let w = store.add(format!("{name}.w"), ParamGroup::Backbone, Tensor::randn([din, dout], std, r));
    let b = store.add(format!("{name}.b"), ParamGroup::Backbone, Tensor::zeros([dout]));
    Dense { w, b }
}

/// Sinusoidal embedding of a diffusion step, width `dim` (even).
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

impl ToyUNet {
    /// Fresh model. Backbone and gate parameters draw from separate seeded
    /// streams, so gated and ungated models built from one seed share their
    /// backbone bitwise.
    pub fn new(cfg: UNetConfig, lambdas: Lambdas, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let r = &mut rng::stream(seed, "init/backbone");
        let mut gr = rng::stream(seed, "init/gates");
        let d = cfg.d_model;
        let conv_in = conv_layer(&mut store, "conv_in", LATENT_CHANNELS, cfg.c1, 1.0, r);
        let down1 = conv_layer(&mut store, "down1", cfg.c1, cfg.c2, 1.0, r);
        let down2 = conv_layer(&mut store, "down2", cfg.c2, d, 1.0, r);
        let time1 = dense(&mut store, "time1", d, d, r);
        let time2 = dense(&mut store, "time2", d, d, r);
        let word_emb = store.add("tok.word", ParamGroup::Backbone, Tensor::randn([cfg.vocab, d], 1.0, r));
        let pos_emb = store.add("tok.pos", ParamGroup::Backbone, Tensor::randn([cfg.tokens, d], 0.1, r));
        let n_mid = cfg.mid_size() * cfg.mid_size();
        let grid_pos = store.add("mid.grid_pos", ParamGroup::Backbone, Tensor::randn([n_mid, d], 1.0, r));
        let attn = AttnConfig::new(d, cfg.n_heads, cfg.tokens)?.with_d_ff(cfg.d_ff);
        let blocks = (0..cfg.sites)
            .map(|i| {
                let gate = if cfg.gated { Some(&mut gr) } else { None };
                MaskAttnBlock::init(&mut store, &format!("mid.{i}"), attn, lambdas, r, gate)
            })
            .collect();
        let up1 = conv_layer(&mut store, "up1", d + cfg.c2, cfg.c2, 1.0, r);
        let up2 = conv_layer(&mut store, "up2", cfg.c2 + cfg.c1, cfg.c1, 1.0, r);
        let conv_out = conv_layer(&mut store, "conv_out", cfg.c1, LATENT_CHANNELS, 0.1, r);
        Ok(Self {
            cfg,
            store,
            blocks,
            gate_mode: GateMode::Learned,
            conv_in,
            down1,
            down2,
            time1,
            time2,
            word_emb,
            pos_emb,
            grid_pos,
            up1,
            up2,
            conv_out,
        })
    }

    pub fn lambdas(&self) -> Option<Lambdas> {
        self.blocks.first().map(|b| b.lambdas)
    }

    fn conv(&self, g: &mut Graph, x: Var, l: ConvLayer, batch: usize, size: usize, stride: usize) -> Result<Var> {
        let geom = ConvGeom {
            batch,
            height: size,
            width: size,
            in_ch: l.cin,
            out_ch: l.cout,
            kernel: 3,
            stride,
            pad: 1,
        };
        let (w, b) = (g.param(l.w), g.param(l.b));
        g.conv2d(x, w, b, geom)
    }

    /// Token embeddings `[B·T, d_model]` for a flat id list.
    pub fn embed_tokens(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let t = self.cfg.tokens;
        if tokens.is_empty() || tokens.len() % t != 0 {
            return shape_err("embed_tokens", &[tokens.len()], &[t]);
        }
        let word = g.param(self.word_emb);
        let pos = g.param(self.pos_emb);
        let w = g.gather(word, tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).map(|i| i % t).collect();
        let p = g.gather(pos, &positions)?;
        g.add(w, p)
    }

    /// Noise prediction for `z_t` `[B, 3, S, S]`, steps `t` (len `B`) and
    /// captions `tokens` (len `B·T`).
    pub fn forward(&self, g: &mut Graph, z: Var, t: &[usize], tokens: &[usize], mode: Mode) -> Result<UNetOutput> {
        let c = self.cfg;
        let s = c.latent_size;
        let batch = t.len();
        if batch == 0 || g.shape(z) != [batch, LATENT_CHANNELS, s, s] {
            return shape_err("unet_forward", g.shape(z), &[batch, LATENT_CHANNELS, s, s]);
        }
        if tokens.len() != batch * c.tokens {
            return shape_err("unet_forward", &[tokens.len()], &[batch * c.tokens]);
        }
        let tok = self.embed_tokens(g, tokens)?;

        let x = g.nchw_to_rows(z)?;
        let h = self.conv(g, x, self.conv_in, batch, s, 1)?;
        let s1 = g.gelu(h);
        let h = self.conv(g, s1, self.down1, batch, s, 2)?;
        let s2 = g.gelu(h);
        let h = self.conv(g, s2, self.down2, batch, s / 2, 2)?;
        let mut mid = g.gelu(h);

        let temb: Vec<f64> = t.iter().flat_map(|&ti| timestep_embedding(ti, c.d_model)).collect();
        let temb = g.input(&[batch, c.d_model], temb, false)?;
        let (w1, b1, w2, b2) = (g.param(self.time1.w), g.param(self.time1.b), g.param(self.time2.w), g.param(self.time2.b));
        let te = g.linear(temb, w1, b1)?;
        let te = g.gelu(te);
        let te = g.linear(te, w2, b2)?;
        mid = g.add_group_rows(mid, te)?;
        let n_mid = (s / 4) * (s / 4);
        let table = g.param(self.grid_pos);
        let cells: Vec<usize> = (0..batch * n_mid).map(|i| i % n_mid).collect();
        let gp = g.gather(table, &cells)?;
        mid = g.add(mid, gp)?;

        let mut sites = Vec::new();
        for block in &self.blocks {
            let o = block.block_forward(g, mid, tok, batch, mode, self.gate_mode)?;
            mid = o.out;
            sites.extend(o.gates);
        }

        let up = g.upsample2x(mid, batch, s / 4, s / 4)?;
        let cat = g.concat_cols(up, s2)?;
        let h = self.conv(g, cat, self.up1, batch, s / 2, 1)?;
        let h = g.gelu(h);
        let up = g.upsample2x(h, batch, s / 2, s / 2)?;
        let cat = g.concat_cols(up, s1)?;
        let h = self.conv(g, cat, self.up2, batch, s, 1)?;
        let h = g.gelu(h);
        let out = self.conv(g, h, self.conv_out, batch, s, 1)?;
        let eps = g.rows_to_nchw(out, batch, s, s)?;
        Ok(UNetOutput { eps, sites })
    }

    /// Inference-only forward returning the prediction as a tensor.
    pub fn predict(&self, z_t: &Tensor, t: &[usize], tokens: &[usize], mode: Mode) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let z = g.constant(z_t);
        let out = self.forward(&mut g, z, t, tokens, mode)?;
        Ok(g.tensor(out.eps))
    }

    /// Overwrites parameters by name. Every backbone parameter must be
    /// present; gate parameters missing from `entries` keep their values.
    pub fn load_params<'e>(&mut self, entries: impl IntoIterator<Item = (&'e str, &'e Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.store.len()];
        for (name, t) in entries {
            let id = self
                .store
                .find(name)
                .ok_or_else(|| Error::Config(format!("checkpoint parameter {name:?} does not exist in this model")))?;
            self.store.assign(name, t)?;
            seen[id.index()] = true;
        }
        if let Some(id) = self.store.ids_in(ParamGroup::Backbone).into_iter().find(|id| !seen[id.index()]) {
            return Err(Error::Config(format!("checkpoint lacks backbone parameter {:?}", self.store.name(id))));
        }
        Ok(())
    }
}

// ── training loss ───────────────────────────────────────────────────────

/// One training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    /// `[B, 3, S, S]` clean latents.
    pub z: Tensor,
    pub t: Vec<usize>,
    /// Same shape as `z`.
    pub eps: Tensor,
    /// `B·T` token ids.
    pub tokens: Vec<usize>,
}

impl LatentBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.t.len();
        if b == 0 || self.z.shape().first() != Some(&b) || self.eps.shape() != self.z.shape() || self.tokens.len() % b != 0 {
            return shape_err("latent_batch", self.z.shape(), self.eps.shape());
        }
        Ok(())
    }
}

/// Anything that predicts noise on a graph.
pub trait Denoiser {
    fn predict_eps(&self, g: &mut Graph, z_t: Var, t: &[usize], tokens: &[usize], mode: Mode) -> Result<Var>;
}

impl Denoiser for ToyUNet {
    fn predict_eps(&self, g: &mut Graph, z_t: Var, t: &[usize], tokens: &[usize], mode: Mode) -> Result<Var> {
        Ok(self.forward(g, z_t, t, tokens, mode)?.eps)
    }
}

/// `mean((eps − model(q_sample(z, t, eps), t, tokens))²)` on the graph.
pub fn training_loss<D: Denoiser + ?Sized>(g: &mut Graph, batch: &LatentBatch, model: &D, sched: &NoiseSchedule) -> Result<Var> {
    batch.validate()?;
    let z_t = q_sample_batch(&batch.z, &batch.t, &batch.eps, sched)?;
    let z_t = g.constant(&z_t);
    let eps = g.constant(&batch.eps);
    let pred = model.predict_eps(g, z_t, &batch.t, &batch.tokens, Mode::Train)?;
    g.mse(pred, eps)
}

// ── samplers ────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampler {
    /// Ancestral sampling over every step.
    Ddpm,
    /// Deterministic (η = 0) sampling over `steps` evenly spaced steps.
    Ddim { steps: usize },
}

/// Steps visited by DDIM, ascending, always including `T−1`.
pub fn ddim_timesteps(t_steps: usize, steps: usize) -> Vec<usize> {
    let s = steps.clamp(1, t_steps);
    if s == 1 {
        return vec![t_steps - 1];
    }
    (0..s).map(|i| i * (t_steps - 1) / (s - 1)).collect()
}

fn normals(r: &mut impl Rng, n: usize) -> impl Iterator<Item = f64> + '_ {
    (0..n).map(move |_| r.sample::<f64, _>(StandardNormal))
}

/// Generates one latent per caption. Caption `i` draws its noise from
/// `(seeds[i], "sample")`, so a sample depends only on its own caption and
/// seed, never on what else shares the batch.
pub fn sample<D: Denoiser + ?Sized>(
    model: &D,
    store: &ParamStore,
    sched: &NoiseSchedule,
    tokens: &[usize],
    seeds: &[u64],
    size: usize,
    sampler: Sampler,
) -> Result<Tensor> {
    let b = seeds.len();
    if b == 0 || tokens.len() % b != 0 {
        return shape_err("sample", &[tokens.len()], &[b]);
    }
    let per = LATENT_CHANNELS * size * size;
    let mut rngs: Vec<_> = seeds.iter().map(|&s| rng::stream(s, "sample")).collect();
    let mut z: Vec<f64> = rngs.iter_mut().flat_map(|r| normals(r, per).collect::<Vec<_>>()).collect();
    let shape = [b, LATENT_CHANNELS, size, size];
    let predict = |z: &[f64], t: usize| -> Result<Vec<f64>> {
        let mut g = Graph::inference(store);
        let zv = g.input(&shape, z.to_vec(), false)?;
        let eps = model.predict_eps(&mut g, zv, &vec![t; b], tokens, Mode::Infer)?;
        Ok(g.value(eps).to_vec())
    };
    match sampler {
        Sampler::Ddpm => {
            for t in (0..sched.len()).rev() {
                let eps = predict(&z, t)?;
                let (beta, alpha, ab) = (sched.betas[t], sched.alphas[t], sched.alpha_bar[t]);
                let coef = beta / (1.0 - ab).sqrt();
                let inv = 1.0 / alpha.sqrt();
                for (zi, ei) in z.iter_mut().zip(&eps) {
                    *zi = inv * (*zi - coef * ei);
                }
                if t > 0 {
                    let var = beta * (1.0 - sched.alpha_bar[t - 1]) / (1.0 - ab);
                    let sd = var.sqrt();
                    for (i, r) in rngs.iter_mut().enumerate() {
                        for (zi, n) in z[i * per..(i + 1) * per].iter_mut().zip(normals(r, per)) {
                            *zi += sd * n;
                        }
                    }
                }
            }
        }
        Sampler::Ddim { steps } => {
            let ts = ddim_timesteps(sched.len(), steps);
            for (k, &t) in ts.iter().enumerate().rev() {
                let eps = predict(&z, t)?;
                let ab = sched.alpha_bar[t];
                let ab_prev = if k == 0 { 1.0 } else { sched.alpha_bar[ts[k - 1]] };
                for (zi, ei) in z.iter_mut().zip(&eps) {
                    let x0 = ((*zi - (1.0 - ab).sqrt() * ei) / ab.sqrt()).clamp(-1.0, 1.0);
                    *zi = ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * ei;
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), z)
}

/// `[B, 3, S, S] → B` tensors of `[3, S, S]`.
pub fn split_batch(z: &Tensor) -> Vec<Tensor> {
    let b = z.shape()[0];
    let inner = z.shape()[1..].to_vec();
    z.data()
        .chunks(z.numel() / b)
        .map(|c| Tensor::new(inner.clone(), c.to_vec()).expect("chunk matches inner shape"))
        .collect()
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack(items: &[Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return shape_err("stack", first.shape(), t.shape());
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(gated: bool) -> UNetConfig {
        UNetConfig {
            latent_size: 8,
            c1: 4,
            c2: 6,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            sites: 2,
            tokens: 3,
            vocab: 12,
            gated,
        }
    }

    #[test]
    fn schedule_single_step() {
        let s = make_schedule(1, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar, vec![1.0 - 1e-4]);
    }

    #[test]
    fn schedule_defaults_decrease() {
        let s = make_schedule(200, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas.windows(2).all(|w| w[1] > w[0]));
        assert!(s.alpha_bar[0] > 0.99 && s.alpha_bar[199] > 0.0);
        for t in [0, 57, 199] {
            let direct: f64 = (0..=t).map(|i| 1.0 - s.betas[i]).product();
            assert!((direct - s.alpha_bar[t]).abs() < 1e-15);
        }
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn q_sample_formula() {
        let s = make_schedule(200, 1e-4, 0.02).unwrap();
        let z0 = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let eps = Tensor::new([3], vec![1.0, 0.25, -0.75]).unwrap();
        let out = q_sample(&z0, 100, &eps, &s).unwrap();
        let ab: f64 = (0..=100).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 199.0)).product();
        for i in 0..3 {
            let want = ab.sqrt() * z0.data()[i] + (1.0 - ab).sqrt() * eps.data()[i];
            assert!((out.data()[i] - want).abs() < 1e-14);
        }
        assert!(matches!(q_sample(&z0, 200, &eps, &s), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn q_sample_limits() {
        let near_one = make_schedule(1, 1e-12, 2e-12).unwrap();
        let z0 = Tensor::new([2], vec![0.3, -0.4]).unwrap();
        let eps = Tensor::new([2], vec![5.0, 7.0]).unwrap();
        assert!(q_sample(&z0, 0, &eps, &near_one).unwrap().max_abs_diff(&z0).unwrap() < 1e-5);
        let near_zero = make_schedule(2000, 0.5, 0.9).unwrap();
        assert!(q_sample(&z0, 1999, &eps, &near_zero).unwrap().max_abs_diff(&eps).unwrap() < 1e-9);
    }

    #[test]
    fn unet_preserves_shape_and_is_deterministic() {
        for gated in [false, true] {
            let m = ToyUNet::new(tiny_cfg(gated), Lambdas::default(), 3).unwrap();
            let z = Tensor::randn([2, 3, 8, 8], 1.0, &mut rng::stream(0, "z"));
            let toks = [2, 6, 8, 3, 7, 9];
            let a = m.predict(&z, &[5, 100], &toks, Mode::Train).unwrap();
            let b = m.predict(&z, &[5, 100], &toks, Mode::Train).unwrap();
            assert_eq!(a.shape(), z.shape());
            assert!(a.bitwise_eq(&b) && a.is_finite());
        }
    }

    #[test]
    fn gated_and_ungated_share_backbone() {
        let a = ToyUNet::new(tiny_cfg(false), Lambdas::default(), 11).unwrap();
        let b = ToyUNet::new(tiny_cfg(true), Lambdas::default(), 11).unwrap();
        assert_eq!(a.store.digest(Some(ParamGroup::Backbone)), b.store.digest(Some(ParamGroup::Backbone)));
        assert!(a.store.ids_in(ParamGroup::Gate).is_empty());
        assert_eq!(b.store.ids_in(ParamGroup::Gate).len(), 4 * 2);
    }

    #[test]
    fn forced_open_matches_ungated_bitwise() {
        let a = ToyUNet::new(tiny_cfg(false), Lambdas::default(), 5).unwrap();
        let mut b = ToyUNet::new(tiny_cfg(true), Lambdas::default(), 5).unwrap();
        b.gate_mode = GateMode::ForcedOpen;
        let z = Tensor::randn([2, 3, 8, 8], 1.0, &mut rng::stream(1, "z"));
        let toks = [2, 6, 8, 1, 0, 0];
        let pa = a.predict(&z, &[3, 9], &toks, Mode::Infer).unwrap();
        let pb = b.predict(&z, &[3, 9], &toks, Mode::Infer).unwrap();
        assert!(pa.bitwise_eq(&pb));
    }

    #[test]
    fn batching_does_not_change_rows() {
        let m = ToyUNet::new(tiny_cfg(true), Lambdas::default(), 8).unwrap();
        let z = Tensor::randn([2, 3, 8, 8], 1.0, &mut rng::stream(2, "z"));
        let toks = [2, 6, 8, 3, 7, 9];
        let both = m.predict(&z, &[10, 150], &toks, Mode::Infer).unwrap();
        let parts = split_batch(&z);
        let first = m.predict(&stack(&parts[..1]).unwrap(), &[10], &toks[..3], Mode::Infer).unwrap();
        assert_eq!(&both.data()[..first.numel()], first.data());
    }

    struct Zero;
    impl Denoiser for Zero {
        fn predict_eps(&self, g: &mut Graph, z_t: Var, _: &[usize], _: &[usize], _: Mode) -> Result<Var> {
            Ok(g.scale(z_t, 0.0))
        }
    }

    /// Recovers eps exactly from z_t given the clean latent.
    struct Oracle<'a> {
        z0: &'a Tensor,
        sched: &'a NoiseSchedule,
    }
    impl Denoiser for Oracle<'_> {
        fn predict_eps(&self, g: &mut Graph, z_t: Var, t: &[usize], _: &[usize], _: Mode) -> Result<Var> {
            let per = self.z0.numel() / t.len();
            let zt = g.value(z_t).to_vec();
            let eps: Vec<f64> = zt
                .iter()
                .zip(self.z0.data())
                .enumerate()
                .map(|(i, (z, z0))| {
                    let ab = self.sched.alpha_bar[t[i / per]];
                    (z - ab.sqrt() * z0) / (1.0 - ab).sqrt()
                })
                .collect();
            g.input(self.z0.shape(), eps, false)
        }
    }

    fn batch(seed: u64) -> LatentBatch {
        let r = &mut rng::stream(seed, "batch");
        LatentBatch {
            z: Tensor::randn([2, 3, 8, 8], 0.5, r),
            t: vec![r.gen_range(0..200), r.gen_range(0..200)],
            eps: Tensor::randn([2, 3, 8, 8], 1.0, r),
            tokens: vec![2, 6, 8, 3, 7, 9],
        }
    }

    #[test]
    fn loss_of_trivial_models() {
        let sched = make_schedule(200, 1e-4, 0.02).unwrap();
        let b = batch(0);
        let store = ParamStore::new();

        let mut g = Graph::inference(&store);
        let l = training_loss(&mut g, &b, &Zero, &sched).unwrap();
        let want = b.eps.data().iter().map(|e| e * e).sum::<f64>() / b.eps.numel() as f64;
        assert!((g.value(l)[0] - want).abs() < 1e-14);

        let mut g = Graph::inference(&store);
        let l = training_loss(&mut g, &b, &Oracle { z0: &b.z, sched: &sched }, &sched).unwrap();
        assert!(g.value(l)[0] < 1e-20);
    }

    #[test]
    fn loss_matches_manual_two_pass() {
        let sched = make_schedule(200, 1e-4, 0.02).unwrap();
        let m = ToyUNet::new(tiny_cfg(true), Lambdas::default(), 4).unwrap();
        let b = batch(1);
        let mut g = Graph::inference(&m.store);
        let l = training_loss(&mut g, &b, &m, &sched).unwrap();
        let got = g.value(l)[0];

        let parts: Vec<Tensor> = split_batch(&b.z)
            .iter()
            .zip(split_batch(&b.eps))
            .zip(&b.t)
            .map(|((z, e), &t)| q_sample(z, t, &e, &sched).unwrap())
            .collect();
        let pred = m.predict(&stack(&parts).unwrap(), &b.t, &b.tokens, Mode::Train).unwrap();
        let mut sq = 0.0;
        for (p, e) in pred.data().iter().zip(b.eps.data()) {
            sq += (p - e) * (p - e);
        }
        assert!((got - sq / pred.numel() as f64).abs() < 1e-13);
    }

    #[test]
    fn samplers_are_deterministic_and_finite() {
        let sched = make_schedule(20, 1e-4, 0.02).unwrap();
        let m = ToyUNet::new(tiny_cfg(true), Lambdas::default(), 2).unwrap();
        let toks = [2, 6, 8, 3, 7, 9];
        for sampler in [Sampler::Ddpm, Sampler::Ddim { steps: 5 }] {
            let a = sample(&m, &m.store, &sched, &toks, &[1, 2], 8, sampler).unwrap();
            let b = sample(&m, &m.store, &sched, &toks, &[1, 2], 8, sampler).unwrap();
            assert!(a.bitwise_eq(&b) && a.is_finite());
            let solo = sample(&m, &m.store, &sched, &toks[3..], &[2], 8, sampler).unwrap();
            assert_eq!(&a.data()[a.numel() / 2..], solo.data());
        }
    }

    #[test]
    fn samplers_recover_data_under_exact_noise_oracle() {
        let sched = make_schedule(50, 1e-4, 0.05).unwrap();
        let z0 = Tensor::randn([1, 3, 8, 8], 0.3, &mut rng::stream(7, "z0"));
        let oracle = Oracle { z0: &z0, sched: &sched };
        let store = ParamStore::new();
        for sampler in [Sampler::Ddim { steps: 50 }, Sampler::Ddim { steps: 7 }, Sampler::Ddpm] {
            let out = sample(&oracle, &store, &sched, &[0], &[3], 8, sampler).unwrap();
            assert!(out.max_abs_diff(&z0).unwrap() < 1e-9, "{sampler:?}");
        }
    }

    #[test]
    fn single_step_schedule_samples() {
        let sched = make_schedule(1, 1e-4, 0.02).unwrap();
        let m = ToyUNet::new(tiny_cfg(false), Lambdas::default(), 2).unwrap();
        let z = sample(&m, &m.store, &sched, &[2, 6, 8], &[0], 8, Sampler::Ddpm).unwrap();
        assert!(z.is_finite());
    }

    #[test]
    fn ddim_grid() {
        assert_eq!(ddim_timesteps(200, 1), vec![199]);
        assert_eq!(ddim_timesteps(10, 4), vec![0, 3, 6, 9]);
        assert_eq!(ddim_timesteps(5, 50), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn timestep_embedding_layout() {
        let e = timestep_embedding(0, 6);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }
}
