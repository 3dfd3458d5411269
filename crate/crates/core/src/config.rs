//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and
//! falls back to its default; unknown keys and malformed values are errors.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::diffusion::{make_schedule, NoiseSchedule, Sampler, UNetConfig};
use crate::error::{Error, Result};
use crate::gate::Lambdas;
use crate::optim::{AdamWConfig, TrainConfig};
use crate::scenes::{all_scenes, VOCAB};

/// Training phase: the backbone alone, then only the gate heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Backbone,
    Gates,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Backbone => "backbone",
            Phase::Gates => "gates",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Phase::Backbone => 0,
            Phase::Gates => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Phase::Backbone),
            1 => Ok(Phase::Gates),
            t => Err(Error::Corrupt(format!("unknown phase tag {t}"))),
        }
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(Phase::Backbone),
            "gates" => Ok(Phase::Gates),
            other => Err(Error::Config(format!("unknown phase {other:?} (expected backbone or gates)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddim" => Ok(SamplerKind::Ddim),
            other => Err(Error::Config(format!("unknown sampler {other:?} (expected ddpm or ddim)"))),
        }
    }
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ddim => "ddim",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub latent_size: usize,
    pub c1: usize,
    pub c2: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub sites: usize,
    pub tokens: usize,

    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    pub batch_size: usize,
    pub backbone_steps: u64,
    pub gate_steps: u64,
    pub warmup_steps: u64,
    pub lr_backbone: f64,
    pub lr_gates: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub checkpoint_every: u64,

    pub lambda_train: f64,
    pub lambda_infer: f64,

    pub seed: u64,
    pub out_dir: PathBuf,
    pub holdout: usize,
    pub sampler: SamplerKind,
    pub sample_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let l = Lambdas::default();
        let a = AdamWConfig::default();
        Self {
            latent_size: 16,
            c1: 16,
            c2: 32,
            d_model: 64,
            n_heads: 2,
            d_ff: 256,
            sites: 2,
            tokens: 8,
            t_steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            batch_size: 8,
            backbone_steps: 2000,
            gate_steps: 1000,
            warmup_steps: 100,
            lr_backbone: 1e-3,
            lr_gates: a.lr_peak,
            weight_decay: a.weight_decay,
            beta1: a.beta1,
            beta2: a.beta2,
            adam_eps: a.eps,
            clip_norm: 1.0,
            checkpoint_every: 500,
            lambda_train: l.train,
            lambda_infer: l.infer,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            holdout: 50,
            sampler: SamplerKind::Ddpm,
            sample_steps: 50,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        macro_rules! keys {
            ($($name:ident),+ $(,)?) => {
                match key {
                    $(stringify!($name) => self.$name = parse_value(key, v)?,)+
                    "out_dir" => self.out_dir = PathBuf::from(v),
                    _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
                }
            };
        }
        keys!(
            latent_size, c1, c2, d_model, n_heads, d_ff, sites, tokens, t_steps, beta_start, beta_end, batch_size,
            backbone_steps, gate_steps, warmup_steps, lr_backbone, lr_gates, weight_decay, beta1, beta2, adam_eps,
            clip_norm, checkpoint_every, lambda_train, lambda_infer, seed, holdout, sampler, sample_steps,
        );
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.unet(true).validate()?;
        self.schedule()?;
        if self.tokens < 7 {
            return bad(format!("tokens = {} cannot hold a two-object caption (needs 7)", self.tokens));
        }
        if self.warmup_steps > self.gate_steps.min(self.backbone_steps) && self.gate_steps.min(self.backbone_steps) > 0 {
            return bad("warmup_steps exceeds a phase length".into());
        }
        for (k, v) in [("lr_backbone", self.lr_backbone), ("lr_gates", self.lr_gates), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{k} must be finite and ≥ 0"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("need 0 ≤ beta1, beta2 < 1 and adam_eps > 0".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive".into());
        }
        if !(self.lambda_train > 0.0 && self.lambda_train.is_finite() && self.lambda_infer > 0.0 && self.lambda_infer.is_finite()) {
            return bad("lambda_train and lambda_infer must be positive and finite".into());
        }
        if self.batch_size == 0 || self.sample_steps == 0 {
            return bad("batch_size and sample_steps must be positive".into());
        }
        let pairs = all_scenes().iter().filter(|s| s.objects.len() == 2).count();
        if self.holdout == 0 || self.holdout >= pairs {
            return bad(format!("holdout must be in 1..{pairs}"));
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        macro_rules! emit {
            ($($name:ident),+ $(,)?) => {
                $(let _ = writeln!(s, "{} = {}", stringify!($name), self.$name);)+
            };
        }
        emit!(latent_size, c1, c2, d_model, n_heads, d_ff, sites, tokens, t_steps, beta_start, beta_end, batch_size);
        emit!(backbone_steps, gate_steps, warmup_steps, lr_backbone, lr_gates, weight_decay, beta1, beta2, adam_eps);
        emit!(clip_norm, checkpoint_every, lambda_train, lambda_infer, seed, holdout, sample_steps);
        let _ = writeln!(s, "sampler = {}", self.sampler.name());
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        s
    }

    pub fn unet(&self, gated: bool) -> UNetConfig {
        UNetConfig {
            latent_size: self.latent_size,
            c1: self.c1,
            c2: self.c2,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            sites: self.sites,
            tokens: self.tokens,
            vocab: VOCAB.len(),
            gated,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_steps, self.beta_start, self.beta_end)
    }

    pub fn lambdas(&self) -> Lambdas {
        Lambdas {
            train: self.lambda_train,
            infer: self.lambda_infer,
        }
    }

    pub fn sampler(&self) -> Sampler {
        match self.sampler {
            SamplerKind::Ddpm => Sampler::Ddpm,
            SamplerKind::Ddim => Sampler::Ddim { steps: self.sample_steps },
        }
    }

    pub fn train_config(&self, phase: Phase) -> TrainConfig {
        let (steps, lr) = match phase {
            Phase::Backbone => (self.backbone_steps, self.lr_backbone),
            Phase::Gates => (self.gate_steps, self.lr_gates),
        };
        TrainConfig {
            batch_size: self.batch_size,
            steps,
            warmup_steps: self.warmup_steps.min(steps),
            clip_norm: self.clip_norm,
            seed: self.seed,
            adamw: AdamWConfig {
                lr_peak: lr,
                weight_decay: self.weight_decay,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            checkpoint_every: self.checkpoint_every,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn comments_and_overrides() {
        let c = RunConfig::parse("# tiny\nlatent_size = 8  # smaller\n\nseed=7\nsampler = ddim\nout_dir = /tmp/x y\n").unwrap();
        assert_eq!((c.latent_size, c.seed, c.sampler), (8, 7, SamplerKind::Ddim));
        assert_eq!(c.out_dir, PathBuf::from("/tmp/x y"));
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(RunConfig::parse("lr = 0.1").unwrap_err().to_string().contains("unknown config key"));
        assert!(RunConfig::parse("seed = -1").is_err());
        assert!(RunConfig::parse("latent_size = 10").is_err());
        assert!(RunConfig::parse("clip_norm = 0").is_err());
        assert!(RunConfig::parse("just words").is_err());
        assert!(RunConfig::parse("tokens = 6").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.beta_end = 0.0213;
        c.lr_gates = 3.5e-5;
        c.sampler = SamplerKind::Ddim;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn phases_pick_their_rates() {
        let c = RunConfig::default();
        assert_eq!(c.train_config(Phase::Gates).adamw.lr_peak, 1e-4);
        assert_eq!(c.train_config(Phase::Backbone).steps, 2000);
        assert_eq!(Phase::from_tag(Phase::Gates.tag()).unwrap(), Phase::Gates);
    }
}
