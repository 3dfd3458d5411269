//! Registry of gradient checks: one case per tape primitive, plus the
//! composite graphs the model is assembled from.
//!
//! Each case builds some output `y` from its parameters; the checked scalar
//! is `Σ y ⊙ R` for a fixed random `R`, so ops whose plain sum is constant
//! (softmax, for one) still expose their full Jacobian.

use rand::Rng;

use crate::attention::{attend, AttnConfig, MaskAttnBlock};
use crate::autodiff::Var;
use crate::config::RunConfig;
use crate::diffusion::{ToyUNet, UNetConfig, LATENT_CHANNELS};
use crate::error::Result;
use crate::gate::{GateHead, GateMode, Lambdas, Mode};
use crate::gradcheck::{grad_check_store, GradCheckOptions, GradCheckReport};
use crate::params::{Graph, ParamGroup, ParamId, ParamStore};
use crate::rng::{self, StreamRng};
use crate::scenes::{all_scenes, caption_of, VOCAB};
use crate::tensor::Tensor;
use crate::ConvGeom;

/// Acceptance threshold on [`GradCheckReport::max_rel_error`].
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-5;
pub const GRAD_CHECK_STEP: f64 = 1e-6;

type Build = Box<dyn Fn(&mut Graph, &[ParamId]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    store: ParamStore,
    ids: Vec<ParamId>,
    build: Build,
    max_per_param: Option<usize>,
    seed: u64,
}

/// Dimensions and `λ` for the composite cases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegistrySettings {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub tokens: usize,
    pub lambda_train: f64,
    pub seed: u64,
}

impl RegistrySettings {
    pub fn from_config(c: &RunConfig) -> Self {
        Self {
            d_model: c.d_model,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            tokens: c.tokens,
            lambda_train: c.lambda_train,
            seed: c.seed,
        }
    }
}

impl Default for RegistrySettings {
    fn default() -> Self {
        Self::from_config(&RunConfig::default())
    }
}

struct Params {
    store: ParamStore,
    ids: Vec<ParamId>,
    r: StreamRng,
}

impl Params {
    fn new(seed: u64, name: &str) -> Self {
        Self {
            store: ParamStore::new(),
            ids: Vec::new(),
            r: rng::stream(seed, &format!("gradcheck/{name}")),
        }
    }

    fn randn(&mut self, shape: &[usize], std: f64) -> &mut Self {
        let t = Tensor::randn(shape, std, &mut self.r);
        self.tensor(t)
    }

    fn tensor(&mut self, t: Tensor) -> &mut Self {
        let id = self.store.add(format!("p{}", self.ids.len()), ParamGroup::Backbone, t);
        self.ids.push(id);
        self
    }

    fn case(self, name: &'static str, seed: u64, build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> OpCase {
        OpCase {
            name,
            store: self.store,
            ids: self.ids,
            build: Box::new(move |g, ids| {
                let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
                build(g, &vars)
            }),
            max_per_param: None,
            seed,
        }
    }
}

/// Gate parameters spread out so that some gates close.
fn roughen_gates(store: &mut ParamStore, r: &mut StreamRng) {
    for id in store.ids_in(ParamGroup::Gate) {
        let name = store.name(id).to_string();
        let t = store.get_mut(id);
        if name.ends_with(".bias") {
            t.data_mut()[0] = 0.1;
        } else if name.ends_with(".scale") {
            t.data_mut()[0] = 1.0;
        } else {
            for v in t.data_mut() {
                *v = r.gen_range(-0.6..0.6);
            }
        }
    }
}

/// All registered cases, primitives first, in a fixed order.
pub fn registry(s: &RegistrySettings) -> Result<Vec<OpCase>> {
    let seed = s.seed;
    let p = |name: &str| Params::new(seed, name);
    let mut cases = Vec::new();

    let mut b = p("matmul");
    b.randn(&[2, 3, 4], 1.0).randn(&[2, 4, 5], 1.0);
    cases.push(b.case("matmul", seed, |g, v| g.matmul(v[0], v[1])));

    let mut b = p("transpose");
    b.randn(&[2, 3, 4], 1.0);
    cases.push(b.case("transpose", seed, |g, v| g.transpose(v[0])));

    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let mut b = p(name);
        b.randn(&[3, 4], 1.0).randn(&[3, 4], 1.0);
        cases.push(b.case(name, seed, move |g, v| match op {
            0 => g.add(v[0], v[1]),
            1 => g.sub(v[0], v[1]),
            _ => g.mul(v[0], v[1]),
        }));
    }

    let mut b = p("add_row_bias");
    b.randn(&[3, 4], 1.0).randn(&[4], 1.0);
    cases.push(b.case("add_row_bias", seed, |g, v| g.add_row_bias(v[0], v[1])));

    let mut b = p("scale");
    b.randn(&[3, 4], 1.0);
    cases.push(b.case("scale", seed, |g, v| Ok(g.scale(v[0], -0.7))));

    let mut b = p("mul_scalar");
    b.randn(&[3, 4], 1.0).randn(&[1], 1.0);
    cases.push(b.case("mul_scalar", seed, |g, v| g.mul_scalar(v[0], v[1])));

    let mut b = p("add_scalar");
    b.randn(&[3, 4], 1.0).randn(&[1], 1.0);
    cases.push(b.case("add_scalar", seed, |g, v| g.add_scalar(v[0], v[1])));

    let mut b = p("sum");
    b.randn(&[3, 4], 1.0);
    cases.push(b.case("sum", seed, |g, v| Ok(g.sum(v[0]))));

    let mut b = p("mean");
    b.randn(&[3, 4], 1.0);
    cases.push(b.case("mean", seed, |g, v| Ok(g.mean(v[0]))));

    let mut b = p("sigmoid");
    b.randn(&[3, 4], 2.0);
    cases.push(b.case("sigmoid", seed, |g, v| Ok(g.sigmoid(v[0]))));

    let mut b = p("gelu");
    b.randn(&[3, 4], 2.0);
    cases.push(b.case("gelu", seed, |g, v| Ok(g.gelu(v[0]))));

    let mut b = p("softmax_with_bias");
    b.randn(&[4, 3, 5], 2.0).randn(&[2, 3, 5], 2.0);
    cases.push(b.case("softmax_with_bias", seed, |g, v| g.softmax_with_bias(v[0], Some(v[1]))));

    let mut b = p("binarize_ste");
    let probs: Vec<f64> = (0..12).map(|i| 0.05 + 0.9 * ((i * 7) % 12) as f64 / 11.0).collect();
    b.tensor(Tensor::new([3, 4], probs)?);
    cases.push(b.case("binarize_ste", seed, |g, v| Ok(g.binarize_ste(v[0]))));

    // Row 1 has no open gate and exercises the fallback.
    let mut b = p("mask_from_gates");
    let gates = vec![
        0.9, 0.2, 0.7, 0.1, //
        0.3, 0.1, 0.4, 0.2, //
        0.8, 0.95, 0.6, 0.05, //
        0.2, 0.7, 0.3, 0.45, //
        0.99, 0.01, 0.51, 0.49, //
        0.6, 0.6, 0.6, 0.6,
    ];
    b.tensor(Tensor::new([2, 3, 4], gates)?);
    let lambda = s.lambda_train;
    cases.push(b.case("mask_from_gates", seed, move |g, v| Ok(g.mask_from_gates(v[0], lambda)?.0)));

    let mut b = p("conv2d");
    b.randn(&[2 * 5 * 5, 3], 1.0).randn(&[27, 4], 0.5).randn(&[4], 0.5);
    let geom = ConvGeom {
        batch: 2,
        height: 5,
        width: 5,
        in_ch: 3,
        out_ch: 4,
        kernel: 3,
        stride: 2,
        pad: 1,
    };
    cases.push(b.case("conv2d", seed, move |g, v| g.conv2d(v[0], v[1], v[2], geom)));

    let mut b = p("upsample2x");
    b.randn(&[2 * 2 * 3, 3], 1.0);
    cases.push(b.case("upsample2x", seed, |g, v| g.upsample2x(v[0], 2, 2, 3)));

    let mut b = p("concat_cols");
    b.randn(&[3, 2], 1.0).randn(&[3, 4], 1.0);
    cases.push(b.case("concat_cols", seed, |g, v| g.concat_cols(v[0], v[1])));

    let mut b = p("split_heads");
    b.randn(&[2 * 3, 4], 1.0);
    cases.push(b.case("split_heads", seed, |g, v| g.split_heads(v[0], 2, 2)));

    let mut b = p("merge_heads");
    b.randn(&[2 * 2, 3, 2], 1.0);
    cases.push(b.case("merge_heads", seed, |g, v| g.merge_heads(v[0], 2)));

    let mut b = p("gather");
    b.randn(&[5, 3], 1.0);
    cases.push(b.case("gather", seed, |g, v| g.gather(v[0], &[0, 2, 2, 4, 1, 2])));

    let mut b = p("add_group_rows");
    b.randn(&[6, 3], 1.0).randn(&[2, 3], 1.0);
    cases.push(b.case("add_group_rows", seed, |g, v| g.add_group_rows(v[0], v[1])));

    let mut b = p("reshape");
    b.randn(&[3, 4], 1.0);
    cases.push(b.case("reshape", seed, |g, v| g.reshape(v[0], &[2, 6])));

    let mut b = p("nchw_to_rows");
    b.randn(&[2, 3, 2, 2], 1.0);
    cases.push(b.case("nchw_to_rows", seed, |g, v| g.nchw_to_rows(v[0])));

    let mut b = p("rows_to_nchw");
    b.randn(&[8, 3], 1.0);
    cases.push(b.case("rows_to_nchw", seed, |g, v| g.rows_to_nchw(v[0], 2, 2, 2)));

    // ── composites ──

    let mut b = p("mse");
    b.randn(&[3, 4], 1.0).randn(&[3, 4], 1.0);
    cases.push(b.case("mse", seed, |g, v| g.mse(v[0], v[1])));

    let mut b = p("attention");
    b.randn(&[4, 3, 2], 1.0).randn(&[4, 5, 2], 1.0).randn(&[4, 5, 2], 1.0).randn(&[2, 3, 5], 2.0);
    cases.push(b.case("attention", seed, |g, v| Ok(attend(g, v[0], v[1], v[2], Some(v[3]), 0.7)?.0)));

    let (batch, n, t, d) = (2, 4, s.tokens, s.d_model);
    let mut b = p("gate_head");
    let head = GateHead::init(&mut b.store, "gate", d, d, &mut rng::stream(seed, "gradcheck/gate_head/init"));
    roughen_gates(&mut b.store, &mut b.r);
    let head_ids = b.store.ids_in(ParamGroup::Gate);
    b.ids.extend(head_ids);
    b.randn(&[batch * n, d], 1.0).randn(&[batch * t, d], 1.0);
    let k = b.ids.len();
    cases.push(b.case("gate_head", seed, move |g, v| head.probs(g, v[k - 2], v[k - 1], batch)));

    let mut b = p("mask_attn_block");
    let attn = AttnConfig::new(d, s.n_heads, t)?.with_d_ff(s.d_ff);
    let lambdas = Lambdas {
        train: s.lambda_train,
        ..Lambdas::default()
    };
    let mut gr = rng::stream(seed, "gradcheck/mask_attn_block/gate");
    let mut br = rng::stream(seed, "gradcheck/mask_attn_block/init");
    let block = MaskAttnBlock::init(&mut b.store, "blk", attn, lambdas, &mut br, Some(&mut gr));
    roughen_gates(&mut b.store, &mut b.r);
    let all: Vec<ParamId> = b.store.ids().collect();
    b.ids.extend(all);
    b.randn(&[batch * n, d], 1.0).randn(&[batch * t, d], 1.0);
    let k = b.ids.len();
    cases.push(b.case("mask_attn_block", seed, move |g, v| {
        Ok(block.block_forward(g, v[k - 2], v[k - 1], batch, Mode::Train, GateMode::Learned)?.out)
    }));

    let cfg = UNetConfig {
        latent_size: 8,
        c1: 4,
        c2: 6,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        sites: 2,
        tokens: s.tokens,
        vocab: VOCAB.len(),
        gated: true,
    };
    let mut model = ToyUNet::new(cfg, lambdas, seed)?;
    let mut r = rng::stream(seed, "gradcheck/unet");
    roughen_gates(&mut model.store, &mut r);
    let z = model.store.add("z", ParamGroup::Backbone, Tensor::randn([2, LATENT_CHANNELS, 8, 8], 1.0, &mut r));
    let scenes = all_scenes();
    let mut tokens = caption_of(&scenes[3]).padded(s.tokens)?.ids;
    tokens.extend(caption_of(&scenes[scenes.len() - 1]).padded(s.tokens)?.ids);
    let ids: Vec<ParamId> = model.store.ids().collect();
    let store = model.store.clone();
    cases.push(OpCase {
        name: "unet",
        store,
        ids,
        build: Box::new(move |g, _| {
            let zv = g.param(z);
            Ok(model.forward(g, zv, &[3, 150], &tokens, Mode::Train)?.eps)
        }),
        max_per_param: Some(12),
        seed,
    });

    Ok(cases)
}

impl OpCase {
    pub fn num_params(&self) -> usize {
        self.ids.iter().map(|&id| self.store.get(id).numel()).sum()
    }

    /// Runs the check. With `fault`, the case's output is routed through an
    /// identity op whose backward rule is deliberately wrong.
    pub fn check(&mut self, h: f64, fault: bool) -> Result<GradCheckReport> {
        let shape = {
            let mut g = Graph::inference(&self.store);
            let y = (self.build)(&mut g, &self.ids)?;
            g.shape(y).to_vec()
        };
        let weights = Tensor::randn(shape.clone(), 1.0, &mut rng::stream(self.seed, &format!("gradcheck/{}/weights", self.name)));
        let build = &self.build;
        let ids = self.ids.clone();
        let f = |g: &mut Graph| -> Result<Var> {
            let mut y = build(g, &ids)?;
            if fault {
                let value = g.value(y).to_vec();
                y = g.custom(&[y], &shape, value, Box::new(|up, _| vec![up.iter().map(|u| 1.5 * u).collect()]))?;
            }
            let w = g.constant(&weights);
            let p = g.mul(y, w)?;
            Ok(g.sum(p))
        };
        grad_check_store(
            &mut self.store,
            &ids,
            f,
            GradCheckOptions {
                step: h,
                max_per_param: self.max_per_param,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::OP_NAMES;
    use std::collections::HashSet;

    fn small() -> RegistrySettings {
        RegistrySettings {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            tokens: 8,
            lambda_train: 10.0,
            seed: 3,
        }
    }

    #[test]
    fn names_are_unique_and_cover_every_primitive() {
        let cases = registry(&small()).unwrap();
        let names: HashSet<&str> = cases.iter().map(|c| c.name).collect();
        assert_eq!(names.len(), cases.len());
        for op in OP_NAMES {
            assert!(names.contains(op), "{op} has no gradient check");
        }
    }

    #[test]
    fn small_registry_passes_and_fault_is_caught() {
        for mut c in registry(&small()).unwrap() {
            let r = c.check(GRAD_CHECK_STEP, false).unwrap();
            assert!(r.max_rel_error < GRAD_CHECK_TOLERANCE, "{}: {:?}", c.name, r);
            if c.name == "gelu" {
                let bad = c.check(GRAD_CHECK_STEP, true).unwrap();
                assert!(bad.max_rel_error > 0.1, "{bad:?}");
            }
        }
    }
}
