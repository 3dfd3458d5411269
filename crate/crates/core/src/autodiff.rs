//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its forward value and enough saved state
//! to run its backward rule. Nodes are appended after their operands, so
//! walking the tape backwards is a valid reverse topological order.
//! [`Tape::backward`] consumes the tape; build a fresh one for each step.

use std::fmt;

use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every primitive the tape records, except leaves and [`Tape::custom`].
pub const OP_NAMES: [&str; 26] = [
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "add_row_bias",
    "scale",
    "mul_scalar",
    "add_scalar",
    "sum",
    "mean",
    "sigmoid",
    "gelu",
    "softmax_with_bias",
    "binarize_ste",
    "mask_from_gates",
    "conv2d",
    "upsample2x",
    "concat_cols",
    "split_heads",
    "merge_heads",
    "gather",
    "add_group_rows",
    "reshape",
    "nchw_to_rows",
    "rows_to_nchw",
];

/// Geometry of a square-kernel 2-D convolution over channels-last rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_ch
    }
}

/// Backward rule for [`Tape::custom`]: maps (upstream grad, operand values)
/// to one gradient per operand.
pub type CustomBackward = Box<dyn Fn(&[f64], &[&[f64]]) -> Vec<Vec<f64>>>;

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Transpose { a: Var, batch: usize, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRowBias { x: Var, b: Var },
    Scale { x: Var, c: f64 },
    MulScalar { x: Var, s: Var },
    AddScalar { x: Var, s: Var },
    Sum { x: Var },
    Mean { x: Var },
    Sigmoid { x: Var },
    Gelu { x: Var },
    SoftmaxBias { logits: Var, bias: Option<Var>, share: usize, cols: usize },
    BinarizeSte { p: Var },
    MaskFromGates { gates: Var, lambda: f64, cols: usize, fallback: Vec<bool> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    Upsample2x { x: Var, batch: usize, h: usize, w: usize, c: usize },
    ConcatCols { a: Var, b: Var, rows: usize, ca: usize, cb: usize },
    SplitHeads { x: Var, batch: usize, rows: usize, heads: usize, d_head: usize },
    MergeHeads { x: Var, batch: usize, rows: usize, heads: usize, d_head: usize },
    Gather { table: Var, ids: Vec<usize>, width: usize },
    AddGroupRows { x: Var, v: Var, group: usize, cols: usize },
    Reshape { x: Var },
    NchwToRows { x: Var, dims: [usize; 4] },
    RowsToNchw { x: Var, dims: [usize; 4] },
    Custom { inputs: Vec<Var>, backward: CustomBackward },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddRowBias { .. } => "add_row_bias",
            Op::Scale { .. } => "scale",
            Op::MulScalar { .. } => "mul_scalar",
            Op::AddScalar { .. } => "add_scalar",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Gelu { .. } => "gelu",
            Op::SoftmaxBias { .. } => "softmax_with_bias",
            Op::BinarizeSte { .. } => "binarize_ste",
            Op::MaskFromGates { .. } => "mask_from_gates",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x { .. } => "upsample2x",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::Gather { .. } => "gather",
            Op::AddGroupRows { .. } => "add_group_rows",
            Op::Reshape { .. } => "reshape",
            Op::NchwToRows { .. } => "nchw_to_rows",
            Op::RowsToNchw { .. } => "rows_to_nchw",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// How [`Tape::binarize_ste`] evaluates its forward pass.
///
/// `Record` and `Replay` exist for finite-difference checks: the recorded
/// offsets `hard - p` are frozen, and a replayed forward computes
/// `p + offset`, whose derivative is exactly the straight-through identity.
#[derive(Clone, Debug, Default)]
enum SteProbe {
    #[default]
    Off,
    Record(Vec<Vec<f64>>),
    Replay { offsets: Vec<Vec<f64>>, next: usize },
}

/// Upper clamp for probabilities so the sigmoid stays strictly below one.
pub const PROB_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

/// Gate threshold: a gate is open iff its probability is strictly above it.
pub const GATE_THRESHOLD: f64 = 0.5;

/// Reverse-mode recording of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ste: SteProbe,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, PROB_CEIL)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are valid")
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Records `t` as a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    // ── straight-through probe ──────────────────────────────────────────

    pub fn record_ste_offsets(&mut self) {
        self.ste = SteProbe::Record(Vec::new());
    }

    pub fn take_ste_offsets(&mut self) -> Vec<Vec<f64>> {
        match std::mem::take(&mut self.ste) {
            SteProbe::Record(v) => v,
            _ => Vec::new(),
        }
    }

    pub fn replay_ste_offsets(&mut self, offsets: Vec<Vec<f64>>) {
        self.ste = SteProbe::Replay { offsets, next: 0 };
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// Matrix product of `[m×k]·[k×n]`, or batched `[g×m×k]·[g×k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([g, m, k], [g2, k2, n]) if g == g2 && k == k2 => (*g, *m, *k, *n),
            _ => return shape_err("matmul", &sa, &sb),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for g in 0..batch {
                kernels::gemm(
                    &av[g * m * k..(g + 1) * m * k],
                    &bv[g * k * n..(g + 1) * k * n],
                    &mut out[g * m * n..(g + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, rg, Op::MatMul { a, b, batch, m, k, n }))
    }

    /// Swaps the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (batch, rows, cols) = match s.as_slice() {
            [r, c] => (1, *r, *c),
            [g, r, c] => (*g, *r, *c),
            _ => return shape_err("transpose", &s, &[]),
        };
        let av = self.value(a);
        let mut out = Vec::with_capacity(av.len());
        for g in 0..batch {
            out.extend(kernels::transpose(&av[g * rows * cols..(g + 1) * rows * cols], rows, cols));
        }
        let mut shape = s.clone();
        let nd = shape.len();
        shape.swap(nd - 1, nd - 2);
        let rg = self.rg(a);
        Ok(self.push(shape, out, rg, Op::Transpose { a, batch, rows, cols }))
    }

    /// `x·w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row_bias(xw, b)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>, bool)> {
        if self.shape(a) != self.shape(b) {
            return shape_err(name, self.shape(a), self.shape(b));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((self.shape(a).to_vec(), out, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(s, v, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(s, v, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(s, v, rg, Op::Mul { a, b }))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        let cols = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != cols {
            return shape_err("add_row_bias", &sx, &sb);
        }
        let bv = self.value(b).to_vec();
        let out: Vec<f64> = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(&bv).map(|(r, b)| r + b))
            .collect();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(sx, out, rg, Op::AddRowBias { x, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let (s, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(s, out, rg, Op::Scale { x, c })
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return shape_err("mul_scalar", self.shape(x), self.shape(s));
        }
        let sv = self.value(s)[0];
        let out = self.value(x).iter().map(|v| v * sv).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x) || self.rg(s));
        Ok(self.push(shape, out, rg, Op::MulScalar { x, s }))
    }

    /// Adds the single element of `s` to every element of `x`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return shape_err("add_scalar", self.shape(x), self.shape(s));
        }
        let sv = self.value(s)[0];
        let out = self.value(x).iter().map(|v| v + sv).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x) || self.rg(s));
        Ok(self.push(shape, out, rg, Op::AddScalar { x, s }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![s], rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(vec![], vec![s], rg, Op::Mean { x })
    }

    /// Mean squared error between two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid_scalar(v)).collect();
        let (s, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(s, out, rg, Op::Sigmoid { x })
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu_scalar(v)).collect();
        let (s, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(s, out, rg, Op::Gelu { x })
    }

    // ── attention pieces ────────────────────────────────────────────────

    /// Row-wise softmax of `logits + bias` with per-row max subtraction.
    ///
    /// `logits` is `[r×c]` or `[g×r×c]`. `bias` has the same trailing shape
    /// and a leading size dividing `g`; consecutive runs of `g / g_bias`
    /// logit groups share one bias group (heads sharing a sample's mask).
    pub fn softmax_with_bias(&mut self, logits: Var, bias: Option<Var>) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        let (groups, rows, cols) = match sl.as_slice() {
            [r, c] => (1, *r, *c),
            [g, r, c] => (*g, *r, *c),
            _ => return shape_err("softmax_with_bias", &sl, &[]),
        };
        let share = match bias {
            None => 1,
            Some(b) => {
                let sb = self.shape(b).to_vec();
                let bgroups = match (sl.len(), sb.as_slice()) {
                    (2, [r, c]) if *r == rows && *c == cols => 1,
                    (3, [g, r, c]) if *r == rows && *c == cols && *g > 0 && groups % *g == 0 => *g,
                    _ => return shape_err("softmax_with_bias", &sl, &sb),
                };
                groups / bgroups
            }
        };
        let lv = self.value(logits);
        let bv = bias.map(|b| self.value(b));
        let mut out = vec![0.0; lv.len()];
        let plane = rows * cols;
        let mut z = vec![0.0; cols];
        for g in 0..groups {
            for r in 0..rows {
                let off = g * plane + r * cols;
                let row = &lv[off..off + cols];
                match bv {
                    Some(bv) => {
                        let boff = (g / share) * plane + r * cols;
                        for (j, zj) in z.iter_mut().enumerate() {
                            *zj = row[j] + bv[boff + j];
                        }
                    }
                    None => z.copy_from_slice(row),
                }
                let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let orow = &mut out[off..off + cols];
                let mut s = 0.0;
                for (o, &zj) in orow.iter_mut().zip(&z) {
                    *o = (zj - mx).exp();
                    s += *o;
                }
                for o in orow.iter_mut() {
                    *o /= s;
                }
            }
        }
        let rg = self.rg(logits) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(sl, out, rg, Op::SoftmaxBias { logits, bias, share, cols }))
    }

    /// Hard threshold `p > 0.5` whose backward pass is the identity.
    pub fn binarize_ste(&mut self, p: Var) -> Var {
        let pv = &self.nodes[p.0].value;
        let out: Vec<f64> = match &mut self.ste {
            SteProbe::Replay { offsets, next } => {
                let off = &offsets[*next];
                *next += 1;
                assert_eq!(off.len(), pv.len(), "replayed STE offsets do not match the graph");
                pv.iter().zip(off).map(|(p, o)| p + o).collect()
            }
            probe => {
                let hard: Vec<f64> = pv
                    .iter()
                    .map(|&v| if v > GATE_THRESHOLD { 1.0 } else { 0.0 })
                    .collect();
                if let SteProbe::Record(rec) = probe {
                    rec.push(hard.iter().zip(pv).map(|(h, p)| h - p).collect());
                }
                hard
            }
        };
        let (s, rg) = (self.shape(p).to_vec(), self.rg(p));
        self.push(s, out, rg, Op::BinarizeSte { p })
    }

    /// Additive mask `λ·(g - 1)` over gates `[..×T]`, one row per location.
    ///
    /// A row with no open gate (`g > 0.5`) is rewritten to all zeros and
    /// does not propagate gradient. Returns the mask and the rescued row count.
    pub fn mask_from_gates(&mut self, gates: Var, lambda: f64) -> Result<(Var, usize)> {
        let s = self.shape(gates).to_vec();
        let cols = match s.last() {
            Some(&c) if s.len() >= 2 => c,
            _ => return shape_err("mask_from_gates", &s, &[]),
        };
        let gv = self.value(gates);
        let mut out = Vec::with_capacity(gv.len());
        let mut fallback = Vec::with_capacity(gv.len() / cols);
        for row in gv.chunks(cols) {
            let open = row.iter().any(|&g| g > GATE_THRESHOLD);
            fallback.push(!open);
            if open {
                out.extend(row.iter().map(|g| lambda * (g - 1.0)));
            } else {
                out.extend(std::iter::repeat(0.0).take(cols));
            }
        }
        let rescued = fallback.iter().filter(|&&f| f).count();
        let rg = self.rg(gates);
        let v = self.push(s, out, rg, Op::MaskFromGates { gates, lambda, cols, fallback });
        Ok((v, rescued))
    }

    /// `[b·n, h·d] → [b·h, n, d]`: splits channels into heads.
    pub fn split_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (rows_total, width) = match s.as_slice() {
            [r, c] => (*r, *c),
            _ => return shape_err("split_heads", &s, &[batch, heads]),
        };
        if batch == 0 || heads == 0 || rows_total % batch != 0 || width % heads != 0 {
            return shape_err("split_heads", &s, &[batch, heads]);
        }
        let (rows, d_head) = (rows_total / batch, width / heads);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for n in 0..rows {
                let src = &xv[(b * rows + n) * width..(b * rows + n + 1) * width];
                for h in 0..heads {
                    let dst = ((b * heads + h) * rows + n) * d_head;
                    out[dst..dst + d_head].copy_from_slice(&src[h * d_head..(h + 1) * d_head]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![batch * heads, rows, d_head], out, rg, Op::SplitHeads { x, batch, rows, heads, d_head }))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (groups, rows, d_head) = match s.as_slice() {
            [g, r, d] if batch > 0 && g % batch == 0 => (*g, *r, *d),
            _ => return shape_err("merge_heads", &s, &[batch]),
        };
        let heads = groups / batch;
        let width = heads * d_head;
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for h in 0..heads {
                for n in 0..rows {
                    let src = ((b * heads + h) * rows + n) * d_head;
                    let dst = (b * rows + n) * width + h * d_head;
                    out[dst..dst + d_head].copy_from_slice(&xv[src..src + d_head]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![batch * rows, width], out, rg, Op::MergeHeads { x, batch, rows, heads, d_head }))
    }

    // ── convolutional plumbing ──────────────────────────────────────────

    /// Convolution over channels-last rows `[b·h·w, c_in]` with weights
    /// `[k·k·c_in, c_out]` (patch order: ky, kx, channel) and bias `[c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let g = geom;
        let want_x = [g.batch * g.height * g.width, g.in_ch];
        let want_w = [g.patch_len(), g.out_ch];
        if self.shape(x) != want_x {
            return shape_err("conv2d", self.shape(x), &want_x);
        }
        if self.shape(w) != want_w || self.shape(b) != [g.out_ch] {
            return shape_err("conv2d", self.shape(w), &want_w);
        }
        if g.kernel == 0 || g.stride == 0 || g.height + 2 * g.pad < g.kernel || g.width + 2 * g.pad < g.kernel {
            return shape_err("conv2d", &want_x, &[g.kernel, g.stride, g.pad]);
        }
        let (ho, wo, plen) = (g.out_height(), g.out_width(), g.patch_len());
        let rows = g.batch * ho * wo;
        let cols = im2col(self.value(x), &g);
        let mut out = vec![0.0; rows * g.out_ch];
        kernels::gemm(&cols, self.value(w), &mut out, rows, plen, g.out_ch);
        let bv = self.value(b);
        for row in out.chunks_mut(g.out_ch) {
            add_into(row, bv);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(vec![rows, g.out_ch], out, rg, Op::Conv2d { x, w, b, geom: g, cols }))
    }

    /// Nearest-neighbour 2× upsampling of channels-last rows.
    pub fn upsample2x(&mut self, x: Var, batch: usize, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = match s.as_slice() {
            [r, c] if *r == batch * h * w => *c,
            _ => return shape_err("upsample2x", &s, &[batch * h * w]),
        };
        let xv = self.value(x);
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; batch * h2 * w2 * c];
        for b in 0..batch {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let src = ((b * h + y / 2) * w + xx / 2) * c;
                    let dst = ((b * h2 + y) * w2 + xx) * c;
                    out[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![batch * h2 * w2, c], out, rg, Op::Upsample2x { x, batch, h, w, c }))
    }

    /// `[r×ca] ‖ [r×cb] → [r×(ca+cb)]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (rows, ca, cb) = match (sa.as_slice(), sb.as_slice()) {
            ([r, ca], [r2, cb]) if r == r2 => (*r, *ca, *cb),
            _ => return shape_err("concat_cols", &sa, &sb),
        };
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![rows, ca + cb], out, rg, Op::ConcatCols { a, b, rows, ca, cb }))
    }

    /// Row lookup `table[ids[i]]`, i.e. an embedding.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        let (vocab, width) = match s.as_slice() {
            [v, d] => (*v, *d),
            _ => return shape_err("gather", &s, &[]),
        };
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        if ids.is_empty() {
            return shape_err("gather", &s, &[0]);
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            out.extend_from_slice(&tv[id * width..(id + 1) * width]);
        }
        let rg = self.rg(table);
        Ok(self.push(vec![ids.len(), width], out, rg, Op::Gather { table, ids: ids.to_vec(), width }))
    }

    /// Adds row `v[g]` to each of the `group` consecutive rows of block `g`.
    pub fn add_group_rows(&mut self, x: Var, v: Var) -> Result<Var> {
        let (sx, sv) = (self.shape(x).to_vec(), self.shape(v).to_vec());
        let (group, cols) = match (sx.as_slice(), sv.as_slice()) {
            ([r, c], [g, c2]) if c == c2 && *g > 0 && r % g == 0 => (r / g, *c),
            _ => return shape_err("add_group_rows", &sx, &sv),
        };
        let vv = self.value(v);
        let out: Vec<f64> = self
            .value(x)
            .chunks(cols)
            .enumerate()
            .flat_map(|(r, row)| {
                let vr = &vv[(r / group) * cols..(r / group + 1) * cols];
                row.iter().zip(vr).map(|(a, b)| a + b)
            })
            .collect();
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(sx, out, rg, Op::AddGroupRows { x, v, group, cols }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return shape_err("reshape", self.shape(x), shape);
        }
        let (v, rg) = (self.value(x).to_vec(), self.rg(x));
        Ok(self.push(shape.to_vec(), v, rg, Op::Reshape { x }))
    }

    /// `[b, c, h, w] → [b·h·w, c]`.
    pub fn nchw_to_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let dims: [usize; 4] = s.as_slice().try_into().or_else(|_| shape_err("nchw_to_rows", &s, &[]))?;
        let [b, c, h, w] = dims;
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                for p in 0..h * w {
                    out[(bi * h * w + p) * c + ci] = xv[(bi * c + ci) * h * w + p];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![b * h * w, c], out, rg, Op::NchwToRows { x, dims }))
    }

    /// `[b·h·w, c] → [b, c, h, w]`.
    pub fn rows_to_nchw(&mut self, x: Var, b: usize, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = match s.as_slice() {
            [r, c] if *r == b * h * w => *c,
            _ => return shape_err("rows_to_nchw", &s, &[b, h, w]),
        };
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                for p in 0..h * w {
                    out[(bi * c + ci) * h * w + p] = xv[(bi * h * w + p) * c + ci];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![b, c, h, w], out, rg, Op::RowsToNchw { x, dims: [b, c, h, w] }))
    }

    /// Op with a caller-supplied forward value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], shape: &[usize], value: Vec<f64>, backward: CustomBackward) -> Result<Var> {
        if numel(shape) != value.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                len: value.len(),
            });
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(shape.to_vec(), value, rg, Op::Custom { inputs: inputs.to_vec(), backward }))
    }

    // ── reverse pass ────────────────────────────────────────────────────

    /// Propagates d`loss`/d· to every node that requires a gradient.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let Tape { mut nodes, .. } = self;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let op = std::mem::replace(&mut nodes[i].op, Op::Leaf);
            backprop(&nodes, &mut grads, i, &op, &gout);
            nodes[i].op = op;
            grads[i] = Some(gout);
        }
        let shapes = nodes.into_iter().map(|n| n.shape).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Result of [`Tape::backward`]: gradients for every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Gradient as a tensor, zero-filled when the node received none.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        let data = self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; numel(&shape)]);
        Tensor::new(shape, data).expect("gradient shapes mirror node shapes")
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo, plen) = (g.out_height(), g.out_width(), g.patch_len());
    let mut cols = vec![0.0; g.batch * ho * wo * plen];
    for b in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * plen;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = ((b * g.height + iy as usize) * g.width + ix as usize) * g.in_ch;
                        let dst = row + (ky * g.kernel + kx) * g.in_ch;
                        cols[dst..dst + g.in_ch].copy_from_slice(&x[src..src + g.in_ch]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo, plen) = (g.out_height(), g.out_width(), g.patch_len());
    for b in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * plen;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = ((b * g.height + iy as usize) * g.width + ix as usize) * g.in_ch;
                        let src = row + (ky * g.kernel + kx) * g.in_ch;
                        add_into(&mut dx[dst..dst + g.in_ch], &dcols[src..src + g.in_ch]);
                    }
                }
            }
        }
    }
}

/// Gradient buffer for `v`, allocated on first use; `None` if `v` is frozen.
fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, op: &Op, gout: &[f64]) {
    let val = |v: Var| nodes[v.0].value.as_slice();
    let out = nodes[i].value.as_slice();
    match *op {
        Op::Leaf => {}
        Op::MatMul { a, b, batch, m, k, n } => {
            if let Some(ga) = slot(nodes, grads, a) {
                let bv = val(b);
                for g in 0..batch {
                    kernels::gemm_nt(
                        &gout[g * m * n..(g + 1) * m * n],
                        &bv[g * k * n..(g + 1) * k * n],
                        &mut ga[g * m * k..(g + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                let av = val(a);
                for g in 0..batch {
                    kernels::gemm_tn(
                        &av[g * m * k..(g + 1) * m * k],
                        &gout[g * m * n..(g + 1) * m * n],
                        &mut gb[g * k * n..(g + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        Op::Transpose { a, batch, rows, cols } => {
            if let Some(ga) = slot(nodes, grads, a) {
                let plane = rows * cols;
                for g in 0..batch {
                    let t = kernels::transpose(&gout[g * plane..(g + 1) * plane], cols, rows);
                    add_into(&mut ga[g * plane..(g + 1) * plane], &t);
                }
            }
        }
        Op::Add { a, b } => {
            if let Some(ga) = slot(nodes, grads, a) {
                add_into(ga, gout);
            }
            if let Some(gb) = slot(nodes, grads, b) {
                add_into(gb, gout);
            }
        }
        Op::Sub { a, b } => {
            if let Some(ga) = slot(nodes, grads, a) {
                add_into(ga, gout);
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for (d, s) in gb.iter_mut().zip(gout) {
                    *d -= s;
                }
            }
        }
        Op::Mul { a, b } => {
            if a == b {
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((d, s), x) in ga.iter_mut().zip(gout).zip(val(a)) {
                        *d += 2.0 * x * s;
                    }
                }
                return;
            }
            if let Some(ga) = slot(nodes, grads, a) {
                for ((d, s), y) in ga.iter_mut().zip(gout).zip(val(b)) {
                    *d += s * y;
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for ((d, s), x) in gb.iter_mut().zip(gout).zip(val(a)) {
                    *d += s * x;
                }
            }
        }
        Op::AddRowBias { x, b } => {
            if let Some(gx) = slot(nodes, grads, x) {
                add_into(gx, gout);
            }
            if let Some(gb) = slot(nodes, grads, b) {
                let cols = gb.len();
                for row in gout.chunks(cols) {
                    add_into(gb, row);
                }
            }
        }
        Op::Scale { x, c } => {
            if let Some(gx) = slot(nodes, grads, x) {
                for (d, s) in gx.iter_mut().zip(gout) {
                    *d += c * s;
                }
            }
        }
        Op::MulScalar { x, s } => {
            let sv = val(s)[0];
            if let Some(gs) = slot(nodes, grads, s) {
                gs[0] += gout.iter().zip(val(x)).map(|(g, x)| g * x).sum::<f64>();
            }
            if let Some(gx) = slot(nodes, grads, x) {
                for (d, g) in gx.iter_mut().zip(gout) {
                    *d += g * sv;
                }
            }
        }
        Op::AddScalar { x, s } => {
            if let Some(gs) = slot(nodes, grads, s) {
                gs[0] += gout.iter().sum::<f64>();
            }
            if let Some(gx) = slot(nodes, grads, x) {
                add_into(gx, gout);
            }
        }
        Op::Sum { x } => {
            if let Some(gx) = slot(nodes, grads, x) {
                for d in gx.iter_mut() {
                    *d += gout[0];
                }
            }
        }
        Op::Mean { x } => {
            if let Some(gx) = slot(nodes, grads, x) {
                let s = gout[0] / gx.len() as f64;
                for d in gx.iter_mut() {
                    *d += s;
                }
            }
        }
        Op::Sigmoid { x } => {
            if let Some(gx) = slot(nodes, grads, x) {
                for ((d, g), y) in gx.iter_mut().zip(gout).zip(out) {
                    *d += g * y * (1.0 - y);
                }
            }
        }
        Op::Gelu { x } => {
            if let Some(gx) = slot(nodes, grads, x) {
                for ((d, g), &xv) in gx.iter_mut().zip(gout).zip(val(x)) {
                    *d += g * (normal_cdf(xv) + xv * normal_pdf(xv));
                }
            }
        }
        Op::SoftmaxBias { logits, bias, share, cols } => {
            // dz = y ⊙ (dy − ⟨dy, y⟩) per row
            let mut dz = vec![0.0; out.len()];
            for ((dzr, yr), gr) in dz.chunks_mut(cols).zip(out.chunks(cols)).zip(gout.chunks(cols)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for ((d, y), g) in dzr.iter_mut().zip(yr).zip(gr) {
                    *d = y * (g - dot);
                }
            }
            if let Some(gl) = slot(nodes, grads, logits) {
                add_into(gl, &dz);
            }
            if let Some(b) = bias {
                if let Some(gb) = slot(nodes, grads, b) {
                    let ls = &nodes[logits.0].shape;
                    let plane = ls[ls.len() - 2] * ls[ls.len() - 1];
                    for (g, chunk) in dz.chunks(plane).enumerate() {
                        let off = (g / share) * plane;
                        add_into(&mut gb[off..off + plane], chunk);
                    }
                }
            }
        }
        Op::BinarizeSte { p } => {
            if let Some(gp) = slot(nodes, grads, p) {
                add_into(gp, gout);
            }
        }
        Op::MaskFromGates { gates, lambda, cols, ref fallback } => {
            if let Some(gg) = slot(nodes, grads, gates) {
                for ((dr, gr), &fb) in gg.chunks_mut(cols).zip(gout.chunks(cols)).zip(fallback) {
                    if fb {
                        continue;
                    }
                    for (d, g) in dr.iter_mut().zip(gr) {
                        *d += lambda * g;
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, geom, ref cols } => {
            let rows = geom.batch * geom.out_height() * geom.out_width();
            let plen = geom.patch_len();
            if let Some(gw) = slot(nodes, grads, w) {
                kernels::gemm_tn(cols, gout, gw, rows, plen, geom.out_ch);
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for row in gout.chunks(geom.out_ch) {
                    add_into(gb, row);
                }
            }
            if nodes[x.0].requires_grad {
                let mut dcols = vec![0.0; rows * plen];
                kernels::gemm_nt(gout, val(w), &mut dcols, rows, geom.out_ch, plen);
                if let Some(gx) = slot(nodes, grads, x) {
                    col2im(&dcols, &geom, gx);
                }
            }
        }
        Op::Upsample2x { x, batch, h, w, c } => {
            if let Some(gx) = slot(nodes, grads, x) {
                let (h2, w2) = (2 * h, 2 * w);
                for b in 0..batch {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            let dst = ((b * h + y / 2) * w + xx / 2) * c;
                            let src = ((b * h2 + y) * w2 + xx) * c;
                            add_into(&mut gx[dst..dst + c], &gout[src..src + c]);
                        }
                    }
                }
            }
        }
        Op::ConcatCols { a, b, rows, ca, cb } => {
            let w = ca + cb;
            if let Some(ga) = slot(nodes, grads, a) {
                for r in 0..rows {
                    add_into(&mut ga[r * ca..(r + 1) * ca], &gout[r * w..r * w + ca]);
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for r in 0..rows {
                    add_into(&mut gb[r * cb..(r + 1) * cb], &gout[r * w + ca..(r + 1) * w]);
                }
            }
        }
        Op::SplitHeads { x, batch, rows, heads, d_head } => {
            if let Some(gx) = slot(nodes, grads, x) {
                let width = heads * d_head;
                for b in 0..batch {
                    for n in 0..rows {
                        for h in 0..heads {
                            let src = ((b * heads + h) * rows + n) * d_head;
                            let dst = (b * rows + n) * width + h * d_head;
                            add_into(&mut gx[dst..dst + d_head], &gout[src..src + d_head]);
                        }
                    }
                }
            }
        }
        Op::MergeHeads { x, batch, rows, heads, d_head } => {
            if let Some(gx) = slot(nodes, grads, x) {
                let width = heads * d_head;
                for b in 0..batch {
                    for h in 0..heads {
                        for n in 0..rows {
                            let dst = ((b * heads + h) * rows + n) * d_head;
                            let src = (b * rows + n) * width + h * d_head;
                            add_into(&mut gx[dst..dst + d_head], &gout[src..src + d_head]);
                        }
                    }
                }
            }
        }
        Op::Gather { table, ref ids, width } => {
            if let Some(gt) = slot(nodes, grads, table) {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * width..(id + 1) * width], &gout[r * width..(r + 1) * width]);
                }
            }
        }
        Op::AddGroupRows { x, v, group, cols } => {
            if let Some(gx) = slot(nodes, grads, x) {
                add_into(gx, gout);
            }
            if let Some(gv) = slot(nodes, grads, v) {
                for (r, row) in gout.chunks(cols).enumerate() {
                    let g = r / group;
                    add_into(&mut gv[g * cols..(g + 1) * cols], row);
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(gx) = slot(nodes, grads, x) {
                add_into(gx, gout);
            }
        }
        Op::NchwToRows { x, dims: [b, c, h, w] } => {
            if let Some(gx) = slot(nodes, grads, x) {
                for bi in 0..b {
                    for ci in 0..c {
                        for p in 0..h * w {
                            gx[(bi * c + ci) * h * w + p] += gout[(bi * h * w + p) * c + ci];
                        }
                    }
                }
            }
        }
        Op::RowsToNchw { x, dims: [b, c, h, w] } => {
            if let Some(gx) = slot(nodes, grads, x) {
                for bi in 0..b {
                    for ci in 0..c {
                        for p in 0..h * w {
                            gx[(bi * h * w + p) * c + ci] += gout[(bi * c + ci) * h * w + p];
                        }
                    }
                }
            }
        }
        Op::Custom { ref inputs, ref backward } => {
            let vals: Vec<&[f64]> = inputs.iter().map(|&v| val(v)).collect();
            let gs = backward(gout, &vals);
            for (&v, g) in inputs.iter().zip(gs) {
                if let Some(gv) = slot(nodes, grads, v) {
                    add_into(gv, &g);
                }
            }
        }
    }
}
