//! AdamW, warmup + cosine learning rate, global-norm clipping, and the
//! per-phase training loop.

use std::f64::consts::PI;

use crate::diffusion::{training_loss, LatentBatch, NoiseSchedule, ToyUNet};
use crate::error::{shape_err, Error, Result};
use crate::params::{Graph, ParamId};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr_peak: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments per parameter tensor plus the shared step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamWState {
    /// Zeroed moments for tensors of the given element counts.
    pub fn new(cfg: AdamWConfig, lens: &[usize]) -> Self {
        Self {
            cfg,
            step: 0,
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One decoupled-weight-decay update with bias-corrected moments:
/// `θ ← θ − lr·(m̂/(√v̂+eps) + wd·θ)`.
pub fn adamw_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamWState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return shape_err("adamw_step", &[params.len()], &[grads.len(), state.m.len()]);
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[k].len() {
            return shape_err("adamw_step", &[p.len()], &[g.len(), state.m[k].len()]);
        }
    }
    if !(lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} is negative")));
    }
    let c = state.cfg;
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - c.beta1.powf(t);
    let bc2 = 1.0 - c.beta2.powf(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..p.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * p[i]);
        }
    }
    Ok(())
}

/// Linear warmup to `lr_peak`, then cosine decay to zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub lr_peak: f64,
}

impl LrSchedule {
    pub fn new(warmup_steps: u64, total_steps: u64, lr_peak: f64) -> Result<Self> {
        if warmup_steps > total_steps || !(lr_peak >= 0.0) {
            return Err(Error::Config(format!(
                "need 0 ≤ warmup ({warmup_steps}) ≤ total ({total_steps}) and lr_peak ≥ 0 ({lr_peak})"
            )));
        }
        Ok(Self {
            warmup_steps,
            total_steps,
            lr_peak,
        })
    }
}

pub fn lr_at(step: u64, s: &LrSchedule) -> Result<f64> {
    if step > s.total_steps {
        return Err(Error::StepOutOfRange {
            step: step as usize,
            len: s.total_steps as usize + 1,
        });
    }
    let (w, total) = (s.warmup_steps, s.total_steps);
    if step < w {
        return Ok(s.lr_peak * step as f64 / w as f64);
    }
    if step == w || total == w {
        return Ok(s.lr_peak);
    }
    let frac = (step - w) as f64 / (total - w) as f64;
    Ok(s.lr_peak * 0.5 * (1.0 + (PI * frac).cos()))
}

/// Global L2 norm over all tensors, accumulated in order.
pub fn global_norm(grads: &[&[f64]]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales so the global norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut [&mut [f64]], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidArgument(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Final step of the phase; steps are numbered `1..=steps`.
    pub steps: u64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub seed: u64,
    pub adamw: AdamWConfig,
    /// Checkpoint callback period in steps; 0 disables it.
    pub checkpoint_every: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        LrSchedule::new(self.warmup_steps, self.steps, self.adamw.lr_peak)?;
        Ok(())
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            lr_peak: self.adamw.lr_peak,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// `step,lr,loss` CSV with a header row.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, r.lr, r.loss));
    }
    out
}

/// Parses [`trace_csv`] output.
pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines();
    if lines.next() != Some("step,lr,loss") {
        return Err(Error::Corrupt("loss trace lacks its header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Corrupt(format!("bad trace row {l:?}"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(TraceRow {
                step: f[0].parse().map_err(|_| bad())?,
                lr: f[1].parse().map_err(|_| bad())?,
                loss: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Where a phase starts: fresh, or from a saved optimizer state.
#[derive(Clone, Debug)]
pub struct Resume {
    pub step: u64,
    pub state: AdamWState,
}

pub struct PhaseOutcome {
    pub trace: Vec<TraceRow>,
    pub state: AdamWState,
}

/// loss → backward → clip → AdamW for steps `start+1..=cfg.steps`,
/// touching only `trainable`. `data(step)` must be deterministic in `step`;
/// `checkpoint(step, model, state)` runs every `cfg.checkpoint_every` steps.
pub fn train_phase<D, C>(
    model: &mut ToyUNet,
    sched: &NoiseSchedule,
    mut data: D,
    cfg: &TrainConfig,
    trainable: &[ParamId],
    resume: Option<Resume>,
    mut checkpoint: C,
) -> Result<PhaseOutcome>
where
    D: FnMut(u64) -> Result<LatentBatch>,
    C: FnMut(u64, &ToyUNet, &AdamWState) -> Result<()>,
{
    cfg.validate()?;
    if trainable.is_empty() && cfg.steps > 0 {
        return Err(Error::Config("no trainable parameters for a phase with steps > 0".into()));
    }
    let lens: Vec<usize> = trainable.iter().map(|&id| model.store.get(id).numel()).collect();
    let (start, mut state) = match resume {
        Some(r) => {
            let fits = r.state.m.len() == lens.len() && r.state.m.iter().zip(&lens).all(|(m, &n)| m.len() == n);
            if !fits || r.step > cfg.steps {
                return Err(Error::Config("resume state does not match this phase".into()));
            }
            (r.step, r.state)
        }
        None => (0, AdamWState::new(cfg.adamw, &lens)),
    };
    state.cfg = cfg.adamw;
    let lr_sched = cfg.lr_schedule();
    model.store.set_trainable(trainable);
    let mut trace = Vec::with_capacity((cfg.steps - start) as usize);

    for step in start + 1..=cfg.steps {
        let lr = lr_at(step, &lr_sched)?;
        let batch = data(step)?;
        let (loss, mut grads) = {
            let mut g = Graph::new(&model.store);
            let l = training_loss(&mut g, &batch, model, sched)?;
            let loss = g.value(l)[0];
            let (pg, _) = g.backward(l)?;
            let grads: Vec<Vec<f64>> = trainable
                .iter()
                .zip(&lens)
                .map(|(&id, &n)| pg.get(id).map_or_else(|| vec![0.0; n], <[f64]>::to_vec))
                .collect();
            (loss, grads)
        };
        let mut gref: Vec<&mut [f64]> = grads.iter_mut().map(Vec::as_mut_slice).collect();
        let norm = clip_grad_norm(&mut gref, cfg.clip_norm)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: "loss", step });
        }
        if !norm.is_finite() {
            return Err(Error::NonFinite { what: "gradient", step });
        }
        let gview: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let mut tensors = model.store.many_mut(trainable);
        let mut pview: Vec<&mut [f64]> = tensors.iter_mut().map(|t| t.data_mut()).collect();
        adamw_step(&mut pview, &gview, &mut state, lr)?;
        trace.push(TraceRow { step, lr, loss });
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            checkpoint(step, model, &state)?;
        }
    }
    Ok(PhaseOutcome { trace, state })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-rolled single-scalar AdamW.
    fn scalar_adamw(theta: f64, g: f64, m: &mut f64, v: &mut f64, t: u64, lr: f64, c: AdamWConfig) -> f64 {
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        let mh = *m / (1.0 - c.beta1.powi(t as i32));
        let vh = *v / (1.0 - c.beta2.powi(t as i32));
        theta - lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * theta)
    }

    #[test]
    fn zero_grad_without_decay_is_identity() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::new(cfg, &[3]);
        let mut p = vec![1.0, -2.0, 3.5];
        adamw_step(&mut [&mut p], &[&[0.0; 3]], &mut st, 1e-3).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn zero_grad_decays_multiplicatively() {
        let cfg = AdamWConfig::default();
        let mut st = AdamWState::new(cfg, &[2]);
        let mut p = vec![1.0, -4.0];
        adamw_step(&mut [&mut p], &[&[0.0; 2]], &mut st, 1e-4).unwrap();
        for (got, orig) in p.iter().zip([1.0, -4.0]) {
            assert!((got - orig * (1.0 - 1e-4 * 0.01)).abs() <= 1e-15 * orig.abs());
        }
    }

    #[test]
    fn first_step_matches_scalar_oracle() {
        let cfg = AdamWConfig::default();
        let mut st = AdamWState::new(cfg, &[1]);
        let mut p = vec![1.0];
        adamw_step(&mut [&mut p], &[&[0.5]], &mut st, 1e-4).unwrap();
        let (mut m, mut v) = (0.0, 0.0);
        let want = scalar_adamw(1.0, 0.5, &mut m, &mut v, 1, 1e-4, cfg);
        assert!((p[0] - want).abs() < 1e-15);
        // first bias-corrected step is lr·(sign(g) + wd·θ) up to eps
        assert!((p[0] - (1.0 - 1e-4 * (0.5 / (0.5 + 1e-8) + 0.01))).abs() < 1e-15);
    }

    #[test]
    fn adamw_rejects_mismatched_shapes() {
        let mut st = AdamWState::new(AdamWConfig::default(), &[2]);
        let mut p = vec![0.0; 3];
        assert!(adamw_step(&mut [&mut p], &[&[0.0; 3]], &mut st, 1e-4).is_err());
    }

    #[test]
    fn lr_schedule_landmarks() {
        let s = LrSchedule::new(100, 2000, 1e-4).unwrap();
        assert_eq!(lr_at(100, &s).unwrap(), 1e-4);
        assert!(lr_at(2000, &s).unwrap().abs() < 1e-18);
        assert!((lr_at(1050, &s).unwrap() - 0.5e-4).abs() < 1e-18);
        assert_eq!(lr_at(0, &s).unwrap(), 0.0);
        assert!((lr_at(50, &s).unwrap() - 0.5e-4).abs() < 1e-18);
        assert!(lr_at(2001, &s).is_err());
        assert!(LrSchedule::new(10, 5, 1e-4).is_err());
    }

    #[test]
    fn lr_without_warmup() {
        let s = LrSchedule::new(0, 10, 2e-3).unwrap();
        assert_eq!(lr_at(0, &s).unwrap(), 2e-3);
        let s = LrSchedule::new(5, 5, 2e-3).unwrap();
        assert_eq!(lr_at(5, &s).unwrap(), 2e-3);
    }

    #[test]
    fn clipping_examples() {
        let mut a = vec![2.0 * 0.6, 0.0];
        let mut b = vec![2.0 * 0.8];
        let pre = clip_grad_norm(&mut [&mut a, &mut b], 1.0).unwrap();
        assert!((pre - 2.0).abs() < 1e-15);
        assert!((a[0] - 0.6).abs() < 1e-15 && (b[0] - 0.8).abs() < 1e-15);
        assert!((global_norm(&[&a, &b]) - 1.0).abs() < 1e-15);

        let mut c = vec![0.3];
        clip_grad_norm(&mut [&mut c], 1.0).unwrap();
        assert_eq!(c, vec![0.3]);
        assert!(clip_grad_norm(&mut [&mut c], 0.0).is_err());
    }

    #[test]
    fn trace_csv_round_trip() {
        let rows = vec![
            TraceRow { step: 1, lr: 1e-6, loss: 0.987654321 },
            TraceRow { step: 2, lr: 2e-6, loss: 1.0 / 3.0 },
        ];
        let text = trace_csv(&rows);
        assert!(text.starts_with("step,lr,loss\n1,0.000001,"));
        assert_eq!(parse_trace_csv(&text).unwrap(), rows);
    }
}
