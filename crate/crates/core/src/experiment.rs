//! End-to-end experiment steps shared by the command-line tool and the
//! acceptance suite: model construction, the two training phases,
//! checkpoint conversion, sampling grids, evaluation and gate inspection.

use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::{Checkpoint, Moments, OptimizerSnapshot};
use crate::config::{Phase, RunConfig};
use crate::data::DataStream;
use crate::diffusion::{q_sample, sample, split_batch, NoiseSchedule, Sampler, ToyUNet};
use crate::error::{Error, Result};
use crate::gate::Mode;
use crate::optim::{train_phase, AdamWState, PhaseOutcome, Resume};
use crate::params::{Graph, ParamGroup};
use crate::rng::{self, splitmix64};
use crate::scenes::{
    caption_of, compliance_score, holdout_split, image_to_latent, latent_to_image, render_scene, ComplianceReport, SceneSpec,
};
use crate::tensor::Tensor;

/// Prompts sampled together in one batch.
pub const SAMPLE_CHUNK: usize = 10;

pub fn phase_group(phase: Phase) -> ParamGroup {
    match phase {
        Phase::Backbone => ParamGroup::Backbone,
        Phase::Gates => ParamGroup::Gate,
    }
}

/// Fresh model for `cfg`. Gated and ungated models built from one config
/// share their backbone weights bitwise.
pub fn new_model(cfg: &RunConfig, gated: bool) -> Result<ToyUNet> {
    ToyUNet::new(cfg.unet(gated), cfg.lambdas(), cfg.seed)
}

pub fn is_gated(ck: &Checkpoint) -> bool {
    ck.params.iter().any(|(name, _)| name.contains(".gate."))
}

/// Rebuilds the model a checkpoint was written from, with the config it
/// echoes.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(RunConfig, ToyUNet)> {
    let cfg = RunConfig::parse(&ck.config)?;
    let mut model = new_model(&cfg, is_gated(ck))?;
    model.load_params(ck.params.iter().map(|(n, t)| (n.as_str(), t)))?;
    if model.store.len() != ck.params.len() {
        return Err(Error::Corrupt(format!(
            "checkpoint holds {} parameters but the model has {}",
            ck.params.len(),
            model.store.len()
        )));
    }
    Ok((cfg, model))
}

/// Gated model whose backbone comes from a backbone-phase checkpoint and
/// whose gate heads are freshly initialised.
pub fn gated_from_backbone(cfg: &RunConfig, backbone: &Checkpoint) -> Result<ToyUNet> {
    if backbone.phase != Phase::Backbone {
        return Err(Error::Config(format!(
            "gate training needs a backbone checkpoint, got a {} checkpoint",
            backbone.phase.name()
        )));
    }
    if is_gated(backbone) {
        return Err(Error::Config("backbone checkpoint unexpectedly contains gate parameters".into()));
    }
    let mut model = new_model(cfg, true)?;
    model.load_params(backbone.params.iter().map(|(n, t)| (n.as_str(), t)))?;
    Ok(model)
}

pub fn to_checkpoint(cfg: &RunConfig, phase: Phase, step: u64, model: &ToyUNet, state: Option<&AdamWState>) -> Checkpoint {
    let params = model.store.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
    let optimizer = state.map(|s| {
        let ids = model.store.ids_in(phase_group(phase));
        OptimizerSnapshot {
            step: s.step,
            moments: ids
                .iter()
                .zip(s.m.iter().zip(&s.v))
                .map(|(&id, (m, v))| Moments {
                    name: model.store.name(id).to_string(),
                    m: m.clone(),
                    v: v.clone(),
                })
                .collect(),
        }
    });
    Checkpoint {
        config: cfg.to_text(),
        phase,
        step,
        params,
        optimizer,
    }
}

/// Optimizer position stored in `ck`, ordered like the phase's trainable
/// parameters of `model`.
pub fn resume_state(cfg: &RunConfig, ck: &Checkpoint, model: &ToyUNet) -> Result<Resume> {
    let snap = ck
        .optimizer
        .as_ref()
        .ok_or_else(|| Error::Config("checkpoint carries no optimizer state to resume from".into()))?;
    let ids = model.store.ids_in(phase_group(ck.phase));
    if snap.moments.len() != ids.len() {
        return Err(Error::Config("optimizer state does not match the trainable parameters".into()));
    }
    let mut m = Vec::with_capacity(ids.len());
    let mut v = Vec::with_capacity(ids.len());
    for (&id, mo) in ids.iter().zip(&snap.moments) {
        let n = model.store.get(id).numel();
        if mo.name != model.store.name(id) || mo.m.len() != n || mo.v.len() != n {
            return Err(Error::Config(format!("optimizer state for {:?} does not match the model", mo.name)));
        }
        m.push(mo.m.clone());
        v.push(mo.v.clone());
    }
    Ok(Resume {
        step: ck.step,
        state: AdamWState {
            cfg: cfg.train_config(ck.phase).adamw,
            step: snap.step,
            m,
            v,
        },
    })
}

/// Training pool stream for a phase.
pub fn phase_data(cfg: &RunConfig, phase: Phase) -> Result<DataStream> {
    let (train, _) = holdout_split(cfg.holdout);
    DataStream::new(
        train,
        cfg.latent_size,
        cfg.tokens,
        cfg.batch_size,
        cfg.t_steps,
        cfg.seed,
        &format!("train/{}", phase.name()),
    )
}

/// Runs one phase on `model`, updating only the phase's parameter group.
/// `on_checkpoint` receives a full checkpoint every `checkpoint_every` steps.
pub fn run_phase<C>(cfg: &RunConfig, phase: Phase, model: &mut ToyUNet, resume: Option<Resume>, mut on_checkpoint: C) -> Result<PhaseOutcome>
where
    C: FnMut(&Checkpoint) -> Result<()>,
{
    if phase == Phase::Gates && model.blocks.iter().all(|b| b.gate_head.is_none()) {
        return Err(Error::Config("gate phase needs a gated model".into()));
    }
    let sched = cfg.schedule()?;
    let mut data = phase_data(cfg, phase)?;
    let trainable = model.store.ids_in(phase_group(phase));
    train_phase(
        model,
        &sched,
        |step| data.batch_at(step),
        &cfg.train_config(phase),
        &trainable,
        resume,
        |step, m, st| on_checkpoint(&to_checkpoint(cfg, phase, step, m, Some(st))),
    )
}

/// Held-out prompts used for evaluation, first `n` of them.
pub fn eval_scenes(cfg: &RunConfig, n: usize) -> Result<Vec<SceneSpec>> {
    let (_, held) = holdout_split(cfg.holdout);
    if n == 0 || n > held.len() {
        return Err(Error::Config(format!("n must be in 1..={} (the held-out set size)", held.len())));
    }
    Ok(held[..n].to_vec())
}

/// Sampling seed of prompt `index` under run seed `seed`.
pub fn prompt_seed(seed: u64, index: usize) -> u64 {
    splitmix64(splitmix64(seed) ^ index as u64)
}

pub fn prompt_text(s: &SceneSpec) -> String {
    caption_of(s).words().into_iter().filter(|w| *w != "<pad>").collect::<Vec<_>>().join(" ")
}

/// Images in `[0, 1]`, one per scene. Chunking does not change results
/// because each sample draws from its own seed.
pub fn generate(model: &ToyUNet, sched: &NoiseSchedule, scenes: &[SceneSpec], seeds: &[u64], sampler: Sampler) -> Result<Vec<Tensor>> {
    if scenes.len() != seeds.len() {
        return Err(Error::InvalidArgument("one seed per scene is required".into()));
    }
    let mut out = Vec::with_capacity(scenes.len());
    for (sc, sd) in scenes.chunks(SAMPLE_CHUNK).zip(seeds.chunks(SAMPLE_CHUNK)) {
        let mut tokens = Vec::with_capacity(sc.len() * model.cfg.tokens);
        for s in sc {
            tokens.extend(caption_of(s).padded(model.cfg.tokens)?.ids);
        }
        let z = sample(model, &model.store, sched, &tokens, sd, model.cfg.latent_size, sampler)?;
        out.extend(split_batch(&z).iter().map(latent_to_image));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub index: usize,
    pub seed: u64,
    pub prompt: String,
    pub report: ComplianceReport,
}

/// Scores every scene. Without a model, the ground-truth render is scored,
/// which exercises the metric alone.
pub fn evaluate(model: Option<&ToyUNet>, cfg: &RunConfig, scenes: &[SceneSpec], seed: u64) -> Result<Vec<EvalRow>> {
    let seeds: Vec<u64> = (0..scenes.len()).map(|i| prompt_seed(seed, i)).collect();
    let images = match model {
        Some(m) => generate(m, &cfg.schedule()?, scenes, &seeds, cfg.sampler())?,
        None => scenes
            .iter()
            .map(|s| render_scene(s, cfg.latent_size, cfg.latent_size))
            .collect::<Result<_>>()?,
    };
    scenes
        .iter()
        .zip(&images)
        .enumerate()
        .map(|(index, (s, img))| {
            Ok(EvalRow {
                index,
                seed: seeds[index],
                prompt: prompt_text(s),
                report: compliance_score(img, s)?,
            })
        })
        .collect()
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("index,seed,prompt,presence,binding,placement,total\n");
    for r in rows {
        let c = r.report;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.index, r.seed, r.prompt, c.presence, c.binding, c.placement, c.total
        ));
    }
    out
}

/// Hard gates of one attention site.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteMasks {
    /// `[N, T]` gates before fallback rewriting, `1` open.
    pub hard: Tensor,
    /// `[N, T]` probabilities.
    pub probs: Tensor,
    pub fallback_rows: usize,
}

/// Gates the model assigns at diffusion step `t` to a noised render of
/// `scene` (noise drawn from `seed`).
pub fn inspect_gates(model: &ToyUNet, sched: &NoiseSchedule, scene: &SceneSpec, seed: u64, t: usize) -> Result<Vec<SiteMasks>> {
    if t >= sched.len() {
        return Err(Error::StepOutOfRange { step: t, len: sched.len() });
    }
    let s = model.cfg.latent_size;
    let img = render_scene(scene, s, s)?;
    let z0 = image_to_latent(&img);
    let mut r = rng::stream(seed, "inspect");
    let eps = Tensor::from_fn(z0.shape().to_vec(), |_| StandardNormal.sample(&mut r));
    let zt = q_sample(&z0, t, &eps, sched)?;
    let shape: Vec<usize> = [1].iter().chain(zt.shape()).copied().collect();
    let zt = zt.reshape(shape)?;
    let tokens = caption_of(scene).padded(model.cfg.tokens)?.ids;
    let mut g = Graph::inference(&model.store);
    let z = g.constant(&zt);
    let out = model.forward(&mut g, z, &[t], &tokens, Mode::Infer)?;
    if out.sites.is_empty() {
        return Err(Error::Config("model has no active gate heads to inspect".into()));
    }
    let n = model.cfg.mid_size() * model.cfg.mid_size();
    let tk = model.cfg.tokens;
    out.sites
        .iter()
        .map(|site| {
            Ok(SiteMasks {
                hard: g.tensor(site.hard).reshape([n, tk])?,
                probs: g.tensor(site.probs).reshape([n, tk])?,
                fallback_rows: site.fallback_rows,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{decode, encode};

    fn tiny() -> RunConfig {
        RunConfig::parse(
            "latent_size = 8\nc1 = 4\nc2 = 6\nd_model = 8\nd_ff = 16\nt_steps = 10\nbatch_size = 2\n\
             backbone_steps = 4\ngate_steps = 4\nwarmup_steps = 1\ncheckpoint_every = 2\n",
        )
        .unwrap()
    }

    #[test]
    fn resumed_phase_matches_uninterrupted() {
        let cfg = tiny();
        let mut full = new_model(&cfg, false).unwrap();
        let mut mid = None;
        let whole = run_phase(&cfg, Phase::Backbone, &mut full, None, |ck| {
            if ck.step == 2 {
                mid = Some(decode(&encode(ck)).unwrap());
            }
            Ok(())
        })
        .unwrap();
        let ck = mid.unwrap();
        let (_, mut resumed) = model_from_checkpoint(&ck).unwrap();
        let rs = resume_state(&cfg, &ck, &resumed).unwrap();
        let rest = run_phase(&cfg, Phase::Backbone, &mut resumed, Some(rs), |_| Ok(())).unwrap();
        assert_eq!(rest.trace, whole.trace[2..]);
        assert_eq!(resumed.store.digest(None), full.store.digest(None));
    }

    #[test]
    fn gate_phase_freezes_backbone() {
        let cfg = tiny();
        let mut base = new_model(&cfg, false).unwrap();
        run_phase(&cfg, Phase::Backbone, &mut base, None, |_| Ok(())).unwrap();
        let ck = to_checkpoint(&cfg, Phase::Backbone, 4, &base, None);
        let mut gated = gated_from_backbone(&cfg, &ck).unwrap();
        let before = gated.store.digest(Some(ParamGroup::Backbone));
        let gates_before = gated.store.digest(Some(ParamGroup::Gate));
        run_phase(&cfg, Phase::Gates, &mut gated, None, |_| Ok(())).unwrap();
        assert_eq!(before, gated.store.digest(Some(ParamGroup::Backbone)));
        assert_ne!(gates_before, gated.store.digest(Some(ParamGroup::Gate)));
        assert!(gated_from_backbone(&cfg, &to_checkpoint(&cfg, Phase::Gates, 4, &gated, None)).is_err());
    }

    #[test]
    fn chunking_does_not_change_samples() {
        let cfg = tiny();
        let model = new_model(&cfg, true).unwrap();
        let scenes = eval_scenes(&cfg, 12).unwrap();
        let seeds: Vec<u64> = (0..12).map(|i| prompt_seed(5, i)).collect();
        let sched = cfg.schedule().unwrap();
        let all = generate(&model, &sched, &scenes, &seeds, Sampler::Ddpm).unwrap();
        let one = generate(&model, &sched, &scenes[11..], &seeds[11..], Sampler::Ddpm).unwrap();
        assert!(all[11].bitwise_eq(&one[0]));
    }

    #[test]
    fn ground_truth_eval_is_perfect() {
        let cfg = RunConfig::default();
        let scenes = eval_scenes(&cfg, 5).unwrap();
        let rows = evaluate(None, &cfg, &scenes, 0).unwrap();
        assert!(rows.iter().all(|r| r.report.total == 1.0));
        assert!(eval_scenes(&cfg, 0).is_err());
        assert!(eval_scenes(&cfg, 51).is_err());
    }

    #[test]
    fn fresh_gates_are_mostly_open() {
        let cfg = tiny();
        let model = new_model(&cfg, true).unwrap();
        let scene = eval_scenes(&cfg, 1).unwrap().remove(0);
        let sites = inspect_gates(&model, &cfg.schedule().unwrap(), &scene, 1, 5).unwrap();
        assert_eq!(sites.len(), 2);
        for s in &sites {
            assert_eq!(s.hard.shape(), [4, 8]);
            let open = s.hard.data().iter().sum::<f64>() / s.hard.numel() as f64;
            assert!(open > 0.95, "{open}");
        }
        assert!(inspect_gates(&new_model(&cfg, false).unwrap(), &cfg.schedule().unwrap(), &scene, 1, 5).is_err());
    }
}
