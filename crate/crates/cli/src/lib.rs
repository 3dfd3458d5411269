//! `maskattn` command-line tool: training, sampling, gate inspection,
//! evaluation and gradient verification.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 a numeric
//! verification failed.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use maskattn::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use maskattn::config::{Phase, RunConfig, SamplerKind};
use maskattn::diffusion::{Sampler, ToyUNet};
use maskattn::experiment::{
    eval_csv, eval_scenes, evaluate, gated_from_backbone, generate, inspect_gates, model_from_checkpoint, new_model,
    resume_state, run_phase, to_checkpoint, EvalRow,
};
use maskattn::gate::GateMode;
use maskattn::imageio::{write_pgm, write_ppm};
use maskattn::opcheck::{registry, RegistrySettings, GRAD_CHECK_STEP, GRAD_CHECK_TOLERANCE};
use maskattn::optim::{parse_trace_csv, trace_csv, TraceRow};
use maskattn::scenes::{compliance_score, parse_prompt, ComplianceReport, VOCAB};

/// `println!` that ignores a closed stdout, e.g. when piped into `head`.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

/// Environment variable that overrides the configured output directory.
pub const OUT_ENV: &str = "MASKATTN_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "maskattn", version, about = "Gated cross-attention on a toy diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the backbone, or the gate heads on top of a trained backbone.
    Train(TrainArgs),
    /// Generate one image for a prompt.
    Sample(SampleArgs),
    /// Dump hard gate maps for a prompt and print their statistics.
    InspectMasks(InspectArgs),
    /// Score samples on held-out prompts, optionally against a baseline.
    Eval(EvalArgs),
    /// Verify every registered op's gradient by central differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Config file; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_phase)]
    pub phase: Phase,
    /// Backbone checkpoint for the gate phase [default: <out>/backbone.ckpt].
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Continue from a checkpoint written by the same phase.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = parse_sampler)]
    pub sampler: Option<SamplerKind>,
    /// DDIM step count.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output file [default: <out>/sample_seed<seed>.ppm].
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Run gated sites with every gate open.
    #[arg(long)]
    pub open_gates: bool,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Diffusion step at which the gates are evaluated.
    #[arg(long, default_value_t = 100)]
    pub step: usize,
    /// Output directory [default: <out>/masks].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Model to evaluate; not needed with --ground-truth.
    pub checkpoint: Option<PathBuf>,
    /// Second model sampled on the identical prompt and seed grid.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive run seeds starting at --seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Score ground-truth renders instead of samples.
    #[arg(long)]
    pub ground_truth: bool,
    /// Config for --ground-truth runs.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_sampler)]
    pub sampler: Option<SamplerKind>,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Check only the named cases.
    #[arg(long)]
    pub only: Vec<String>,
    /// Corrupt the backward rule of the named case.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

fn parse_phase(s: &str) -> Result<Phase, String> {
    s.parse().map_err(|e: maskattn::Error| e.to_string())
}

fn parse_sampler(s: &str) -> Result<SamplerKind, String> {
    s.parse().map_err(|e: maskattn::Error| e.to_string())
}

/// A numeric verification failed; maps to exit code 2.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

type CmdResult = anyhow::Result<()>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::InspectMasks(a) => cmd_inspect_masks(a),
        Command::Eval(a) => cmd_eval(a),
        Command::GradCheck(a) => cmd_grad_check(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<NumericFailure>() || matches!(e.downcast_ref(), Some(maskattn::Error::NonFinite { .. })) {
                EXIT_NUMERIC
            } else {
                EXIT_USAGE
            }
        }
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

/// `MASKATTN_OUT` when set and non-empty, else the configured directory.
pub fn output_dir(cfg: &RunConfig) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => cfg.out_dir.clone(),
    }
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    read_checkpoint(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<(RunConfig, ToyUNet)> {
    let ck = load_checkpoint(path)?;
    Ok(model_from_checkpoint(&ck).with_context(|| format!("checkpoint {}", path.display()))?)
}

fn mean_loss(rows: &[TraceRow]) -> f64 {
    rows.iter().map(|r| r.loss).sum::<f64>() / rows.len().max(1) as f64
}

fn same_run(a: &RunConfig, b: &RunConfig) -> bool {
    let mut a = a.clone();
    a.out_dir = b.out_dir.clone();
    a == *b
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let cfg = load_config(a.config.as_deref())?;
    let out = output_dir(&cfg);
    let phase = a.phase;

    let (mut model, resume, mut prior) = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.phase != phase {
                bail!("--resume checkpoint is from the {} phase, not {}", ck.phase.name(), phase.name());
            }
            let (ck_cfg, model) = model_from_checkpoint(&ck)?;
            if !same_run(&ck_cfg, &cfg) {
                bail!("--resume checkpoint was written with a different configuration");
            }
            let rs = resume_state(&cfg, &ck, &model)?;
            let csv = out.join(format!("{}_loss.csv", phase.name()));
            let prior = match fs::read_to_string(&csv) {
                Ok(text) => parse_trace_csv(&text)?.into_iter().filter(|r| r.step <= rs.step).collect(),
                Err(_) => Vec::new(),
            };
            (model, Some(rs), prior)
        }
        None => {
            let model = match phase {
                Phase::Backbone => new_model(&cfg, false)?,
                Phase::Gates => {
                    let path = a.backbone.clone().unwrap_or_else(|| out.join("backbone.ckpt"));
                    if !path.exists() {
                        bail!(
                            "the gate phase needs a backbone checkpoint; {} does not exist (train --phase backbone first or pass --backbone)",
                            path.display()
                        );
                    }
                    gated_from_backbone(&cfg, &load_checkpoint(&path)?)?
                }
            };
            (model, None, Vec::new())
        }
    };

    ensure_dir(&out)?;
    let total = cfg.train_config(phase).steps;
    let started = Instant::now();
    let outcome = run_phase(&cfg, phase, &mut model, resume, |ck| {
        let path = out.join(format!("{}_step{:06}.ckpt", phase.name(), ck.step));
        write_checkpoint(&path, ck)?;
        eprintln!(
            "[{}] step {}/{}  {:.1}s  checkpoint {}",
            phase.name(),
            ck.step,
            total,
            started.elapsed().as_secs_f64(),
            path.display()
        );
        Ok(())
    })?;

    prior.extend(outcome.trace.iter().copied());
    fs::write(out.join(format!("{}_loss.csv", phase.name())), trace_csv(&prior))?;
    let ck = to_checkpoint(&cfg, phase, total, &model, Some(&outcome.state));
    let final_path = out.join(format!("{}.ckpt", phase.name()));
    write_checkpoint(&final_path, &ck)?;

    let k = prior.len().min(100);
    if k > 0 {
        let first = mean_loss(&prior[..k]);
        let last = mean_loss(&prior[prior.len() - k..]);
        say!(
            "{} phase: {} steps, mean loss first {k} = {first:.6}, last {k} = {last:.6}, ratio {:.4}",
            phase.name(),
            prior.len(),
            last / first
        );
    }
    say!("wrote {}", final_path.display());
    Ok(())
}

fn sampler_for(cfg: &RunConfig, kind: Option<SamplerKind>, steps: Option<usize>) -> Sampler {
    match kind.unwrap_or(cfg.sampler) {
        SamplerKind::Ddpm => Sampler::Ddpm,
        SamplerKind::Ddim => Sampler::Ddim {
            steps: steps.unwrap_or(cfg.sample_steps),
        },
    }
}

fn cmd_sample(a: SampleArgs) -> CmdResult {
    let scene = parse_prompt(&a.prompt)?;
    let (cfg, mut model) = load_model(&a.checkpoint)?;
    if a.open_gates {
        model.gate_mode = GateMode::ForcedOpen;
    }
    let sampler = sampler_for(&cfg, a.sampler, a.steps);
    let img = generate(&model, &cfg.schedule()?, std::slice::from_ref(&scene), &[a.seed], sampler)?.remove(0);
    let path = match a.output {
        Some(p) => p,
        None => {
            let out = output_dir(&cfg);
            ensure_dir(&out)?;
            out.join(format!("sample_seed{}.ppm", a.seed))
        }
    };
    write_ppm(&path, &img)?;
    let c = compliance_score(&img, &scene)?;
    say!(
        "{}  presence {:.3} binding {:.3} placement {:.3} total {:.3}",
        path.display(),
        c.presence,
        c.binding,
        c.placement,
        c.total
    );
    Ok(())
}

fn file_word(word: &str) -> String {
    word.chars().filter(char::is_ascii_alphanumeric).collect()
}

fn cmd_inspect_masks(a: InspectArgs) -> CmdResult {
    let scene = parse_prompt(&a.prompt)?;
    let (cfg, model) = load_model(&a.checkpoint)?;
    let sites = inspect_gates(&model, &cfg.schedule()?, &scene, a.seed, a.step)?;
    let dir = a.out.unwrap_or_else(|| output_dir(&cfg).join("masks"));
    ensure_dir(&dir)?;

    let side = model.cfg.mid_size();
    let n = side * side;
    let tokens = maskattn::scenes::caption_of(&scene).padded(model.cfg.tokens)?.ids;
    let mut csv = String::from("site,token,word,open_pixels,open_fraction,mean_prob\n");
    let mut report = String::new();
    for (l, site) in sites.iter().enumerate() {
        let t = model.cfg.tokens;
        let hard = site.hard.data();
        let probs = site.probs.data();
        let _ = writeln!(report, "site {l}: fallback_rows = {}", site.fallback_rows);
        let _ = writeln!(report, "  {:>3} {:<8} {:>6} {:>9} {:>9}", "tok", "word", "open", "fraction", "mean_p");
        for (k, &id) in tokens.iter().enumerate() {
            let px: Vec<u8> = (0..n).map(|i| if hard[i * t + k] > 0.5 { 255 } else { 0 }).collect();
            let word = VOCAB[id];
            write_pgm(&dir.join(format!("site{l}_tok{k}_{}.pgm", file_word(word))), &px, side, side)?;
            let open = px.iter().filter(|&&p| p == 255).count();
            let frac = open as f64 / n as f64;
            let mp = (0..n).map(|i| probs[i * t + k]).sum::<f64>() / n as f64;
            let _ = writeln!(csv, "{l},{k},{word},{open},{frac},{mp}");
            let _ = writeln!(report, "  {k:>3} {word:<8} {open:>6} {frac:>9.4} {mp:>9.4}");
        }
        let _ = writeln!(report, "  open tokens per location:");
        for y in 0..side {
            let row: Vec<String> = (0..side)
                .map(|x| {
                    let i = y * side + x;
                    format!("{:>3}", (0..t).filter(|&k| hard[i * t + k] > 0.5).count())
                })
                .collect();
            let _ = writeln!(report, "  {}", row.join(""));
        }
    }
    fs::write(dir.join("stats.csv"), &csv)?;
    say!("{}", report.trim_end());
    say!("wrote {} mask images to {}", sites.len() * tokens.len(), dir.display());
    Ok(())
}

fn summary_csv(label_rows: &[(String, ComplianceReport)]) -> String {
    let mut out = String::from("model,presence,binding,placement,total\n");
    for (label, c) in label_rows {
        out.push_str(&format!("{label},{},{},{},{}\n", c.presence, c.binding, c.placement, c.total));
    }
    out
}

fn reports(rows: &[EvalRow]) -> Vec<ComplianceReport> {
    rows.iter().map(|r| r.report).collect()
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let (cfg, model) = match (&a.checkpoint, a.ground_truth) {
        (_, true) => {
            if a.baseline.is_some() {
                bail!("--ground-truth does not take a --baseline");
            }
            (load_config(a.config.as_deref())?, None)
        }
        (Some(p), false) => {
            let (c, m) = load_model(p)?;
            (c, Some(m))
        }
        (None, false) => bail!("eval needs a checkpoint unless --ground-truth is given"),
    };
    let mut cfg = cfg;
    if let Some(s) = a.sampler {
        cfg.sampler = s;
    }
    let baseline = match &a.baseline {
        Some(p) => {
            let (bc, bm) = load_model(p)?;
            if bc.unet(false).latent_size != cfg.latent_size || bc.holdout != cfg.holdout || bc.t_steps != cfg.t_steps {
                bail!("--baseline was trained with an incompatible configuration");
            }
            Some(bm)
        }
        None => None,
    };
    let scenes = eval_scenes(&cfg, a.n)?;
    let out = output_dir(&cfg);
    ensure_dir(&out)?;

    let mut all: Vec<(u64, Vec<EvalRow>)> = Vec::new();
    let mut base: Vec<(u64, Vec<EvalRow>)> = Vec::new();
    for run in a.seed..a.seed + a.seeds {
        all.push((run, evaluate(model.as_ref(), &cfg, &scenes, run)?));
        if let Some(b) = &baseline {
            base.push((run, evaluate(Some(b), &cfg, &scenes, run)?));
        }
    }

    let mut csv = String::from("run_seed,");
    csv.push_str(eval_csv(&[]).trim_end());
    csv.push('\n');
    for (run, rows) in &all {
        for line in eval_csv(rows).lines().skip(1) {
            let _ = writeln!(csv, "{run},{line}");
        }
    }
    fs::write(out.join("eval.csv"), csv)?;

    let flat: Vec<ComplianceReport> = all.iter().flat_map(|(_, r)| reports(r)).collect();
    let mean = ComplianceReport::mean(&flat);
    let mut summary = vec![("model".to_string(), mean)];
    for (run, rows) in &all {
        summary.push((format!("model/seed{run}"), ComplianceReport::mean(&reports(rows))));
    }
    say!(
        "model    presence {:.4} binding {:.4} placement {:.4} total {:.4}  ({} prompts x {} seeds)",
        mean.presence,
        mean.binding,
        mean.placement,
        mean.total,
        scenes.len(),
        a.seeds
    );

    if baseline.is_some() {
        let bflat: Vec<ComplianceReport> = base.iter().flat_map(|(_, r)| reports(r)).collect();
        let bmean = ComplianceReport::mean(&bflat);
        summary.push(("baseline".to_string(), bmean));
        let mut ab = String::from(
            "run_seed,index,prompt,model_total,baseline_total,diff,model_binding,baseline_binding,model_placement,baseline_placement\n",
        );
        let mut diffs = Vec::new();
        for ((run, rows), (_, brows)) in all.iter().zip(&base) {
            let mut per_seed = Vec::new();
            for (r, b) in rows.iter().zip(brows) {
                let d = r.report.total - b.report.total;
                per_seed.push(d);
                let _ = writeln!(
                    ab,
                    "{run},{},{},{},{},{d},{},{},{},{}",
                    r.index,
                    r.prompt,
                    r.report.total,
                    b.report.total,
                    r.report.binding,
                    b.report.binding,
                    r.report.placement,
                    b.report.placement
                );
            }
            let seed_mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
            say!("seed {run}: mean paired difference {seed_mean:+.4}");
            diffs.extend(per_seed);
        }
        let md = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let wins = diffs.iter().filter(|&&d| d > 0.0).count();
        let losses = diffs.iter().filter(|&&d| d < 0.0).count();
        fs::write(out.join("ab.csv"), ab)?;
        say!(
            "baseline presence {:.4} binding {:.4} placement {:.4} total {:.4}",
            bmean.presence, bmean.binding, bmean.placement, bmean.total
        );
        say!("paired difference (model - baseline): mean {md:+.4}, {wins} better, {losses} worse, {} equal", diffs.len() - wins - losses);
    }
    fs::write(out.join("eval_summary.csv"), summary_csv(&summary))?;
    say!("wrote {}", out.join("eval.csv").display());
    Ok(())
}

fn cmd_grad_check(a: GradCheckArgs) -> CmdResult {
    let cfg = load_config(a.config.as_deref())?;
    let mut cases = registry(&RegistrySettings::from_config(&cfg))?;
    let known: Vec<&str> = cases.iter().map(|c| c.name).collect();
    for name in a.only.iter().chain(a.inject_fault.iter()) {
        if !known.contains(&name.as_str()) {
            bail!("unknown check {name:?}; registered: {}", known.join(", "));
        }
    }
    if !a.only.is_empty() {
        cases.retain(|c| a.only.iter().any(|o| o == c.name));
    }
    say!("{:<18} {:>8} {:>12}  {:<24} status", "op", "probed", "max_rel_err", "worst");
    let started = Instant::now();
    let mut worst: Option<(&'static str, f64)> = None;
    let mut failed = Vec::new();
    for case in &mut cases {
        let fault = a.inject_fault.as_deref() == Some(case.name);
        let r = case.check(GRAD_CHECK_STEP, fault)?;
        let ok = r.max_rel_error < GRAD_CHECK_TOLERANCE;
        let at = r.worst.as_ref().map_or("-".to_string(), |(p, i)| format!("{p}[{i}]"));
        say!(
            "{:<18} {:>8} {:>12.3e}  {:<24} {}",
            case.name,
            r.probed,
            r.max_rel_error,
            at,
            if ok { "PASS" } else { "FAIL" }
        );
        if worst.is_none_or(|(_, e)| r.max_rel_error > e) {
            worst = Some((case.name, r.max_rel_error));
        }
        if !ok {
            failed.push(case.name);
        }
    }
    let (wn, we) = worst.ok_or_else(|| anyhow!("no checks selected"))?;
    say!(
        "{} checks in {:.1}s, worst {wn} at {we:.3e} (tolerance {GRAD_CHECK_TOLERANCE:e})",
        cases.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        return Err(NumericFailure(format!("gradient check failed for {}; worst op {wn} ({we:.3e})", failed.join(", "))).into());
    }
    Ok(())
}
