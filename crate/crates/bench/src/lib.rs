//! Shared fixtures for the benchmarks.

use maskattn::config::{Phase, RunConfig};
use maskattn::diffusion::{LatentBatch, NoiseSchedule, ToyUNet};
use maskattn::experiment::{new_model, phase_data};
use maskattn::Result;

pub struct Fixture {
    pub cfg: RunConfig,
    pub model: ToyUNet,
    pub sched: NoiseSchedule,
    pub batch: LatentBatch,
}

/// Default-config model and its first training batch.
pub fn fixture(gated: bool) -> Result<Fixture> {
    let cfg = RunConfig::default();
    let model = new_model(&cfg, gated)?;
    let sched = cfg.schedule()?;
    let batch = phase_data(&cfg, Phase::Backbone)?.batch_at(1)?;
    Ok(Fixture { cfg, model, sched, batch })
}
