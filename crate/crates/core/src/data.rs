//! Seeded, random-access training batches over a scene pool.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffusion::{LatentBatch, LATENT_CHANNELS};
use crate::error::{Error, Result};
use crate::rng;
use crate::scenes::{caption_of, image_to_latent, render_scene, SceneSpec};
use crate::tensor::Tensor;

/// Pre-rendered scene pool. Batch `step` of a stream is a pure function of
/// `(seed, label, step)`: scenes come from a per-epoch shuffle, diffusion
/// steps and noise from a per-step stream.
#[derive(Clone, Debug)]
pub struct DataStream {
    scenes: Vec<SceneSpec>,
    latents: Vec<Vec<f64>>,
    captions: Vec<Vec<usize>>,
    size: usize,
    batch: usize,
    t_steps: usize,
    seed: u64,
    label: String,
    perm: Option<(u64, Vec<usize>)>,
}

impl DataStream {
    pub fn new(pool: Vec<SceneSpec>, size: usize, tokens: usize, batch: usize, t_steps: usize, seed: u64, label: &str) -> Result<Self> {
        if pool.is_empty() || batch == 0 || t_steps == 0 {
            return Err(Error::Config("data stream needs scenes, batch ≥ 1 and T ≥ 1".into()));
        }
        let mut latents = Vec::with_capacity(pool.len());
        let mut captions = Vec::with_capacity(pool.len());
        for s in &pool {
            latents.push(image_to_latent(&render_scene(s, size, size)?).into_data());
            captions.push(caption_of(s).padded(tokens)?.ids);
        }
        Ok(Self {
            scenes: pool,
            latents,
            captions,
            size,
            batch,
            t_steps,
            seed,
            label: label.to_string(),
            perm: None,
        })
    }

    pub fn scenes(&self) -> &[SceneSpec] {
        &self.scenes
    }

    fn scene_index(&mut self, k: u64) -> usize {
        let n = self.scenes.len() as u64;
        let epoch = k / n;
        if self.perm.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut p: Vec<usize> = (0..self.scenes.len()).collect();
            p.shuffle(&mut rng::stream_at(self.seed, &format!("{}/epoch", self.label), epoch));
            self.perm = Some((epoch, p));
        }
        self.perm.as_ref().expect("set above").1[(k % n) as usize]
    }

    /// Batch for training step `step` (1-based).
    pub fn batch_at(&mut self, step: u64) -> Result<LatentBatch> {
        let b = self.batch;
        let per = LATENT_CHANNELS * self.size * self.size;
        let base = step.saturating_sub(1) * b as u64;
        let mut z = Vec::with_capacity(b * per);
        let mut tokens = Vec::new();
        for i in 0..b as u64 {
            let idx = self.scene_index(base + i);
            z.extend_from_slice(&self.latents[idx]);
            tokens.extend_from_slice(&self.captions[idx]);
        }
        let r = &mut rng::stream_at(self.seed, &format!("{}/noise", self.label), step);
        let t: Vec<usize> = (0..b).map(|_| r.gen_range(0..self.t_steps)).collect();
        let eps: Vec<f64> = (0..b * per).map(|_| r.sample(StandardNormal)).collect();
        let shape = [b, LATENT_CHANNELS, self.size, self.size];
        Ok(LatentBatch {
            z: Tensor::new(shape, z)?,
            t,
            eps: Tensor::new(shape, eps)?,
            tokens,
        })
    }
}
