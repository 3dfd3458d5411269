//! Gated cross-attention with learnable binary masks, trained inside a
//! toy latent-diffusion model.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: dense tensors and a reverse-mode tape
//! - [`gradcheck`], [`opcheck`]: central-difference verification of tape
//!   gradients and the registry of checked ops
//! - [`gate`]: token-conditioned gate heads, straight-through binarization
//!   and the additive logit mask
//! - [`attention`]: masked multi-head cross-attention and the residual FFN
//! - [`diffusion`]: noise schedule, toy UNet, ε-prediction loss, samplers
//! - [`optim`]: AdamW, warmup-cosine learning rate, clipping, phased training
//! - [`scenes`]: synthetic compositional scenes, captions and the
//!   compliance metric
//! - [`config`], [`checkpoint`], [`imageio`], [`data`], [`experiment`]:
//!   experiment plumbing

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod gate;
pub mod gradcheck;
pub mod imageio;
pub mod kernels;
pub mod opcheck;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scenes;
pub mod tensor;

pub use autodiff::{ConvGeom, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
