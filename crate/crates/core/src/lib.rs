//! Per-face attributable watermarking for multi-face images.
//!
//! The library embeds an independent short payload into every face of an
//! image, survives benign processing (JPEG, blur, color shifts, noise), and
//! detects face replacement: a robust *tracer* decoder recovers the payload
//! for source attribution while a tamper-sensitive *localizer* decoder is
//! trained to collapse to a zero "failure state" on replaced faces, so a high
//! localizer bit error rate marks the forged region.
//!
//! Layout:
//! - [`geometry`]: boxes, IoU, and the differentiable crop/paste resamplers
//! - [`graph`]: the reverse-mode tape the networks train on
//! - [`nn`]: conv/U-Net building blocks and the Adam optimizer
//! - [`stego`]: the encoder, the twin decoders, and the patch discriminator
//! - [`noise`]: the distortion pool with ground-truth tamper masks
//! - [`losses`]: the training objectives, including selective regional
//!   supervision over the tampered-face index set
//! - [`metrics`]: PSNR/SSIM/BER and the box-IoU F1/AUC localization protocol
//! - [`data`]: manifests, the synthetic multi-face generator, the identity
//!   registry, and message assignment
//! - [`training`]: the joint adversarial training loop and checkpointing
//! - [`evaluate`]: the distortion-sweep evaluation harness
//! - [`viz`]: overlay and bar-chart rendering for reports

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod geometry;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod noise;
pub mod stego;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
