//! Training objectives for the embedder, the two decoders, and the critic.
//!
//! All builders append to an existing [`Graph`] and return the scalar loss
//! node, so one backward pass covers any weighted combination. Reductions
//! default to means so the weights below stay meaningful when batch or
//! message sizes change.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry;
use crate::graph::{Graph, Real, Var};

/// Overlap threshold above which an embedded face counts as tampered.
pub const OMEGA_IOU_TAU: f64 = 0.5;

/// How squared-error terms are reduced over their elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NormMode {
    /// Mean over all elements. Keeps magnitudes size-independent.
    #[default]
    Mean,
    /// Plain sum of squares (per tampered face for the malicious term).
    Sum,
}

impl NormMode {
    fn reduce<F: Real>(self, g: &Graph<F>, x: Var) -> Var {
        match self {
            NormMode::Mean => g.mean_all(x),
            NormMode::Sum => g.sum_all(x),
        }
    }
}

/// Scalar weights for the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub adversarial: f64,
    pub fidelity: f64,
    pub tracing: f64,
    pub local_common: f64,
    pub local_malicious: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adversarial: 1e-3,
            fidelity: 1.0,
            tracing: 10.0,
            local_common: 10.0,
            local_malicious: 10.0,
        }
    }
}

/// Squared-error fidelity between watermarked and cover images.
pub fn fidelity_loss<F: Real>(g: &Graph<F>, cover: Var, marked: Var, mode: NormMode) -> Var {
    mode.reduce(g, g.sqr(g.sub(marked, cover)))
}

/// Squared error between decoded message values and their targets.
pub fn message_loss<F: Real>(g: &Graph<F>, decoded: Var, target: Var, mode: NormMode) -> Var {
    mode.reduce(g, g.sqr(g.sub(decoded, target)))
}

fn sub_batch_mean<F: Real>(g: &Graph<F>, x: Var, other: Var) -> Var {
    g.add_bcast(x, g.neg(g.mean_all(other)))
}

/// Relativistic average least-squares objective for the critic: rate covers
/// one below the average watermarked score and watermarked images one above
/// the average cover score.
pub fn critic_loss<F: Real>(g: &Graph<F>, d_cover: Var, d_marked: Var) -> Var {
    let one = F::from_f64(1.0);
    let cover_term = g.mean_all(g.sqr(g.add_scalar(sub_batch_mean(g, d_cover, d_marked), one)));
    let marked_term = g.mean_all(g.sqr(g.add_scalar(sub_batch_mean(g, d_marked, d_cover), -one)));
    g.add(cover_term, marked_term)
}

/// Mirror of [`critic_loss`] minimized by the embedder so watermarked scores
/// become indistinguishable from cover scores.
pub fn adversarial_loss<F: Real>(g: &Graph<F>, d_cover: Var, d_marked: Var) -> Var {
    let one = F::from_f64(1.0);
    let cover_term = g.mean_all(g.sqr(g.add_scalar(sub_batch_mean(g, d_cover, d_marked), -one)));
    let marked_term = g.mean_all(g.sqr(g.add_scalar(sub_batch_mean(g, d_marked, d_cover), one)));
    g.add(cover_term, marked_term)
}

/// Indices of embedded faces whose box overlaps any forged region with IoU
/// strictly above `tau`.
pub fn tampered_face_set(
    face_boxes: &[[f64; 4]],
    fake_boxes: &[[f64; 4]],
    tau: f64,
) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (i, face) in face_boxes.iter().enumerate() {
        for fake in fake_boxes {
            if geometry::iou(face, fake)? > tau {
                out.push(i);
                break;
            }
        }
    }
    Ok(out)
}

/// Drive the decoded rows of tampered faces toward the zero vector. Returns
/// `None` when no face is tampered, in which case the term is omitted.
pub fn malicious_loss<F: Real>(
    g: &Graph<F>,
    decoded: Var,
    tampered: &[usize],
    mode: NormMode,
) -> Option<Var> {
    if tampered.is_empty() {
        return None;
    }
    let rows = g.gather_rows(decoded, tampered);
    let sq = g.sqr(rows);
    Some(match mode {
        NormMode::Mean => g.mean_all(sq),
        // averaged over tampered faces only, summing within each message
        NormMode::Sum => g.mul_scalar(g.sum_all(sq), F::from_f64(1.0 / tampered.len() as f64)),
    })
}

/// The per-branch scalar losses of one training step. Absent parts are
/// dropped from the combination.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub adversarial: Option<Var>,
    pub fidelity: Option<Var>,
    pub tracing: Option<Var>,
    pub local_common: Option<Var>,
    pub local_malicious: Option<Var>,
}

/// Weighted sum of the present parts.
pub fn total_loss<F: Real>(g: &Graph<F>, parts: &LossParts, w: &LossWeights) -> Var {
    let mut total = g.scalar(F::from_f64(0.0));
    let terms = [
        (parts.adversarial, w.adversarial),
        (parts.fidelity, w.fidelity),
        (parts.tracing, w.tracing),
        (parts.local_common, w.local_common),
        (parts.local_malicious, w.local_malicious),
    ];
    for (part, weight) in terms {
        if let Some(v) = part {
            total = g.add(total, g.mul_scalar(v, F::from_f64(weight)));
        }
    }
    total
}
