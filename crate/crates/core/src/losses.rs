//! Camera/domain adversarial objectives and the source cross-entropy.
//!
//! Every loss is a scalar tape node built from a `batch x classes`
//! probability node, so gradients flow through whatever produced the
//! probabilities. Probabilities are clamped at [`PROB_CLAMP`] before the log;
//! the clamp passes zero gradient, which keeps early training finite without
//! moving any optimum.

use serde::{Deserialize, Serialize};

use crate::domain::{CameraIndexer, Domain};
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Probability floor applied before every log.
pub const PROB_CLAMP: f64 = 1e-12;

/// Adversarial scheme selecting the generator objective for the backbone.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    None,
    Grl,
    Cce,
    Aoe,
    Dal,
}

impl SchemeKind {
    pub fn parse(s: &str) -> Result<SchemeKind> {
        match s {
            "none" => Ok(SchemeKind::None),
            "grl" => Ok(SchemeKind::Grl),
            "cce" => Ok(SchemeKind::Cce),
            "aoe" => Ok(SchemeKind::Aoe),
            "dal" => Ok(SchemeKind::Dal),
            other => Err(Error::InvalidConfig(format!(
                "unknown scheme `{other}` (expected none|grl|cce|aoe|dal)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeKind::None => "none",
            SchemeKind::Grl => "grl",
            SchemeKind::Cce => "cce",
            SchemeKind::Aoe => "aoe",
            SchemeKind::Dal => "dal",
        }
    }

    /// DAL discriminates source vs target only.
    pub fn discriminator_classes(self, indexer: &CameraIndexer) -> usize {
        match self {
            SchemeKind::Dal => 2,
            _ => indexer.total(),
        }
    }
}

fn check_probs(tape: &Tape, probs: NodeId) -> Result<(usize, usize)> {
    let t = tape.value(probs);
    if t.shape().len() != 2 {
        return Err(Error::InvalidShape {
            op: "loss",
            shape: t.shape().to_vec(),
            msg: "probabilities must be a batch x classes matrix".into(),
        });
    }
    Ok((t.rows(), t.cols()))
}

/// `factor * sum(mask * log(clamp(probs)))` as one tape node.
fn masked_log_sum(tape: &mut Tape, probs: NodeId, mask: Tensor, factor: f64) -> Result<NodeId> {
    let clamped = tape.clamp_min(probs, PROB_CLAMP);
    let logp = tape.log(clamped)?;
    let mask = tape.input(mask);
    let picked = tape.mul(logp, mask)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, factor))
}

/// Discriminator loss: mean over the batch of `-log p[label]`.
pub fn cal_d_loss(tape: &mut Tape, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (n, c) = check_probs(tape, probs)?;
    if labels.len() != n {
        return Err(Error::InvalidConfig(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    let mut mask = vec![0.0; n * c];
    for (r, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        mask[r * c + label] = 1.0;
    }
    masked_log_sum(tape, probs, Tensor::from_parts(vec![n, c], mask), -1.0 / n as f64)
}

/// Generator loss of the GRL scheme: the negated discriminator loss. Train
/// through GRL wiring so backbone gradients implement the maximization.
pub fn grl_generator_loss(tape: &mut Tape, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
    let d = cal_d_loss(tape, probs, labels)?;
    Ok(tape.scale(d, -1.0))
}

/// Cross-domain camera equiprobability: each row is pushed toward a uniform
/// posterior over the opposite domain's camera classes.
pub fn cce_loss(
    tape: &mut Tape,
    probs: NodeId,
    domains: &[Domain],
    indexer: &CameraIndexer,
) -> Result<NodeId> {
    let (n, c) = check_probs(tape, probs)?;
    if c != indexer.total() {
        return Err(Error::ShapeMismatch {
            op: "cce_loss",
            lhs: vec![n, c],
            rhs: vec![indexer.total()],
        });
    }
    if domains.len() != n {
        return Err(Error::InvalidConfig(format!(
            "{} domain tags for a batch of {n}",
            domains.len()
        )));
    }
    let mut mask = vec![0.0; n * c];
    for (r, &dom) in domains.iter().enumerate() {
        let opp = dom.opposite();
        let w = 1.0 / indexer.opposite_count(dom) as f64;
        for k in indexer.range_of(opp) {
            mask[r * c + k] = w;
        }
    }
    masked_log_sum(tape, probs, Tensor::from_parts(vec![n, c], mask), -1.0 / n as f64)
}

/// All-others equiprobability: uniform misclassification over the `C - 1`
/// non-label camera classes.
pub fn aoe_loss(tape: &mut Tape, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (n, c) = check_probs(tape, probs)?;
    if c < 2 {
        return Err(Error::InvalidConfig("aoe needs at least two classes".into()));
    }
    if labels.len() != n {
        return Err(Error::InvalidConfig(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    let w = 1.0 / (c - 1) as f64;
    let mut mask = vec![0.0; n * c];
    for (r, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        for k in 0..c {
            if k != label {
                mask[r * c + k] = w;
            }
        }
    }
    masked_log_sum(tape, probs, Tensor::from_parts(vec![n, c], mask), -1.0 / n as f64)
}

/// Domain-aware adversarial learning over a two-way head:
/// cross-entropy on the domain label for the discriminator and its GRL-style
/// negation for the generator.
pub fn dal_losses(
    tape: &mut Tape,
    probs: NodeId,
    domains: &[Domain],
) -> Result<(NodeId, NodeId)> {
    let (_, c) = check_probs(tape, probs)?;
    if c != 2 {
        return Err(Error::InvalidShape {
            op: "dal_losses",
            shape: tape.value(probs).shape().to_vec(),
            msg: "dal expects a 2-way discriminator head".into(),
        });
    }
    let labels: Vec<usize> = domains.iter().map(|d| domain_label(*d)).collect();
    let d = cal_d_loss(tape, probs, &labels)?;
    let g = tape.scale(d, -1.0);
    Ok((d, g))
}

/// Global class index of a domain on the 2-way DAL head.
pub fn domain_label(d: Domain) -> usize {
    match d {
        Domain::Source => 0,
        Domain::Target => 1,
    }
}

/// Source-domain person classification loss (standard cross-entropy).
pub fn source_cross_entropy(tape: &mut Tape, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
    cal_d_loss(tape, probs, labels)
}
