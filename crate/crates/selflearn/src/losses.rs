//! The four training losses: softmax cross-entropy, triplet, contrastive,
//! and additive angular margin (ArcFace). Each has a tape builder for
//! training and a plain value wrapper for evaluation and tests.

use serde::{Deserialize, Serialize};

use crate::encoder::ArcfaceHead;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::DenseArray;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Triplet,
    Contrastive,
    Arcface,
}

/// Loss selection plus margins. Unset margins fall back to the per-kind
/// defaults: triplet 0.2, contrastive 1.0, arcface 0.5 rad with scale 64.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    #[serde(default)]
    pub margin: Option<f64>,
    #[serde(default)]
    pub scale: Option<f64>,
    /// L2-normalize embeddings before triplet/contrastive distances.
    #[serde(default)]
    pub normalize_embeddings: bool,
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        LossConfig {
            kind,
            margin: None,
            scale: None,
            normalize_embeddings: false,
        }
    }

    pub fn margin(&self) -> f64 {
        self.margin.unwrap_or(match self.kind {
            LossKind::CrossEntropy => 0.0,
            LossKind::Triplet => 0.2,
            LossKind::Contrastive => 1.0,
            LossKind::Arcface => 0.5,
        })
    }

    pub fn scale(&self) -> f64 {
        self.scale.unwrap_or(64.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.margin() < 0.0 {
            return Err(Error::InvalidConfig {
                field: "loss.margin",
                message: "must be non-negative".into(),
            });
        }
        if self.scale() <= 0.0 {
            return Err(Error::InvalidConfig {
                field: "loss.scale",
                message: "must be positive".into(),
            });
        }
        if self.kind == LossKind::Arcface && self.margin() >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::InvalidConfig {
                field: "loss.margin",
                message: "arcface margin must be below pi/2 radians".into(),
            });
        }
        Ok(())
    }
}

/// Mean negative log softmax probability of the target class.
pub fn cross_entropy_graph(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

/// Mean of max(d(a,p) - d(a,n) + m, 0) over triplet rows. The zero-loss
/// region propagates zero gradient through the hinge.
pub fn triplet_graph(
    tape: &mut Tape,
    anchors: Var,
    positives: Var,
    negatives: Var,
    margin: f64,
) -> Result<Var> {
    let dap = tape.row_euclidean(anchors, positives)?;
    let dan = tape.row_euclidean(anchors, negatives)?;
    let diff = tape.sub(dap, dan)?;
    let shifted = tape.add_scalar(diff, margin)?;
    let hinge = tape.relu(shifted)?;
    tape.mean(hinge)
}

/// Mean of y*d + (1-y)*max(0, m-d) over pair rows.
pub fn contrastive_graph(
    tape: &mut Tape,
    first: Var,
    second: Var,
    similar: &[u8],
    margin: f64,
) -> Result<Var> {
    for &y in similar {
        if y > 1 {
            return Err(Error::InvalidPairFlag { value: y });
        }
    }
    let n = tape.value(first).rows();
    if similar.len() != n {
        return Err(Error::ShapeMismatch {
            op: "contrastive",
            left: vec![n],
            right: vec![similar.len()],
        });
    }
    let d = tape.row_euclidean(first, second)?;
    let y_mask = tape.leaf(DenseArray::vector(similar.iter().map(|&y| y as f64).collect())?);
    let inv_mask = tape.leaf(DenseArray::vector(
        similar.iter().map(|&y| 1.0 - y as f64).collect(),
    )?);
    let pull = tape.mul(y_mask, d)?;
    let neg_d = tape.scale(d, -1.0)?;
    let gap = tape.add_scalar(neg_d, margin)?;
    let hinge = tape.relu(gap)?;
    let push = tape.mul(inv_mask, hinge)?;
    let total = tape.add(pull, push)?;
    tape.mean(total)
}

/// Angular-margin softmax: normalize embedding rows and class-center
/// columns, shift the target-class angle by the margin, scale, and take the
/// mean cross-entropy. Rows must be nonzero.
pub fn arcface_graph(
    tape: &mut Tape,
    embeddings: Var,
    labels: &[usize],
    centers: Var,
    scale: f64,
    margin: f64,
) -> Result<Var> {
    {
        let e = tape.value(embeddings);
        let cols = e.cols();
        for i in 0..e.rows() {
            if e.row(i).iter().all(|&v| v == 0.0) {
                return Err(Error::ZeroEmbeddingRow { row: i });
            }
            let _ = cols;
        }
    }
    let emb_n = tape.l2_normalize_rows(embeddings)?;
    let w_n = tape.l2_normalize_cols(centers)?;
    let cos = tape.matmul(emb_n, w_n)?;
    let shifted = tape.cos_margin(cos, labels, margin)?;
    let logits = tape.scale(shifted, scale)?;
    tape.softmax_cross_entropy(logits, labels)
}

/// Cross-entropy value for a logit batch.
pub fn cross_entropy_loss(logits: &DenseArray, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let loss = cross_entropy_graph(&mut tape, l, labels)?;
    Ok(tape.value(loss).as_scalar().expect("scalar loss"))
}

/// Triplet loss value for a single (anchor, positive, negative).
pub fn triplet_loss(
    anchor: &DenseArray,
    positive: &DenseArray,
    negative: &DenseArray,
    margin: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.leaf(anchor.clone());
    let p = tape.leaf(positive.clone());
    let n = tape.leaf(negative.clone());
    let loss = triplet_graph(&mut tape, a, p, n, margin)?;
    Ok(tape.value(loss).as_scalar().expect("scalar loss"))
}

/// Contrastive loss value for a single pair; `similar` must be 0 or 1.
pub fn contrastive_loss(
    first: &DenseArray,
    second: &DenseArray,
    similar: u8,
    margin: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x1 = tape.leaf(first.clone());
    let x2 = tape.leaf(second.clone());
    let loss = contrastive_graph(&mut tape, x1, x2, &[similar], margin)?;
    Ok(tape.value(loss).as_scalar().expect("scalar loss"))
}

/// ArcFace loss value for an embedding batch under the given head.
pub fn arcface_loss(
    embeddings: &DenseArray,
    labels: &[usize],
    head: &ArcfaceHead,
) -> Result<f64> {
    let mut tape = Tape::new();
    let e = tape.leaf(embeddings.clone());
    let w = tape.leaf(head.weight.clone());
    let loss = arcface_graph(&mut tape, e, labels, w, head.scale, head.margin)?;
    Ok(tape.value(loss).as_scalar().expect("scalar loss"))
}
