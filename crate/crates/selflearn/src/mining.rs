//! Triplet and pair construction from a labeled batch, including semi-hard
//! negative selection.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, DenseArray};

/// Batch-row indices of one training triplet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TripletIndices {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Batch-row indices of one training pair; `similar` is 1 iff the rows share
/// a label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairIndices {
    pub first: usize,
    pub second: usize,
    pub similar: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TripletCategory {
    Easy,
    SemiHard,
    Hard,
}

/// What to do for an (anchor, positive) pair with no semi-hard negative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackPolicy {
    /// Use the negative nearest to the semi-hard window: the farthest hard
    /// negative if any exist, else the closest easy negative.
    #[default]
    NearestToWindow,
    /// Emit nothing for that pair.
    Skip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MiningWarning {
    /// Every example in the batch shares one label.
    SingleClassBatch,
    /// No class contributed two examples, so no anchor/positive pairs exist.
    NoPositivePairs,
    /// No two examples share a label, so no similar pairs exist.
    NoSimilarPairs,
    /// All examples share labels pairwise, so no dissimilar pairs exist.
    NoDissimilarPairs,
    /// Fewer than two examples in the batch.
    BatchTooSmall,
}

#[derive(Clone, Debug, Default)]
pub struct MinedTriplets {
    pub triplets: Vec<TripletIndices>,
    pub warning: Option<MiningWarning>,
}

#[derive(Clone, Debug, Default)]
pub struct MinedPairs {
    pub pairs: Vec<PairIndices>,
    pub warning: Option<MiningWarning>,
}

/// Categorize a triplet by its anchor-positive and anchor-negative
/// distances. The easy test reuses the hinge expression of the loss so the
/// two agree bitwise at the boundary.
pub fn classify_triplet(dap: f64, dan: f64, margin: f64) -> Result<TripletCategory> {
    if dap < 0.0 {
        return Err(Error::NegativeDistance { value: dap });
    }
    if dan < 0.0 {
        return Err(Error::NegativeDistance { value: dan });
    }
    if dan < dap {
        Ok(TripletCategory::Hard)
    } else if dap - dan + margin > 0.0 {
        Ok(TripletCategory::SemiHard)
    } else {
        Ok(TripletCategory::Easy)
    }
}

/// Emit one triplet per ordered (anchor, positive) same-label pair. The
/// negative is the hardest semi-hard candidate (smallest d(a,n) inside the
/// margin window); ties and the no-candidate fallback break toward lower row
/// indices.
pub fn mine_semi_hard(
    embeddings: &DenseArray,
    labels: &[usize],
    margin: f64,
    fallback: FallbackPolicy,
) -> Result<MinedTriplets> {
    let (n, _) = embeddings.matrix_dims("mine_semi_hard")?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "mine_semi_hard",
            left: vec![n],
            right: vec![labels.len()],
        });
    }
    if n == 0 {
        return Ok(MinedTriplets {
            triplets: Vec::new(),
            warning: Some(MiningWarning::BatchTooSmall),
        });
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Ok(MinedTriplets {
            triplets: Vec::new(),
            warning: Some(MiningWarning::SingleClassBatch),
        });
    }

    let dist = tensor::pairwise_distances(embeddings, embeddings)?;
    let mut triplets = Vec::new();
    let mut saw_positive_pair = false;

    for anchor in 0..n {
        for positive in 0..n {
            if positive == anchor || labels[positive] != labels[anchor] {
                continue;
            }
            saw_positive_pair = true;
            let dap = dist.at(anchor, positive);

            let mut semi_hard: Option<(usize, f64)> = None;
            let mut hard: Option<(usize, f64)> = None;
            let mut easy: Option<(usize, f64)> = None;
            for negative in 0..n {
                if labels[negative] == labels[anchor] {
                    continue;
                }
                let dan = dist.at(anchor, negative);
                if dan < dap {
                    // Hard: keep the farthest (easiest) one.
                    if hard.is_none_or(|(_, best)| dan > best) {
                        hard = Some((negative, dan));
                    }
                } else if dap - dan + margin > 0.0 {
                    // Semi-hard: keep the closest (hardest) one.
                    if semi_hard.is_none_or(|(_, best)| dan < best) {
                        semi_hard = Some((negative, dan));
                    }
                } else {
                    // Easy: keep the closest one.
                    if easy.is_none_or(|(_, best)| dan < best) {
                        easy = Some((negative, dan));
                    }
                }
            }

            let chosen = match (semi_hard, fallback) {
                (Some((idx, _)), _) => Some(idx),
                (None, FallbackPolicy::NearestToWindow) => {
                    hard.map(|(idx, _)| idx).or(easy.map(|(idx, _)| idx))
                }
                (None, FallbackPolicy::Skip) => None,
            };
            if let Some(negative) = chosen {
                triplets.push(TripletIndices {
                    anchor,
                    positive,
                    negative,
                });
            }
        }
    }

    let warning = if saw_positive_pair {
        None
    } else {
        Some(MiningWarning::NoPositivePairs)
    };
    Ok(MinedTriplets { triplets, warning })
}

/// Build a balanced set of similar and dissimilar pairs, sampled without
/// replacement: min(similar, dissimilar, batch size) of each. When one side
/// is empty the other is emitted alone, capped at the batch size, with a
/// warning.
pub fn mine_pairs(labels: &[usize], seed: u64) -> MinedPairs {
    let n = labels.len();
    if n < 2 {
        return MinedPairs {
            pairs: Vec::new(),
            warning: Some(MiningWarning::BatchTooSmall),
        };
    }
    let mut similar = Vec::new();
    let mut dissimilar = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if labels[i] == labels[j] {
                similar.push(PairIndices {
                    first: i,
                    second: j,
                    similar: 1,
                });
            } else {
                dissimilar.push(PairIndices {
                    first: i,
                    second: j,
                    similar: 0,
                });
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut take = |pool: &mut Vec<PairIndices>, count: usize| -> Vec<PairIndices> {
        pool.shuffle(&mut rng);
        pool[..count].to_vec()
    };

    if dissimilar.is_empty() {
        let count = similar.len().min(n);
        let pairs = take(&mut similar, count);
        return MinedPairs {
            pairs,
            warning: Some(MiningWarning::NoDissimilarPairs),
        };
    }
    if similar.is_empty() {
        let count = dissimilar.len().min(n);
        let pairs = take(&mut dissimilar, count);
        return MinedPairs {
            pairs,
            warning: Some(MiningWarning::NoSimilarPairs),
        };
    }

    let count = similar.len().min(dissimilar.len()).min(n);
    let mut pairs = take(&mut similar, count);
    pairs.extend(take(&mut dissimilar, count));
    MinedPairs {
        pairs,
        warning: None,
    }
}
