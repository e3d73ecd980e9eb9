//! Pseudo-label assignment, confidence scoring, and promotion of the most
//! confident predictions from the unlabeled pool into the labeled pool.

use crate::error::{Error, Result};
use crate::tensor::{self, DenseArray};

/// Where a labeled example's label came from. Seed labels are immutable for
/// the lifetime of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Seed,
    Pseudo,
}

#[derive(Clone, Debug)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: usize,
    pub origin: Origin,
}

/// Unlabeled features. The withheld ground truth rides along purely for
/// pseudo-label accuracy reporting; training never reads it.
#[derive(Clone, Debug)]
pub struct UnlabeledExample {
    pub features: Vec<f64>,
    pub audit_label: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TestExample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// Disjoint labeled and unlabeled pools plus the held-out test set.
#[derive(Clone, Debug)]
pub struct DataPools {
    pub labeled: Vec<LabeledExample>,
    pub unlabeled: Vec<UnlabeledExample>,
    pub test: Vec<TestExample>,
    pub classes: usize,
}

impl DataPools {
    pub fn labeled_features(&self) -> Result<DenseArray> {
        DenseArray::from_rows(
            &self
                .labeled
                .iter()
                .map(|e| e.features.clone())
                .collect::<Vec<_>>(),
        )
    }

    pub fn labeled_labels(&self) -> Vec<usize> {
        self.labeled.iter().map(|e| e.label).collect()
    }

    pub fn unlabeled_features(&self) -> Result<DenseArray> {
        DenseArray::from_rows(
            &self
                .unlabeled
                .iter()
                .map(|e| e.features.clone())
                .collect::<Vec<_>>(),
        )
    }

    pub fn test_features(&self) -> Result<DenseArray> {
        DenseArray::from_rows(
            &self
                .test
                .iter()
                .map(|e| e.features.clone())
                .collect::<Vec<_>>(),
        )
    }

    pub fn test_labels(&self) -> Vec<usize> {
        self.test.iter().map(|e| e.label).collect()
    }

    pub fn seed_count(&self) -> usize {
        self.labeled
            .iter()
            .filter(|e| e.origin == Origin::Seed)
            .count()
    }
}

/// A pseudo-label candidate: which unlabeled example, what label, and how
/// confident (higher is more confident).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredPrediction {
    pub index: usize,
    pub label: usize,
    pub confidence: f64,
}

/// k-nearest-neighbor prediction over embeddings. For k=1 the confidence is
/// the negated nearest distance; for k>1 it is the negated mean distance to
/// the k neighbors, with majority votes broken by smaller mean distance then
/// smaller class id.
pub fn knn_predict(
    labeled_embeddings: &DenseArray,
    labeled_labels: &[usize],
    query_embeddings: &DenseArray,
    k: usize,
) -> Result<Vec<ScoredPrediction>> {
    let (n_labeled, _) = labeled_embeddings.matrix_dims("knn_predict")?;
    if n_labeled == 0 || labeled_labels.is_empty() {
        return Err(Error::EmptyLabeledPool);
    }
    if labeled_labels.len() != n_labeled {
        return Err(Error::ShapeMismatch {
            op: "knn_predict",
            left: vec![n_labeled],
            right: vec![labeled_labels.len()],
        });
    }
    if k == 0 || k > n_labeled {
        return Err(Error::InvalidNeighborCount {
            k,
            labeled: n_labeled,
        });
    }

    let dist = tensor::pairwise_distances(query_embeddings, labeled_embeddings)?;
    let n_query = dist.rows();
    let mut out = Vec::with_capacity(n_query);
    for q in 0..n_query {
        let row = dist.row(q);
        let mut order: Vec<usize> = (0..n_labeled).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let neighbors = &order[..k];

        let mean_dist: f64 = neighbors.iter().map(|&i| row[i]).sum::<f64>() / k as f64;
        let label = if k == 1 {
            labeled_labels[neighbors[0]]
        } else {
            // Majority vote; ties by smaller mean distance, then class id.
            let mut tally: Vec<(usize, usize, f64)> = Vec::new(); // (class, votes, dist sum)
            for &i in neighbors {
                let class = labeled_labels[i];
                match tally.iter_mut().find(|t| t.0 == class) {
                    Some(t) => {
                        t.1 += 1;
                        t.2 += row[i];
                    }
                    None => tally.push((class, 1, row[i])),
                }
            }
            tally
                .iter()
                .min_by(|a, b| {
                    b.1.cmp(&a.1)
                        .then((a.2 / a.1 as f64).total_cmp(&(b.2 / b.1 as f64)))
                        .then(a.0.cmp(&b.0))
                })
                .expect("k >= 1")
                .0
        };
        out.push(ScoredPrediction {
            index: q,
            label,
            confidence: -mean_dist,
        });
    }
    Ok(out)
}

/// Argmax prediction with the maximum softmax probability as confidence.
/// Ties pick the smallest class index.
pub fn softmax_predict(logits: &DenseArray) -> Result<Vec<ScoredPrediction>> {
    let (n, c) = logits.matrix_dims("softmax_predict")?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = logits.row(i);
        let mut best = 0;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        let max = row[best];
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        out.push(ScoredPrediction {
            index: i,
            label: best,
            confidence: 1.0 / denom,
        });
    }
    Ok(out)
}

fn selection_count(total: usize, p: f64) -> Result<usize> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidSelectionFraction { p });
    }
    Ok((p * total as f64).ceil() as usize)
}

/// Take the ceil(p * |predictions|) most confident predictions, breaking
/// confidence ties toward the lower unlabeled index.
pub fn select_top(predictions: &[ScoredPrediction], p: f64) -> Result<Vec<ScoredPrediction>> {
    let n = selection_count(predictions.len(), p)?;
    let mut ranked = predictions.to_vec();
    ranked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.index.cmp(&b.index)));
    ranked.truncate(n);
    Ok(ranked)
}

/// Class-balanced variant: rank within each predicted class and pick in
/// round-robin passes over class ids until ceil(p * |predictions|) are taken.
pub fn select_top_class_balanced(
    predictions: &[ScoredPrediction],
    p: f64,
    classes: usize,
) -> Result<Vec<ScoredPrediction>> {
    let n = selection_count(predictions.len(), p)?;
    let mut per_class: Vec<Vec<ScoredPrediction>> = vec![Vec::new(); classes];
    for pred in predictions {
        if pred.label >= classes {
            return Err(Error::LabelOutOfRange {
                label: pred.label,
                classes,
            });
        }
        per_class[pred.label].push(*pred);
    }
    for class in per_class.iter_mut() {
        class.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.index.cmp(&b.index)));
        class.reverse(); // pop from the back
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut exhausted = true;
        for class in per_class.iter_mut() {
            if out.len() == n {
                break;
            }
            if let Some(pred) = class.pop() {
                out.push(pred);
                exhausted = false;
            }
        }
        if exhausted {
            break;
        }
    }
    Ok(out)
}

/// Move the selected examples from the unlabeled pool into the labeled pool
/// with their predicted labels and `Origin::Pseudo`.
pub fn promote(pools: &mut DataPools, selected: &[ScoredPrediction]) -> Result<()> {
    let mut indices: Vec<(usize, usize)> = selected
        .iter()
        .map(|s| (s.index, s.label))
        .collect();
    indices.sort_by_key(|&(i, _)| i);
    for w in indices.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(Error::DuplicateSelection { index: w[0].0 });
        }
    }
    for &(i, _) in &indices {
        if i >= pools.unlabeled.len() {
            return Err(Error::SelectionOutOfBounds {
                index: i,
                unlabeled: pools.unlabeled.len(),
            });
        }
    }
    // Remove from the back so earlier indices stay valid.
    for &(i, label) in indices.iter().rev() {
        let example = pools.unlabeled.remove(i);
        pools.labeled.push(LabeledExample {
            features: example.features,
            label,
            origin: Origin::Pseudo,
        });
    }
    Ok(())
}
