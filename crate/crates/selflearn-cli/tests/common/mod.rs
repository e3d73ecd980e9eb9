//! Shared oracles for the acceptance suite: finite differences and an
//! independent brute-force triplet miner. These deliberately re-derive
//! results through routes separate from the library implementation.

#![allow(dead_code)]

use selflearn::mining::TripletIndices;
use selflearn::tensor::DenseArray;

/// Central finite differences of `f` at `x` with step `h`.
pub fn numeric_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        g.push((fp - fm) / (2.0 * h));
    }
    g
}

/// Relative-error agreement at tolerance `tol`, with an absolute floor for
/// near-zero gradients.
pub fn grads_agree(analytic: &[f64], numeric: &[f64], tol: f64) -> Option<String> {
    for (i, (&a, &n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let err = (a - n).abs();
        let scale = a.abs().max(n.abs());
        if err > tol * scale && err > 1e-8 {
            return Some(format!("component {i}: analytic={a}, numeric={n}"));
        }
    }
    None
}

fn dist(emb: &DenseArray, i: usize, j: usize) -> f64 {
    let d = emb.cols();
    let mut acc = 0.0;
    for k in 0..d {
        let diff = emb.at(i, k) - emb.at(j, k);
        acc += diff * diff;
    }
    acc.sqrt()
}

/// Enumerate every (anchor, positive) ordered pair and apply the published
/// negative-selection policy directly: hardest semi-hard, else farthest
/// hard, else closest easy; ties toward lower row indices.
pub fn brute_force_semi_hard(
    emb: &DenseArray,
    labels: &[usize],
    margin: f64,
) -> Vec<TripletIndices> {
    let n = labels.len();
    let mut out = Vec::new();
    if n == 0 || labels.iter().all(|&l| l == labels[0]) {
        return out;
    }
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            let dap = dist(emb, a, p);
            let negatives: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[a]).collect();

            let semi: Vec<usize> = negatives
                .iter()
                .copied()
                .filter(|&j| {
                    let dan = dist(emb, a, j);
                    dan >= dap && dap - dan + margin > 0.0
                })
                .collect();
            let hard: Vec<usize> = negatives
                .iter()
                .copied()
                .filter(|&j| dist(emb, a, j) < dap)
                .collect();
            let easy: Vec<usize> = negatives
                .iter()
                .copied()
                .filter(|&j| {
                    let dan = dist(emb, a, j);
                    dan >= dap && dap - dan + margin <= 0.0
                })
                .collect();

            let closest = |set: &[usize]| {
                set.iter().copied().min_by(|&x, &y| {
                    dist(emb, a, x)
                        .partial_cmp(&dist(emb, a, y))
                        .unwrap()
                        .then(x.cmp(&y))
                })
            };
            let farthest = |set: &[usize]| {
                set.iter().copied().min_by(|&x, &y| {
                    dist(emb, a, y)
                        .partial_cmp(&dist(emb, a, x))
                        .unwrap()
                        .then(x.cmp(&y))
                })
            };

            let negative = if !semi.is_empty() {
                closest(&semi)
            } else if !hard.is_empty() {
                farthest(&hard)
            } else {
                closest(&easy)
            };
            if let Some(negative) = negative {
                out.push(TripletIndices {
                    anchor: a,
                    positive: p,
                    negative,
                });
            }
        }
    }
    out
}

/// Print the verdict line for one acceptance criterion, then enforce it.
pub fn criterion(number: usize, description: &str, ok: bool, detail: String) {
    if ok {
        println!("criterion {number}: PASS - {description}");
    } else {
        println!("criterion {number}: FAIL - {description} ({detail})");
    }
    assert!(ok, "criterion {number} failed: {description}: {detail}");
}
