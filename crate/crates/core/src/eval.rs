//! Hungarian-matched clustering accuracy and the shortcut-reliance gap.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::prototype_bank::argmax;
use crate::tensor::Tensor;

/// Anything that assigns a cluster id to each image.
pub trait ClusterPredictor {
    fn predict(&self, images: &[&Tensor]) -> Result<Vec<usize>>;
}

/// A model together with the temperature used at prediction time.
#[derive(Debug, Clone, Copy)]
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub tau_s: f64,
}

impl ClusterPredictor for ModelPredictor<'_> {
    fn predict(&self, images: &[&Tensor]) -> Result<Vec<usize>> {
        let probs = self.model.probabilities(images, self.tau_s)?;
        Ok(predict_from_probs(&probs))
    }
}

impl<F: Fn(&Tensor) -> usize> ClusterPredictor for F {
    fn predict(&self, images: &[&Tensor]) -> Result<Vec<usize>> {
        Ok(images.iter().map(|x| self(x)).collect())
    }
}

/// Row argmax, ties toward the lowest index.
pub fn predict_from_probs(probs: &Tensor) -> Vec<usize> {
    (0..probs.rows()).map(|i| argmax(probs.row(i)).0).collect()
}

pub fn predict_clusters(model: &Model, images: &[&Tensor], tau_s: f64) -> Result<Vec<usize>> {
    ModelPredictor { model, tau_s }.predict(images)
}

/// `counts[i][j]`: samples predicted `i` whose true class is `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl CostMatrix {
    pub fn build(preds: &[usize], truths: &[usize], k: usize) -> Result<Self> {
        if preds.len() != truths.len() {
            return Err(Error::ShapeMismatch {
                op: "cost_matrix",
                left: vec![preds.len()],
                right: vec![truths.len()],
            });
        }
        let mut counts = vec![0u64; k * k];
        for (&p, &t) in preds.iter().zip(truths) {
            if p >= k || t >= k {
                return Err(Error::domain(
                    "cost_matrix",
                    alloc::format!("id ({p}, {t}) not below K = {k}"),
                ));
            }
            counts[p * k + t] += 1;
        }
        Ok(Self { k, counts })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, pred: usize, truth: usize) -> u64 {
        self.counts[pred * self.k + truth]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Assignment `row → column` maximizing the summed weight of a square
/// matrix, by the potentials form of the Hungarian method in `O(n³)`.
pub fn max_weight_assignment(weights: &[i64], n: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let max = weights.iter().copied().max().unwrap_or(0);
    let cost = |i: usize, j: usize| max - weights[i * n + j];
    // 1-based with a virtual column 0
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_all: f64,
    pub acc_old: f64,
    pub acc_new: f64,
    /// `assignment[cluster] = class`.
    pub assignment: Vec<usize>,
    pub n_all: usize,
    pub n_old: usize,
    pub n_new: usize,
    pub matched_all: usize,
    pub matched_old: usize,
    pub matched_new: usize,
    pub shortcut_gap: Option<f64>,
}

impl EvalReport {
    /// `acc_all·n_all == acc_old·n_old + acc_new·n_new`, checked on the
    /// integer match counts.
    pub fn is_consistent(&self) -> bool {
        let close = |acc: f64, m: usize, n: usize| {
            if n == 0 {
                acc == 0.0
            } else {
                acc == m as f64 / n as f64
            }
        };
        self.matched_all == self.matched_old + self.matched_new
            && self.n_all == self.n_old + self.n_new
            && close(self.acc_all, self.matched_all, self.n_all)
            && close(self.acc_old, self.matched_old, self.n_old)
            && close(self.acc_new, self.matched_new, self.n_new)
    }
}

fn ratio(m: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        m as f64 / n as f64
    }
}

/// All/Old/New accuracy under one optimal cluster-to-class bijection found
/// on all samples. Old and New split by the true class.
pub fn hungarian_accuracy(
    preds: &[usize],
    truths: &[usize],
    known_classes: &[usize],
    k: usize,
) -> Result<EvalReport> {
    let cost = CostMatrix::build(preds, truths, k)?;
    let weights: Vec<i64> = cost.counts.iter().map(|&c| c as i64).collect();
    let assignment = max_weight_assignment(&weights, k);
    let mut known = vec![false; k];
    for &c in known_classes {
        if c >= k {
            return Err(Error::domain(
                "hungarian_accuracy",
                alloc::format!("known class {c} not below K = {k}"),
            ));
        }
        known[c] = true;
    }
    let (mut n_old, mut n_new, mut m_old, mut m_new) = (0, 0, 0, 0);
    for (&p, &t) in preds.iter().zip(truths) {
        let hit = usize::from(assignment[p] == t);
        if known[t] {
            n_old += 1;
            m_old += hit;
        } else {
            n_new += 1;
            m_new += hit;
        }
    }
    let n_all = preds.len();
    let matched_all = m_old + m_new;
    Ok(EvalReport {
        acc_all: ratio(matched_all, n_all),
        acc_old: ratio(m_old, n_old),
        acc_new: ratio(m_new, n_new),
        assignment,
        n_all,
        n_old,
        n_new,
        matched_all,
        matched_old: m_old,
        matched_new: m_new,
        shortcut_gap: None,
    })
}

/// `acc_all(clean) − acc_all(swapped)`, each with its own assignment.
pub fn shortcut_reliance(
    predictor: &impl ClusterPredictor,
    clean: &[&Tensor],
    swapped: &[&Tensor],
    truths: &[usize],
    k: usize,
) -> Result<f64> {
    if clean.len() != swapped.len() || clean.len() != truths.len() {
        return Err(Error::ShapeMismatch {
            op: "shortcut_reliance",
            left: vec![clean.len(), swapped.len()],
            right: vec![truths.len()],
        });
    }
    let a = hungarian_accuracy(&predictor.predict(clean)?, truths, &[], k)?;
    let b = hungarian_accuracy(&predictor.predict(swapped)?, truths, &[], k)?;
    Ok(a.acc_all - b.acc_all)
}
