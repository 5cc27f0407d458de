//! Known-class feature means and the shortcut suppression losses built on
//! them.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{cosine_logits, Model};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsrConfig {
    pub enabled: bool,
    pub tau: f64,
    /// Steps between rebuilds; 0 rebuilds once per epoch.
    pub refresh_every_steps: usize,
    /// `β` is forced to 0 for this many epochs.
    pub warmup_epochs: usize,
    /// Blend `p ← m·p + (1−m)·mean` instead of replacing.
    pub ema_momentum: Option<f64>,
    /// Route a sample only when its top probability exceeds this.
    pub route_threshold: Option<f64>,
}

impl Default for SsrConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            tau: 0.1,
            refresh_every_steps: 0,
            warmup_epochs: 2,
            ema_momentum: None,
            route_threshold: None,
        }
    }
}

impl SsrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(
                "ssr.tau",
                alloc::format!("temperature {} must be > 0", self.tau),
            ));
        }
        if let Some(m) = self.ema_momentum {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::invalid(
                    "ssr.ema_momentum",
                    alloc::format!("{m} not in [0, 1)"),
                ));
            }
        }
        if let Some(t) = self.route_threshold {
            if !(0.0..1.0).contains(&t) {
                return Err(Error::invalid(
                    "ssr.route_threshold",
                    alloc::format!("{t} not in [0, 1)"),
                ));
            }
        }
        Ok(())
    }
}

/// One non-learned feature mean per known class, rows in the order of
/// `known_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    known_classes: Vec<usize>,
    prototypes: Tensor,
    last_refresh_step: Option<u64>,
    ema_momentum: Option<f64>,
}

impl PrototypeBank {
    pub fn new(
        known_classes: &[usize],
        feature_dim: usize,
        ema_momentum: Option<f64>,
    ) -> Result<Self> {
        if known_classes.is_empty() {
            return Err(Error::invalid("known_classes", "empty"));
        }
        let mut known_classes = known_classes.to_vec();
        known_classes.sort_unstable();
        known_classes.dedup();
        let n = known_classes.len();
        Ok(Self {
            known_classes,
            prototypes: Tensor::zeros(vec![n, feature_dim]),
            last_refresh_step: None,
            ema_momentum,
        })
    }

    pub fn known_classes(&self) -> &[usize] {
        &self.known_classes
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn last_refresh_step(&self) -> Option<u64> {
        self.last_refresh_step
    }

    /// Bank row of class `c`, if known.
    pub fn row_of(&self, class: usize) -> Option<usize> {
        self.known_classes.binary_search(&class).ok()
    }

    /// Rebuilds every row as the mean feature of that class's labeled
    /// images under the current model.
    pub fn refresh(
        &mut self,
        model: &Model,
        labeled: &[(&Tensor, usize)],
        step: u64,
    ) -> Result<()> {
        let images: Vec<&Tensor> = labeled.iter().map(|(x, _)| *x).collect();
        let feats = model.features(&images)?;
        self.refresh_from_features(&feats, labeled.iter().map(|(_, y)| *y), step)
    }

    /// As [`refresh`](Self::refresh), from precomputed feature rows.
    pub fn refresh_from_features(
        &mut self,
        features: &Tensor,
        labels: impl IntoIterator<Item = usize>,
        step: u64,
    ) -> Result<()> {
        let d = self.prototypes.row_len();
        if features.row_len() != d {
            return Err(Error::ShapeMismatch {
                op: "refresh",
                left: self.prototypes.shape().to_vec(),
                right: features.shape().to_vec(),
            });
        }
        let n = self.known_classes.len();
        let mut sums = vec![0.0; n * d];
        let mut counts = vec![0usize; n];
        for (i, y) in labels.into_iter().enumerate() {
            let Some(r) = self.row_of(y) else {
                return Err(Error::domain(
                    "refresh",
                    alloc::format!("class {y} is not known"),
                ));
            };
            counts[r] += 1;
            for (s, v) in sums[r * d..(r + 1) * d].iter_mut().zip(features.row(i)) {
                *s += v;
            }
        }
        if let Some(r) = counts.iter().position(|&c| c == 0) {
            return Err(Error::domain(
                "refresh",
                alloc::format!(
                    "known class {} has no labeled samples",
                    self.known_classes[r]
                ),
            ));
        }
        for (r, &c) in counts.iter().enumerate() {
            sums[r * d..(r + 1) * d]
                .iter_mut()
                .for_each(|s| *s /= c as f64);
        }
        let blended = match (self.ema_momentum, self.last_refresh_step) {
            (Some(m), Some(_)) => self
                .prototypes
                .data()
                .iter()
                .zip(&sums)
                .map(|(old, new)| m * old + (1.0 - m) * new)
                .collect(),
            _ => sums,
        };
        self.prototypes = Tensor::new(vec![n, d], blended)?;
        self.last_refresh_step = Some(step);
        Ok(())
    }
}

/// Mean over rows of `−log softmax_k(sim(f_i, p_k)/τ)[c_i]`, with `rows[i]`
/// the bank row of sample `i`'s predicted class.
pub fn l_pa_pos(
    tape: &mut Tape,
    f: Var,
    rows: &[usize],
    bank: &PrototypeBank,
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::domain(
            "l_pa_pos",
            alloc::format!("temperature {tau} must be > 0"),
        ));
    }
    let n = tape.shape(f)[0];
    if rows.len() != n {
        return Err(Error::ShapeMismatch {
            op: "l_pa_pos",
            left: tape.shape(f).to_vec(),
            right: vec![rows.len()],
        });
    }
    if n == 0 {
        return Ok(tape.scalar(0.0));
    }
    let k = bank.known_classes.len();
    let mut pick = vec![0.0; n * k];
    for (i, &r) in rows.iter().enumerate() {
        if r >= k {
            return Err(Error::domain(
                "l_pa_pos",
                alloc::format!("bank row {r} of {k}"),
            ));
        }
        pick[i * k + r] = 1.0;
    }
    let protos = tape.constant(bank.prototypes.clone());
    let sim = cosine_logits(tape, f, protos)?;
    let log_p = tape.log_softmax_rows(sim, tau)?;
    let pick = tape.constant(Tensor::new(vec![n, k], pick)?);
    let picked = tape.mul(log_p, pick)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / n as f64))
}

/// Mean over rows of `−(1/|Y_l|) Σ_c log(1 − σ(sim(f_i, p_c)))`.
pub fn l_pa_neg(tape: &mut Tape, f: Var, bank: &PrototypeBank) -> Result<Var> {
    let n = tape.shape(f)[0];
    if n == 0 {
        return Ok(tape.scalar(0.0));
    }
    let k = bank.known_classes.len();
    let protos = tape.constant(bank.prototypes.clone());
    let sim = cosine_logits(tape, f, protos)?;
    // 1 − σ(s) = σ(−s)
    let neg = tape.neg(sim);
    let keep = tape.sigmoid(neg);
    let log_keep = tape.log(keep)?;
    let s = tape.sum(log_keep);
    Ok(tape.scale(s, -1.0 / (n * k) as f64))
}

/// Which branch each unlabeled row takes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Routing {
    /// `(row, bank row)` for samples predicted as a known class.
    pub positive: Vec<(usize, usize)>,
    /// Rows predicted as a novel class.
    pub negative: Vec<usize>,
}

/// Routes rows of `probs` by their argmax (lowest index on ties); rows
/// whose top probability does not exceed `threshold` are left out.
pub fn route(probs: &Tensor, bank: &PrototypeBank, threshold: Option<f64>) -> Routing {
    let mut out = Routing::default();
    for i in 0..probs.rows() {
        let row = probs.row(i);
        let (arg, top) = argmax(row);
        if threshold.is_some_and(|t| top <= t) {
            continue;
        }
        match bank.row_of(arg) {
            Some(r) => out.positive.push((i, r)),
            None => out.negative.push(i),
        }
    }
    out
}

/// Index and value of the first maximum.
pub fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, &v) in row.iter().enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best
}

/// Positive and negative SSR terms for unlabeled features `f`; an empty
/// branch contributes 0.
pub fn l_ssr(
    tape: &mut Tape,
    f: Var,
    routing: &Routing,
    bank: &PrototypeBank,
    tau: f64,
) -> Result<(Var, Var)> {
    let (idx, rows): (Vec<usize>, Vec<usize>) = routing.positive.iter().copied().unzip();
    let pos = if idx.is_empty() {
        tape.scalar(0.0)
    } else {
        let fp = tape.gather_rows(f, &idx)?;
        l_pa_pos(tape, fp, &rows, bank, tau)?
    };
    let neg = if routing.negative.is_empty() {
        tape.scalar(0.0)
    } else {
        let fnv = tape.gather_rows(f, &routing.negative)?;
        l_pa_neg(tape, fnv, bank)?
    };
    Ok((pos, neg))
}
