//! Contrastive, classification and consistency losses and their weighted
//! total.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::classify_with;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau_u: f64,
    pub tau_c: f64,
    pub tau_s: f64,
    pub tau_t: f64,
    /// Keep the positive pair in the contrastive denominators.
    pub include_positive: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.35,
            epsilon: 1.0,
            alpha: 1.0,
            beta: 0.5,
            tau_u: 0.07,
            tau_c: 0.07,
            tau_s: 0.1,
            tau_t: 0.05,
            include_positive: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (field, t) in [
            ("loss.tau_u", self.tau_u),
            ("loss.tau_c", self.tau_c),
            ("loss.tau_s", self.tau_s),
            ("loss.tau_t", self.tau_t),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid(
                    field,
                    alloc::format!("temperature {t} must be > 0"),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(
                "loss.lambda",
                alloc::format!("{} not in [0, 1]", self.lambda),
            ));
        }
        for (field, v) in [
            ("loss.alpha", self.alpha),
            ("loss.beta", self.beta),
            ("loss.epsilon", self.epsilon),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(field, alloc::format!("{v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// One value per term of the objective. `T` is a tape handle while the
/// loss is being built and a plain `f64` once it is logged.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts<T> {
    pub l_rep_u: T,
    pub l_rep_s: T,
    pub l_cls_u: T,
    pub l_cls_s: T,
    pub h_mean_entropy: T,
    pub l_kl: T,
    pub l_ssr_pos: T,
    pub l_ssr_neg: T,
}

impl<T: Copy> LossParts<T> {
    pub fn named(&self) -> [(&'static str, T); 8] {
        [
            ("l_rep_u", self.l_rep_u),
            ("l_rep_s", self.l_rep_s),
            ("l_cls_u", self.l_cls_u),
            ("l_cls_s", self.l_cls_s),
            ("h_mean_entropy", self.h_mean_entropy),
            ("l_kl", self.l_kl),
            ("l_ssr_pos", self.l_ssr_pos),
            ("l_ssr_neg", self.l_ssr_neg),
        ]
    }
}

impl LossParts<Var> {
    pub fn values(&self, tape: &Tape) -> LossParts<f64> {
        LossParts {
            l_rep_u: tape.item(self.l_rep_u),
            l_rep_s: tape.item(self.l_rep_s),
            l_cls_u: tape.item(self.l_cls_u),
            l_cls_s: tape.item(self.l_cls_s),
            h_mean_entropy: tape.item(self.h_mean_entropy),
            l_kl: tape.item(self.l_kl),
            l_ssr_pos: tape.item(self.l_ssr_pos),
            l_ssr_neg: tape.item(self.l_ssr_neg),
        }
    }
}

impl LossParts<f64> {
    /// The weighted total recomputed from logged parts.
    pub fn total(&self, w: &LossWeights) -> f64 {
        let l = w.lambda;
        let rep = (1.0 - l) * self.l_rep_u + l * self.l_rep_s;
        let cls = (1.0 - l) * (self.l_cls_u - w.epsilon * self.h_mean_entropy) + l * self.l_cls_s;
        w.alpha * (rep + cls + self.l_kl) + w.beta * (self.l_ssr_pos + self.l_ssr_neg)
    }
}

/// Mean over anchors `i` of `−log(exp(s_iq/τ) / Σ_{n≠q} exp(s_in/τ))`,
/// averaged over each anchor's positives `q`. `positives[i]` lists the
/// columns of `z2` paired with row `i` of `z`.
fn contrastive(
    tape: &mut Tape,
    z: Var,
    z2: Var,
    positives: &[Vec<usize>],
    tau: f64,
    include_positive: bool,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::domain(
            "contrastive",
            alloc::format!("temperature {tau} must be > 0"),
        ));
    }
    let b = tape.shape(z2)[0];
    let t = tape.transpose(z2)?;
    let s = tape.matmul(z, t)?;
    let s = tape.scale(s, 1.0 / tau);
    // row max as a constant shift, which cancels in the ratio
    let max: Vec<f64> = tape
        .value(s)
        .chunks(b)
        .map(|r| r.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)))
        .collect();
    let max = tape.constant(Tensor::new(vec![max.len()], max)?);
    let max = tape.col_broadcast(max, b)?;
    let s = tape.sub(s, max)?;

    let mut rows = Vec::new();
    let mut pick = Vec::new();
    let mut keep = Vec::new();
    let mut weight = Vec::new();
    for (i, pos) in positives.iter().enumerate() {
        for &q in pos {
            rows.push(i);
            let mut onehot = vec![0.0; b];
            onehot[q] = 1.0;
            let mut mask = vec![1.0; b];
            if !include_positive {
                mask[q] = 0.0;
            }
            pick.extend(onehot);
            keep.extend(mask);
            weight.push(1.0 / (positives.len() * pos.len()) as f64);
        }
    }
    let m = rows.len();
    let s_rows = tape.gather_rows(s, &rows)?;
    let pick = tape.constant(Tensor::new(vec![m, b], pick)?);
    let keep = tape.constant(Tensor::new(vec![m, b], keep)?);
    let weight = tape.constant(Tensor::new(vec![m], weight)?);

    let pos_logit = tape.mul(s_rows, pick)?;
    let pos_logit = tape.sum_rows(pos_logit)?;
    let e = tape.exp(s_rows);
    let e = tape.mul(e, keep)?;
    let den = tape.sum_rows(e)?;
    let log_den = tape.log(den)?;
    let per = tape.sub(log_den, pos_logit)?;
    let weighted = tape.mul(per, weight)?;
    Ok(tape.sum(weighted))
}

/// Unsupervised contrastive loss between two views' projections.
pub fn l_rep_u(
    tape: &mut Tape,
    z: Var,
    z2: Var,
    tau_u: f64,
    include_positive: bool,
) -> Result<Var> {
    let b = tape.shape(z)[0];
    if b < 2 {
        return Err(Error::domain(
            "l_rep_u",
            alloc::format!("batch of {b} has no negatives"),
        ));
    }
    let positives: Vec<Vec<usize>> = (0..b).map(|i| vec![i]).collect();
    contrastive(tape, z, z2, &positives, tau_u, include_positive)
}

/// Supervised contrastive loss over labeled rows only. Positives of `i`
/// are the other rows with the same label, or `i`'s own second view when
/// its label is unique in the batch.
pub fn l_rep_s(
    tape: &mut Tape,
    z: Var,
    z2: Var,
    labels: &[usize],
    tau_c: f64,
    include_positive: bool,
) -> Result<Var> {
    let b = tape.shape(z)[0];
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            op: "l_rep_s",
            left: tape.shape(z).to_vec(),
            right: vec![labels.len()],
        });
    }
    if b < 2 {
        return Err(Error::domain(
            "l_rep_s",
            alloc::format!("{b} labeled rows, need 2"),
        ));
    }
    let positives: Vec<Vec<usize>> = (0..b)
        .map(|i| {
            let same: Vec<usize> = (0..b)
                .filter(|&q| q != i && labels[q] == labels[i])
                .collect();
            if same.is_empty() {
                vec![i]
            } else {
                same
            }
        })
        .collect();
    contrastive(tape, z, z2, &positives, tau_c, include_positive)
}

/// Sharpened, gradient-stopped class probabilities of the teacher view.
pub fn pseudo_labels(tape: &mut Tape, h_teacher: Var, prototypes: Var, tau_t: f64) -> Result<Var> {
    let q = classify_with(tape, h_teacher, prototypes, tau_t)?;
    Ok(tape.stop_gradient(q))
}

/// Classification terms for one batch.
#[derive(Debug, Clone, Copy)]
pub struct ClsParts {
    pub l_cls_u: Var,
    pub l_cls_s: Var,
    pub h_mean_entropy: Var,
    pub total: Var,
}

/// `(1−λ)(L_u − ε·H(p̄)) + λ·L_s`, with `H` the (non-negative) entropy of
/// the mean prediction over both views. `labeled` pairs a row of `p` with
/// its class.
pub fn l_cls(
    tape: &mut Tape,
    p: Var,
    p2: Var,
    q: Var,
    labeled: &[(usize, usize)],
    lambda: f64,
    epsilon: f64,
) -> Result<ClsParts> {
    let (b, k) = match *tape.shape(p) {
        [b, k] => (b, k),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "l_cls",
                left: tape.shape(p).to_vec(),
                right: vec![0, 0],
            })
        }
    };
    let log_p = tape.log(p)?;
    let ce = tape.mul(q, log_p)?;
    let ce = tape.sum(ce);
    let l_cls_u = tape.scale(ce, -1.0 / b as f64);

    let l_cls_s = if labeled.is_empty() {
        tape.scalar(0.0)
    } else {
        let mut target = vec![0.0; b * k];
        for &(row, class) in labeled {
            if row >= b || class >= k {
                return Err(Error::domain(
                    "l_cls",
                    alloc::format!("label ({row}, {class}) outside [{b}×{k}]"),
                ));
            }
            target[row * k + class] += 1.0;
        }
        let target = tape.constant(Tensor::new(vec![b, k], target)?);
        let ce = tape.mul(target, log_p)?;
        let ce = tape.sum(ce);
        tape.scale(ce, -1.0 / labeled.len() as f64)
    };

    let both = tape.concat_rows(&[p, p2])?;
    let mean = tape.mean_cols(both)?;
    let log_mean = tape.log(mean)?;
    let plogp = tape.mul(mean, log_mean)?;
    let neg_h = tape.sum(plogp);
    let h_mean_entropy = tape.neg(neg_h);

    let reg = tape.scale(h_mean_entropy, epsilon);
    let unsup = tape.sub(l_cls_u, reg)?;
    let unsup = tape.scale(unsup, 1.0 - lambda);
    let sup = tape.scale(l_cls_s, lambda);
    let total = tape.add(unsup, sup)?;
    Ok(ClsParts {
        l_cls_u,
        l_cls_s,
        h_mean_entropy,
        total,
    })
}

/// Mean `KL(p_weak ‖ p_strong)` over paired rows; the weak view is a fixed
/// target. Zero rows give 0.
pub fn l_kl_sva(tape: &mut Tape, p_weak: Var, p_strong: Var) -> Result<Var> {
    let n = tape.shape(p_weak)[0];
    if n == 0 {
        return Ok(tape.scalar(0.0));
    }
    let target = tape.value(p_weak).to_vec();
    let self_term: f64 = target
        .iter()
        .filter(|&&t| t > 0.0)
        .map(|&t| t * libm::log(t))
        .sum();
    let target = tape.constant(Tensor::new(tape.shape(p_weak).to_vec(), target)?);
    let log_s = tape.log(p_strong)?;
    let cross = tape.mul(target, log_s)?;
    let cross = tape.sum(cross);
    let self_term = tape.scalar(self_term);
    let kl = tape.sub(self_term, cross)?;
    Ok(tape.scale(kl, 1.0 / n as f64))
}

/// The consistency integrand exactly as printed:
/// `mean_i Σ_k p(x_i)_k · log(p(x′_i)_k / p(x̃_i)_k)`, with the clean and
/// weak predictions held fixed.
pub fn l_kl_as_printed(tape: &mut Tape, p_clean: Var, p_weak: Var, p_strong: Var) -> Result<Var> {
    let n = tape.shape(p_clean)[0];
    if n == 0 {
        return Ok(tape.scalar(0.0));
    }
    let clean = tape.stop_gradient(p_clean);
    let weak = tape.stop_gradient(p_weak);
    let log_w = tape.log(weak)?;
    let log_s = tape.log(p_strong)?;
    let ratio = tape.sub(log_w, log_s)?;
    let terms = tape.mul(clean, ratio)?;
    let sum = tape.sum(terms);
    Ok(tape.scale(sum, 1.0 / n as f64))
}

/// `α·(L_rep + L_cls + L_KL) + β·L_SSR`, rejecting any non-finite part.
pub fn total_loss(tape: &mut Tape, parts: &LossParts<Var>, w: &LossWeights) -> Result<Var> {
    for (name, v) in parts.named() {
        if !tape.value(v).iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(name));
        }
    }
    let l = w.lambda;
    let u = tape.scale(parts.l_rep_u, 1.0 - l);
    let s = tape.scale(parts.l_rep_s, l);
    let rep = tape.add(u, s)?;
    let reg = tape.scale(parts.h_mean_entropy, w.epsilon);
    let cu = tape.sub(parts.l_cls_u, reg)?;
    let cu = tape.scale(cu, 1.0 - l);
    let cs = tape.scale(parts.l_cls_s, l);
    let cls = tape.add(cu, cs)?;
    let first = tape.add(rep, cls)?;
    let first = tape.add(first, parts.l_kl)?;
    let first = tape.scale(first, w.alpha);
    let ssr = tape.add(parts.l_ssr_pos, parts.l_ssr_neg)?;
    let ssr = tape.scale(ssr, w.beta);
    tape.add(first, ssr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn c(tape: &mut Tape, rows: &[&[f64]]) -> Var {
        tape.constant(Tensor::from_rows(rows).unwrap())
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = rng::from_seed(seed);
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols)
                .map(|_| r.random_range(-2.0..2.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn l_rep_u_examples() {
        let mut t = Tape::new();
        let z = c(&mut t, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = l_rep_u(&mut t, z, z, 1.0, false).unwrap();
        assert!((t.item(l) + 1.0).abs() < 1e-12);

        let one = c(&mut t, &[&[1.0, 0.0]]);
        assert!(l_rep_u(&mut t, one, one, 1.0, false).is_err());

        for b in [2usize, 3, 7] {
            let rows = vec![[0.6, 0.8]; b];
            let z = t.constant(Tensor::from_rows(&rows).unwrap());
            let l = l_rep_u(&mut t, z, z, 0.3, false).unwrap();
            assert!((t.item(l) - ((b - 1) as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn l_rep_s_examples() {
        let mut t = Tape::new();
        let z = c(&mut t, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = l_rep_s(&mut t, z, z, &[3, 3], 1.0, false).unwrap();
        assert!((t.item(l) - 1.0).abs() < 1e-12);

        let z = t.constant(random(4, 3, 1));
        let z = t.l2_normalize_rows(z).unwrap();
        let z2 = t.constant(random(4, 3, 2));
        let z2 = t.l2_normalize_rows(z2).unwrap();
        let s = l_rep_s(&mut t, z, z2, &[0, 1, 2, 3], 0.5, false).unwrap();
        let u = l_rep_u(&mut t, z, z2, 0.5, false).unwrap();
        assert!((t.item(s) - t.item(u)).abs() < 1e-12);
    }

    #[test]
    fn pseudo_labels_sharpen_and_stop_gradient() {
        let mut t = Tape::new();
        let h = t.leaf(&random(3, 4, 3).with_requires_grad(true));
        let c = t.constant(random(5, 4, 4));
        let q = pseudo_labels(&mut t, h, c, 1e-3).unwrap();
        for row in t.value(q).chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().cloned().fold(0.0, f64::max) > 0.99);
        }
        let s = t.sum(q);
        let g = t.backward(s).unwrap();
        assert!(g.get(h).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn l_cls_examples() {
        let k = 4;
        let mut t = Tape::new();
        let uniform = t.constant(Tensor::full(vec![3, k], 0.25));
        let parts = l_cls(&mut t, uniform, uniform, uniform, &[], 0.35, 1.0).unwrap();
        let log_k = (k as f64).ln();
        assert!((t.item(parts.l_cls_u) - log_k).abs() < 1e-12);
        assert!((t.item(parts.h_mean_entropy) - log_k).abs() < 1e-12);
        assert_eq!(t.item(parts.l_cls_s), 0.0);
        assert!((t.item(parts.total) - 0.65 * (log_k - log_k)).abs() < 1e-12);

        let p = c(&mut t, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let parts = l_cls(&mut t, p, p, p, &[(0, 0), (1, 1)], 0.5, 1.0);
        // log 0 on the off entries is outside the domain
        assert!(parts.is_err());
        let p = c(&mut t, &[&[1.0 - 1e-300, 1e-300]]);
        let parts = l_cls(&mut t, p, p, p, &[(0, 0)], 0.5, 1.0).unwrap();
        assert!(t.item(parts.l_cls_s).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let mut t = Tape::new();
        let a = c(&mut t, &[&[0.2, 0.8], &[0.6, 0.4]]);
        let l = l_kl_sva(&mut t, a, a).unwrap();
        assert!(t.item(l).abs() < 1e-15);

        let w = c(&mut t, &[&[1.0, 0.0]]);
        let s = c(&mut t, &[&[0.5, 0.5]]);
        let l = l_kl_sva(&mut t, w, s).unwrap();
        assert!((t.item(l) - core::f64::consts::LN_2).abs() < 1e-12);

        let empty = t.constant(Tensor::zeros(vec![0, 2]));
        let l = l_kl_sva(&mut t, empty, empty).unwrap();
        assert_eq!(t.item(l), 0.0);
    }

    #[test]
    fn kl_sends_no_gradient_to_weak_view() {
        let mut t = Tape::new();
        let wl = t.leaf(&random(3, 4, 5).with_requires_grad(true));
        let sl = t.leaf(&random(3, 4, 6).with_requires_grad(true));
        let w = t.softmax_rows(wl, 1.0).unwrap();
        let s = t.softmax_rows(sl, 1.0).unwrap();
        let l = l_kl_sva(&mut t, w, s).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(wl).unwrap().iter().all(|&v| v == 0.0));
        assert!(g.get(sl).unwrap().iter().any(|&v| v != 0.0));
    }

    fn parts(t: &mut Tape, vals: [f64; 8]) -> LossParts<Var> {
        let v: Vec<Var> = vals.iter().map(|&x| t.scalar(x)).collect();
        LossParts {
            l_rep_u: v[0],
            l_rep_s: v[1],
            l_cls_u: v[2],
            l_cls_s: v[3],
            h_mean_entropy: v[4],
            l_kl: v[5],
            l_ssr_pos: v[6],
            l_ssr_neg: v[7],
        }
    }

    #[test]
    fn total_loss_accounting() {
        let vals = [1.3, 0.7, 2.1, 0.4, 1.9, 0.25, 0.6, 0.8];
        let w = LossWeights::default();
        let mut t = Tape::new();
        let p = parts(&mut t, vals);
        let total = total_loss(&mut t, &p, &w).unwrap();
        assert!((t.item(total) - p.values(&t).total(&w)).abs() < 1e-12);

        let w2 = LossWeights {
            alpha: 2.0,
            beta: 0.0,
            ..w
        };
        let w1 = LossWeights {
            alpha: 1.0,
            beta: 0.0,
            ..w
        };
        let t2 = total_loss(&mut t, &p, &w2).unwrap();
        let t1 = total_loss(&mut t, &p, &w1).unwrap();
        assert!((t.item(t2) - 2.0 * t.item(t1)).abs() < 1e-12);

        let mut bad = vals;
        bad[5] = f64::NAN;
        let p = parts(&mut t, bad);
        match total_loss(&mut t, &p, &w) {
            Err(Error::NonFinite(name)) => assert_eq!(name, "l_kl"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validate_rejects_bad_weights() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights {
            tau_s: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            lambda: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            beta: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
