//! Finite-difference checks of every loss on small random instances.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{
    l_cls, l_kl_as_printed, l_kl_sva, l_rep_s, l_rep_u, total_loss, LossParts, LossWeights,
};
use crate::model::classify_with;
use crate::prototype_bank::{l_pa_neg, l_pa_pos, l_ssr, PrototypeBank, Routing};
use crate::rng::{self, Rng};
use crate::tensor::{grad_check_on, Fault, OpKind, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Every checked loss, in report order.
pub const LOSSES: [&str; 11] = [
    "l_rep_u",
    "l_rep_s",
    "classify",
    "l_cls_u",
    "l_cls",
    "l_kl_sva",
    "l_kl_as_printed",
    "l_pa_pos",
    "l_pa_neg",
    "l_ssr",
    "total",
];

/// Kinds the fault mode picks from; each lies on the differentiable path
/// of several checks, and `Sum` on all of them.
const FAULT_KINDS: [OpKind; 6] = [
    OpKind::Sum,
    OpKind::MatMul,
    OpKind::L2NormalizeRows,
    OpKind::Mul,
    OpKind::Log,
    OpKind::Exp,
];

/// A wrong backward rule chosen from `seed`.
pub fn seeded_fault(seed: u64) -> Fault {
    let mut r = rng::stream(seed, "fault");
    Fault {
        kind: FAULT_KINDS[r.random_range(0..FAULT_KINDS.len())],
        factor: r.random_range(1.5..3.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCheck {
    pub name: &'static str,
    pub instances: usize,
    pub failed_instances: usize,
    pub max_rel_error: f64,
}

impl LossCheck {
    pub fn passed(&self) -> bool {
        self.failed_instances == 0
    }
}

fn uniform(r: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| r.random_range(lo..hi)).collect(),
    )
    .expect("shape matches data")
}

fn probs(r: &mut Rng, rows: usize, k: usize) -> Tensor {
    let mut t = uniform(r, rows, k, 0.05, 1.0);
    for row in t.data_mut().chunks_mut(k) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

fn bank(r: &mut Rng, k: usize, d: usize) -> PrototypeBank {
    let known: Vec<usize> = (0..k).collect();
    let mut b = PrototypeBank::new(&known, d, None).expect("non-empty");
    b.refresh_from_features(&uniform(r, k, d, -2.0, 2.0), known.iter().copied(), 0)
        .expect("one row per class");
    b
}

/// A random small instance of loss `name`: the input tensor and the
/// function of it to differentiate.
#[allow(clippy::type_complexity)]
fn instance(
    name: &str,
    r: &mut Rng,
) -> (
    Tensor,
    alloc::boxed::Box<dyn Fn(&mut Tape, Var) -> Result<Var>>,
) {
    use alloc::boxed::Box;
    let b = r.random_range(2..=8usize);
    let k = r.random_range(2..=5usize);
    let d = r.random_range(2..=8usize);
    let tau = r.random_range(0.2..1.0);
    match name {
        "l_rep_u" | "l_rep_s" => {
            let input = uniform(r, 2 * b, d, -2.0, 2.0);
            let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..3)).collect();
            let supervised = name == "l_rep_s";
            let include = r.random_bool(0.25);
            let f = move |t: &mut Tape, x: Var| {
                let z = t.l2_normalize_rows(x)?;
                let z1 = t.gather_rows(z, &(0..b).collect::<Vec<_>>())?;
                let z2 = t.gather_rows(z, &(b..2 * b).collect::<Vec<_>>())?;
                if supervised {
                    l_rep_s(t, z1, z2, &labels, tau, include)
                } else {
                    l_rep_u(t, z1, z2, tau, include)
                }
            };
            (input, Box::new(f))
        }
        "classify" => {
            let input = uniform(r, b + k, d, -2.0, 2.0);
            let weights = uniform(r, b, k, -1.0, 1.0);
            let f = move |t: &mut Tape, x: Var| {
                let h = t.gather_rows(x, &(0..b).collect::<Vec<_>>())?;
                let c = t.gather_rows(x, &(b..b + k).collect::<Vec<_>>())?;
                let p = classify_with(t, h, c, tau)?;
                let w = t.constant(weights.clone());
                let y = t.mul(p, w)?;
                Ok(t.sum(y))
            };
            (input, Box::new(f))
        }
        "l_cls_u" | "l_cls" => {
            let input = uniform(r, 2 * b, d, -2.0, 2.0);
            let protos = uniform(r, k, d, -2.0, 2.0);
            let q = probs(r, b, k);
            let n_l = r.random_range(0..=b);
            let labeled: Vec<(usize, usize)> =
                (0..n_l).map(|i| (i, r.random_range(0..k))).collect();
            let lambda = r.random_range(0.0..1.0);
            let eps = r.random_range(0.0..2.0);
            let only_u = name == "l_cls_u";
            let f = move |t: &mut Tape, x: Var| {
                let c = t.constant(protos.clone());
                let h1 = t.gather_rows(x, &(0..b).collect::<Vec<_>>())?;
                let h2 = t.gather_rows(x, &(b..2 * b).collect::<Vec<_>>())?;
                let p1 = classify_with(t, h1, c, tau)?;
                let p2 = classify_with(t, h2, c, tau)?;
                let q = t.constant(q.clone());
                let parts = l_cls(t, p1, p2, q, &labeled, lambda, eps)?;
                Ok(if only_u { parts.l_cls_u } else { parts.total })
            };
            (input, Box::new(f))
        }
        "l_kl_sva" | "l_kl_as_printed" => {
            let input = uniform(r, b, k, -2.0, 2.0);
            let weak = probs(r, b, k);
            let clean = probs(r, b, k);
            let printed = name == "l_kl_as_printed";
            let f = move |t: &mut Tape, x: Var| {
                let ps = t.softmax_rows(x, tau)?;
                let pw = t.constant(weak.clone());
                if printed {
                    let pc = t.constant(clean.clone());
                    l_kl_as_printed(t, pc, pw, ps)
                } else {
                    l_kl_sva(t, pw, ps)
                }
            };
            (input, Box::new(f))
        }
        "l_pa_pos" | "l_pa_neg" | "l_ssr" => {
            let input = uniform(r, b, d, -2.0, 2.0);
            let bank = bank(r, k, d);
            let rows: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
            let mut routing = Routing::default();
            for (i, &row) in rows.iter().enumerate() {
                if r.random_bool(0.5) {
                    routing.positive.push((i, row));
                } else {
                    routing.negative.push(i);
                }
            }
            let which = match name {
                "l_pa_pos" => 0,
                "l_pa_neg" => 1,
                _ => 2,
            };
            let f = move |t: &mut Tape, x: Var| match which {
                0 => l_pa_pos(t, x, &rows, &bank, tau),
                1 => l_pa_neg(t, x, &bank),
                _ => {
                    let (p, n) = l_ssr(t, x, &routing, &bank, tau)?;
                    t.add(p, n)
                }
            };
            (input, Box::new(f))
        }
        _ => {
            // every term of the total as a function of one view's features
            let input = uniform(r, b, d, -2.0, 2.0);
            let h2 = uniform(r, b, d, -2.0, 2.0);
            let proj = uniform(r, d, d, -1.0, 1.0);
            let protos = uniform(r, k, d, -2.0, 2.0);
            let q = probs(r, b, k);
            let weak = probs(r, b / 2, k);
            let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
            let bank = bank(r, k, d);
            let routing = Routing {
                positive: vec![(0, 0)],
                negative: (1..b).collect(),
            };
            let w = LossWeights {
                lambda: r.random_range(0.0..1.0),
                epsilon: r.random_range(0.0..2.0),
                alpha: r.random_range(0.1..2.0),
                beta: r.random_range(0.0..2.0),
                ..LossWeights::default()
            };
            let f = move |t: &mut Tape, x: Var| {
                let wp = t.constant(proj.clone());
                let c = t.constant(protos.clone());
                let h2v = t.constant(h2.clone());
                let a = t.matmul(x, wp)?;
                let z1 = t.l2_normalize_rows(a)?;
                let a2 = t.matmul(h2v, wp)?;
                let z2 = t.l2_normalize_rows(a2)?;
                let rep_u = l_rep_u(t, z1, z2, tau, false)?;
                let rep_s = l_rep_s(t, z1, z2, &labels, tau, false)?;
                let p1 = classify_with(t, x, c, tau)?;
                let p2 = classify_with(t, h2v, c, tau)?;
                let qv = t.constant(q.clone());
                let pairs: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
                let cls = l_cls(t, p1, p2, qv, &pairs, w.lambda, w.epsilon)?;
                let ps = t.gather_rows(p1, &(0..b / 2).collect::<Vec<_>>())?;
                let pw = t.constant(weak.clone());
                let kl = l_kl_sva(t, pw, ps)?;
                let (pos, neg) = l_ssr(t, x, &routing, &bank, tau)?;
                let parts = LossParts {
                    l_rep_u: rep_u,
                    l_rep_s: rep_s,
                    l_cls_u: cls.l_cls_u,
                    l_cls_s: cls.l_cls_s,
                    h_mean_entropy: cls.h_mean_entropy,
                    l_kl: kl,
                    l_ssr_pos: pos,
                    l_ssr_neg: neg,
                };
                total_loss(t, &parts, &w)
            };
            (input, Box::new(f))
        }
    }
}

/// Checks `instances` random instances of every loss. With a fault, the
/// analytic side runs on a tape whose backward rule for one kind is wrong.
pub fn run_suite(instances: usize, seed: u64, fault: Option<Fault>) -> Result<Vec<LossCheck>> {
    let mut out = Vec::with_capacity(LOSSES.len());
    for name in LOSSES {
        let mut r = rng::stream(seed, name);
        let mut check = LossCheck {
            name,
            instances,
            failed_instances: 0,
            max_rel_error: 0.0,
        };
        for _ in 0..instances {
            let (input, f) = instance(name, &mut r);
            let new_tape = || fault.map_or_else(Tape::new, Tape::with_fault);
            let report = grad_check_on(new_tape, &f, &input, STEP, TOLERANCE)?;
            if !report.passed() {
                check.failed_instances += 1;
            }
            let e = report.max_rel_error();
            if e.is_nan() || e > check.max_rel_error {
                check.max_rel_error = e;
            }
        }
        out.push(check);
    }
    Ok(out)
}
