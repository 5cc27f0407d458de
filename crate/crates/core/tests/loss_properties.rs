use cleargcd_core::losses::{l_cls, l_kl_sva, l_rep_s, l_rep_u, pseudo_labels};
use cleargcd_core::model::classify_with;
use cleargcd_core::prototype_bank::{l_pa_neg, l_pa_pos, l_ssr, route, PrototypeBank, Routing};
use cleargcd_core::{Tape, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn distributions(rows: usize, k: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.01f64..1.0, rows * k).prop_map(move |mut d| {
        for r in d.chunks_mut(k) {
            let s: f64 = r.iter().sum();
            r.iter_mut().for_each(|v| *v /= s);
        }
        Tensor::new(vec![rows, k], d).unwrap()
    })
}

/// Random rotation of the plane spanned by coordinates `a` and `b`.
fn givens(d: usize, a: usize, b: usize, angle: f64) -> Tensor {
    let mut m = Tensor::identity(d);
    let (s, c) = angle.sin_cos();
    let data = m.data_mut();
    data[a * d + a] = c;
    data[a * d + b] = -s;
    data[b * d + a] = s;
    data[b * d + b] = c;
    m
}

fn bank_of(rows: &Tensor) -> PrototypeBank {
    let known: Vec<usize> = (0..rows.rows()).collect();
    let mut b = PrototypeBank::new(&known, rows.row_len(), None).unwrap();
    b.refresh_from_features(rows, known.iter().copied(), 0)
        .unwrap();
    b
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contrastive_losses_are_rotation_invariant(
        z in matrix(5, 4),
        z2 in matrix(5, 4),
        angle in -3.0f64..3.0,
        labels in prop::collection::vec(0usize..3, 5),
        tau in 0.1f64..1.0,
    ) {
        let r = givens(4, 1, 3, angle);
        let mut t = Tape::new();
        let (a, b, rv) = (t.constant(z), t.constant(z2), t.constant(r));
        let a = t.l2_normalize_rows(a).unwrap();
        let b = t.l2_normalize_rows(b).unwrap();
        let ar = t.matmul(a, rv).unwrap();
        let br = t.matmul(b, rv).unwrap();
        let u = l_rep_u(&mut t, a, b, tau, false).unwrap();
        let ur = l_rep_u(&mut t, ar, br, tau, false).unwrap();
        prop_assert!((t.item(u) - t.item(ur)).abs() < 1e-9);
        let s = l_rep_s(&mut t, a, b, &labels, tau, true).unwrap();
        let sr = l_rep_s(&mut t, ar, br, &labels, tau, true).unwrap();
        prop_assert!((t.item(s) - t.item(sr)).abs() < 1e-9);
    }

    #[test]
    fn kl_is_non_negative(pw in distributions(4, 5), ps in distributions(4, 5)) {
        let mut t = Tape::new();
        let (a, b) = (t.constant(pw), t.constant(ps));
        let kl = l_kl_sva(&mut t, a, b).unwrap();
        prop_assert!(t.item(kl) >= -1e-12);
    }

    #[test]
    fn lambda_one_keeps_only_the_supervised_term(
        p in distributions(4, 3),
        p2 in distributions(4, 3),
        q in distributions(4, 3),
        eps in 0.0f64..3.0,
    ) {
        let mut t = Tape::new();
        let (a, b, c) = (t.constant(p), t.constant(p2), t.constant(q));
        let cls = l_cls(&mut t, a, b, c, &[(0, 1), (2, 0)], 1.0, eps).unwrap();
        prop_assert_eq!(t.item(cls.total), t.item(cls.l_cls_s));
        let expected = -(t.value(a)[1].ln() + t.value(a)[2 * 3].ln()) / 2.0;
        prop_assert!((t.item(cls.l_cls_s) - expected).abs() < 1e-12);
    }

    #[test]
    fn classify_rows_are_distributions(h in matrix(6, 4), c in matrix(3, 4), tau in 0.05f64..2.0) {
        let mut t = Tape::new();
        let (hv, cv) = (t.constant(h), t.constant(c));
        let p = classify_with(&mut t, hv, cv, tau).unwrap();
        for row in t.value(p).chunks(3) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn negative_alignment_grows_with_similarity(angle in 0.05f64..3.0, step in 0.01f64..0.5) {
        // sim = cos(angle) against a single prototype
        let bank = bank_of(&Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
        let loss = |a: f64| {
            let mut t = Tape::new();
            let f = t.constant(Tensor::from_rows(&[[a.cos(), a.sin()]]).unwrap());
            let l = l_pa_neg(&mut t, f, &bank).unwrap();
            t.item(l)
        };
        // smaller angle, larger similarity
        prop_assert!(loss((angle - step).max(0.0)) > loss(angle));
    }

    #[test]
    fn ssr_with_every_row_known_is_positive_alignment(f in matrix(4, 3), protos in matrix(2, 3), rows in prop::collection::vec(0usize..2, 4)) {
        let bank = bank_of(&protos);
        let mut t = Tape::new();
        let fv = t.constant(f);
        let routing = Routing { positive: rows.iter().copied().enumerate().collect(), negative: Vec::new() };
        let (pos, neg) = l_ssr(&mut t, fv, &routing, &bank, 0.3).unwrap();
        let direct = l_pa_pos(&mut t, fv, &rows, &bank, 0.3).unwrap();
        prop_assert!((t.item(pos) - t.item(direct)).abs() < 1e-12);
        prop_assert_eq!(t.item(neg), 0.0);
    }
}

#[test]
fn bank_and_teacher_receive_no_gradient() {
    let protos = Tensor::from_rows(&[[1.0, 0.2], [-0.3, 1.0]]).unwrap();
    let bank = bank_of(&protos);
    let mut t = Tape::new();
    let f = t.leaf(
        &Tensor::from_rows(&[[0.5, 0.1], [0.2, -0.7], [1.0, 1.0]])
            .unwrap()
            .with_requires_grad(true),
    );
    let probs = Tensor::from_rows(&[[0.7, 0.2, 0.1], [0.1, 0.1, 0.8], [0.3, 0.6, 0.1]]).unwrap();
    let routing = route(&probs, &bank, None);
    assert_eq!(routing.negative, vec![1]);
    let (pos, neg) = l_ssr(&mut t, f, &routing, &bank, 0.1).unwrap();
    let total = t.add(pos, neg).unwrap();
    let g = t.backward(total).unwrap();
    assert!(g.get(f).unwrap().iter().any(|v| *v != 0.0));
    assert_eq!(bank.prototypes(), &protos);

    let mut t = Tape::new();
    let h = t.leaf(
        &Tensor::from_rows(&[[0.3, 0.9], [-1.0, 0.4]])
            .unwrap()
            .with_requires_grad(true),
    );
    let c = t.leaf(&protos.clone().with_requires_grad(true));
    let q = pseudo_labels(&mut t, h, c, 0.05).unwrap();
    let s = t.sum(q);
    let g = t.backward(s).unwrap();
    assert!(g.get(h).is_none_or(|v| v.iter().all(|x| *x == 0.0)));
}
