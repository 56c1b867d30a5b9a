mod fixture;

use fixture::{fast_meta, small_dataset, tiny_backbone, toy_closed_form, toy_on_tape};
use mtl_core::episodes::{sample_episode, MetaSplit};
use mtl_core::meta::{base_learn, evaluate, MetaConfig, MetaLearner};
use mtl_core::models::SSParams;
use mtl_core::Rng;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

#[test]
fn unrolled_gradient_matches_closed_form_on_quadratic_toy() {
    let mut rng = Rng::new(40);
    for _ in 0..200 {
        let v: Vec<f64> = (0..6).map(|_| rng.uniform() * 4.0 - 2.0).collect();
        let alpha = 0.05 + rng.uniform() * 0.3;
        let got = toy_on_tape(v[0], v[1], v[2], v[3], v[4], v[5], alpha);
        let want = toy_closed_form(v[0], v[1], v[2], v[3], v[4], v[5], alpha);
        assert!(rel(got.0, want.0) < 1e-6, "dφ {got:?} vs {want:?}");
        assert!(rel(got.1, want.1) < 1e-6, "dθ {got:?} vs {want:?}");
    }
}

#[test]
fn quadratic_toy_first_order_differs() {
    // Dropping dθ′/dθ leaves s·b, which differs from s·b·(1 − αa²).
    let (phi, theta, x, y, xt, yt, alpha) = (1.0, 0.5, 2.0, 1.0, 1.5, 0.0, 0.1);
    let (_, d_theta) = toy_closed_form(phi, theta, x, y, xt, yt, alpha);
    let adapted = theta - alpha * phi * x * (phi * x * theta - y);
    let first = (phi * xt * adapted - yt) * phi * xt;
    assert!(rel(first, d_theta) > 0.1);
}

/// Outer loss as a function of every meta-parameter, recomputed from scratch.
fn outer_loss(
    ds: &mtl_core::episodes::Dataset,
    ep: &mtl_core::episodes::Episode,
    learner: &MetaLearner,
    cfg: &MetaConfig,
) -> f64 {
    let adapted = base_learn(ds, ep, &learner.extractor, learner.ss.as_ref(), &learner.head, cfg).unwrap();
    evaluate(ds, ep, &learner.extractor, learner.ss.as_ref(), &adapted, cfg.bn_mode)
        .unwrap()
        .test_loss
}

fn perturbed(learner: &MetaLearner, which: usize, e: usize, d: f64) -> MetaLearner {
    let mut l = learner.clone();
    let ss = l.ss.as_mut().unwrap();
    let n = ss.scale.len();
    let t = if which < 2 * n {
        if which.is_multiple_of(2) { &mut ss.scale[which / 2] } else { &mut ss.shift[which / 2] }
    } else {
        l.head.params_mut().into_iter().nth(which - 2 * n).unwrap()
    };
    t.data_mut()[e] += d;
    l
}

#[test]
fn second_order_task_gradient_matches_finite_differences() {
    let ds = small_dataset(41);
    let ex = tiny_backbone(&ds, 4, 20, 42);
    let cfg = MetaConfig { second_order: true, inner_epochs: 3, base_lr: 0.5, ..fast_meta() };
    let first = MetaConfig { second_order: false, ..cfg.clone() };
    let mut learner = MetaLearner::new(&ex, "ss_full".parse().unwrap(), &cfg, &mut Rng::new(43)).unwrap();
    learner.head = mtl_core::models::ClassifierHead::new(cfg.head_kind, ex.embedding_dim(), 5, 1, 0.3, &mut Rng::new(44));
    let mut ss = SSParams::fresh(&ex);
    let mut r = Rng::new(45);
    for t in ss.scale.iter_mut().chain(ss.shift.iter_mut()) {
        t.data_mut().iter_mut().for_each(|v| *v += 0.1 * (r.uniform() - 0.5));
    }
    learner.ss = Some(ss);
    let ep = sample_episode(&ds, MetaSplit::Train, cfg.shape(), &mut Rng::new(46)).unwrap();

    let (res, grads) = learner.task_gradient(&ds, &ep, &cfg).unwrap();
    let (_, fo) = learner.task_gradient(&ds, &ep, &first).unwrap();
    assert!((res.test_loss - outer_loss(&ds, &ep, &learner, &cfg)).abs() < 1e-12);

    let h = 1e-6;
    let numeric: Vec<Vec<f64>> = grads
        .iter()
        .enumerate()
        .map(|(w, g)| {
            (0..g.len())
                .map(|e| {
                    let up = outer_loss(&ds, &ep, &perturbed(&learner, w, e, h), &cfg);
                    let down = outer_loss(&ds, &ep, &perturbed(&learner, w, e, -h), &cfg);
                    (up - down) / (2.0 * h)
                })
                .collect()
        })
        .collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let all = numeric.iter().map(|n| norm(n).powi(2)).sum::<f64>().sqrt();
    let err = |a: &[f64], n: &[f64]| {
        let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
        norm(&diff) / norm(n).max(1e-3 * all)
    };
    for (i, (a, n)) in grads.iter().zip(&numeric).enumerate() {
        assert!(err(a, n) < 1e-4, "tensor {i}: {}", err(a, n));
    }
    // The first-order head gradient ignores dθ′/dθ and so is measurably off.
    let head = grads.len() - 2;
    assert!(err(&fo[head], &numeric[head]) > 1e-3);
}
