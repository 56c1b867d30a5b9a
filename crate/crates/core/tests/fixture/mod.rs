#![allow(dead_code)]

use mtl_core::episodes::{generate_synthetic, Dataset, SyntheticGeometry};
use mtl_core::meta::{MetaConfig, TrainConfig};
use mtl_core::models::{ExtractorConfig, FeatureExtractor};
use mtl_core::pretrain::{pretrain, PretrainConfig};
use mtl_core::{Rng, Tape, Tensor};

/// 40 classes of 3×16×16 images, enough for 5-way episodes in every split.
pub fn small_dataset(seed: u64) -> Dataset {
    generate_synthetic(40, 20, (3, 16, 16), &SyntheticGeometry::default(), &mut Rng::new(seed)).unwrap()
}

pub fn tiny_extractor_config(filters: usize) -> ExtractorConfig {
    ExtractorConfig {
        in_channels: 3,
        filters,
        blocks: 4,
        kernel: 3,
    }
}

/// A briefly pre-trained narrow backbone.
pub fn tiny_backbone(ds: &Dataset, filters: usize, iterations: u64, seed: u64) -> FeatureExtractor {
    let cfg = PretrainConfig {
        batch_size: 32,
        max_iterations: iterations,
        extractor: tiny_extractor_config(filters),
        ..PretrainConfig::default()
    };
    pretrain(ds, &cfg, &mut Rng::new(seed)).unwrap().extractor
}

pub fn fast_meta() -> MetaConfig {
    MetaConfig {
        query: 5,
        ..MetaConfig::default()
    }
}

pub fn fast_train(meta_tasks: usize) -> TrainConfig {
    TrainConfig {
        meta: fast_meta(),
        meta_tasks,
        val_every: 1000,
        val_tasks: 0,
        ..TrainConfig::default()
    }
}

/// Unrolled meta-gradient of the one-parameter quadratic toy through one
/// inner step, taken on the tape. Returns (dL/dφ, dL/dθ).
pub fn toy_on_tape(phi: f64, theta: f64, x: f64, y: f64, xt: f64, yt: f64, alpha: f64) -> (f64, f64) {
    let s = |v: f64| Tensor::new(&[1], vec![v]).unwrap();
    let mut t = Tape::new();
    let p = t.leaf(&s(phi).with_requires_grad(true));
    let th = t.leaf(&s(theta).with_requires_grad(true));
    let half_sq = |t: &mut Tape, feat: f64, target: f64, w| {
        let xv = t.constant(&s(feat));
        let yv = t.constant(&s(target));
        let a = t.mul(p, xv).unwrap();
        let pred = t.mul(a, w).unwrap();
        let r = t.sub(pred, yv).unwrap();
        let sq = t.mul(r, r).unwrap();
        t.scale(sq, 0.5).unwrap()
    };
    let inner = half_sq(&mut t, x, y, th);
    let g = t.grad_graph(inner, &[th]).unwrap().remove(0);
    let step = t.scale(g, alpha).unwrap();
    let adapted = t.sub(th, step).unwrap();
    let outer = half_sq(&mut t, xt, yt, adapted);
    t.backward(outer).unwrap();
    (t.grad(p).unwrap()[0], t.grad(th).unwrap()[0])
}

/// Closed form of the same derivative.
pub fn toy_closed_form(phi: f64, theta: f64, x: f64, y: f64, xt: f64, yt: f64, alpha: f64) -> (f64, f64) {
    let a = phi * x;
    let r = a * theta - y;
    let adapted = theta - alpha * a * r;
    let d_theta = 1.0 - alpha * a * a;
    let d_phi = -alpha * x * (2.0 * a * theta - y);
    let b = phi * xt;
    let s = b * adapted - yt;
    (s * (xt * adapted + b * d_phi), s * b * d_theta)
}
