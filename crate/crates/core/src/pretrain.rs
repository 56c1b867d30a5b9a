//! Pre-training of [Θ; θ] on all meta-train classes, after which θ is
//! discarded and Θ frozen.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelBundle;
use crate::episodes::{Dataset, MetaSplit};
use crate::error::{Error, Result};
use crate::models::{
    features_on_tape, head_on_tape, BnMode, ClassifierHead, ExtractorConfig, FeatureExtractor, HeadKind,
};
use crate::optim::{step_decay, Optimizer, OptimizerKind};
use crate::rng::Rng;
use crate::tape::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub lr_init: f64,
    pub lr_floor: f64,
    pub lr_period: u64,
    pub batch_size: usize,
    pub keep_prob: f64,
    pub max_iterations: u64,
    pub extractor: ExtractorConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr_init: 1e-3,
            lr_floor: 1e-4,
            lr_period: 5000,
            batch_size: 64,
            keep_prob: 0.9,
            max_iterations: 10_000,
            extractor: ExtractorConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("pretrain batch_size must be at least 2".into()));
        }
        if self.lr_floor > self.lr_init {
            return Err(Error::Config("pretrain lr floor exceeds initial lr".into()));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::Config("keep_prob must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

pub fn lr_schedule(iter: u64, cfg: &PretrainConfig) -> f64 {
    step_decay(iter, cfg.lr_init, cfg.lr_period, cfg.lr_floor)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainedModel {
    pub extractor: FeatureExtractor,
    pub curve: Vec<CurvePoint>,
}

impl PretrainedModel {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        ModelBundle {
            extractor: self.extractor.clone(),
            ss: None,
            head: None,
            tag: None,
        }
        .save(path)
    }

    /// Load a backbone; any SS or head tensors in the file are ignored.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(PretrainedModel {
            extractor: ModelBundle::load(path)?.extractor,
            curve: Vec::new(),
        })
    }
}

/// Split each class's samples into a training part and `holdout_per_class`
/// held-out samples.
pub fn holdout_split(
    ds: &Dataset,
    split: MetaSplit,
    holdout_per_class: usize,
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for &c in ds.classes(split) {
        let s = ds.samples_of(c);
        if s.len() <= holdout_per_class {
            return Err(Error::Capacity(format!(
                "class {c} has {} samples, cannot hold out {holdout_per_class}",
                s.len()
            )));
        }
        let order = rng.sample_indices(s.len(), s.len());
        held.extend(order[..holdout_per_class].iter().map(|&i| s[i]));
        train.extend(order[holdout_per_class..].iter().map(|&i| s[i]));
    }
    Ok((train, held))
}

/// Pre-train on every sample of the meta-train classes.
pub fn pretrain(ds: &Dataset, cfg: &PretrainConfig, rng: &mut Rng) -> Result<PretrainedModel> {
    let pool: Vec<usize> = ds
        .classes(MetaSplit::Train)
        .iter()
        .flat_map(|&c| ds.samples_of(c).iter().copied())
        .collect();
    pretrain_on(ds, &pool, cfg, rng)
}

/// Pre-train on the samples `pool`, labelling by their global classes.
pub fn pretrain_on(ds: &Dataset, pool: &[usize], cfg: &PretrainConfig, rng: &mut Rng) -> Result<PretrainedModel> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::Capacity("pre-training pool is empty".into()));
    }
    if cfg.batch_size > pool.len() {
        return Err(Error::Capacity(format!(
            "batch size {} exceeds the {} available samples",
            cfg.batch_size,
            pool.len()
        )));
    }
    let ecfg = ExtractorConfig {
        in_channels: ds.dims().0,
        ..cfg.extractor.clone()
    };
    let mut init_rng = rng.split_named("init");
    let mut order_rng = rng.split_named("order");
    let mut drop_rng = rng.split_named("dropout");
    let mut extractor = FeatureExtractor::init(&ecfg, &mut init_rng);

    let mut label_of: BTreeMap<u32, usize> = BTreeMap::new();
    for &i in pool {
        let n = label_of.len();
        label_of.entry(ds.labels()[i]).or_insert(n);
    }
    let mut head = ClassifierHead::new(
        HeadKind::FcSoftmax,
        extractor.embedding_dim(),
        label_of.len(),
        1,
        (1.0 / extractor.embedding_dim() as f64).sqrt(),
        &mut init_rng,
    );
    let mut opt = Optimizer::new(OptimizerKind::Adam);
    let mut curve = Vec::with_capacity(cfg.max_iterations as usize);
    let mut order: Vec<usize> = pool.to_vec();
    let mut cursor = order.len();

    for iter in 0..cfg.max_iterations {
        if cursor + cfg.batch_size > order.len() {
            order_rng.shuffle(&mut order);
            cursor = 0;
        }
        let batch = &order[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;
        let labels: Vec<usize> = batch.iter().map(|&i| label_of[&ds.labels()[i]]).collect();

        let mut tape = Tape::new();
        let x = tape.constant(&ds.images(batch)?);
        let ev = extractor.bind(&mut tape);
        let hv = head.bind(&mut tape, true);
        let (emb, stats) = features_on_tape(&mut tape, x, &extractor, &ev, None, BnMode::Batch)?;
        let emb = if cfg.keep_prob < 1.0 {
            let mask = (0..tape.value(emb).numel())
                .map(|_| {
                    if drop_rng.uniform() < cfg.keep_prob {
                        1.0 / cfg.keep_prob
                    } else {
                        0.0
                    }
                })
                .collect();
            tape.mul_const(emb, mask)?
        } else {
            emb
        };
        let logits = head_on_tape(&mut tape, emb, &head, &hv)?;
        let loss = tape.softmax_cross_entropy(logits, &labels)?;
        tape.backward(loss)?;

        let acc = accuracy(tape.value(logits).data(), label_of.len(), &labels);
        let loss_v = tape.value(loss).data()[0];
        let mut grads: Vec<Vec<f64>> = ev
            .in_order()
            .map(|v| tape.grad(v).expect("extractor leaves are tracked").to_vec())
            .collect();
        grads.extend(hv.in_order().iter().map(|&v| tape.grad(v).unwrap().to_vec()));
        drop(tape);

        let lr = lr_schedule(iter, cfg);
        let mut params = extractor.params_in_order_mut().collect::<Vec<_>>();
        params.extend(head.params_mut());
        opt.step(&mut params, &grads, lr)?;
        extractor.update_running_stats(&stats);
        curve.push(CurvePoint {
            iteration: iter,
            lr,
            loss: loss_v,
            acc,
        });
        if (iter + 1).is_multiple_of(100) {
            log::debug!("pretrain iter {} loss {loss_v:.4} acc {acc:.3}", iter + 1);
        }
    }
    extractor.freeze();
    Ok(PretrainedModel { extractor, curve })
}

/// Fraction of rows whose argmax equals the label (ties go to the lower index).
pub fn accuracy(logits: &[f64], way: usize, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(&logits[r * way..(r + 1) * way]) == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
