//! Meta-transfer training: per-task base-learning of θ′ followed by an outer
//! update of the meta-parameters, the ablation variants, and evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{BundleTag, ModelBundle};
use crate::curriculum::{make_hard_tasks, schedule, CurriculumConfig, HardClassSet, HardEntry, Phase};
use crate::episodes::{sample_episode, Dataset, Episode, EpisodeShape, MetaSplit};
use crate::error::{Error, Result};
use crate::models::{
    clone_head, features_on_tape, forward_features, head_on_tape, Baseline, BnMode, ClassifierHead,
    FeatureExtractor, HeadKind, HeadVars, MetaOp, SSParams, Scope, VariantSpec,
};
use crate::optim::{step_decay, Optimizer, OptimizerKind};
use crate::pretrain::argmax;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub base_lr: f64,
    pub inner_epochs: usize,
    pub gamma_init: f64,
    pub gamma_floor: f64,
    pub gamma_period: u64,
    pub meta_batch: usize,
    pub second_order: bool,
    pub head_kind: HeadKind,
    pub head_depth: usize,
    pub head_init_std: f64,
    pub bn_mode: BnMode,
    pub optimizer: OptimizerKind,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            way: 5,
            shot: 1,
            query: 15,
            base_lr: 0.01,
            inner_epochs: 5,
            gamma_init: 1e-3,
            gamma_floor: 1e-4,
            gamma_period: 1000,
            meta_batch: 2,
            second_order: false,
            head_kind: HeadKind::FcSoftmax,
            head_depth: 1,
            head_init_std: 0.01,
            bn_mode: BnMode::Running,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.meta_batch == 0 {
            return Err(Error::Config("meta_batch must be at least 1".into()));
        }
        if self.way < 2 || self.shot == 0 || self.query == 0 {
            return Err(Error::Config("episodes need way >= 2, shot >= 1 and query >= 1".into()));
        }
        if self.gamma_floor > self.gamma_init {
            return Err(Error::Config("meta lr floor exceeds initial meta lr".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> EpisodeShape {
        EpisodeShape {
            way: self.way,
            shot: self.shot,
            query: self.query,
        }
    }
}

pub fn gamma_schedule(iter: u64, cfg: &MetaConfig) -> f64 {
    step_decay(iter, cfg.gamma_init, cfg.gamma_period, cfg.gamma_floor)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub test_loss: f64,
    pub class_acc: Vec<f64>,
    pub mean_acc: f64,
    /// Episode label of the worst class.
    pub hardest: usize,
    pub hardest_class: u32,
}

/// Index of the lowest accuracy; ties go to the lowest index.
pub fn hardest_class(acc: &[f64]) -> usize {
    let mut best = 0;
    for (i, &a) in acc.iter().enumerate() {
        if a < acc[best] {
            best = i;
        }
    }
    best
}

fn task_result(logits: &[f64], labels: &[usize], class_map: &[u32], loss: f64) -> TaskResult {
    let way = class_map.len();
    let mut hits = vec![0usize; way];
    let mut counts = vec![0usize; way];
    for (r, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        if argmax(&logits[r * way..(r + 1) * way]) == y {
            hits[y] += 1;
        }
    }
    let class_acc: Vec<f64> = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
        .collect();
    let hardest = hardest_class(&class_acc);
    TaskResult {
        test_loss: loss,
        mean_acc: hits.iter().sum::<usize>() as f64 / labels.len().max(1) as f64,
        class_acc,
        hardest,
        hardest_class: class_map[hardest],
    }
}

fn head_loss(emb: &Tensor, labels: &[usize], head: &ClassifierHead, trainable: bool) -> Result<(Tape, Var, Var, HeadVars)> {
    let mut tape = Tape::new();
    let e = tape.constant(emb);
    let hv = head.bind(&mut tape, trainable);
    let logits = head_on_tape(&mut tape, e, head, &hv)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    Ok((tape, logits, loss, hv))
}

/// Full-batch gradient descent on the head alone, returning every iterate
/// θ₀ = θ, θ₁, …, θ_epochs.
pub fn adapt_head_trajectory(
    emb: &Tensor,
    labels: &[usize],
    head: &ClassifierHead,
    lr: f64,
    epochs: usize,
) -> Result<Vec<ClassifierHead>> {
    let mut traj = Vec::with_capacity(epochs + 1);
    let mut cur = clone_head(head);
    traj.push(cur.clone());
    for _ in 0..epochs {
        let (mut tape, _, loss, hv) = head_loss(emb, labels, &cur, true)?;
        tape.backward(loss)?;
        let grads: Vec<Vec<f64>> = hv.in_order().iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();
        for (p, g) in cur.params_mut().into_iter().zip(&grads) {
            p.sub_scaled(g, lr)?;
        }
        traj.push(cur.clone());
    }
    Ok(traj)
}

/// θ′ after `epochs` full-batch steps on the embeddings of T^(tr).
pub fn adapt_head(emb: &Tensor, labels: &[usize], head: &ClassifierHead, lr: f64, epochs: usize) -> Result<ClassifierHead> {
    Ok(adapt_head_trajectory(emb, labels, head, lr, epochs)?.pop().unwrap())
}

/// Cross-entropy of `head` on T^(tr) embeddings.
pub fn head_train_loss(emb: &Tensor, labels: &[usize], head: &ClassifierHead) -> Result<f64> {
    let (tape, _, loss, _) = head_loss(emb, labels, head, false)?;
    Ok(tape.value(loss).data()[0])
}

/// Base-learn θ′ on the episode's train split with Θ and Φ fixed.
pub fn base_learn(
    ds: &Dataset,
    episode: &Episode,
    extractor: &FeatureExtractor,
    ss: Option<&SSParams>,
    head: &ClassifierHead,
    cfg: &MetaConfig,
) -> Result<ClassifierHead> {
    let emb = forward_features(&episode.train_images(ds)?, extractor, ss, cfg.bn_mode)?;
    adapt_head(&emb, &episode.train_labels, head, cfg.base_lr, cfg.inner_epochs)
}

/// Evaluate an adapted head on the episode's test split.
pub fn evaluate(
    ds: &Dataset,
    episode: &Episode,
    extractor: &FeatureExtractor,
    ss: Option<&SSParams>,
    head: &ClassifierHead,
    bn: BnMode,
) -> Result<TaskResult> {
    let emb = forward_features(&episode.test_images(ds)?, extractor, ss, bn)?;
    let (tape, logits, loss, _) = head_loss(&emb, &episode.test_labels, head, false)?;
    Ok(task_result(
        tape.value(logits).data(),
        &episode.test_labels,
        &episode.class_map,
        tape.value(loss).data()[0],
    ))
}

/// Meta-parameters and their optimizer state for one variant.
#[derive(Clone, Debug)]
pub struct MetaLearner {
    pub variant: VariantSpec,
    pub extractor: FeatureExtractor,
    pub ss: Option<SSParams>,
    pub head: ClassifierHead,
    pub iteration: u64,
    opt: Optimizer,
}

impl MetaLearner {
    /// Fresh SS at identity (SS variants) or a trainable copy of the scoped
    /// blocks (FT variants), and a small random θ.
    pub fn new(extractor: &FeatureExtractor, variant: VariantSpec, cfg: &MetaConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if variant.is_baseline() {
            return Err(Error::Contract(format!("{variant} has no meta-training phase")));
        }
        let mut ex = extractor.clone();
        ex.freeze();
        let ss = match variant.meta_op {
            MetaOp::Ss => Some(SSParams::fresh(&ex)),
            _ => {
                ex.set_trainable(variant.scope);
                None
            }
        };
        let head = ClassifierHead::new(
            cfg.head_kind,
            ex.embedding_dim(),
            cfg.way,
            cfg.head_depth,
            cfg.head_init_std,
            rng,
        );
        Ok(MetaLearner {
            variant,
            extractor: ex,
            ss,
            head,
            iteration: 0,
            opt: Optimizer::new(cfg.optimizer),
        })
    }

    fn scope(&self) -> Scope {
        self.variant.scope
    }

    /// Meta-parameters in update order: scoped SS scalars or scoped Θ tensors,
    /// then θ.
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let scope = self.variant.scope;
        let n = self.extractor.num_blocks();
        let mut out: Vec<&mut Tensor> = Vec::new();
        match (&mut self.ss, self.variant.meta_op) {
            (Some(ss), MetaOp::Ss) => {
                for (i, (s, t)) in ss.scale.iter_mut().zip(ss.shift.iter_mut()).enumerate() {
                    if scope.covers_block(i, n) {
                        out.push(s);
                        out.push(t);
                    }
                }
            }
            _ => {
                for (i, b) in self.extractor.blocks_mut().iter_mut().enumerate() {
                    if scope.covers_block(i, n) {
                        out.extend([&mut b.weight, &mut b.bias, &mut b.bn_gamma, &mut b.bn_beta]);
                    }
                }
            }
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn bundle(&self, bn: BnMode) -> ModelBundle {
        let mut extractor = self.extractor.clone();
        extractor.freeze();
        ModelBundle {
            extractor,
            ss: self.ss.clone(),
            head: Some(self.head.clone()),
            tag: Some(BundleTag {
                variant: self.variant,
                bn,
            }),
        }
    }

    /// Outer-loss gradient for one task, in [`MetaLearner::params_mut`]
    /// order, without touching any state.
    pub fn task_gradient(&self, ds: &Dataset, ep: &Episode, cfg: &MetaConfig) -> Result<(TaskResult, Vec<Vec<f64>>)> {
        let n = self.extractor.num_blocks();
        let mut tape = Tape::new();
        let ev = self.extractor.bind(&mut tape);
        let ssv = self.ss.as_ref().map(|s| s.bind(&mut tape, Some(self.scope())));
        let x_te = tape.constant(&ep.test_images(ds)?);
        let (e_te, _) = features_on_tape(&mut tape, x_te, &self.extractor, &ev, ssv.as_ref(), cfg.bn_mode)?;

        let (logits, loss, theta) = if cfg.second_order {
            let x_tr = tape.constant(&ep.train_images(ds)?);
            let (e_tr, _) = features_on_tape(&mut tape, x_tr, &self.extractor, &ev, ssv.as_ref(), cfg.bn_mode)?;
            let theta = self.head.bind(&mut tape, true);
            let mut cur = theta.clone();
            for _ in 0..cfg.inner_epochs {
                let lg = head_on_tape(&mut tape, e_tr, &self.head, &cur)?;
                let l = tape.softmax_cross_entropy(lg, &ep.train_labels)?;
                let vars = cur.in_order();
                let grads = tape.grad_graph(l, &vars)?;
                let next = vars
                    .iter()
                    .zip(grads)
                    .map(|(&p, g)| {
                        let step = tape.scale(g, cfg.base_lr)?;
                        tape.sub(p, step)
                    })
                    .collect::<Result<Vec<_>>>()?;
                cur = HeadVars::from_order(&next, &cur);
            }
            let lg = head_on_tape(&mut tape, e_te, &self.head, &cur)?;
            let l = tape.softmax_cross_entropy(lg, &ep.test_labels)?;
            (lg, l, theta)
        } else {
            let e_tr = forward_features(&ep.train_images(ds)?, &self.extractor, self.ss.as_ref(), cfg.bn_mode)?;
            let adapted = adapt_head(&e_tr, &ep.train_labels, &self.head, cfg.base_lr, cfg.inner_epochs)?;
            let theta = adapted.bind(&mut tape, true);
            let lg = head_on_tape(&mut tape, e_te, &adapted, &theta)?;
            let l = tape.softmax_cross_entropy(lg, &ep.test_labels)?;
            (lg, l, theta)
        };
        tape.backward(loss)?;

        let mut vars: Vec<Var> = Vec::new();
        match &ssv {
            Some(s) if self.variant.meta_op == MetaOp::Ss => {
                for i in (0..n).filter(|&i| self.scope().covers_block(i, n)) {
                    vars.push(s.scale[i]);
                    vars.push(s.shift[i]);
                }
            }
            _ => {
                for (i, b) in ev.blocks.iter().enumerate() {
                    if self.scope().covers_block(i, n) {
                        vars.extend([b.weight, b.bias, b.gamma, b.beta]);
                    }
                }
            }
        }
        vars.extend(theta.in_order());
        let grads = vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| Error::Contract("meta-parameter is not tracked".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let result = task_result(
            tape.value(logits).data(),
            &ep.test_labels,
            &ep.class_map,
            tape.value(loss).data()[0],
        );
        Ok((result, grads))
    }

    /// Apply one outer update with the summed gradients at rate γ(iteration).
    pub fn apply(&mut self, grads: &[Vec<f64>], cfg: &MetaConfig) -> Result<()> {
        let lr = gamma_schedule(self.iteration, cfg);
        let mut opt = std::mem::replace(&mut self.opt, Optimizer::new(cfg.optimizer));
        let res = opt.step(&mut self.params_mut(), grads, lr);
        self.opt = opt;
        res?;
        self.iteration += 1;
        Ok(())
    }

    /// One task, one update.
    pub fn meta_step(&mut self, ds: &Dataset, ep: &Episode, cfg: &MetaConfig) -> Result<TaskResult> {
        Ok(self.meta_batch(ds, std::slice::from_ref(ep), cfg, 1)?.remove(0))
    }

    /// Gradients of all tasks (possibly in parallel) summed in task order,
    /// then a single update.
    pub fn meta_batch(
        &mut self,
        ds: &Dataset,
        episodes: &[Episode],
        cfg: &MetaConfig,
        threads: usize,
    ) -> Result<Vec<TaskResult>> {
        let per_task = parallel_map(threads, episodes, |ep| self.task_gradient(ds, ep, cfg))?;
        let mut sum: Option<Vec<Vec<f64>>> = None;
        let mut results = Vec::with_capacity(per_task.len());
        for (r, g) in per_task {
            match &mut sum {
                None => sum = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                    }
                }
            }
            results.push(r);
        }
        if let Some(g) = sum {
            self.apply(&g, cfg)?;
        }
        Ok(results)
    }
}

/// Order-preserving map over `items`, on up to `threads` workers.
pub fn parallel_map<T: Sync, R: Send>(
    threads: usize,
    items: &[T],
    f: impl Fn(&T) -> Result<R> + Sync + Send,
) -> Result<Vec<R>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}

/// Adapt without meta-training: a fresh random head (and, for
/// `update_all`, every Θ parameter) trained on T^(tr) only.
pub fn run_baseline(
    ds: &Dataset,
    ep: &Episode,
    extractor: &FeatureExtractor,
    variant: VariantSpec,
    cfg: &MetaConfig,
    rng: &mut Rng,
) -> Result<TaskResult> {
    let head = ClassifierHead::new(
        cfg.head_kind,
        extractor.embedding_dim(),
        cfg.way,
        cfg.head_depth,
        cfg.head_init_std,
        rng,
    );
    match variant.baseline {
        Baseline::None => Err(Error::Contract(format!("{variant} is not a baseline"))),
        Baseline::UpdateHead => {
            let adapted = base_learn(ds, ep, extractor, None, &head, cfg)?;
            evaluate(ds, ep, extractor, None, &adapted, cfg.bn_mode)
        }
        Baseline::UpdateAll => {
            let mut ex = extractor.clone();
            ex.set_trainable(Scope::Full);
            let mut head = head;
            let x = ep.train_images(ds)?;
            for _ in 0..cfg.inner_epochs {
                let mut tape = Tape::new();
                let xv = tape.constant(&x);
                let ev = ex.bind(&mut tape);
                let hv = head.bind(&mut tape, true);
                let (e, _) = features_on_tape(&mut tape, xv, &ex, &ev, None, cfg.bn_mode)?;
                let lg = head_on_tape(&mut tape, e, &head, &hv)?;
                let l = tape.softmax_cross_entropy(lg, &ep.train_labels)?;
                tape.backward(l)?;
                let vars: Vec<Var> = ev.in_order().chain(hv.in_order()).collect();
                let grads: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();
                drop(tape);
                let mut params: Vec<&mut Tensor> = ex.params_in_order_mut().collect();
                params.extend(head.params_mut());
                for (p, g) in params.into_iter().zip(&grads) {
                    p.sub_scaled(g, cfg.base_lr)?;
                }
            }
            ex.freeze();
            evaluate(ds, ep, &ex, None, &head, cfg.bn_mode)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaTestSummary {
    pub mean_acc: f64,
    pub ci95: f64,
    pub task_acc: Vec<f64>,
}

/// Mean and normal-approximation 95% half-width over per-task accuracies.
pub fn summarize(task_acc: Vec<f64>) -> MetaTestSummary {
    let n = task_acc.len();
    let mean = task_acc.iter().sum::<f64>() / n.max(1) as f64;
    let ci95 = if n > 1 {
        let var = task_acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        1.96 * (var / n as f64).sqrt()
    } else {
        0.0
    };
    MetaTestSummary {
        mean_acc: mean,
        ci95,
        task_acc,
    }
}

/// Evaluate a model on unseen tasks. Learned variants base-learn from the
/// bundle's θ; baselines start each task from a random head drawn from
/// `rng.split(task index)`.
pub fn meta_test(
    ds: &Dataset,
    tasks: &[Episode],
    bundle: &ModelBundle,
    variant: VariantSpec,
    cfg: &MetaConfig,
    rng: &Rng,
    threads: usize,
) -> Result<MetaTestSummary> {
    let indexed: Vec<(usize, &Episode)> = tasks.iter().enumerate().collect();
    let acc = parallel_map(threads, &indexed, |&(i, ep)| {
        let r = if variant.is_baseline() {
            run_baseline(ds, ep, &bundle.extractor, variant, cfg, &mut rng.split(i as u64))?
        } else {
            let head = bundle
                .head
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("{variant} checkpoint has no classifier head")))?;
            let adapted = base_learn(ds, ep, &bundle.extractor, bundle.ss.as_ref(), head, cfg)?;
            evaluate(ds, ep, &bundle.extractor, bundle.ss.as_ref(), &adapted, cfg.bn_mode)?
        };
        Ok(r.mean_acc)
    })?;
    Ok(summarize(acc))
}

/// `count` episodes from `split`.
pub fn sample_tasks(ds: &Dataset, split: MetaSplit, shape: EpisodeShape, count: usize, rng: &mut Rng) -> Result<Vec<Episode>> {
    (0..count).map(|_| sample_episode(ds, split, shape, rng)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub meta: MetaConfig,
    pub curriculum: CurriculumConfig,
    /// Normal (non-hard) tasks to train on.
    pub meta_tasks: usize,
    /// Normal meta-batches between validation checkpoints.
    pub val_every: u64,
    pub val_tasks: usize,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            meta: MetaConfig::default(),
            curriculum: CurriculumConfig::default(),
            meta_tasks: 2000,
            val_every: 250,
            val_tasks: 100,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: u64,
    pub phase: Phase,
    pub task_idx: usize,
    pub test_loss: f64,
    pub mean_acc: f64,
    pub hardest_class: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    /// Normal meta-batches completed.
    pub iteration: u64,
    pub val_acc: f64,
    pub ci95: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: ModelBundle,
    pub best: ModelBundle,
    pub best_index: Option<usize>,
    pub rows: Vec<MetricRow>,
    pub val_curve: Vec<ValPoint>,
    /// Run-log lines: hard phases and validation points, in order.
    pub log: Vec<String>,
    /// Every hard phase: the flushed classes and, per episode, its classes
    /// and padding.
    pub hard_phases: Vec<HardPhaseRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HardPhaseRecord {
    /// Normal meta-batches completed before the phase.
    pub iteration: u64,
    pub flushed: Vec<u32>,
    pub episode_classes: Vec<Vec<u32>>,
    pub padded: Vec<Vec<u32>>,
}

/// Index of the best validation point; ties go to the earliest.
pub fn select_best(curve: &[ValPoint]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, p) in curve.iter().enumerate() {
        if best.is_none_or(|b| p.val_acc > curve[b].val_acc) {
            best = Some(i);
        }
    }
    best
}

/// Meta-train `variant` from a pre-trained backbone.
///
/// Normal tasks, hard tasks, θ initialization and validation tasks come from
/// separate streams of `rng`, so turning the curriculum on or off leaves the
/// normal task sequence unchanged.
pub fn train(
    ds: &Dataset,
    pretrained: &FeatureExtractor,
    variant: VariantSpec,
    cfg: &TrainConfig,
    rng: &Rng,
) -> Result<TrainOutcome> {
    cfg.meta.validate()?;
    cfg.curriculum.validate()?;
    let bn = cfg.meta.bn_mode;
    if variant.is_baseline() {
        let mut extractor = pretrained.clone();
        extractor.freeze();
        let b = ModelBundle {
            extractor,
            ss: None,
            head: None,
            tag: Some(BundleTag { variant, bn }),
        };
        return Ok(TrainOutcome {
            last: b.clone(),
            best: b,
            best_index: None,
            rows: vec![],
            val_curve: vec![],
            log: vec![],
            hard_phases: vec![],
        });
    }
    let shape = cfg.meta.shape();
    let mut normal_rng = rng.split_named("normal");
    let mut hard_rng = rng.split_named("hard");
    let val_tasks = sample_tasks(ds, MetaSplit::Val, shape, cfg.val_tasks, &mut rng.split_named("val"))?;
    let mut learner = MetaLearner::new(pretrained, variant, &cfg.meta, &mut rng.split_named("head"))?;

    let k = cfg.meta.meta_batch;
    let mut set = HardClassSet::new();
    let mut rows = Vec::new();
    let mut log = Vec::new();
    let mut hard_phases = Vec::new();
    let mut val_curve = Vec::new();
    let mut snapshots = Vec::new();
    let (mut done, mut normal_batches, mut hard_done) = (0usize, 0u64, 0usize);

    while done < cfg.meta_tasks {
        let take = k.min(cfg.meta_tasks - done);
        let eps = sample_tasks(ds, MetaSplit::Train, shape, take, &mut normal_rng)?;
        let iteration = learner.iteration;
        let results = learner.meta_batch(ds, &eps, &cfg.meta, cfg.threads)?;
        for (j, (r, ep)) in results.iter().zip(&eps).enumerate() {
            rows.push(MetricRow {
                iteration,
                phase: Phase::Normal,
                task_idx: done + j,
                test_loss: r.test_loss,
                mean_acc: r.mean_acc,
                hardest_class: r.hardest_class,
            });
            if cfg.curriculum.enabled {
                set.record(HardEntry {
                    class: r.hardest_class,
                    task_idx: done + j,
                    acc: r.class_acc[r.hardest],
                    samples: ep.samples_of_label(r.hardest),
                });
            }
        }
        done += take;
        normal_batches += 1;

        if schedule(normal_batches, &cfg.curriculum) == Phase::Hard {
            let ht = make_hard_tasks(
                &mut set,
                ds,
                MetaSplit::Train,
                shape,
                cfg.curriculum.hard_tasks,
                cfg.curriculum.method,
                &mut hard_rng,
            )?;
            let line = ht.log_line(normal_batches, cfg.curriculum.method);
            log::info!("{line}");
            log.push(line);
            hard_phases.push(HardPhaseRecord {
                iteration: normal_batches,
                flushed: ht.flushed.iter().map(|e| e.class).collect(),
                episode_classes: ht.episodes.iter().map(|e| e.class_map.clone()).collect(),
                padded: ht.padded.clone(),
            });
            for chunk in ht.episodes.chunks(k) {
                let iteration = learner.iteration;
                let results = learner.meta_batch(ds, chunk, &cfg.meta, cfg.threads)?;
                for r in results {
                    rows.push(MetricRow {
                        iteration,
                        phase: Phase::Hard,
                        task_idx: hard_done,
                        test_loss: r.test_loss,
                        mean_acc: r.mean_acc,
                        hardest_class: r.hardest_class,
                    });
                    hard_done += 1;
                }
            }
        }

        let finished = done >= cfg.meta_tasks;
        if cfg.val_tasks > 0 && (normal_batches.is_multiple_of(cfg.val_every.max(1)) || finished) {
            let bundle = learner.bundle(bn);
            let s = meta_test(ds, &val_tasks, &bundle, variant, &cfg.meta, &rng.split_named("val-heads"), cfg.threads)?;
            let line = format!("VAL iter={normal_batches} acc={:.6} ci95={:.6}", s.mean_acc, s.ci95);
            log::info!("{variant} {line}");
            log.push(line);
            val_curve.push(ValPoint {
                iteration: normal_batches,
                val_acc: s.mean_acc,
                ci95: s.ci95,
            });
            snapshots.push(bundle);
        }
    }

    let last = learner.bundle(bn);
    let best_index = select_best(&val_curve);
    let best = best_index.map_or_else(|| last.clone(), |i| snapshots[i].clone());
    Ok(TrainOutcome {
        last,
        best,
        best_index,
        rows,
        val_curve,
        log,
        hard_phases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_examples() {
        let cfg = MetaConfig::default();
        assert_eq!(gamma_schedule(0, &cfg), 0.001);
        assert_eq!(gamma_schedule(1000, &cfg), 0.0005);
        assert_eq!(gamma_schedule(4000, &cfg), 0.0001);
    }

    #[test]
    fn hardest_is_argmin_lowest_index() {
        assert_eq!(hardest_class(&[0.9, 0.2, 0.6]), 1);
        assert_eq!(hardest_class(&[0.5, 0.1, 0.1]), 1);
    }

    #[test]
    fn ci_zero_for_identical() {
        let s = summarize(vec![0.4; 10]);
        assert!(s.ci95 < 1e-12);
        assert!((s.mean_acc - 0.4).abs() < 1e-15);
    }

    #[test]
    fn select_best_argmax_first() {
        let p = |a| ValPoint {
            iteration: 0,
            val_acc: a,
            ci95: 0.0,
        };
        assert_eq!(select_best(&[p(0.3), p(0.5), p(0.5), p(0.1)]), Some(1));
        assert_eq!(select_best(&[]), None);
    }
}
