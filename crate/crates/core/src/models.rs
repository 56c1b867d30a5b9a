//! Feature extractor, scaling/shifting parameters and classifier heads.
//!
//! The extractor is a stack of conv blocks (conv → batch norm → ReLU →
//! optional 2×2 max-pool) followed by a global spatial mean. Scaling/shifting
//! modulates each conv filter `k` as `(W_k · scale_k) * X + (b_k + shift_k)`,
//! leaving the stored weights untouched.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const COSINE_EPS: f64 = 1e-8;
pub const COSINE_TEMPERATURE: f64 = 10.0;

/// Source of batch-norm statistics during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Statistics of the current batch.
    Batch,
    /// Running statistics accumulated during pre-training.
    Running,
}

impl FromStr for BnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(BnMode::Batch),
            "running" => Ok(BnMode::Running),
            _ => Err(Error::Config(format!("unknown bn mode `{s}` (batch|running)"))),
        }
    }
}

impl fmt::Display for BnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BnMode::Batch => "batch",
            BnMode::Running => "running",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub pool: bool,
}

impl ConvBlock {
    pub fn filters(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.weight, &mut self.bias, &mut self.bn_gamma, &mut self.bn_beta]
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.weight, &self.bias, &self.bn_gamma, &self.bn_beta]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub in_channels: usize,
    pub filters: usize,
    pub blocks: usize,
    pub kernel: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            in_channels: 3,
            filters: 16,
            blocks: 4,
            kernel: 3,
        }
    }
}

/// The convolutional backbone Θ.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    blocks: Vec<ConvBlock>,
}

impl FeatureExtractor {
    pub fn new(blocks: Vec<ConvBlock>) -> Result<Self> {
        for pair in blocks.windows(2) {
            if pair[0].filters() != pair[1].in_channels() {
                return Err(Error::dim(
                    "feature_extractor",
                    pair[0].weight.shape(),
                    pair[1].weight.shape(),
                ));
            }
        }
        for b in &blocks {
            let k = b.filters();
            for t in [&b.bias, &b.bn_gamma, &b.bn_beta, &b.running_mean, &b.running_var] {
                if t.numel() != k {
                    return Err(Error::dim("conv_block", b.weight.shape(), t.shape()));
                }
            }
        }
        Ok(FeatureExtractor { blocks })
    }

    /// He-initialized conv weights, zero biases, unit BN scale.
    pub fn init(cfg: &ExtractorConfig, rng: &mut Rng) -> Self {
        let mut blocks = Vec::with_capacity(cfg.blocks);
        let mut c_in = cfg.in_channels;
        for _ in 0..cfg.blocks {
            let k = cfg.filters;
            let fan_in = (c_in * cfg.kernel * cfg.kernel) as f64;
            let std = (2.0 / fan_in).sqrt();
            let n = k * c_in * cfg.kernel * cfg.kernel;
            let w: Vec<f64> = (0..n).map(|_| rng.normal() * std).collect();
            blocks.push(ConvBlock {
                weight: Tensor::new(&[k, c_in, cfg.kernel, cfg.kernel], w)
                    .unwrap()
                    .with_requires_grad(true),
                bias: Tensor::zeros(&[k]).with_requires_grad(true),
                bn_gamma: Tensor::ones(&[k]).with_requires_grad(true),
                bn_beta: Tensor::zeros(&[k]).with_requires_grad(true),
                running_mean: Tensor::zeros(&[k]),
                running_var: Tensor::ones(&[k]),
                pool: true,
            });
            c_in = k;
        }
        FeatureExtractor { blocks }
    }

    pub fn blocks(&self) -> &[ConvBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ConvBlock] {
        &mut self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.blocks.last().map_or(0, ConvBlock::filters)
    }

    pub fn in_channels(&self) -> usize {
        self.blocks.first().map_or(0, ConvBlock::in_channels)
    }

    /// Clear `requires_grad` on every parameter.
    pub fn freeze(&mut self) {
        self.set_trainable(Scope::HeadOnly);
    }

    pub fn is_frozen(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.params().iter().all(|t| !t.requires_grad()))
    }

    /// Make exactly the blocks covered by `scope` trainable.
    pub fn set_trainable(&mut self, scope: Scope) {
        let n = self.blocks.len();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let on = scope.covers_block(i, n);
            for t in b.params_mut() {
                t.set_requires_grad(on);
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.params())
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    /// Combined checksum over every parameter and buffer.
    pub fn checksum(&self) -> u64 {
        self.blocks.iter().fold(0u64, |acc, b| {
            [&b.weight, &b.bias, &b.bn_gamma, &b.bn_beta, &b.running_mean, &b.running_var]
                .iter()
                .fold(acc, |a, t| a.rotate_left(7) ^ t.checksum())
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> ExtractorVars {
        ExtractorVars {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockVars {
                    weight: tape.leaf(&b.weight),
                    bias: tape.leaf(&b.bias),
                    gamma: tape.leaf(&b.bn_gamma),
                    beta: tape.leaf(&b.bn_beta),
                })
                .collect(),
        }
    }

    /// Blend observed batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for (b, s) in self.blocks.iter_mut().zip(stats) {
            let unbias = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            for (r, m) in b.running_mean.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, v) in b.running_var.data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
    }

    /// Parameters in block order (weight, bias, gamma, beta).
    pub(crate) fn params_in_order_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut())
    }
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Debug)]
pub struct ExtractorVars {
    pub blocks: Vec<BlockVars>,
}

impl ExtractorVars {
    pub(crate) fn in_order(&self) -> impl Iterator<Item = Var> + '_ {
        self.blocks.iter().flat_map(|b| [b.weight, b.bias, b.gamma, b.beta])
    }
}

/// Per-filter scale (init 1) and shift (init 0) for each conv block.
#[derive(Clone, Debug, PartialEq)]
pub struct SSParams {
    pub scale: Vec<Tensor>,
    pub shift: Vec<Tensor>,
}

impl SSParams {
    pub fn fresh(extractor: &FeatureExtractor) -> Self {
        let filters = extractor.blocks.iter().map(ConvBlock::filters);
        SSParams {
            scale: filters.clone().map(|k| Tensor::ones(&[k])).collect(),
            shift: filters.map(|k| Tensor::zeros(&[k])).collect(),
        }
    }

    pub fn is_bound_to(&self, extractor: &FeatureExtractor) -> bool {
        self.scale.len() == extractor.num_blocks()
            && self.shift.len() == extractor.num_blocks()
            && extractor.blocks.iter().enumerate().all(|(i, b)| {
                self.scale[i].numel() == b.filters() && self.shift[i].numel() == b.filters()
            })
    }

    pub fn check_bound(&self, extractor: &FeatureExtractor) -> Result<()> {
        if self.is_bound_to(extractor) {
            Ok(())
        } else {
            let ss: Vec<usize> = self.scale.iter().map(Tensor::numel).collect();
            let ex: Vec<usize> = extractor.blocks.iter().map(ConvBlock::filters).collect();
            Err(Error::Binding(format!(
                "scale/shift filter counts {ss:?} vs extractor {ex:?}"
            )))
        }
    }

    pub fn param_count(&self) -> usize {
        self.scale.iter().chain(&self.shift).map(Tensor::numel).sum()
    }

    pub fn checksum(&self) -> u64 {
        self.scale
            .iter()
            .chain(&self.shift)
            .fold(0u64, |a, t| a.rotate_left(7) ^ t.checksum())
    }

    /// Record the parameters as leaves; blocks outside `scope` stay constant.
    pub fn bind(&self, tape: &mut Tape, scope: Option<Scope>) -> SsVars {
        let n = self.scale.len();
        let on = |i: usize| scope.is_some_and(|s| s.covers_block(i, n));
        SsVars {
            scale: (0..n)
                .map(|i| tape.leaf(&self.scale[i].clone().with_requires_grad(on(i))))
                .collect(),
            shift: (0..n)
                .map(|i| tape.leaf(&self.shift[i].clone().with_requires_grad(on(i))))
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SsVars {
    pub scale: Vec<Var>,
    pub shift: Vec<Var>,
}

/// Run the extractor on `x` and return `[B×embedding_dim]` embeddings plus
/// the batch statistics observed by each block (empty in running mode).
pub fn features_on_tape(
    tape: &mut Tape,
    x: Var,
    extractor: &FeatureExtractor,
    vars: &ExtractorVars,
    ss: Option<&SsVars>,
    bn: BnMode,
) -> Result<(Var, Vec<BatchStats>)> {
    if let Some(s) = ss {
        if s.scale.len() != extractor.num_blocks() {
            return Err(Error::Binding(format!(
                "{} scale/shift blocks for {} conv blocks",
                s.scale.len(),
                extractor.num_blocks()
            )));
        }
    }
    let mut h = x;
    let mut stats = Vec::new();
    for (i, (block, bv)) in extractor.blocks.iter().zip(&vars.blocks).enumerate() {
        let (w, b) = match ss {
            Some(s) => (
                tape.filter_scale(bv.weight, s.scale[i])?,
                tape.add(bv.bias, s.shift[i])?,
            ),
            None => (bv.weight, bv.bias),
        };
        let pad = block.kernel().0 / 2;
        let z = tape.conv2d(h, w, b, 1, pad)?;
        let z = match bn {
            BnMode::Batch => {
                let (z, st) = tape.batch_norm(z, bv.gamma, bv.beta, BN_EPS)?;
                stats.push(st);
                z
            }
            BnMode::Running => tape.batch_norm_frozen(
                z,
                bv.gamma,
                bv.beta,
                block.running_mean.data(),
                block.running_var.data(),
                BN_EPS,
            )?,
        };
        let z = tape.relu(z)?;
        h = if block.pool && tape.shape(z)[2] >= 2 && tape.shape(z)[3] >= 2 {
            tape.max_pool2d(z)?
        } else {
            z
        };
    }
    Ok((tape.mean_pool(h)?, stats))
}

/// Embeddings of `x[B×C×H×W]` without gradient tracking.
pub fn forward_features(
    x: &Tensor,
    extractor: &FeatureExtractor,
    ss: Option<&SSParams>,
    bn: BnMode,
) -> Result<Tensor> {
    if let Some(s) = ss {
        s.check_bound(extractor)?;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let vars = extractor.bind(&mut tape);
    let ssv = ss.map(|s| s.bind(&mut tape, None));
    let (emb, _) = features_on_tape(&mut tape, xv, extractor, &vars, ssv.as_ref(), bn)?;
    Ok(tape.value(emb).detached())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    FcSoftmax,
    Cosine,
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fc" | "fc_softmax" => Ok(HeadKind::FcSoftmax),
            "cosine" => Ok(HeadKind::Cosine),
            _ => Err(Error::Config(format!("unknown head `{s}` (fc|cosine)"))),
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::FcSoftmax => "fc",
            HeadKind::Cosine => "cosine",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[d_in × d_out]`
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Classifier θ: `depth - 1` hidden FC+ReLU layers, then either an affine
/// softmax layer or a temperature-scaled cosine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub kind: HeadKind,
    pub layers: Vec<Linear>,
    /// Present for cosine heads only.
    pub temperature: Option<Tensor>,
}

impl ClassifierHead {
    /// Gaussian-initialized head with standard deviation `std`.
    pub fn new(kind: HeadKind, emb_dim: usize, way: usize, depth: usize, std: f64, rng: &mut Rng) -> Self {
        let depth = depth.max(1);
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let out = if i + 1 == depth { way } else { emb_dim };
            let w = (0..emb_dim * out).map(|_| rng.normal() * std).collect();
            layers.push(Linear {
                weight: Tensor::new(&[emb_dim, out], w).unwrap().with_requires_grad(true),
                bias: Tensor::zeros(&[out]).with_requires_grad(true),
            });
        }
        let temperature = (kind == HeadKind::Cosine)
            .then(|| Tensor::scalar(COSINE_TEMPERATURE).with_requires_grad(true));
        ClassifierHead {
            kind,
            layers,
            temperature,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn way(&self) -> usize {
        self.layers.last().unwrap().weight.shape()[1]
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Parameters in a fixed order: per layer (weight, bias), then temperature.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect();
        v.extend(self.temperature.as_ref());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect();
        v.extend(self.temperature.as_mut());
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn checksum(&self) -> u64 {
        self.params().iter().fold(0u64, |a, t| a.rotate_left(7) ^ t.checksum())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> HeadVars {
        HeadVars {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        tape.leaf(&l.weight.clone().with_requires_grad(trainable)),
                        tape.leaf(&l.bias.clone().with_requires_grad(trainable)),
                    )
                })
                .collect(),
            temperature: self
                .temperature
                .as_ref()
                .map(|t| tape.leaf(&t.clone().with_requires_grad(trainable))),
        }
    }
}

/// Deep copy θ into a fresh θ′ with gradients enabled.
pub fn clone_head(head: &ClassifierHead) -> ClassifierHead {
    let mut c = head.clone();
    for p in c.params_mut() {
        let _ = p.set_grad(None);
        p.set_requires_grad(true);
    }
    c
}

#[derive(Clone, Debug)]
pub struct HeadVars {
    pub layers: Vec<(Var, Var)>,
    pub temperature: Option<Var>,
}

impl HeadVars {
    pub fn in_order(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.layers.iter().flat_map(|&(w, b)| [w, b]).collect();
        v.extend(self.temperature);
        v
    }

    /// Rebuild from a flat list in [`HeadVars::in_order`] order.
    pub fn from_order(vars: &[Var], like: &HeadVars) -> HeadVars {
        let n = like.layers.len();
        HeadVars {
            layers: (0..n).map(|i| (vars[2 * i], vars[2 * i + 1])).collect(),
            temperature: like.temperature.map(|_| vars[2 * n]),
        }
    }
}

/// Rows of `x[B×d]` scaled to unit norm, with `COSINE_EPS` guarding zero rows.
fn normalize_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let d = tape.shape(x)[1];
    let sq = tape.mul(x, x)?;
    let s = tape.row_sum(sq)?;
    let s = tape.add_const(s, COSINE_EPS * COSINE_EPS)?;
    let n = tape.sqrt(s)?;
    let nb = tape.broadcast_cols(n, d)?;
    tape.div(x, nb)
}

/// Logits `[B×way]` for embeddings `emb[B×d]`.
pub fn head_on_tape(tape: &mut Tape, emb: Var, head: &ClassifierHead, vars: &HeadVars) -> Result<Var> {
    let d = tape.shape(emb).get(1).copied().unwrap_or(0);
    if d != head.input_dim() {
        return Err(Error::dim("forward_head", tape.shape(emb), head.layers[0].weight.shape()));
    }
    let mut h = emb;
    let last = vars.layers.len() - 1;
    for (i, &(w, b)) in vars.layers.iter().enumerate() {
        if i == last && head.kind == HeadKind::Cosine {
            let xn = normalize_rows(tape, h)?;
            let wt = tape.transpose(w)?;
            let wn = normalize_rows(tape, wt)?;
            let wn = tape.transpose(wn)?;
            let cos = tape.matmul(xn, wn)?;
            let t = vars.temperature.expect("cosine head carries a temperature");
            return tape.mul_scalar(cos, t);
        }
        let z = tape.matmul(h, w)?;
        let z = tape.add_row_vec(z, b)?;
        h = if i == last { z } else { tape.relu(z)? };
    }
    Ok(h)
}

/// Logits without gradient tracking.
pub fn forward_head(emb: &Tensor, head: &ClassifierHead) -> Result<Tensor> {
    let mut tape = Tape::new();
    let e = tape.constant(emb);
    let vars = head.bind(&mut tape, false);
    let out = head_on_tape(&mut tape, e, head, &vars)?;
    Ok(tape.value(out).detached())
}

/// Which conv blocks a meta operation touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Full,
    LastBlock,
    LastTwoBlocks,
    HeadOnly,
}

impl Scope {
    pub fn covers_block(self, i: usize, n: usize) -> bool {
        match self {
            Scope::Full => true,
            Scope::LastBlock => i + 1 == n,
            Scope::LastTwoBlocks => i + 2 >= n,
            Scope::HeadOnly => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaOp {
    Ss,
    Ft,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    None,
    UpdateAll,
    UpdateHead,
}

/// One rung of the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub meta_op: MetaOp,
    pub scope: Scope,
    pub baseline: Baseline,
}

impl VariantSpec {
    pub const NAMES: [&'static str; 9] = [
        "ss_full",
        "ss_b4",
        "ss_b34",
        "ft_full",
        "ft_b4",
        "ft_b34",
        "ft_head",
        "update_all",
        "update_head",
    ];

    pub fn name(&self) -> &'static str {
        match (self.meta_op, self.scope, self.baseline) {
            (MetaOp::Ss, Scope::Full, _) => "ss_full",
            (MetaOp::Ss, Scope::LastBlock, _) => "ss_b4",
            (MetaOp::Ss, Scope::LastTwoBlocks, _) => "ss_b34",
            (MetaOp::Ss, Scope::HeadOnly, _) => "ss_head",
            (MetaOp::Ft, Scope::Full, _) => "ft_full",
            (MetaOp::Ft, Scope::LastBlock, _) => "ft_b4",
            (MetaOp::Ft, Scope::LastTwoBlocks, _) => "ft_b34",
            (MetaOp::Ft, Scope::HeadOnly, _) => "ft_head",
            (MetaOp::None, _, Baseline::UpdateAll) => "update_all",
            (MetaOp::None, _, _) => "update_head",
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.meta_op == MetaOp::None
    }

    /// Number of parameters the outer (meta) update touches, head included.
    pub fn meta_param_count(&self, extractor: &FeatureExtractor, head: &ClassifierHead) -> usize {
        let n = extractor.num_blocks();
        let blocks = extractor.blocks.iter().enumerate();
        let inner: usize = match self.meta_op {
            MetaOp::Ss => blocks
                .filter(|(i, _)| self.scope.covers_block(*i, n))
                .map(|(_, b)| 2 * b.filters())
                .sum(),
            MetaOp::Ft => blocks
                .filter(|(i, _)| self.scope.covers_block(*i, n))
                .map(|(_, b)| b.params().iter().map(|t| t.numel()).sum::<usize>())
                .sum(),
            MetaOp::None => 0,
        };
        inner + head.param_count()
    }
}

impl FromStr for VariantSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v = |meta_op, scope, baseline| VariantSpec {
            meta_op,
            scope,
            baseline,
        };
        Ok(match s {
            "ss_full" => v(MetaOp::Ss, Scope::Full, Baseline::None),
            "ss_b4" => v(MetaOp::Ss, Scope::LastBlock, Baseline::None),
            "ss_b34" => v(MetaOp::Ss, Scope::LastTwoBlocks, Baseline::None),
            "ft_full" => v(MetaOp::Ft, Scope::Full, Baseline::None),
            "ft_b4" => v(MetaOp::Ft, Scope::LastBlock, Baseline::None),
            "ft_b34" => v(MetaOp::Ft, Scope::LastTwoBlocks, Baseline::None),
            "ft_head" => v(MetaOp::Ft, Scope::HeadOnly, Baseline::None),
            "update_all" => v(MetaOp::None, Scope::Full, Baseline::UpdateAll),
            "update_head" => v(MetaOp::None, Scope::HeadOnly, Baseline::UpdateHead),
            _ => {
                return Err(Error::Config(format!(
                    "unknown variant `{s}` (expected one of {})",
                    Self::NAMES.join("|")
                )))
            }
        })
    }
}

impl fmt::Display for VariantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An exact fraction in lowest terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Option<Self> {
        if den == 0 {
            return None;
        }
        let g = gcd(num, den);
        Some(Ratio {
            num: num / g,
            den: den / g,
        })
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Exact `self < other` by cross-multiplication.
    pub fn lt(self, other: Ratio) -> bool {
        (self.num as u128) * (other.den as u128) < (other.num as u128) * (self.den as u128)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub ss_count: u64,
    pub ft_count: u64,
    pub ratio: Ratio,
}

/// Scaling/shifting parameter count against the conv weight+bias count.
pub fn ss_param_count(extractor: &FeatureExtractor) -> Result<ParamCount> {
    let ss_count: u64 = extractor.blocks.iter().map(|b| 2 * b.filters() as u64).sum();
    let ft_count: u64 = extractor
        .blocks
        .iter()
        .map(|b| (b.weight.numel() + b.bias.numel()) as u64)
        .sum();
    let ratio = Ratio::new(ss_count, ft_count)
        .ok_or_else(|| Error::Contract("extractor has no conv parameters; ratio undefined".into()))?;
    Ok(ParamCount {
        ss_count,
        ft_count,
        ratio,
    })
}
