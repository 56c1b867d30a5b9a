//! Datasets, meta-splits and the M-way N-shot episode sampler.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_atomic, Reader};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DATA_MAGIC: &[u8; 4] = b"MTLD";
pub const DATA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaSplit {
    Train,
    Val,
    Test,
}

impl fmt::Display for MetaSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetaSplit::Train => "train",
            MetaSplit::Val => "val",
            MetaSplit::Test => "test",
        })
    }
}

impl FromStr for MetaSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(MetaSplit::Train),
            "val" => Ok(MetaSplit::Val),
            "test" => Ok(MetaSplit::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MetaSplits {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

impl MetaSplits {
    pub fn get(&self, split: MetaSplit) -> &[u32] {
        match split {
            MetaSplit::Train => &self.train,
            MetaSplit::Val => &self.val,
            MetaSplit::Test => &self.test,
        }
    }

    /// Assign `classes` in order to train/val/test in 64:16:20 proportion,
    /// rounding by largest remainder (ties go to the earlier split).
    pub fn proportional(classes: &[u32]) -> Self {
        let n = classes.len();
        let weights = [64usize, 16, 20];
        let mut counts: Vec<usize> = weights.iter().map(|w| n * w / 100).collect();
        let mut rem: Vec<(usize, usize)> = weights.iter().enumerate().map(|(i, w)| (n * w % 100, i)).collect();
        rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let short = n - counts.iter().sum::<usize>();
        for &(_, i) in rem.iter().take(short) {
            counts[i] += 1;
        }
        let (a, b) = (counts[0], counts[0] + counts[1]);
        MetaSplits {
            train: classes[..a].to_vec(),
            val: classes[a..b].to_vec(),
            test: classes[b..].to_vec(),
        }
    }

    /// `train:`, `val:`, `test:` lines with comma-separated class ids.
    pub fn to_text(&self) -> String {
        let line = |name: &str, ids: &[u32]| {
            let ids: Vec<String> = ids.iter().map(u32::to_string).collect();
            format!("{name}:{}\n", ids.join(","))
        };
        line("train", &self.train) + &line("val", &self.val) + &line("test", &self.test)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            kind: "split manifest",
            reason,
        };
        let mut out = MetaSplits::default();
        let mut seen = [false; 3];
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (name, ids) = line
                .split_once(':')
                .ok_or_else(|| bad(format!("line without `:`: {line:?}")))?;
            let split: MetaSplit = name.trim().parse().map_err(|_| bad(format!("unknown split `{name}`")))?;
            let ids: Vec<u32> = ids
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| bad(format!("bad class id `{s}`"))))
                .collect::<Result<_>>()?;
            let slot = split as usize;
            if seen[slot] {
                return Err(bad(format!("duplicate `{name}` line")));
            }
            seen[slot] = true;
            match split {
                MetaSplit::Train => out.train = ids,
                MetaSplit::Val => out.val = ids,
                MetaSplit::Test => out.test = ids,
            }
        }
        if seen != [true; 3] {
            return Err(bad("expected train, val and test lines".into()));
        }
        Ok(out)
    }
}

/// Immutable labeled image collection with class-level meta-splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dims: (usize, usize, usize),
    pixels: Vec<f32>,
    labels: Vec<u32>,
    class_index: BTreeMap<u32, Vec<usize>>,
    splits: MetaSplits,
}

impl Dataset {
    pub fn new(dims: (usize, usize, usize), pixels: Vec<f32>, labels: Vec<u32>, splits: MetaSplits) -> Result<Self> {
        let per = dims.0 * dims.1 * dims.2;
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::dim("dataset", &[labels.len(), dims.0, dims.1, dims.2], &[pixels.len()]));
        }
        let mut class_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &c) in labels.iter().enumerate() {
            class_index.entry(c).or_default().push(i);
        }
        let mut owner: BTreeMap<u32, MetaSplit> = BTreeMap::new();
        for split in [MetaSplit::Train, MetaSplit::Val, MetaSplit::Test] {
            for &c in splits.get(split) {
                if let Some(prev) = owner.insert(c, split) {
                    return Err(Error::Contract(format!("class {c} is in both {prev} and {split}")));
                }
                if !class_index.contains_key(&c) {
                    return Err(Error::Contract(format!("split {split} names class {c} with no samples")));
                }
            }
        }
        if let Some(c) = class_index.keys().find(|c| !owner.contains_key(c)) {
            return Err(Error::Contract(format!("class {c} is not assigned to any split")));
        }
        Ok(Dataset {
            dims,
            pixels,
            labels,
            class_index,
            splits,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn splits(&self) -> &MetaSplits {
        &self.splits
    }

    pub fn classes(&self, split: MetaSplit) -> &[u32] {
        self.splits.get(split)
    }

    pub fn samples_of(&self, class: u32) -> &[usize] {
        self.class_index.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.dims.0 * self.dims.1 * self.dims.2;
        &self.pixels[i * per..(i + 1) * per]
    }

    /// Samples `idx` as a `[B×C×H×W]` tensor.
    pub fn images(&self, idx: &[usize]) -> Result<Tensor> {
        let (c, h, w) = self.dims;
        let mut data = Vec::with_capacity(idx.len() * c * h * w);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Index {
                    index: i,
                    bound: self.len(),
                });
            }
            data.extend(self.image(i).iter().map(|&p| p as f64));
        }
        Tensor::new(&[idx.len(), c, h, w], data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (c, h, w) = self.dims;
        let mut out = Vec::with_capacity(24 + self.pixels.len() * 4 + self.len() * 4);
        out.extend_from_slice(DATA_MAGIC);
        for v in [DATA_VERSION, self.len() as u32, c as u32, h as u32, w as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..self.len() {
            out.extend_from_slice(&self.labels[i].to_le_bytes());
            for p in self.image(i) {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], splits: MetaSplits) -> Result<Self> {
        const KIND: &str = "dataset";
        let mut r = Reader::new(bytes, KIND);
        if r.take(4)? != DATA_MAGIC {
            return Err(Error::Format {
                kind: KIND,
                reason: "bad magic".into(),
            });
        }
        let version = r.u32()?;
        if version != DATA_VERSION {
            return Err(Error::Version {
                kind: KIND,
                found: version,
                expected: DATA_VERSION,
            });
        }
        let n = r.u32()? as usize;
        let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let per = c * h * w;
        let mut labels = Vec::with_capacity(n.min(1 << 20));
        let mut pixels = Vec::with_capacity((n * per).min(1 << 26));
        for _ in 0..n {
            labels.push(r.u32()?);
            for chunk in r.take(per * 4)?.chunks_exact(4) {
                let p = f32::from_le_bytes(chunk.try_into().unwrap());
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Format {
                        kind: KIND,
                        reason: format!("pixel {p} outside [0, 1]"),
                    });
                }
                pixels.push(p);
            }
        }
        if !r.is_empty() {
            return Err(Error::Format {
                kind: KIND,
                reason: format!("{} trailing bytes", r.remaining()),
            });
        }
        Dataset::new((c, h, w), pixels, labels, splits)
    }

    /// Sidecar path holding the split manifest for a dataset file.
    pub fn splits_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".splits.txt");
        PathBuf::from(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())?;
        write_atomic(&Self::splits_path(path), self.splits.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let sp = Self::splits_path(path);
        let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        Dataset::from_bytes(&bytes, MetaSplits::from_text(&text)?)
    }
}

/// One M-way task with disjoint train (support) and test (query) splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    /// Episode label `l` stands for global class `class_map[l]`.
    pub class_map: Vec<u32>,
    pub train: Vec<usize>,
    pub train_labels: Vec<usize>,
    pub test: Vec<usize>,
    pub test_labels: Vec<usize>,
}

impl Episode {
    pub fn train_images(&self, ds: &Dataset) -> Result<Tensor> {
        ds.images(&self.train)
    }

    pub fn test_images(&self, ds: &Dataset) -> Result<Tensor> {
        ds.images(&self.test)
    }

    /// All samples of episode label `l`, train first.
    pub fn samples_of_label(&self, l: usize) -> Vec<usize> {
        let pick = |idx: &[usize], labels: &[usize]| {
            idx.iter()
                .zip(labels)
                .filter(|(_, &y)| y == l)
                .map(|(&i, _)| i)
                .collect::<Vec<_>>()
        };
        let mut v = pick(&self.train, &self.train_labels);
        v.extend(pick(&self.test, &self.test_labels));
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeShape {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
}

fn assemble(ds: &Dataset, classes: &[(u32, Vec<usize>)], shape: EpisodeShape) -> Episode {
    let mut ep = Episode {
        way: shape.way,
        shot: shape.shot,
        query: shape.query,
        class_map: classes.iter().map(|(c, _)| *c).collect(),
        train: Vec::with_capacity(shape.way * shape.shot),
        train_labels: Vec::with_capacity(shape.way * shape.shot),
        test: Vec::with_capacity(shape.way * shape.query),
        test_labels: Vec::with_capacity(shape.way * shape.query),
    };
    let _ = ds;
    for (label, (_, samples)) in classes.iter().enumerate() {
        let (tr, te) = samples.split_at(shape.shot);
        ep.train.extend_from_slice(tr);
        ep.train_labels.extend(std::iter::repeat_n(label, tr.len()));
        ep.test.extend_from_slice(te);
        ep.test_labels.extend(std::iter::repeat_n(label, te.len()));
    }
    ep
}

fn draw_samples(ds: &Dataset, class: u32, need: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let pool = ds.samples_of(class);
    if pool.len() < need {
        return Err(Error::Capacity(format!(
            "class {class} has {} samples, episode needs {need}",
            pool.len()
        )));
    }
    Ok(rng.sample_indices(pool.len(), need).into_iter().map(|i| pool[i]).collect())
}

/// Uniformly sample an episode from `split`: `way` distinct classes, then
/// `shot + query` distinct samples per class (first `shot` go to train).
pub fn sample_episode(ds: &Dataset, split: MetaSplit, shape: EpisodeShape, rng: &mut Rng) -> Result<Episode> {
    let classes = ds.classes(split);
    if classes.len() < shape.way {
        return Err(Error::Capacity(format!(
            "{split} split has {} classes, episode needs {}",
            classes.len(),
            shape.way
        )));
    }
    let picked: Vec<u32> = rng
        .sample_indices(classes.len(), shape.way)
        .into_iter()
        .map(|i| classes[i])
        .collect();
    let mut per_class = Vec::with_capacity(shape.way);
    for c in picked {
        per_class.push((c, draw_samples(ds, c, shape.shot + shape.query, rng)?));
    }
    Ok(assemble(ds, &per_class, shape))
}

/// An episode built from a failure-class pool, with the classes that had to be
/// padded in because the pool held fewer than `way` distinct entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PooledEpisode {
    pub episode: Episode,
    pub padded: Vec<u32>,
}

/// Pick up to `way` distinct classes from a multiset, each draw proportional
/// to the remaining multiplicities.
fn weighted_distinct(pool: &[u32], way: usize, rng: &mut Rng) -> Vec<u32> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &c in pool {
        *counts.entry(c).or_default() += 1;
    }
    let mut chosen = Vec::with_capacity(way);
    while chosen.len() < way && !counts.is_empty() {
        let total: usize = counts.values().sum();
        let mut r = rng.below(total);
        let pick = *counts
            .iter()
            .find(|(_, &n)| {
                if r < n {
                    true
                } else {
                    r -= n;
                    false
                }
            })
            .unwrap()
            .0;
        counts.remove(&pick);
        chosen.push(pick);
    }
    chosen
}

/// Sample an episode whose classes come from `pool` (weighted by
/// multiplicity). When the pool has fewer than `way` distinct classes, the rest
/// are drawn uniformly from `split` and reported in `padded`.
///
/// With `reuse` set, a pooled class draws its samples from the given
/// per-class sample lists instead of the whole dataset.
pub fn sample_episode_from_classes(
    ds: &Dataset,
    split: MetaSplit,
    pool: &[u32],
    shape: EpisodeShape,
    reuse: Option<&BTreeMap<u32, Vec<usize>>>,
    rng: &mut Rng,
) -> Result<PooledEpisode> {
    for &c in pool {
        if ds.samples_of(c).is_empty() {
            return Err(Error::Contract(format!("pooled class {c} has no samples")));
        }
    }
    let chosen = weighted_distinct(pool, shape.way, rng);
    let mut padded = Vec::new();
    if chosen.len() < shape.way {
        let rest: Vec<u32> = ds
            .classes(split)
            .iter()
            .copied()
            .filter(|c| !chosen.contains(c))
            .collect();
        let need = shape.way - chosen.len();
        if rest.len() < need {
            return Err(Error::Capacity(format!(
                "cannot pad {} pooled classes to {}: {split} split has only {} others",
                chosen.len(),
                shape.way,
                rest.len()
            )));
        }
        padded = rng.sample_indices(rest.len(), need).into_iter().map(|i| rest[i]).collect();
        log::warn!(
            "hard-class pool has {} distinct classes for a {}-way task; padded with {:?}",
            chosen.len(),
            shape.way,
            padded
        );
    }
    let need = shape.shot + shape.query;
    let mut per_class = Vec::with_capacity(shape.way);
    for &c in &chosen {
        let samples = match reuse.and_then(|m| m.get(&c)) {
            Some(own) if own.len() >= need => {
                rng.sample_indices(own.len(), need).into_iter().map(|i| own[i]).collect()
            }
            Some(own) => {
                return Err(Error::Capacity(format!(
                    "class {c} has {} reusable samples, episode needs {need}",
                    own.len()
                )))
            }
            None => draw_samples(ds, c, need, rng)?,
        };
        per_class.push((c, samples));
    }
    for &c in &padded {
        per_class.push((c, draw_samples(ds, c, need, rng)?));
    }
    Ok(PooledEpisode {
        episode: assemble(ds, &per_class, shape),
        padded,
    })
}

/// Per-sample variation of the synthetic image families.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGeometry {
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Maximum translation in pixels.
    pub jitter: usize,
    /// Maximum relative contrast change.
    pub contrast: f64,
    /// Number of textured blobs composing a class template.
    pub blobs: usize,
}

impl Default for SyntheticGeometry {
    fn default() -> Self {
        SyntheticGeometry {
            noise: 0.15,
            jitter: 2,
            contrast: 0.3,
            blobs: 3,
        }
    }
}

impl SyntheticGeometry {
    pub fn noiseless(&self) -> Self {
        SyntheticGeometry {
            noise: 0.0,
            jitter: 0,
            contrast: 0.0,
            ..*self
        }
    }
}

/// Class template: a few gaussian-windowed oriented gratings, each with its
/// own colour, squashed into (0, 1).
fn class_template(c: usize, h: usize, w: usize, blobs: usize, rng: &mut Rng) -> Vec<f64> {
    let mut acc = vec![0.0; c * h * w];
    for _ in 0..blobs {
        let cy = rng.uniform() * h as f64;
        let cx = rng.uniform() * w as f64;
        let sigma = (0.15 + 0.25 * rng.uniform()) * h.min(w) as f64;
        let theta = rng.uniform() * std::f64::consts::PI;
        let freq = 0.05 + 0.25 * rng.uniform();
        let phase = rng.uniform() * std::f64::consts::TAU;
        let colour: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
        let (ct, st) = (theta.cos(), theta.sin());
        for (ch, col) in colour.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    let env = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                    let wave = (std::f64::consts::TAU * freq * (x as f64 * ct + y as f64 * st) + phase).cos();
                    acc[(ch * h + y) * w + x] += 1.5 * col * env * wave;
                }
            }
        }
    }
    let base: Vec<f64> = (0..c).map(|_| 0.3 * rng.normal()).collect();
    acc.iter()
        .enumerate()
        .map(|(i, v)| 0.5 + 0.4 * (v + base[i / (h * w)]).tanh())
        .collect()
}

/// Procedural stand-in for a natural-image few-shot benchmark: each class is a
/// random template; samples add translation, contrast change and noise. Class
/// ids are `0..num_classes`, split 64:16:20 in id order.
pub fn generate_synthetic(
    num_classes: usize,
    samples_per_class: usize,
    (c, h, w): (usize, usize, usize),
    geometry: &SyntheticGeometry,
    rng: &mut Rng,
) -> Result<Dataset> {
    if num_classes == 0 || samples_per_class == 0 {
        return Err(Error::Contract("synthetic dataset needs at least one class and sample".into()));
    }
    let per = c * h * w;
    let mut pixels = Vec::with_capacity(num_classes * samples_per_class * per);
    let mut labels = Vec::with_capacity(num_classes * samples_per_class);
    let mut tmpl_rng = rng.split_named("templates");
    let mut sample_rng = rng.split_named("samples");
    for class in 0..num_classes {
        let tmpl = class_template(c, h, w, geometry.blobs, &mut tmpl_rng);
        for _ in 0..samples_per_class {
            let j = geometry.jitter as isize;
            let (dy, dx) = if j > 0 {
                (
                    sample_rng.below(2 * j as usize + 1) as isize - j,
                    sample_rng.below(2 * j as usize + 1) as isize - j,
                )
            } else {
                (0, 0)
            };
            let gain = 1.0 + geometry.contrast * (2.0 * sample_rng.uniform() - 1.0);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sy = (y as isize - dy).clamp(0, h as isize - 1) as usize;
                        let sx = (x as isize - dx).clamp(0, w as isize - 1) as usize;
                        let t = tmpl[(ch * h + sy) * w + sx];
                        let noise = if geometry.noise > 0.0 {
                            geometry.noise * sample_rng.normal()
                        } else {
                            0.0
                        };
                        let v = 0.5 + gain * (t - 0.5) + noise;
                        pixels.push(v.clamp(0.0, 1.0) as f32);
                    }
                }
            }
            labels.push(class as u32);
        }
    }
    let ids: Vec<u32> = (0..num_classes as u32).collect();
    Dataset::new((c, h, w), pixels, labels, MetaSplits::proportional(&ids))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        generate_synthetic(25, 20, (1, 4, 4), &SyntheticGeometry::default(), &mut Rng::new(0)).unwrap()
    }

    #[test]
    fn proportional_splits() {
        let ids: Vec<u32> = (0..100).collect();
        let s = MetaSplits::proportional(&ids);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (64, 16, 20));
        let ids: Vec<u32> = (0..10).collect();
        let s = MetaSplits::proportional(&ids);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
    }

    #[test]
    fn split_text_round_trip() {
        let s = MetaSplits {
            train: vec![0, 1, 2],
            val: vec![],
            test: vec![7],
        };
        assert_eq!(s.to_text(), "train:0,1,2\nval:\ntest:7\n");
        assert_eq!(MetaSplits::from_text(&s.to_text()).unwrap(), s);
        assert!(MetaSplits::from_text("train:1\nval:2\n").is_err());
    }

    #[test]
    fn class_in_two_splits_rejected() {
        let splits = MetaSplits {
            train: vec![0],
            val: vec![0],
            test: vec![],
        };
        assert!(Dataset::new((1, 1, 1), vec![0.5], vec![0], splits).is_err());
    }

    #[test]
    fn capacity_errors() {
        let ds = small();
        let too_wide = EpisodeShape {
            way: 6,
            shot: 1,
            query: 1,
        };
        assert!(matches!(
            sample_episode(&ds, MetaSplit::Val, too_wide, &mut Rng::new(1)),
            Err(Error::Capacity(_))
        ));
        let too_deep = EpisodeShape {
            way: 2,
            shot: 10,
            query: 11,
        };
        assert!(matches!(
            sample_episode(&ds, MetaSplit::Train, too_deep, &mut Rng::new(1)),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn pool_padding_reported() {
        let ds = small();
        let shape = EpisodeShape {
            way: 5,
            shot: 1,
            query: 2,
        };
        let c = ds.classes(MetaSplit::Train)[3];
        let pe = sample_episode_from_classes(&ds, MetaSplit::Train, &[c; 20], shape, None, &mut Rng::new(2)).unwrap();
        assert_eq!(pe.padded.len(), 4);
        assert_eq!(pe.episode.class_map[0], c);
        assert!(!pe.padded.contains(&c));
    }

    #[test]
    fn reuse_stays_inside_given_samples() {
        let ds = small();
        let shape = EpisodeShape {
            way: 5,
            shot: 1,
            query: 3,
        };
        let base = sample_episode(&ds, MetaSplit::Train, shape, &mut Rng::new(3)).unwrap();
        let hard = base.class_map[2];
        let own: BTreeMap<u32, Vec<usize>> = [(hard, base.samples_of_label(2))].into();
        let pe = sample_episode_from_classes(&ds, MetaSplit::Train, &[hard], shape, Some(&own), &mut Rng::new(4))
            .unwrap();
        let got = pe.episode.samples_of_label(0);
        assert!(got.iter().all(|s| own[&hard].contains(s)));
    }
}
