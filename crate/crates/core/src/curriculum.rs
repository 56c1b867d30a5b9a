//! Hard-task meta-batches: collect each task's worst class, then periodically
//! train on tasks rebuilt from those classes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::episodes::{sample_episode_from_classes, Dataset, Episode, EpisodeShape, MetaSplit};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMethod {
    /// Reuse the recorded samples of each failure class.
    ReuseSamples,
    /// Draw new samples of each failure class from the dataset.
    FreshSamples,
}

impl FromStr for ResampleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reuse_samples" => Ok(ResampleMethod::ReuseSamples),
            "fresh_samples" => Ok(ResampleMethod::FreshSamples),
            _ => Err(Error::Config(format!(
                "unknown resample method `{s}` (reuse_samples|fresh_samples)"
            ))),
        }
    }
}

impl fmt::Display for ResampleMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResampleMethod::ReuseSamples => "reuse_samples",
            ResampleMethod::FreshSamples => "fresh_samples",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub enabled: bool,
    /// Normal meta-batches between hard phases.
    pub cadence: u64,
    pub hard_tasks: usize,
    pub method: ResampleMethod,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            enabled: false,
            cadence: 10,
            hard_tasks: 10,
            method: ResampleMethod::FreshSamples,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cadence == 0 {
            return Err(Error::Config("hard-task cadence must be at least 1".into()));
        }
        if self.enabled && self.hard_tasks == 0 {
            return Err(Error::Config("hard-task count must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HardEntry {
    pub class: u32,
    pub task_idx: usize,
    pub acc: f64,
    /// The failure class's samples in the recording task.
    pub samples: Vec<usize>,
}

/// Multiset of failure classes with where each came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HardClassSet {
    entries: Vec<HardEntry>,
}

impl HardClassSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, entry: HardEntry) {
        self.entries.push(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[HardEntry] {
        &self.entries
    }

    pub fn classes(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.class).collect()
    }

    pub fn multiplicity(&self, class: u32) -> usize {
        self.entries.iter().filter(|e| e.class == class).count()
    }

    pub fn flush(&mut self) -> Vec<HardEntry> {
        std::mem::take(&mut self.entries)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Normal,
    Hard,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Normal => "normal",
            Phase::Hard => "hard",
        })
    }
}

/// Phase to run after `completed` normal meta-batches.
pub fn schedule(completed: u64, cfg: &CurriculumConfig) -> Phase {
    if cfg.enabled && completed > 0 && completed.is_multiple_of(cfg.cadence.max(1)) {
        Phase::Hard
    } else {
        Phase::Normal
    }
}

/// Hard episodes built from one flushed set.
#[derive(Clone, Debug, PartialEq)]
pub struct HardTasks {
    pub episodes: Vec<Episode>,
    /// Per episode, the classes added by padding.
    pub padded: Vec<Vec<u32>>,
    /// The flushed multiset.
    pub flushed: Vec<HardEntry>,
}

impl HardTasks {
    /// One `HARD_PHASE` run-log line.
    pub fn log_line(&self, iteration: u64, method: ResampleMethod) -> String {
        let classes: Vec<String> = self.flushed.iter().map(|e| e.class.to_string()).collect();
        let mut padded: Vec<u32> = self.padded.iter().flatten().copied().collect();
        padded.sort_unstable();
        padded.dedup();
        let padded: Vec<String> = padded.iter().map(u32::to_string).collect();
        format!(
            "HARD_PHASE iter={iteration} classes=[{}] padded=[{}] method={method}",
            classes.join(","),
            padded.join(",")
        )
    }
}

/// Build `count` episodes from the failure multiset and flush it.
pub fn make_hard_tasks(
    set: &mut HardClassSet,
    ds: &Dataset,
    split: MetaSplit,
    shape: EpisodeShape,
    count: usize,
    method: ResampleMethod,
    rng: &mut Rng,
) -> Result<HardTasks> {
    if set.is_empty() {
        return Err(Error::Schedule("hard phase requested with an empty hard-class set".into()));
    }
    let pool = set.classes();
    let reuse = (method == ResampleMethod::ReuseSamples).then(|| {
        let mut m: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for e in set.entries() {
            m.entry(e.class).or_default().extend(&e.samples);
        }
        for v in m.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        m
    });
    let mut episodes = Vec::with_capacity(count);
    let mut padded = Vec::with_capacity(count);
    for _ in 0..count {
        let pe = sample_episode_from_classes(ds, split, &pool, shape, reuse.as_ref(), rng)?;
        episodes.push(pe.episode);
        padded.push(pe.padded);
    }
    Ok(HardTasks {
        episodes,
        padded,
        flushed: set.flush(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(class: u32) -> HardEntry {
        HardEntry {
            class,
            task_idx: 0,
            acc: 0.0,
            samples: vec![],
        }
    }

    #[test]
    fn schedule_cadence() {
        let cfg = CurriculumConfig {
            enabled: true,
            ..Default::default()
        };
        let hard: Vec<u64> = (1..=30).filter(|&b| schedule(b, &cfg) == Phase::Hard).collect();
        assert_eq!(hard, vec![10, 20, 30]);
        assert_eq!(schedule(0, &cfg), Phase::Normal);
        let off = CurriculumConfig::default();
        assert!((0..100).all(|b| schedule(b, &off) == Phase::Normal));
        let every = CurriculumConfig {
            enabled: true,
            cadence: 1,
            ..Default::default()
        };
        assert!((1..10).all(|b| schedule(b, &every) == Phase::Hard));
    }

    #[test]
    fn multiset_and_flush() {
        let mut s = HardClassSet::new();
        s.record(entry(3));
        s.record(entry(3));
        s.record(entry(1));
        assert_eq!(s.multiplicity(3), 2);
        assert_eq!(s.flush().len(), 3);
        assert!(s.is_empty());
        s.record(entry(7));
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn log_line_format() {
        let ht = HardTasks {
            episodes: vec![],
            padded: vec![vec![9, 4], vec![4]],
            flushed: vec![entry(2), entry(2), entry(5)],
        };
        assert_eq!(
            ht.log_line(10, ResampleMethod::FreshSamples),
            "HARD_PHASE iter=10 classes=[2,2,5] padded=[4,9] method=fresh_samples"
        );
    }
}
