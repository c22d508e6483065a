//! Synthetic sequence-classification tasks.
//!
//! Every sequence is `[CLS, task marker, content...]`. Ids 0 (padding) and
//! 1 (CLS) are reserved, ids 2..=4 mark the task kind, and ids 5..=11 are
//! the designated tokens the tasks are defined over. Content is otherwise
//! drawn from the filler range `12..vocab_size`.
//!
//! * KEYWORD: label 1 iff the trigger token appears.
//! * MAJORITY: label of whichever of two token classes occurs more often.
//! * ORDER: tokens `a` and `b` both occur once; label 1 iff `a` comes first.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const TRIGGER: u32 = 5;
pub const CLASS_A: [u32; 2] = [6, 7];
pub const CLASS_B: [u32; 2] = [8, 9];
pub const ORDER_A: u32 = 10;
pub const ORDER_B: u32 = 11;
pub const FIRST_FILLER: u32 = 12;
/// Smallest vocabulary leaving at least four filler tokens.
pub const MIN_VOCAB: usize = FIRST_FILLER as usize + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Keyword,
    Majority,
    Order,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Keyword, TaskKind::Majority, TaskKind::Order];

    pub fn marker(self) -> u32 {
        match self {
            TaskKind::Keyword => 2,
            TaskKind::Majority => 3,
            TaskKind::Order => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Keyword => "keyword",
            TaskKind::Majority => "majority",
            TaskKind::Order => "order",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    /// Content length bounds, excluding the CLS and marker positions.
    pub min_len: usize,
    pub max_len: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Fraction of instances labelled 1.
    #[serde(default = "default_balance")]
    pub balance: f64,
    pub seed: u64,
    pub train_size: usize,
    pub dev_size: usize,
}

fn default_vocab() -> usize {
    64
}

fn default_classes() -> usize {
    2
}

fn default_balance() -> f64 {
    0.5
}

impl TaskSpec {
    pub fn new(kind: TaskKind, seed: u64) -> Self {
        TaskSpec {
            kind,
            vocab_size: default_vocab(),
            min_len: 4,
            max_len: 20,
            num_classes: 2,
            balance: 0.5,
            seed,
            train_size: 2000,
            dev_size: 500,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size < MIN_VOCAB {
            return bad(format!(
                "{} task needs vocab_size >= {MIN_VOCAB}, got {}",
                self.kind, self.vocab_size
            ));
        }
        if self.num_classes != 2 {
            return bad(format!(
                "{} task is binary; num_classes = {}",
                self.kind, self.num_classes
            ));
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return bad(format!(
                "content lengths {}..={} (need 2 <= min <= max)",
                self.min_len, self.max_len
            ));
        }
        if !(0.0..=1.0).contains(&self.balance) {
            return bad(format!("balance {} outside [0, 1]", self.balance));
        }
        Ok(())
    }

    /// Longest full sequence: CLS + marker + content.
    pub fn max_seq_len(&self) -> usize {
        self.max_len + 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tag {
    pub kind: TaskKind,
    /// Non-padding length, CLS and marker included.
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub ids: Vec<u32>,
    pub label: usize,
    pub tag: Tag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub specs: Vec<TaskSpec>,
    pub seed: u64,
    pub split: String,
    pub count: usize,
    /// Instances per label.
    pub label_counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub instances: Vec<Instance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub dev: Dataset,
}

impl Dataset {
    fn new(specs: Vec<TaskSpec>, seed: u64, split: &str, instances: Vec<Instance>) -> Self {
        let classes = specs.first().map_or(2, |s| s.num_classes);
        let mut label_counts = vec![0; classes];
        for inst in &instances {
            label_counts[inst.label] += 1;
        }
        Dataset {
            header: DatasetHeader {
                specs,
                seed,
                split: split.to_string(),
                count: instances.len(),
                label_counts,
            },
            instances,
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn max_seq_len(&self) -> usize {
        self.instances.iter().map(|i| i.ids.len()).max().unwrap_or(0)
    }

    /// Instances of one task kind.
    pub fn of_kind(&self, kind: TaskKind) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(move |i| i.tag.kind == kind)
    }

    /// Header line then one record per line, all JSON.
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut line = |text: String| writeln!(w, "{text}").map_err(|e| Error::io(path, e));
        line(serde_json::to_string(&self.header)?)?;
        for inst in &self.instances {
            line(serde_json::to_string(inst)?)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::InvalidArgument(format!("{}: empty dataset file", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let header: DatasetHeader = serde_json::from_str(&header_line)?;
        let mut instances = Vec::with_capacity(header.count);
        for l in lines {
            let l = l.map_err(|e| Error::io(path, e))?;
            if !l.trim().is_empty() {
                instances.push(serde_json::from_str(&l)?);
            }
        }
        if instances.len() != header.count {
            return Err(Error::InvalidArgument(format!(
                "{}: header says {} records, found {}",
                path.display(),
                header.count,
                instances.len()
            )));
        }
        Ok(Dataset { header, instances })
    }
}

fn filler(rng: &mut ChaCha8Rng, vocab: usize) -> u32 {
    rng.gen_range(FIRST_FILLER..vocab as u32)
}

/// Content tokens (no CLS or marker) for one instance with a given label.
fn content(kind: TaskKind, label: usize, len: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut c: Vec<u32> = (0..len).map(|_| filler(rng, vocab)).collect();
    let mut positions: Vec<usize> = (0..len).collect();
    positions.shuffle(rng);
    match kind {
        TaskKind::Keyword => {
            if label == 1 {
                let count = rng.gen_range(1..=2.min(len));
                for &p in &positions[..count] {
                    c[p] = TRIGGER;
                }
            }
        }
        TaskKind::Majority => {
            let minor = rng.gen_range(0..=(len - 1) / 2);
            let major = rng.gen_range(minor + 1..=len - minor);
            let (maj_class, min_class) = if label == 0 {
                (CLASS_A, CLASS_B)
            } else {
                (CLASS_B, CLASS_A)
            };
            for (i, &p) in positions[..major + minor].iter().enumerate() {
                let class = if i < major { maj_class } else { min_class };
                c[p] = class[rng.gen_range(0..class.len())];
            }
        }
        TaskKind::Order => {
            let (first, second) = (positions[0].min(positions[1]), positions[0].max(positions[1]));
            let (x, y) = if label == 1 {
                (ORDER_A, ORDER_B)
            } else {
                (ORDER_B, ORDER_A)
            };
            c[first] = x;
            c[second] = y;
        }
    }
    c
}

/// The label `content` would have, recomputed from the tokens alone.
pub fn label_of(kind: TaskKind, content: &[u32]) -> Option<usize> {
    match kind {
        TaskKind::Keyword => Some(usize::from(content.contains(&TRIGGER))),
        TaskKind::Majority => {
            let a = content.iter().filter(|t| CLASS_A.contains(t)).count();
            let b = content.iter().filter(|t| CLASS_B.contains(t)).count();
            match a.cmp(&b) {
                std::cmp::Ordering::Greater => Some(0),
                std::cmp::Ordering::Less => Some(1),
                std::cmp::Ordering::Equal => None,
            }
        }
        TaskKind::Order => {
            let pa = content.iter().position(|&t| t == ORDER_A)?;
            let pb = content.iter().position(|&t| t == ORDER_B)?;
            Some(usize::from(pa < pb))
        }
    }
}

fn balanced_labels(n: usize, balance: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let ones = (balance * n as f64).round() as usize;
    let mut labels: Vec<usize> = (0..n).map(|i| usize::from(i < ones)).collect();
    labels.shuffle(rng);
    labels
}

/// Train and dev splits for one task. No sequence appears twice anywhere,
/// so the splits are disjoint.
pub fn generate(spec: &TaskSpec) -> Result<Splits> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut make = |n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Instance>> {
        let labels = balanced_labels(n, spec.balance, rng);
        let mut out = Vec::with_capacity(n);
        for label in labels {
            let mut attempts = 0;
            loop {
                attempts += 1;
                if attempts > 1000 {
                    return Err(Error::InvalidConfig(format!(
                        "{} task: cannot draw {n} distinct sequences of length {}..={}",
                        spec.kind, spec.min_len, spec.max_len
                    )));
                }
                let len = rng.gen_range(spec.min_len..=spec.max_len);
                let mut ids = vec![CLS, spec.kind.marker()];
                ids.extend(content(spec.kind, label, len, spec.vocab_size, rng));
                if seen.insert(ids.clone()) {
                    out.push(Instance {
                        tag: Tag {
                            kind: spec.kind,
                            length: ids.len(),
                        },
                        ids,
                        label,
                    });
                    break;
                }
            }
        }
        Ok(out)
    };
    let train = make(spec.train_size, &mut rng)?;
    let dev = make(spec.dev_size, &mut rng)?;
    Ok(Splits {
        train: Dataset::new(vec![spec.clone()], spec.seed, "train", train),
        dev: Dataset::new(vec![spec.clone()], spec.seed, "dev", dev),
    })
}

fn check_compatible(specs: &[TaskSpec]) -> Result<()> {
    let first = specs
        .first()
        .ok_or_else(|| Error::InvalidArgument("no task specs".into()))?;
    for s in specs {
        if s.vocab_size != first.vocab_size || s.num_classes != first.num_classes {
            return Err(Error::InvalidConfig(format!(
                "{} task (vocab {}, C {}) is incompatible with {} task (vocab {}, C {})",
                s.kind, s.vocab_size, s.num_classes, first.kind, first.vocab_size, first.num_classes
            )));
        }
    }
    Ok(())
}

/// Seeded interleave: each slot draws the next instance from a source
/// chosen with probability proportional to what it has left, so order
/// within a source is preserved.
fn interleave(sources: Vec<Vec<Instance>>, rng: &mut ChaCha8Rng) -> Vec<Instance> {
    let mut remaining: Vec<usize> = sources.iter().map(Vec::len).collect();
    let mut iters: Vec<_> = sources.into_iter().map(Vec::into_iter).collect();
    let mut out = Vec::with_capacity(remaining.iter().sum());
    loop {
        let total: usize = remaining.iter().sum();
        if total == 0 {
            return out;
        }
        let mut pick = rng.gen_range(0..total);
        let src = remaining
            .iter()
            .position(|&r| {
                if pick < r {
                    true
                } else {
                    pick -= r;
                    false
                }
            })
            .expect("pick < total");
        remaining[src] -= 1;
        out.push(iters[src].next().expect("counted"));
    }
}

/// Per-task splits merged into one train and one dev set, tags retained.
pub fn mixed_splits(specs: &[TaskSpec], seed: u64) -> Result<Splits> {
    check_compatible(specs)?;
    let mut trains = Vec::new();
    let mut devs = Vec::new();
    for s in specs {
        let sp = generate(s)?;
        trains.push(sp.train.instances);
        devs.push(sp.dev.instances);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = interleave(trains, &mut rng);
    let dev = interleave(devs, &mut rng);
    // Separately generated tasks use disjoint markers, so no sequence can
    // appear in two tasks' splits.
    Ok(Splits {
        train: Dataset::new(specs.to_vec(), seed, "train", train),
        dev: Dataset::new(specs.to_vec(), seed, "dev", dev),
    })
}

/// The dev splits of `specs`, interleaved.
pub fn mixed_eval_set(specs: &[TaskSpec], seed: u64) -> Result<Dataset> {
    Ok(mixed_splits(specs, seed)?.dev)
}
