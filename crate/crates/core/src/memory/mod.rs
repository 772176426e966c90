//! Budgeted per-class storage of encoded episodes and the concept pairs
//! (centroid + diagonal variance) they are condensed into.

mod condense;
mod format;

use std::collections::BTreeMap;

use serde::Serialize;

pub use condense::MergeStep;
pub use format::{load_store, save_store, STORE_MAGIC, STORE_VERSION};

use crate::data::{ClassId, TaskId};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Checkpoint key of the single autoencoder used by the shared variant.
pub const SHARED_AUTOENCODER: TaskId = TaskId::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedEpisode<T = f32> {
    pub embedding: Vec<T>,
    pub label: ClassId,
    pub task: TaskId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptPair<T = f32> {
    pub centroid: Vec<T>,
    pub variance: Vec<T>,
    /// Number of constituent episodes, at least 2.
    pub weight: u32,
    pub label: ClassId,
    pub task: TaskId,
}

impl<T> ConceptPair<T> {
    pub const UNITS: usize = 2;
}

/// Borrowed view of one stored item.
#[derive(Clone, Copy, Debug)]
pub enum MemoryItem<'a, T> {
    Episode(&'a EncodedEpisode<T>),
    Pair(&'a ConceptPair<T>),
}

impl<'a, T: Scalar> MemoryItem<'a, T> {
    pub fn label(&self) -> ClassId {
        match self {
            Self::Episode(e) => e.label,
            Self::Pair(p) => p.label,
        }
    }

    pub fn task(&self) -> TaskId {
        match self {
            Self::Episode(e) => e.task,
            Self::Pair(p) => p.task,
        }
    }

    pub fn weight(&self) -> u32 {
        match self {
            Self::Episode(_) => 1,
            Self::Pair(p) => p.weight,
        }
    }

    /// Episode embedding or pair centroid.
    pub fn location(&self) -> &'a [T] {
        match self {
            Self::Episode(e) => &e.embedding,
            Self::Pair(p) => &p.centroid,
        }
    }

    pub fn units(&self) -> usize {
        match self {
            Self::Episode(_) => 1,
            Self::Pair(_) => ConceptPair::<T>::UNITS,
        }
    }
}

/// Combines two same-class items into one pair whose centroid is the
/// weighted mean and whose variance is the population variance of all
/// constituents (pooled first and second moments). Arithmetic runs in f64.
pub fn merge_items<T: Scalar>(a: MemoryItem<'_, T>, b: MemoryItem<'_, T>) -> Result<ConceptPair<T>> {
    if a.label() != b.label() {
        return Err(Error::Invariant(format!(
            "cannot merge class {} with class {}",
            a.label(),
            b.label()
        )));
    }
    let (la, lb) = (a.location(), b.location());
    if la.len() != lb.len() {
        return Err(Error::Dimension {
            expected: la.len(),
            found: lb.len(),
        });
    }
    let variance_of = |item: &MemoryItem<'_, T>, d: usize| match item {
        MemoryItem::Episode(_) => 0.0,
        MemoryItem::Pair(p) => p.variance[d].as_f64(),
    };
    let weight = a
        .weight()
        .checked_add(b.weight())
        .ok_or_else(|| Error::Invariant("concept weight overflow".into()))?;
    let (na, nb, n) = (a.weight() as f64, b.weight() as f64, weight as f64);
    let mut centroid = Vec::with_capacity(la.len());
    let mut variance = Vec::with_capacity(la.len());
    for d in 0..la.len() {
        let (ma, mb) = (la[d].as_f64(), lb[d].as_f64());
        let mean = (na * ma + nb * mb) / n;
        let var = (na * (variance_of(&a, d) + (ma - mean).powi(2))
            + nb * (variance_of(&b, d) + (mb - mean).powi(2)))
            / n;
        centroid.push(T::of(mean));
        variance.push(T::of(var));
    }
    Ok(ConceptPair {
        centroid,
        variance,
        weight,
        label: a.label(),
        task: a.task().min(b.task()),
    })
}

/// Items of one class. Flat item order is episodes first, then pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassBucket<T = f32> {
    task: TaskId,
    episodes: Vec<EncodedEpisode<T>>,
    pairs: Vec<ConceptPair<T>>,
}

impl<T: Scalar> ClassBucket<T> {
    /// Task in which the class's episodes were recorded.
    pub fn task(&self) -> TaskId {
        self.task
    }

    pub fn episodes(&self) -> &[EncodedEpisode<T>] {
        &self.episodes
    }

    pub fn pairs(&self) -> &[ConceptPair<T>] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.episodes.len() + self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn item(&self, i: usize) -> MemoryItem<'_, T> {
        match self.episodes.get(i) {
            Some(e) => MemoryItem::Episode(e),
            None => MemoryItem::Pair(&self.pairs[i - self.episodes.len()]),
        }
    }

    pub fn items(&self) -> impl Iterator<Item = MemoryItem<'_, T>> {
        self.episodes
            .iter()
            .map(MemoryItem::Episode)
            .chain(self.pairs.iter().map(MemoryItem::Pair))
    }

    pub fn units(&self) -> usize {
        self.episodes.len() + ConceptPair::<T>::UNITS * self.pairs.len()
    }

    /// Raw episodes plus the weights of all pairs.
    pub fn mass(&self) -> u64 {
        self.episodes.len() as u64 + self.pairs.iter().map(|p| p.weight as u64).sum::<u64>()
    }
}

/// Outcome of [`MemoryStore::enforce_budget`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BudgetReport {
    /// Per-class unit targets for the classes stored before the insert.
    pub targets: BTreeMap<ClassId, usize>,
    pub merges: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryStore<T = f32> {
    latent_dim: usize,
    classes: BTreeMap<ClassId, ClassBucket<T>>,
    checkpoints: BTreeMap<TaskId, Vec<u8>>,
}

impl<T: Scalar> MemoryStore<T> {
    pub fn new(latent_dim: usize) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::InvalidInput("latent dimension must be positive".into()));
        }
        Ok(Self {
            latent_dim,
            classes: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Episodes count one unit each; a pair counts two.
    pub fn memory_units(&self) -> usize {
        self.classes.values().map(ClassBucket::units).sum()
    }

    pub fn class_units(&self, label: ClassId) -> usize {
        self.classes.get(&label).map_or(0, ClassBucket::units)
    }

    pub fn bucket(&self, label: ClassId) -> Option<&ClassBucket<T>> {
        self.classes.get(&label)
    }

    /// Buckets in ascending label order.
    pub fn buckets(&self) -> impl Iterator<Item = (ClassId, &ClassBucket<T>)> {
        self.classes.iter().map(|(l, b)| (*l, b))
    }

    pub fn labels(&self) -> Vec<ClassId> {
        self.classes.keys().copied().collect()
    }

    pub fn episode_count(&self) -> usize {
        self.classes.values().map(|b| b.episodes.len()).sum()
    }

    pub fn pair_count(&self) -> usize {
        self.classes.values().map(|b| b.pairs.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Every stored vector that lives in latent space (episode embeddings and
    /// pair centroids), in bucket order. Lengths cannot be changed.
    pub fn locations_mut(&mut self) -> impl Iterator<Item = &mut [T]> {
        self.classes.values_mut().flat_map(|b| {
            b.episodes
                .iter_mut()
                .map(|e| e.embedding.as_mut_slice())
                .chain(b.pairs.iter_mut().map(|p| p.centroid.as_mut_slice()))
        })
    }

    /// Renames every class through `map`, which must be injective on the
    /// stored labels.
    pub fn relabel(&mut self, map: impl Fn(ClassId) -> ClassId) -> Result<()> {
        let mut out = BTreeMap::new();
        for (label, mut bucket) in std::mem::take(&mut self.classes) {
            let new = map(label);
            bucket.episodes.iter_mut().for_each(|e| e.label = new);
            bucket.pairs.iter_mut().for_each(|p| p.label = new);
            if out.insert(new, bucket).is_some() {
                return Err(Error::Consistency(format!("two classes relabelled to {new}")));
            }
        }
        self.classes = out;
        Ok(())
    }

    pub fn checkpoints(&self) -> &BTreeMap<TaskId, Vec<u8>> {
        &self.checkpoints
    }

    pub fn set_checkpoint(&mut self, task: TaskId, bytes: Vec<u8>) {
        self.checkpoints.insert(task, bytes);
    }

    fn validate_episode(&self, e: &EncodedEpisode<T>) -> Result<()> {
        if e.embedding.len() != self.latent_dim {
            return Err(Error::Dimension {
                expected: self.latent_dim,
                found: e.embedding.len(),
            });
        }
        if e.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite embedding for class {}", e.label)));
        }
        Ok(())
    }

    /// Appends episodes to their class buckets without condensing. Either
    /// all episodes are stored or, on error, none.
    pub fn insert_episodes(&mut self, episodes: Vec<EncodedEpisode<T>>) -> Result<()> {
        let mut tasks: BTreeMap<ClassId, TaskId> = BTreeMap::new();
        for e in &episodes {
            self.validate_episode(e)?;
            let expected = self
                .classes
                .get(&e.label)
                .map(|b| b.task)
                .or_else(|| tasks.get(&e.label).copied())
                .unwrap_or(e.task);
            if expected != e.task {
                return Err(Error::Consistency(format!(
                    "class {} holds task {expected} episodes, got task {}",
                    e.label, e.task
                )));
            }
            tasks.insert(e.label, e.task);
        }
        for e in episodes {
            self.classes
                .entry(e.label)
                .or_insert_with(|| ClassBucket {
                    task: e.task,
                    episodes: Vec::new(),
                    pairs: Vec::new(),
                })
                .episodes
                .push(e);
        }
        Ok(())
    }

    /// Per-class unit targets for the classes already stored so that
    /// `incoming` new episodes fit a budget of `capacity` units.
    ///
    /// With `K_prev` current units and `K_r = K_prev + incoming - capacity`
    /// units to free, a class holding `N` units is cut to
    /// `floor(N * (1 - K_r / K_prev))`, never below `min(N, 2)`. Units still
    /// missing after flooring are taken one at a time from the class with the
    /// largest target (lowest label on ties). A capacity of 0 means
    /// unlimited.
    pub fn reduction_targets(&self, incoming: usize, capacity: usize) -> Result<BTreeMap<ClassId, usize>> {
        let current: BTreeMap<ClassId, usize> = self.classes.iter().map(|(l, b)| (*l, b.units())).collect();
        if capacity == 0 {
            return Ok(current);
        }
        if incoming > capacity {
            return Err(Error::BudgetInfeasible(format!(
                "{incoming} incoming episodes exceed capacity {capacity}"
            )));
        }
        let stored: usize = current.values().sum();
        if stored + incoming <= capacity {
            return Ok(current);
        }
        let free = stored + incoming - capacity;
        let keep = (stored - free.min(stored)) as u128;
        let floors: BTreeMap<ClassId, usize> = current.iter().map(|(l, n)| (*l, (*n).min(2))).collect();
        let mut targets: BTreeMap<ClassId, usize> = current
            .iter()
            .map(|(l, &n)| {
                let t = (n as u128 * keep / stored as u128) as usize;
                (*l, t.max(floors[l]))
            })
            .collect();
        let mut total: usize = targets.values().sum();
        while total + incoming > capacity {
            let victim = targets
                .iter()
                .filter(|(l, t)| **t > floors[*l])
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(l, _)| *l);
            match victim {
                Some(l) => {
                    *targets.get_mut(&l).expect("present") -= 1;
                    total -= 1;
                }
                None => {
                    return Err(Error::BudgetInfeasible(format!(
                        "{} classes need at least {total} units; {incoming} incoming exceed capacity {capacity}",
                        targets.len()
                    )))
                }
            }
        }
        Ok(targets)
    }

    /// Greedily merges the closest same-class items until the class holds at
    /// most `target` units. Returns the merges performed, as flat positions
    /// at the time of each merge.
    ///
    /// Once exactly one unit remains to be freed and the class still holds
    /// raw episodes, pair-with-pair merges (which free two) are skipped, so
    /// the class lands on `target` exactly. A class reduced to pairs only can
    /// end one unit below `target`. A single pair is never split.
    pub fn condense_class(&mut self, label: ClassId, target: usize) -> Vec<MergeStep> {
        match self.classes.get_mut(&label) {
            Some(bucket) if bucket.units() > target => condense::condense(bucket, target),
            _ => Vec::new(),
        }
    }

    /// Condenses stored classes to their reduction targets, then inserts
    /// `incoming`. On error the store is left unchanged.
    pub fn enforce_budget(&mut self, incoming: Vec<EncodedEpisode<T>>, capacity: usize) -> Result<BudgetReport> {
        for e in &incoming {
            self.validate_episode(e)?;
        }
        let targets = self.reduction_targets(incoming.len(), capacity)?;
        // dry-run the task consistency check before any merge happens
        let mut probe = Self::new(self.latent_dim)?;
        probe.classes = self
            .classes
            .iter()
            .map(|(l, b)| {
                (
                    *l,
                    ClassBucket {
                        task: b.task,
                        episodes: Vec::new(),
                        pairs: Vec::new(),
                    },
                )
            })
            .collect();
        probe.insert_episodes(incoming.clone())?;
        let mut merges = 0;
        for (&label, &target) in &targets {
            merges += self.condense_class(label, target).len();
        }
        self.insert_episodes(incoming)?;
        Ok(BudgetReport { targets, merges })
    }
}
