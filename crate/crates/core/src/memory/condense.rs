use std::cmp::Ordering;

use super::{merge_items, ClassBucket, ConceptPair, EncodedEpisode, MemoryItem};
use crate::tensor::Scalar;

/// One merge, as flat positions (`first < second`) in the class's item list
/// at the time it happened. The resulting pair is appended to the end.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MergeStep {
    pub first: usize,
    pub second: usize,
}

enum Slot<T> {
    Episode(EncodedEpisode<T>),
    Pair(ConceptPair<T>),
    Gone,
}

impl<T: Scalar> Slot<T> {
    fn item(&self) -> Option<MemoryItem<'_, T>> {
        match self {
            Slot::Episode(e) => Some(MemoryItem::Episode(e)),
            Slot::Pair(p) => Some(MemoryItem::Pair(p)),
            Slot::Gone => None,
        }
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    dist: f64,
    a: usize,
    b: usize,
}

impl Candidate {
    fn new(dist: f64, x: usize, y: usize) -> Self {
        Self {
            dist,
            a: x.min(y),
            b: x.max(y),
        }
    }

    /// Smaller distance first, then lexicographically lowest positions.
    /// Slot indices order the same way as flat positions.
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.a.cmp(&other.a))
            .then(self.b.cmp(&other.b))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Working state: items live in append-only slots so that slot order always
/// matches flat order, and every live slot caches its nearest live neighbour.
struct Work<T> {
    slots: Vec<Slot<T>>,
    locs: Vec<Vec<f64>>,
    nearest: Vec<Option<Candidate>>,
    live_episodes: usize,
    live_pairs: usize,
}

impl<T: Scalar> Work<T> {
    fn live(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.slots.len()).filter(|&i| !matches!(self.slots[i], Slot::Gone))
    }

    fn is_pair(&self, i: usize) -> bool {
        matches!(self.slots[i], Slot::Pair(_))
    }

    fn units(&self) -> usize {
        self.live_episodes + ConceptPair::<T>::UNITS * self.live_pairs
    }

    fn scan(&self, i: usize) -> Option<Candidate> {
        let mut best: Option<Candidate> = None;
        for j in self.live() {
            if j == i {
                continue;
            }
            let c = Candidate::new(sq_dist(&self.locs[i], &self.locs[j]), i, j);
            if best.map_or(true, |b| c.cmp(&b) == Ordering::Less) {
                best = Some(c);
            }
        }
        best
    }

    fn best_any(&self) -> Option<Candidate> {
        self.live()
            .filter_map(|i| self.nearest[i])
            .min_by(Candidate::cmp)
    }

    /// Exhaustive search restricted to merges involving a raw episode.
    fn best_with_episode(&self) -> Option<Candidate> {
        let live: Vec<usize> = self.live().collect();
        let mut best: Option<Candidate> = None;
        for (n, &i) in live.iter().enumerate() {
            for &j in &live[n + 1..] {
                if self.is_pair(i) && self.is_pair(j) {
                    continue;
                }
                let c = Candidate::new(sq_dist(&self.locs[i], &self.locs[j]), i, j);
                if best.map_or(true, |b| c.cmp(&b) == Ordering::Less) {
                    best = Some(c);
                }
            }
        }
        best
    }

    fn take(&mut self, i: usize) -> Slot<T> {
        let slot = std::mem::replace(&mut self.slots[i], Slot::Gone);
        match slot {
            Slot::Episode(_) => self.live_episodes -= 1,
            Slot::Pair(_) => self.live_pairs -= 1,
            Slot::Gone => unreachable!("merging a removed slot"),
        }
        self.nearest[i] = None;
        slot
    }

    fn flat_position(&self, i: usize) -> usize {
        (0..i).filter(|&j| !matches!(self.slots[j], Slot::Gone)).count()
    }

    fn merge(&mut self, c: Candidate) -> MergeStep {
        let step = MergeStep {
            first: self.flat_position(c.a),
            second: self.flat_position(c.b),
        };
        let pair = {
            let a = self.slots[c.a].item().expect("live");
            let b = self.slots[c.b].item().expect("live");
            merge_items(a, b).expect("same class and dimension by construction")
        };
        self.take(c.a);
        self.take(c.b);
        let k = self.slots.len();
        self.locs.push(pair.centroid.iter().map(|v| v.as_f64()).collect());
        self.slots.push(Slot::Pair(pair));
        self.nearest.push(None);
        self.live_pairs += 1;

        let live: Vec<usize> = self.live().filter(|&i| i != k).collect();
        for i in live {
            let stale = self.nearest[i].map_or(true, |n| [n.a, n.b].iter().any(|&s| s == c.a || s == c.b));
            if stale {
                self.nearest[i] = self.scan(i);
            } else {
                // the new slot sorts last, so it only wins on strictly smaller distance
                let d = sq_dist(&self.locs[i], &self.locs[k]);
                if d < self.nearest[i].expect("not stale").dist {
                    self.nearest[i] = Some(Candidate::new(d, i, k));
                }
            }
        }
        self.nearest[k] = self.scan(k);
        step
    }
}

pub(super) fn condense<T: Scalar>(bucket: &mut ClassBucket<T>, target: usize) -> Vec<MergeStep> {
    let mut slots: Vec<Slot<T>> = Vec::with_capacity(2 * bucket.len());
    slots.extend(bucket.episodes.drain(..).map(Slot::Episode));
    slots.extend(bucket.pairs.drain(..).map(Slot::Pair));
    let locs = slots
        .iter()
        .map(|s| s.item().expect("live").location().iter().map(|v| v.as_f64()).collect())
        .collect();
    let live_episodes = slots.iter().filter(|s| matches!(s, Slot::Episode(_))).count();
    let mut work = Work {
        live_pairs: slots.len() - live_episodes,
        live_episodes,
        nearest: vec![None; slots.len()],
        locs,
        slots,
    };
    for i in 0..work.slots.len() {
        work.nearest[i] = work.scan(i);
    }

    let mut steps = Vec::new();
    while work.units() > target && work.live_episodes + work.live_pairs > 1 {
        let mut choice = work.best_any().expect("two live items have a nearest neighbour");
        let frees_two = work.is_pair(choice.a) && work.is_pair(choice.b);
        if frees_two && work.units() - target == 1 && work.live_episodes > 0 {
            choice = work.best_with_episode().expect("an episode and another item are live");
        }
        steps.push(work.merge(choice));
    }

    for slot in work.slots {
        match slot {
            Slot::Episode(e) => bucket.episodes.push(e),
            Slot::Pair(p) => bucket.pairs.push(p),
            Slot::Gone => {}
        }
    }
    steps
}
