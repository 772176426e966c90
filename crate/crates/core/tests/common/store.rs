use std::io;

use eec_core::memory::{merge_items, ConceptPair, EncodedEpisode, MemoryItem, MemoryStore, MergeStep};
use eec_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
enum Item {
    Episode(EncodedEpisode<f64>),
    Pair(ConceptPair<f64>),
}

impl Item {
    fn as_memory(&self) -> MemoryItem<'_, f64> {
        match self {
            Item::Episode(e) => MemoryItem::Episode(e),
            Item::Pair(p) => MemoryItem::Pair(p),
        }
    }

    fn loc(&self) -> &[f64] {
        match self {
            Item::Episode(e) => &e.embedding,
            Item::Pair(p) => &p.centroid,
        }
    }

    fn is_pair(&self) -> bool {
        matches!(self, Item::Pair(_))
    }

    fn units(&self) -> usize {
        if self.is_pair() {
            2
        } else {
            1
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut d = 0.0;
    for k in 0..a.len() {
        d += (a[k] - b[k]) * (a[k] - b[k]);
    }
    d
}

/// Brute-force greedy merging over a flat list: every round scans all
/// pairs. Members track which original episodes each item summarises.
fn oracle(items: &mut Vec<(Item, Vec<usize>)>, target: usize) -> Vec<MergeStep> {
    let mut steps = Vec::new();
    loop {
        let units: usize = items.iter().map(|(i, _)| i.units()).sum();
        if units <= target || items.len() < 2 {
            return steps;
        }
        let has_episode = items.iter().any(|(i, _)| !i.is_pair());
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..items.len() {
            for j in i + 1..items.len() {
                if units - target == 1 && has_episode && items[i].0.is_pair() && items[j].0.is_pair() {
                    continue;
                }
                let d = dist(items[i].0.loc(), items[j].0.loc());
                if best.map_or(true, |(bd, _, _)| d < bd) {
                    best = Some((d, i, j));
                }
            }
        }
        let (_, i, j) = best.unwrap();
        let merged = merge_items(items[i].0.as_memory(), items[j].0.as_memory()).unwrap();
        let (_, mj) = items.remove(j);
        let (_, mut mi) = items.remove(i);
        mi.extend(mj);
        items.push((Item::Pair(merged), mi));
        steps.push(MergeStep { first: i, second: j });
    }
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize, grid: bool) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    if grid {
                        rng.gen_range(0..4) as f64
                    } else {
                        rng.gen_range(-3.0..3.0)
                    }
                })
                .collect()
        })
        .collect()
}

fn bucket_items(store: &MemoryStore<f64>, label: u32) -> Vec<Item> {
    let b = store.bucket(label).unwrap();
    b.episodes()
        .iter()
        .cloned()
        .map(Item::Episode)
        .chain(b.pairs().iter().cloned().map(Item::Pair))
        .collect()
}

/// Runs `instances` random condense problems (two rounds each) against the
/// brute-force oracle and whole-set statistics. Panics on any mismatch.
pub fn condense_matches_oracle(instances: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for instance in 0..instances {
        let n = rng.gen_range(1..=32);
        let dim = rng.gen_range(1..=8);
        let grid = instance % 2 == 0;
        let points = random_points(&mut rng, n, dim, grid);
        let mut store = MemoryStore::<f64>::new(dim).unwrap();
        store
            .insert_episodes(
                points
                    .iter()
                    .map(|p| EncodedEpisode {
                        embedding: p.clone(),
                        label: 3,
                        task: 1,
                    })
                    .collect(),
            )
            .unwrap();
        let mut mirror: Vec<(Item, Vec<usize>)> = bucket_items(&store, 3)
            .into_iter()
            .enumerate()
            .map(|(k, i)| (i, vec![k]))
            .collect();

        // two rounds so the second starts with pairs present
        let first = rng.gen_range(1..=n);
        let second = rng.gen_range(1..=first);
        for target in [first, second] {
            let got = store.condense_class(3, target);
            let want = oracle(&mut mirror, target);
            assert_eq!(got, want, "instance {instance} target {target}");
            let units = store.class_units(3);
            let bucket = store.bucket(3).unwrap();
            let exact = units == target;
            let one_under = units + 1 == target && bucket.episodes().is_empty();
            let lone_pair = bucket.len() == 1 && units > target;
            let untouched = got.is_empty() && units <= target;
            assert!(
                exact || one_under || lone_pair || untouched,
                "instance {instance}: {units} units for target {target}"
            );
        }

        let stored = bucket_items(&store, 3);
        assert_eq!(stored.len(), mirror.len());
        for (s, (m, members)) in stored.iter().zip(&mirror) {
            assert_eq!(s.loc(), m.loc());
            let Item::Pair(p) = s else { continue };
            assert_eq!(p.weight as usize, members.len());
            assert_eq!(p.centroid.len(), dim);
            for (d, (c, v)) in p.centroid.iter().zip(&p.variance).enumerate() {
                let mean = members.iter().map(|&k| points[k][d]).sum::<f64>() / members.len() as f64;
                let var = members.iter().map(|&k| (points[k][d] - mean).powi(2)).sum::<f64>() / members.len() as f64;
                assert!((c - mean).abs() < 1e-9, "instance {instance}");
                assert!((v - var).abs() < 1e-9, "instance {instance}");
            }
        }
    }
}

fn random_episodes(rng: &mut ChaCha8Rng, labels: &[u32], task: u32, dim: usize) -> Vec<EncodedEpisode<f64>> {
    labels
        .iter()
        .flat_map(|&label| {
            let n = rng.gen_range(1..12);
            random_points(rng, n, dim, false)
                .into_iter()
                .map(move |embedding| EncodedEpisode { embedding, label, task })
        })
        .collect()
}

/// Random insert/enforce cycles on one store. Returns (accepted, refused).
pub fn budget_cycles(cycles: u32, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 3;
    let mut store = MemoryStore::<f64>::new(dim).unwrap();
    let mut next_label = 0u32;
    let (mut accepted, mut refused) = (0, 0);
    for cycle in 0..cycles {
        if store.labels().len() >= 12 {
            store = MemoryStore::new(dim).unwrap();
        }
        let k = rng.gen_range(1..=3);
        let labels: Vec<u32> = (next_label..next_label + k).collect();
        let incoming = random_episodes(&mut rng, &labels, cycle, dim);
        // mostly just above the smallest feasible size, sometimes unlimited
        // or arbitrary (often infeasible)
        let tight = incoming.len() + 2 * store.labels().len();
        let capacity = match rng.gen_range(0..20) {
            0..=1 => 0,
            2..=4 => rng.gen_range(0..120),
            _ => tight + rng.gen_range(0..60),
        };
        let mass_before: u64 = store.buckets().map(|(_, b)| b.mass()).sum();
        let before = store.clone();

        match store.reduction_targets(incoming.len(), capacity) {
            Ok(targets) => {
                let n_in = incoming.len() as u64;
                let report = store.enforce_budget(incoming, capacity).unwrap();
                assert_eq!(report.targets, targets);
                accepted += 1;
                next_label += k;
                if capacity > 0 {
                    assert!(store.memory_units() <= capacity, "cycle {cycle}");
                }
                for (label, &target) in &targets {
                    let b = store.bucket(*label).unwrap();
                    let units = b.units();
                    assert!(
                        units == target || units + 1 == target && b.episodes().is_empty(),
                        "cycle {cycle} class {label}: {units} units, target {target}"
                    );
                }
                let mass_after: u64 = store.buckets().map(|(_, b)| b.mass()).sum();
                assert_eq!(mass_after, mass_before + n_in);
            }
            Err(e) => {
                assert!(matches!(e, Error::BudgetInfeasible(_)), "{e}");
                assert!(store.enforce_budget(incoming, capacity).is_err());
                assert_eq!(store, before);
                refused += 1;
            }
        }
    }
    (accepted, refused)
}

pub fn random_store(rng: &mut ChaCha8Rng) -> MemoryStore<f32> {
    let dim = rng.gen_range(1..=6);
    let mut store = MemoryStore::<f32>::new(dim).unwrap();
    for label in 0..rng.gen_range(0..5u32) {
        let n = rng.gen_range(1..10);
        store
            .insert_episodes(
                (0..n)
                    .map(|_| EncodedEpisode {
                        embedding: (0..dim).map(|_| rng.gen_range(-5.0f32..5.0)).collect(),
                        label,
                        task: label / 2,
                    })
                    .collect(),
            )
            .unwrap();
        let target = rng.gen_range(1..=n);
        store.condense_class(label, target);
    }
    for task in 0..rng.gen_range(0..3u32) {
        let len = rng.gen_range(0..40);
        store.set_checkpoint(task, (0..len).map(|_| rng.gen()).collect());
    }
    store
}

pub fn io_kind(e: &Error) -> Option<io::ErrorKind> {
    match e {
        Error::Io(e) => Some(e.kind()),
        _ => None,
    }
}

/// Save/load round trips plus one truncation and one bit flip per store.
pub fn store_round_trips(stores: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = tempfile::tempdir().unwrap();
    for i in 0..stores {
        let store = random_store(&mut rng);
        let path = dir.path().join(format!("s{i}.eecm"));
        eec_core::memory::save_store(&store, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let back = eec_core::memory::load_store(&path).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let cut = rng.gen_range(0..bytes.len());
        let err = MemoryStore::from_bytes(&bytes[..cut]).unwrap_err();
        assert_eq!(io_kind(&err), Some(io::ErrorKind::UnexpectedEof), "store {i} cut {cut}: {err}");

        let mut flipped = bytes.clone();
        let at = rng.gen_range(0..bytes.len());
        flipped[at] ^= 1 << rng.gen_range(0..8);
        let err = MemoryStore::from_bytes(&flipped).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "store {i} flip at {at}: {err}");
    }
}
