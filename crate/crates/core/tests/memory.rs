mod common;

use common::store::{budget_cycles, condense_matches_oracle, random_store, store_round_trips};
use eec_core::memory::{merge_items, EncodedEpisode, MemoryItem, MemoryStore};
use eec_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn condense_matches_brute_force_oracle() {
    condense_matches_oracle(150, 2024);
}

#[test]
fn budget_cycles_respect_capacity_and_targets() {
    let (accepted, refused) = budget_cycles(100, 7);
    assert!(accepted > 20 && refused > 0, "accepted {accepted}, refused {refused}");
}

#[test]
fn worked_budget_example() {
    // 900 stored units over three classes, 300 incoming, capacity 1000:
    // a class of 300 keeps floor(300 * 700 / 900) = 233
    let mut store = MemoryStore::<f64>::new(1).unwrap();
    let episodes = (0..3u32)
        .flat_map(|label| {
            (0..300).map(move |i| EncodedEpisode {
                embedding: vec![i as f64],
                label,
                task: label,
            })
        })
        .collect();
    store.insert_episodes(episodes).unwrap();
    let targets = store.reduction_targets(300, 1000).unwrap();
    assert_eq!(targets.values().copied().collect::<Vec<_>>(), vec![233, 233, 233]);
}

#[test]
fn round_trip_and_corruption_over_random_stores() {
    store_round_trips(50, 99);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let _ = MemoryStore::from_bytes(&bytes);
        let mut framed = b"EECM\x01\0\0\0".to_vec();
        framed.extend_from_slice(&((bytes.len() + 16) as u64).to_le_bytes());
        framed.extend_from_slice(&bytes);
        let _ = MemoryStore::from_bytes(&framed);
    }

    /// Body damage behind a freshly computed checksum reaches the structural
    /// checks; anything still accepted must re-encode to the same bytes.
    #[test]
    fn resealed_mutations_are_rejected_or_canonical(
        seed in any::<u64>(),
        edits in proptest::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..4),
    ) {
        let store = random_store(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut bytes = store.to_bytes().unwrap();
        let n = bytes.len();
        for (at, v) in edits {
            bytes[16 + at.index(n - 20)] = v;
        }
        let mut h = crc32fast::Hasher::new();
        h.update(&bytes[..8]);
        h.update(&bytes[16..n - 4]);
        bytes[n - 4..].copy_from_slice(&h.finalize().to_le_bytes());
        match MemoryStore::from_bytes(&bytes) {
            Ok(s) => prop_assert_eq!(s.to_bytes().unwrap(), bytes),
            Err(e) => prop_assert!(matches!(e, Error::Format(_)), "{}", e),
        }
    }

    #[test]
    fn merge_is_symmetric_and_conserves_weight(
        a in proptest::collection::vec(-10.0f64..10.0, 4),
        b in proptest::collection::vec(-10.0f64..10.0, 4),
    ) {
        let ea = EncodedEpisode { embedding: a, label: 0, task: 0 };
        let eb = EncodedEpisode { embedding: b, label: 0, task: 0 };
        let p = merge_items(MemoryItem::Episode(&ea), MemoryItem::Episode(&eb)).unwrap();
        let q = merge_items(MemoryItem::Episode(&eb), MemoryItem::Episode(&ea)).unwrap();
        prop_assert_eq!(p.weight, 2);
        for d in 0..4 {
            prop_assert!((p.centroid[d] - q.centroid[d]).abs() < 1e-12);
            prop_assert!(p.variance[d] >= 0.0);
        }
    }
}

#[test]
fn empty_store_has_no_units() {
    let store = MemoryStore::<f32>::new(4).unwrap();
    assert_eq!(store.memory_units(), 0);
    assert!(store.reduction_targets(0, 10).unwrap().is_empty());
}
