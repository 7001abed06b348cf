use std::collections::{HashSet, VecDeque};
use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use volseg_core::backend::{Embedding, ReferenceBackend};
use volseg_core::cache::{precompute_plan, wl_hash, EmbeddingCache, EmbeddingKey};
use volseg_core::session::embedding_for;
use volseg_core::volume::{Axis, SliceRef, Volume, VolumeId, WindowLevel};

fn blob(n: usize, fill: u8) -> Embedding {
    model_blob("reference", n, fill)
}

fn model_blob(model: &str, n: usize, fill: u8) -> Embedding {
    Embedding { model_id: model.into(), rows: 1, cols: n, blob: Arc::from(vec![fill; n]) }
}

fn key(i: usize, wl: WindowLevel) -> EmbeddingKey {
    EmbeddingKey::new(VolumeId(1), "reference", SliceRef::new(Axis::Axial, i), wl)
}

#[test]
fn window_level_change_is_a_keyed_miss() {
    let v = Volume::from_fn([8, 8, 4], [1.0; 3], |x, y, z| (x * y + z) as f32).unwrap();
    let cache = EmbeddingCache::new(1 << 24);
    let backend = ReferenceBackend::new();
    let a = WindowLevel::new(40.0, 20.0).unwrap();
    let b = WindowLevel::new(10.0, 5.0).unwrap();
    let s = SliceRef::new(Axis::Axial, 2);
    let ea = embedding_for(&cache, &v, &backend, a, s).unwrap();
    assert!(cache.get(&EmbeddingKey::new(v.id(), "reference", s, b)).is_none());
    let eb = embedding_for(&cache, &v, &backend, b, s).unwrap();
    assert_ne!(ea.blob, eb.blob);
    assert_eq!(cache.stats().entries, 2);
    // each setting is served its own blob
    assert_eq!(embedding_for(&cache, &v, &backend, a, s).unwrap().blob, ea.blob);
    assert_eq!(embedding_for(&cache, &v, &backend, b, s).unwrap().blob, eb.blob);
    // settings equal to 1e-6 share a key
    let a2 = WindowLevel::new(40.0 + 1e-9, 20.0).unwrap();
    assert_eq!(wl_hash(a), wl_hash(a2));
    assert_ne!(wl_hash(a), wl_hash(WindowLevel::new(40.0 + 1e-5, 20.0).unwrap()));
}

#[test]
fn overcommit_respects_the_cap_and_evicts_lru() {
    let cap = 64 * 1024;
    let cache = EmbeddingCache::new(cap);
    let wl = WindowLevel::new(1.0, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // model of the cache: keys in recency order, oldest first
    let mut model: VecDeque<(usize, u64)> = VecDeque::new();
    let mut written = 0u64;
    while written < 2 * cap {
        let i = rng.random_range(0..200);
        if rng.random_bool(0.3) {
            let hit = cache.get(&key(i, wl)).is_some();
            let pos = model.iter().position(|&(k, _)| k == i);
            assert_eq!(hit, pos.is_some());
            if let Some(p) = pos {
                let e = model.remove(p).unwrap();
                model.push_back(e);
            }
            continue;
        }
        let n = rng.random_range(256..4096);
        cache.put(key(i, wl), blob(n, i as u8));
        written += n as u64;
        if let Some(p) = model.iter().position(|&(k, _)| k == i) {
            model.remove(p);
        }
        model.push_back((i, n as u64));
        while model.iter().map(|&(_, b)| b).sum::<u64>() > cap {
            model.pop_front();
        }
        let stats = cache.stats();
        assert!(stats.total_bytes <= cap);
        assert_eq!(stats.total_bytes, model.iter().map(|&(_, b)| b).sum::<u64>());
        let order: Vec<usize> = cache.lru_order().iter().map(|k| k.slice_index).collect();
        assert_eq!(order, model.iter().map(|&(k, _)| k).collect::<Vec<_>>());
    }
}

#[test]
fn oversized_entry_is_not_stored() {
    let cache = EmbeddingCache::new(100);
    let wl = WindowLevel::new(1.0, 0.5).unwrap();
    cache.put(key(0, wl), blob(50, 1));
    cache.put(key(1, wl), blob(101, 2));
    assert!(cache.get(&key(1, wl)).is_none());
    assert!(cache.get(&key(0, wl)).is_some());
}

#[test]
fn invalidation_by_volume_and_model() {
    let cache = EmbeddingCache::new(1 << 20);
    let wl = WindowLevel::new(1.0, 0.5).unwrap();
    for i in 0..10 {
        let model = if i < 4 { "reference" } else { "medsam_vit_b" };
        cache.put(EmbeddingKey::new(VolumeId(1), model, SliceRef::new(Axis::Axial, i), wl), model_blob(model, 8, 0));
    }
    for i in 0..5 {
        cache.put(EmbeddingKey::new(VolumeId(2), "reference", SliceRef::new(Axis::Coronal, i), wl), blob(8, 0));
    }
    assert_eq!(cache.invalidate(VolumeId(1), Some("reference")), 4);
    assert_eq!(cache.invalidate(VolumeId(1), None), 6);
    assert_eq!(cache.invalidate(VolumeId(99), None), 0);
    assert_eq!(cache.stats().entries, 5);
}

#[test]
fn status_of_half_the_axial_slices() {
    let cache = EmbeddingCache::new(1 << 20);
    let wl = WindowLevel::new(1.0, 0.5).unwrap();
    for i in 0..65 {
        cache.put(key(i, wl), blob(4, 0));
    }
    let s = cache.status(VolumeId(1), "reference", wl_hash(wl), [256, 256, 130]);
    assert_eq!(s, [0.0, 0.0, 0.5]);
    let other = cache.status(VolumeId(1), "reference", wl_hash(WindowLevel::new(2.0, 0.5).unwrap()), [256, 256, 130]);
    assert_eq!(other, [0.0; 3]);
}

fn oracle_plan(dims: [usize; 3], current: SliceRef) -> Vec<SliceRef> {
    let a = current.axis.index();
    let mut first: Vec<usize> = (0..dims[a]).collect();
    first.sort_by_key(|&i| (i.abs_diff(current.index), i));
    let mut plan: Vec<SliceRef> = first.into_iter().map(|i| SliceRef::new(current.axis, i)).collect();
    for axis in Axis::ALL.into_iter().filter(|&x| x != current.axis) {
        plan.extend((0..dims[axis.index()]).map(|i| SliceRef::new(axis, i)));
    }
    plan
}

proptest! {
    #[test]
    fn plan_is_the_sorted_permutation(
        dims in prop::array::uniform3(1usize..20),
        axis in 0usize..3,
        frac in 0.0f64..1.0,
    ) {
        let axis = Axis::from_index(axis).unwrap();
        let index = ((dims[axis.index()] as f64) * frac) as usize;
        let current = SliceRef::new(axis, index.min(dims[axis.index()] - 1));
        let plan = precompute_plan(dims, current);
        prop_assert_eq!(plan.len(), dims.iter().sum::<usize>());
        let unique: HashSet<_> = plan.iter().map(|s| (s.axis, s.index)).collect();
        prop_assert_eq!(unique.len(), plan.len());
        prop_assert_eq!(plan, oracle_plan(dims, current));
    }
}

#[test]
fn plan_examples() {
    let p = precompute_plan([1, 1, 3], SliceRef::new(Axis::Axial, 1));
    let flat: Vec<(usize, usize)> = p.iter().map(|s| (s.axis.index(), s.index)).collect();
    assert_eq!(flat, [(2, 1), (2, 0), (2, 2), (0, 0), (1, 0)]);
    assert_eq!(precompute_plan([1, 1, 1], SliceRef::new(Axis::Sagittal, 0)).len(), 3);
}
