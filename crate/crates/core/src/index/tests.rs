use super::*;
use crate::attributes::{Category, Gender};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn unit(values: &[f32]) -> EmbeddingVector {
    EmbeddingVector::from_unit(values.to_vec()).unwrap()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
    let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    EmbeddingVector::normalize(v).unwrap()
}

fn entry(id: &str, v: EmbeddingVector, attrs: AttributeSet) -> IndexEntry {
    IndexEntry {
        product_id: id.into(),
        vector: v,
        attrs,
    }
}

fn attrs(category: Category, gender: Gender, geo: &str) -> AttributeSet {
    AttributeSet {
        category,
        gender,
        geography: geo.into(),
        ..Default::default()
    }
}

fn random_index(seed: u64, n: usize, dim: usize, params: Option<AnnParams>) -> VectorIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = IndexParams::new(dim);
    if let Some(a) = params {
        p.ann = a;
    }
    let index = VectorIndex::new(p).unwrap();
    for i in 0..n {
        let cat = Category::ALL[rng.random_range(0..6)];
        let gender = [Gender::Men, Gender::Women, Gender::Unisex][rng.random_range(0..3)];
        let geo = ["IN", "US", "JP"][rng.random_range(0..3)];
        index
            .upsert(entry(&format!("p{i:06}"), random_unit(&mut rng, dim), attrs(cat, gender, geo)))
            .unwrap();
    }
    index
}

fn ids(hits: &[SearchHit]) -> Vec<&str> {
    hits.iter().map(|h| h.product_id.as_str()).collect()
}

#[test]
fn upsert_insert_and_replace() {
    let index = VectorIndex::new(IndexParams::new(2)).unwrap();
    let a = entry("A", unit(&[1.0, 0.0]), AttributeSet::default());
    assert_eq!(index.upsert(a.clone()).unwrap(), UpsertOutcome::Inserted);
    assert_eq!(index.len(), 1);
    assert_eq!(index.upsert(a).unwrap(), UpsertOutcome::Replaced);
    assert_eq!(index.len(), 1);
}

#[test]
fn upsert_wrong_dim() {
    let index = VectorIndex::new(IndexParams::new(64)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let err = index
        .upsert(entry("A", random_unit(&mut rng, 512), AttributeSet::default()))
        .unwrap_err();
    assert!(matches!(err, IndexError::DimensionMismatch { expected: 64, got: 512 }));
}

#[test]
fn exact_examples() {
    let index = VectorIndex::new(IndexParams::new(2)).unwrap();
    index.upsert(entry("A", unit(&[1.0, 0.0]), AttributeSet::default())).unwrap();
    index.upsert(entry("B", unit(&[0.0, 1.0]), AttributeSet::default())).unwrap();
    let q = unit(&[1.0, 0.0]);
    let any = AttributePredicate::any();
    let hits = index.search_exact(&q, 1, &any).unwrap();
    assert_eq!(hits, [SearchHit { product_id: "A".into(), score: 1.0 }]);
    let hits = index.search_exact(&q, 5, &any).unwrap();
    assert_eq!(ids(&hits), ["A", "B"]);
    assert_eq!(hits[1].score, 0.0);

    let index = VectorIndex::new(IndexParams::new(2)).unwrap();
    index.upsert(entry("A", unit(&[1.0, 0.0]), AttributeSet::default())).unwrap();
    index.upsert(entry("B", unit(&[0.8, 0.6]), AttributeSet::default())).unwrap();
    index.upsert(entry("C", unit(&[0.0, 1.0]), AttributeSet::default())).unwrap();
    let hits = index.search_exact(&q, 2, &any).unwrap();
    assert_eq!(ids(&hits), ["A", "B"]);
    assert_eq!(hits[0].score, 1.0);
    assert!((hits[1].score - 0.8).abs() < 1e-6);
}

#[test]
fn ties_break_by_id() {
    let index = VectorIndex::new(IndexParams::new(2)).unwrap();
    for id in ["c", "a", "b"] {
        index.upsert(entry(id, unit(&[0.6, 0.8]), AttributeSet::default())).unwrap();
    }
    let hits = index.search_exact(&unit(&[1.0, 0.0]), 3, &AttributePredicate::any()).unwrap();
    assert_eq!(ids(&hits), ["a", "b", "c"]);
}

#[test]
fn empty_index_and_bad_k() {
    let index = VectorIndex::new(IndexParams::new(2)).unwrap();
    let q = unit(&[1.0, 0.0]);
    assert!(index.search_ann(&q, 3, &AttributePredicate::any()).unwrap().is_empty());
    assert!(index.search_exact(&q, 3, &AttributePredicate::any()).unwrap().is_empty());
    assert!(matches!(index.search_exact(&q, 0, &AttributePredicate::any()), Err(IndexError::InvalidK)));
}

#[test]
fn invalid_params() {
    let mut p = IndexParams::new(8);
    p.ann.m = 1;
    assert!(matches!(VectorIndex::new(p), Err(IndexError::InvalidParams(_))));
    assert!(VectorIndex::new(IndexParams::new(0)).is_err());
}

#[test]
fn ann_equals_exact_on_small_indexes() {
    for (seed, n) in [(1u64, 10usize), (2, 300), (3, 1000)] {
        let index = random_index(seed, n, 32, None);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for i in 0..50 {
            let q = random_unit(&mut rng, 32);
            let filter = if i % 2 == 0 {
                AttributePredicate::any()
            } else {
                AttributePredicate::any().with_categories([Category::Topwear, Category::Dress])
            };
            let k = 1 + i % 20;
            assert_eq!(
                index.search_ann(&q, k, &filter).unwrap(),
                index.search_exact(&q, k, &filter).unwrap()
            );
        }
    }
}

fn recall(index: &VectorIndex, queries: &[EmbeddingVector], k: usize, filter: &AttributePredicate) -> f64 {
    let mut total = 0.0;
    for q in queries {
        let exact = index.search_exact(q, k, filter).unwrap();
        let ann = index.search_ann(q, k, filter).unwrap();
        let truth: std::collections::HashSet<_> = exact.iter().map(|h| &h.product_id).collect();
        let found = ann.iter().filter(|h| truth.contains(&h.product_id)).count();
        total += found as f64 / exact.len().max(1) as f64;
    }
    total / queries.len() as f64
}

#[test]
fn graph_recall_on_medium_index() {
    let ann = AnnParams {
        exact_threshold: 0,
        ..AnnParams::default()
    };
    let index = random_index(11, 5000, 32, Some(ann));
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let queries: Vec<_> = (0..200).map(|_| random_unit(&mut rng, 32)).collect();
    let r = recall(&index, &queries, 10, &AttributePredicate::any());
    assert!(r >= 0.95, "unfiltered recall {r}");
    let filter = AttributePredicate::any().with_genders([Gender::Men, Gender::Unisex]);
    let r = recall(&index, &queries, 10, &filter);
    assert!(r >= 0.95, "filtered recall {r}");
}

#[test]
fn replaced_vectors_are_found() {
    let ann = AnnParams {
        exact_threshold: 0,
        ..AnnParams::default()
    };
    let index = random_index(21, 3000, 24, Some(ann));
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut moved = Vec::new();
    for i in (0..3000).step_by(10) {
        let id = format!("p{i:06}");
        let v = random_unit(&mut rng, 24);
        let old = index.get(&id).unwrap();
        assert_eq!(
            index.upsert(entry(&id, v.clone(), old.attrs)).unwrap(),
            UpsertOutcome::Replaced
        );
        moved.push((id, v));
    }
    let mut top1 = 0;
    for (id, v) in &moved {
        let hits = index.search_ann(v, 1, &AttributePredicate::any()).unwrap();
        if hits[0].product_id == *id {
            top1 += 1;
        }
    }
    assert!(top1 as f64 / moved.len() as f64 > 0.97, "{top1}/{}", moved.len());
}

#[test]
fn selective_filters_keep_k_results() {
    let index = random_index(31, 4000, 16, Some(AnnParams { exact_threshold: 0, ..AnnParams::default() }));
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let filter = AttributePredicate::any()
        .with_categories([Category::Footwear])
        .with_genders([Gender::Women])
        .with_geography("jp");
    for _ in 0..20 {
        let q = random_unit(&mut rng, 16);
        let exact = index.search_exact(&q, 10, &filter).unwrap();
        assert_eq!(exact.len(), 10);
        assert_eq!(index.search_ann(&q, 10, &filter).unwrap(), exact);
    }
}

#[test]
fn unknown_geography_matches_nothing() {
    let index = random_index(41, 50, 8, None);
    let q = index.get("p000001").unwrap().vector;
    let hits = index
        .search_ann(&q, 5, &AttributePredicate::any().with_geography("FR"))
        .unwrap();
    assert!(hits.is_empty());
}

#[test]
fn update_attrs_changes_filtering() {
    let index = VectorIndex::new(IndexParams::new(2)).unwrap();
    index
        .upsert(entry("A", unit(&[1.0, 0.0]), attrs(Category::Topwear, Gender::Men, "IN")))
        .unwrap();
    let topwear = AttributePredicate::any().with_categories([Category::Topwear]);
    let q = unit(&[1.0, 0.0]);
    assert_eq!(index.search_exact(&q, 1, &topwear).unwrap().len(), 1);
    index
        .update_attrs("A", attrs(Category::Dress, Gender::Women, "IN"))
        .unwrap();
    assert!(index.search_exact(&q, 1, &topwear).unwrap().is_empty());
    assert!(matches!(index.update_attrs("Z", AttributeSet::default()), Err(IndexError::NotFound(_))));
}

#[test]
fn persistence_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("idx.lks");
    let index = random_index(51, 1500, 16, None);
    let mut a = index.get("p000007").unwrap().attrs;
    a.brand = "Acme".into();
    a.price = Some(crate::attributes::Price { minor: 4999, currency: "USD".into() });
    a.sizes = ["M".to_string(), "L".to_string()].into();
    index.update_attrs("p000007", a.clone()).unwrap();
    let written = index.save(&path).unwrap();
    assert_eq!(written, std::fs::metadata(&path).unwrap().len());
    let loaded = VectorIndex::load(&path).unwrap();
    assert_eq!(loaded.len(), 1500);
    assert_eq!(loaded.params(), index.params());
    assert_eq!(loaded.get("p000007").unwrap().attrs, a);
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    for i in 0..100 {
        let q = random_unit(&mut rng, 16);
        let f = if i % 3 == 0 {
            AttributePredicate::any().with_geography("US")
        } else {
            AttributePredicate::any()
        };
        assert_eq!(loaded.search_exact(&q, 10, &f).unwrap(), index.search_exact(&q, 10, &f).unwrap());
        assert_eq!(loaded.search_ann(&q, 10, &f).unwrap(), index.search_ann(&q, 10, &f).unwrap());
    }
}

#[test]
fn empty_index_round_trip() {
    let index = VectorIndex::new(IndexParams::new(4)).unwrap();
    let back = VectorIndex::from_bytes(&index.to_bytes()).unwrap();
    assert!(back.is_empty());
    assert_eq!(back.dim(), 4);
}

#[test]
fn corrupt_files_rejected() {
    let bytes = random_index(61, 40, 8, None).to_bytes();

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(VectorIndex::from_bytes(&bad_magic), Err(IndexError::CorruptFile(_))));

    for cut in [3, 20, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            matches!(VectorIndex::from_bytes(&bytes[..cut]), Err(IndexError::CorruptFile(_))),
            "cut at {cut}"
        );
    }

    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(VectorIndex::from_bytes(&flipped), Err(IndexError::CorruptFile(_))));

    let mut header = bytes.clone();
    header[12] ^= 1; // dim
    assert!(matches!(VectorIndex::from_bytes(&header), Err(IndexError::CorruptFile(_))));
}

#[test]
fn future_version_rejected() {
    let mut bytes = random_index(62, 5, 4, None).to_bytes();
    bytes[7..11].copy_from_slice(&2u32.to_le_bytes());
    let crc = crc32fast::hash(&bytes[..23]);
    bytes[23..27].copy_from_slice(&crc.to_le_bytes());
    assert!(matches!(VectorIndex::from_bytes(&bytes), Err(IndexError::VersionUnsupported(2))));
}

#[test]
fn header_layout() {
    let bytes = random_index(63, 3, 4, None).to_bytes();
    assert_eq!(&bytes[..7], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[7..11].try_into().unwrap()), FORMAT_VERSION);
    assert_eq!(u32::from_le_bytes(bytes[11..15].try_into().unwrap()), 4);
    assert_eq!(u64::from_le_bytes(bytes[15..23].try_into().unwrap()), 3);
    assert_eq!(
        u32::from_le_bytes(bytes[23..27].try_into().unwrap()),
        crc32fast::hash(&bytes[..23])
    );
}

#[test]
fn readers_never_see_torn_entries() {
    let index = Arc::new(VectorIndex::new(IndexParams::new(2)).unwrap());
    let a = unit(&[1.0, 0.0]);
    let b = unit(&[0.0, 1.0]);
    index
        .upsert(entry("X", a.clone(), attrs(Category::Topwear, Gender::Men, "IN")))
        .unwrap();
    index
        .upsert(entry("Y", unit(&[0.6, 0.8]), attrs(Category::Dress, Gender::Men, "IN")))
        .unwrap();
    let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
    let writer = {
        let (index, stop, a, b) = (index.clone(), stop.clone(), a.clone(), b.clone());
        std::thread::spawn(move || {
            let mut flip = false;
            while !stop.load(std::sync::atomic::Ordering::Relaxed) {
                let (v, c) = if flip { (a.clone(), Category::Topwear) } else { (b.clone(), Category::Bottomwear) };
                index.upsert(entry("X", v, attrs(c, Gender::Men, "IN"))).unwrap();
                flip = !flip;
            }
        })
    };
    let topwear = AttributePredicate::any().with_categories([Category::Topwear]);
    let bottomwear = AttributePredicate::any().with_categories([Category::Bottomwear]);
    for _ in 0..20_000 {
        for h in index.search_exact(&a, 2, &topwear).unwrap() {
            assert_eq!(h.score, 1.0, "topwear X must carry vector a");
        }
        for h in index.search_exact(&a, 2, &bottomwear).unwrap() {
            assert_eq!(h.score, 0.0, "bottomwear X must carry vector b");
        }
    }
    stop.store(true, std::sync::atomic::Ordering::Relaxed);
    writer.join().unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn filter_soundness_and_prefix_monotonicity(seed in 0u64..1000, n in 1usize..400, cat in 0usize..6, k in 1usize..30) {
        let index = random_index(seed, n, 8, None);
        let filter = AttributePredicate::any().with_categories([Category::ALL[cat]]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        let q = random_unit(&mut rng, 8);
        let big = index.search_exact(&q, k + 10, &filter).unwrap();
        let small = index.search_exact(&q, k, &filter).unwrap();
        prop_assert_eq!(&big[..small.len()], &small[..]);
        for h in index.search_ann(&q, k, &filter).unwrap() {
            let e = index.get(&h.product_id).unwrap();
            prop_assert!(filter.matches(&e.attrs));
        }
        for w in big.windows(2) {
            prop_assert!(hit_order(&w[0], &w[1]) == std::cmp::Ordering::Less);
        }
    }
}
