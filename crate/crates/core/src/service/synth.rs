//! Seeded synthetic catalogs, looks and vector sets for benches and tests.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attributes::Gender;
use crate::embedding::EmbeddingVector;
use crate::image::ImageRef;
use crate::ingest::{PacketOp, UpdatePacket};
use crate::querygen::LookDescriptor;

const TOPS: &[&str] = &["shirt", "tee", "polo", "sweater", "hoodie", "blouse", "henley", "turtleneck"];
const OUTER: &[&str] = &["jacket", "coat", "blazer", "overcoat", "parka", "cardigan"];
const BOTTOMS: &[&str] = &["jeans", "trousers", "chinos", "shorts", "skirt", "joggers", "cargos"];
const FOOTWEAR: &[&str] = &["sneakers", "boots", "loafers", "sandals", "heels", "trainers", "oxfords"];
const HEADWEAR: &[&str] = &["cap", "hat", "beanie"];
const ACCESSORIES: &[&str] = &["watch", "belt", "bag", "scarf", "sunglasses", "backpack", "wallet"];
const DRESSES: &[&str] = &["dress", "gown", "jumpsuit"];
const COLORS: &[&str] = &[
    "black", "white", "navy", "grey", "beige", "olive", "burgundy", "camel", "cream", "khaki", "charcoal", "red",
    "blue", "green", "brown", "pink",
];
const MATERIALS: &[&str] = &["cotton", "linen", "wool", "denim", "leather", "suede", "silk", "fleece", "knit", "corduroy"];
const FITS: &[&str] = &["slim", "relaxed", "cropped", "oversized", "regular", "tailored"];
const BRANDS: &[&str] = &["Northwind", "Calder", "Aster", "Brisk", "Monoline", "Fieldhouse", "Lumen", "Tidewell"];
const SIZES: &[&str] = &["XS", "S", "M", "L", "XL"];

pub const SYNTH_GEOGRAPHY: &str = "US";

fn families(gender: Gender) -> &'static [&'static [&'static str]] {
    match gender {
        Gender::Women => &[TOPS, OUTER, BOTTOMS, FOOTWEAR, HEADWEAR, ACCESSORIES, DRESSES],
        _ => &[TOPS, OUTER, BOTTOMS, FOOTWEAR, HEADWEAR, ACCESSORIES],
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).copied().expect("non-empty vocabulary")
}

fn phrase(rng: &mut ChaCha8Rng, nouns: &[&str]) -> String {
    format!("{} {} {} {}", pick(rng, FITS), pick(rng, COLORS), pick(rng, MATERIALS), pick(rng, nouns))
}

fn gender_label(g: Gender) -> &'static str {
    match g {
        Gender::Men => "men",
        Gender::Women => "women",
        _ => "unisex",
    }
}

/// `n` new-product packets with captions drawn from a small fashion
/// vocabulary. Each caption ends in a unique sku token so no two products
/// share a vector.
pub fn catalog(n: usize, seed: u64) -> Vec<UpdatePacket> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let gender = match rng.random_range(0..10) {
                0..=3 => Gender::Men,
                4..=7 => Gender::Women,
                _ => Gender::Unisex,
            };
            let fams = families(gender);
            let nouns = fams[rng.random_range(0..fams.len())];
            let noun = pick(&mut rng, nouns);
            let text = format!("{} {} {} {noun}", pick(&mut rng, FITS), pick(&mut rng, COLORS), pick(&mut rng, MATERIALS));
            let product_id = format!("sku{i:06}");
            let mut raw = BTreeMap::new();
            raw.insert("title".into(), text.clone());
            raw.insert("category".into(), noun.into());
            raw.insert("gender".into(), gender_label(gender).into());
            raw.insert("brand".into(), pick(&mut rng, BRANDS).into());
            raw.insert("price".into(), format!("{}.{:02}", rng.random_range(9..400), rng.random_range(0..100)));
            raw.insert("currency".into(), "USD".into());
            let lo = rng.random_range(0..SIZES.len());
            let hi = rng.random_range(lo..SIZES.len());
            raw.insert("sizes".into(), SIZES[lo..=hi].join(","));
            UpdatePacket {
                packet_id: format!("pkt-{product_id}"),
                product_id: product_id.clone(),
                op: PacketOp::NewProduct,
                raw_metadata: raw,
                image_ref: Some(ImageRef::inline(product_id.as_bytes())),
                caption: Some(format!("{text} {product_id}")),
                geography: SYNTH_GEOGRAPHY.into(),
            }
        })
        .collect()
}

/// Looks with three to five layers each, alternating men's and women's.
pub fn looks(n: usize, seed: u64) -> Vec<LookDescriptor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c6f_6f6b);
    (0..n)
        .map(|i| {
            let gender = if i % 2 == 0 { Gender::Men } else { Gender::Women };
            let mut parts = Vec::new();
            if gender == Gender::Women && rng.random_bool(0.3) {
                parts.push(phrase(&mut rng, DRESSES));
            } else {
                if rng.random_bool(0.6) {
                    parts.push(phrase(&mut rng, OUTER));
                }
                parts.push(phrase(&mut rng, TOPS));
                parts.push(phrase(&mut rng, BOTTOMS));
            }
            parts.push(phrase(&mut rng, FOOTWEAR));
            if rng.random_bool(0.5) {
                parts.push(phrase(&mut rng, ACCESSORIES));
            }
            let look_id = format!("look-{i:05}");
            LookDescriptor {
                image: ImageRef::inline(look_id.as_bytes()),
                look_id,
                caption_sidecar: Some(parts.join(", ")),
                declared_gender: Some(gender),
                geography: SYNTH_GEOGRAPHY.into(),
                user_prefs: None,
            }
        })
        .collect()
}

/// Unit vectors from a Gaussian mixture: `clusters` centres uniform on the
/// sphere, each point a centre plus isotropic noise of total scale `sigma`.
#[derive(Debug, Clone)]
pub struct Mixture {
    centres: Vec<Vec<f32>>,
    sigma: f32,
    rng: ChaCha8Rng,
}

impl Mixture {
    pub fn new(dim: usize, clusters: usize, sigma: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centres = (0..clusters.max(1))
            .map(|_| {
                let g: Vec<f32> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = g.iter().map(|x| x * x).sum::<f32>().sqrt();
                g.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        Self { centres, sigma, rng }
    }

    pub fn sample(&mut self) -> EmbeddingVector {
        let c = &self.centres[self.rng.random_range(0..self.centres.len())];
        let scale = self.sigma / (c.len() as f32).sqrt();
        let v: Vec<f32> = c
            .iter()
            .map(|x| x + scale * self.rng.sample::<f32, _>(StandardNormal))
            .collect();
        EmbeddingVector::normalize(v).expect("mixture sample is non-degenerate")
    }

    pub fn take(&mut self, n: usize) -> Vec<EmbeddingVector> {
        (0..n).map(|_| self.sample()).collect()
    }
}
