//! Data-driven lookup tables: vendor metadata normalization and the layer
//! vocabulary. Defaults are compiled in from `data/`, and both can be
//! replaced at runtime by pointing the config at an edited copy.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::attributes::{Category, Gender};
use crate::querygen::LayerKey;

const DEFAULT_NORMALIZATION: &str = include_str!("../data/normalization.toml");
const DEFAULT_LAYERS: &str = include_str!("../data/layers.toml");

#[derive(Debug, Error)]
pub enum TableError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing table: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{word:?} is listed under both {first} and {second}")]
    Conflict {
        word: String,
        first: String,
        second: String,
    },
    #[error("unknown layer kind {0:?}")]
    UnknownLayerKind(String),
}

fn read(path: &Path) -> Result<String, TableError> {
    std::fs::read_to_string(path).map_err(|source| TableError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn invert<V: Copy + std::fmt::Debug>(table: BTreeMap<V, Vec<String>>) -> Result<HashMap<String, V>, TableError> {
    let mut out: HashMap<String, V> = HashMap::new();
    for (value, words) in table {
        for w in words {
            let w = w.to_lowercase();
            if let Some(prev) = out.insert(w.clone(), value) {
                return Err(TableError::Conflict {
                    word: w,
                    first: format!("{prev:?}"),
                    second: format!("{value:?}"),
                });
            }
        }
    }
    Ok(out)
}

fn words(value: &str) -> Vec<String> {
    value
        .to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '-'))
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(default)]
pub struct KeyAliases {
    pub category: Vec<String>,
    pub gender: Vec<String>,
    pub brand: Vec<String>,
    pub price: Vec<String>,
    pub currency: Vec<String>,
    pub sizes: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RawNormalization {
    keys: KeyAliases,
    category: BTreeMap<Category, Vec<String>>,
    gender: BTreeMap<Gender, Vec<String>>,
    #[serde(default)]
    currency_exponent: BTreeMap<String, u32>,
}

/// Synonym tables mapping vendor-shaped strings onto the closed enums.
#[derive(Debug, Clone)]
pub struct NormalizationTables {
    pub keys: KeyAliases,
    category: HashMap<String, Category>,
    gender: HashMap<String, Gender>,
    currency_exponent: HashMap<String, u32>,
}

impl NormalizationTables {
    pub fn parse(text: &str) -> Result<Self, TableError> {
        let raw: RawNormalization = toml::from_str(text)?;
        Ok(Self {
            keys: raw.keys,
            category: invert(raw.category)?,
            gender: invert(raw.gender)?,
            currency_exponent: raw
                .currency_exponent
                .into_iter()
                .map(|(k, v)| (k.to_uppercase(), v))
                .collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, TableError> {
        Self::parse(&read(path)?)
    }

    /// Head-noun lookup: whole phrase, then tokens from the right.
    pub fn category_of(&self, value: &str) -> Category {
        lookup(&self.category, value, true).unwrap_or(Category::Unknown)
    }

    pub fn gender_of(&self, value: &str) -> Gender {
        lookup(&self.gender, value, false).unwrap_or(Gender::Unknown)
    }

    pub fn currency_exponent(&self, currency: &str) -> u32 {
        self.currency_exponent
            .get(&currency.to_uppercase())
            .copied()
            .unwrap_or(2)
    }
}

impl Default for NormalizationTables {
    fn default() -> Self {
        Self::parse(DEFAULT_NORMALIZATION).expect("bundled normalization table is valid")
    }
}

fn lookup<V: Copy>(table: &HashMap<String, V>, value: &str, from_right: bool) -> Option<V> {
    let phrase = value.trim().to_lowercase();
    if let Some(v) = table.get(&phrase) {
        return Some(*v);
    }
    let toks = words(value);
    let hit = |t: &String| {
        table
            .get(t)
            .or_else(|| table.get(t.trim_matches(|c| c == '\'' || c == '-')))
            .copied()
    };
    if from_right {
        toks.iter().rev().find_map(hit)
    } else {
        toks.iter().find_map(hit)
    }
}

/// Layer families the keyword detector can emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Topwear,
    Bottomwear,
    Footwear,
    Headwear,
    Dress,
    Accessory,
}

#[derive(Debug, Deserialize)]
struct RawLayers {
    layer_categories: BTreeMap<String, Vec<Category>>,
    keywords: BTreeMap<LayerKind, Vec<String>>,
}

/// Layer-key to catalog-category mapping plus the generator's keyword table.
#[derive(Debug, Clone)]
pub struct LayerTables {
    categories: HashMap<String, Vec<Category>>,
    keywords: HashMap<String, LayerKind>,
}

impl LayerTables {
    pub fn parse(text: &str) -> Result<Self, TableError> {
        let raw: RawLayers = toml::from_str(text)?;
        for k in raw.layer_categories.keys() {
            if k != "accessory" && k.parse::<LayerKey>().is_err() {
                return Err(TableError::UnknownLayerKind(k.clone()));
            }
        }
        Ok(Self {
            categories: raw.layer_categories.into_iter().collect(),
            keywords: invert(raw.keywords)?,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TableError> {
        Self::parse(&read(path)?)
    }

    /// Catalog categories to search for `layer`; empty when the table has no entry.
    pub fn categories_for(&self, layer: LayerKey) -> &[Category] {
        let key = match layer {
            LayerKey::Accessory(_) => "accessory".to_owned(),
            other => other.to_string(),
        };
        self.categories.get(&key).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Layer family of the rightmost keyword in `phrase`.
    pub fn detect(&self, phrase: &str) -> Option<LayerKind> {
        lookup(&self.keywords, phrase, true)
    }
}

impl Default for LayerTables {
    fn default() -> Self {
        Self::parse(DEFAULT_LAYERS).expect("bundled layer table is valid")
    }
}
