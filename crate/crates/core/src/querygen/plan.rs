use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::embedding::tokenize;

pub const MAX_QUERY_CHARS: usize = 512;

/// A detected garment or accessory slot in a look.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerKey {
    OutermostTopwear,
    InnerTopwear,
    Bottomwear,
    Footwear,
    Headwear,
    Dress,
    /// `accessory_N`, numbered from 1.
    Accessory(u32),
}

impl fmt::Display for LayerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerKey::OutermostTopwear => f.write_str("outermost_topwear"),
            LayerKey::InnerTopwear => f.write_str("inner_topwear"),
            LayerKey::Bottomwear => f.write_str("bottomwear"),
            LayerKey::Footwear => f.write_str("footwear"),
            LayerKey::Headwear => f.write_str("headwear"),
            LayerKey::Dress => f.write_str("dress"),
            LayerKey::Accessory(n) => write!(f, "accessory_{n}"),
        }
    }
}

impl FromStr for LayerKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "outermost_topwear" => LayerKey::OutermostTopwear,
            "inner_topwear" => LayerKey::InnerTopwear,
            "bottomwear" => LayerKey::Bottomwear,
            "footwear" => LayerKey::Footwear,
            "headwear" => LayerKey::Headwear,
            "dress" => LayerKey::Dress,
            other => {
                let n = other
                    .strip_prefix("accessory_")
                    .filter(|n| !n.is_empty() && !n.starts_with('0') && n.bytes().all(|b| b.is_ascii_digit()))
                    .and_then(|n| n.parse::<u32>().ok())
                    .ok_or_else(|| format!("unknown layer key {other:?}"))?;
                LayerKey::Accessory(n)
            }
        })
    }
}

impl Serialize for LayerKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanViolation {
    UnknownKey(String),
    NotText(String),
    EmptyText(String),
    TooLong { key: String, chars: usize },
    NonConsecutiveAccessory { present: Vec<u32> },
    EmptyPlan,
    Malformed(String),
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanViolation::UnknownKey(k) => write!(f, "unknown layer key {k:?}"),
            PlanViolation::NotText(k) => write!(f, "query for {k} is not a string"),
            PlanViolation::EmptyText(k) => write!(f, "query for {k} is empty"),
            PlanViolation::TooLong { key, chars } => {
                write!(f, "query for {key} has {chars} characters (max {MAX_QUERY_CHARS})")
            }
            PlanViolation::NonConsecutiveAccessory { present } => {
                write!(f, "non-consecutive accessory index (found {present:?}, expected 1..=n)")
            }
            PlanViolation::EmptyPlan => f.write_str("empty plan"),
            PlanViolation::Malformed(m) => write!(f, "malformed reply: {m}"),
        }
    }
}

/// Validated layer → query mapping, in generator order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryPlan {
    layers: IndexMap<LayerKey, String>,
}

impl QueryPlan {
    pub fn layers(&self) -> impl Iterator<Item = (LayerKey, &str)> {
        self.layers.iter().map(|(k, v)| (*k, v.as_str()))
    }

    pub fn get(&self, key: LayerKey) -> Option<&str> {
        self.layers.get(&key).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn to_json(&self) -> Map<String, Value> {
        self.layers
            .iter()
            .map(|(k, v)| (k.to_string(), Value::String(v.clone())))
            .collect()
    }
}

impl Serialize for QueryPlan {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.layers.serialize(s)
    }
}

impl<'de> Deserialize<'de> for QueryPlan {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = Map::<String, Value>::deserialize(d)?;
        validate_plan(&raw).map_err(|v| {
            let msgs: Vec<String> = v.iter().map(ToString::to_string).collect();
            serde::de::Error::custom(msgs.join("; "))
        })
    }
}

/// Checks a raw generator reply against the layer grammar, returning every
/// violation rather than stopping at the first.
pub fn validate_plan(raw: &Map<String, Value>) -> Result<QueryPlan, Vec<PlanViolation>> {
    let mut violations = Vec::new();
    let mut layers = IndexMap::new();
    let mut accessories = BTreeSet::new();

    if raw.is_empty() {
        violations.push(PlanViolation::EmptyPlan);
    }
    for (key, value) in raw {
        let layer = match key.parse::<LayerKey>() {
            Ok(l) => l,
            Err(_) => {
                violations.push(PlanViolation::UnknownKey(key.clone()));
                continue;
            }
        };
        let Some(text) = value.as_str() else {
            violations.push(PlanViolation::NotText(key.clone()));
            continue;
        };
        let text = text.trim();
        if tokenize(text).is_empty() {
            violations.push(PlanViolation::EmptyText(key.clone()));
            continue;
        }
        let chars = text.chars().count();
        if chars > MAX_QUERY_CHARS {
            violations.push(PlanViolation::TooLong { key: key.clone(), chars });
            continue;
        }
        if let LayerKey::Accessory(n) = layer {
            accessories.insert(n);
        }
        layers.insert(layer, text.to_owned());
    }
    let consecutive = accessories.iter().copied().eq(1..=accessories.len() as u32);
    if !consecutive {
        violations.push(PlanViolation::NonConsecutiveAccessory {
            present: accessories.into_iter().collect(),
        });
    }
    if violations.is_empty() {
        Ok(QueryPlan { layers })
    } else {
        Err(violations)
    }
}
