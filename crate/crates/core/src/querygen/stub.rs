use std::sync::Arc;

use serde_json::{Map, Value};

use super::{GenerationRequest, GeneratorClient, GeneratorError, LayerKey};
use crate::attributes::Gender;
use crate::tables::{LayerKind, LayerTables};

/// Deterministic generator: splits the caption sidecar into phrases, detects a
/// layer per phrase from the keyword table and emits the phrase as the query,
/// prefixed with the declared gender.
#[derive(Debug, Clone, Default)]
pub struct StubGenerator {
    tables: Arc<LayerTables>,
}

impl StubGenerator {
    pub fn new(tables: Arc<LayerTables>) -> Self {
        Self { tables }
    }

    /// The plan the stub emits for a caption, before validation.
    pub fn plan_for(&self, caption: &str, gender: Option<Gender>) -> Map<String, Value> {
        let prefix = match gender {
            Some(Gender::Men) => "Men's ",
            Some(Gender::Women) => "Women's ",
            Some(Gender::Boys) => "Boys' ",
            Some(Gender::Girls) => "Girls' ",
            _ => "",
        };
        let mut out = Map::new();
        let mut accessories = 0u32;
        for phrase in split_phrases(caption) {
            let Some(kind) = self.tables.detect(&phrase) else {
                continue;
            };
            let key = match kind {
                LayerKind::Topwear if !out.contains_key("outermost_topwear") => LayerKey::OutermostTopwear,
                LayerKind::Topwear => LayerKey::InnerTopwear,
                LayerKind::Bottomwear => LayerKey::Bottomwear,
                LayerKind::Footwear => LayerKey::Footwear,
                LayerKind::Headwear => LayerKey::Headwear,
                LayerKind::Dress => LayerKey::Dress,
                LayerKind::Accessory => {
                    accessories += 1;
                    LayerKey::Accessory(accessories)
                }
            };
            // First phrase wins for a repeated slot.
            out.entry(key.to_string())
                .or_insert_with(|| Value::String(format!("{prefix}{phrase}")));
        }
        out
    }
}

fn split_phrases(caption: &str) -> Vec<String> {
    let joined = caption.replace(" and ", ",").replace(" with ", ",");
    joined
        .split([',', ';', '\n', '+'])
        .map(|p| p.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|p| !p.is_empty())
        .collect()
}

impl GeneratorClient for StubGenerator {
    fn generate(&self, req: &GenerationRequest) -> Result<Map<String, Value>, GeneratorError> {
        let caption = req.look.caption_sidecar.as_deref().unwrap_or("");
        Ok(self.plan_for(caption, req.look.declared_gender))
    }
}
