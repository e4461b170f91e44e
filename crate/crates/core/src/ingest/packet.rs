use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::image::ImageRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketOp {
    NewProduct,
    MetadataUpdate,
}

/// One catalog update as delivered by a vendor feed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdatePacket {
    pub packet_id: String,
    pub product_id: String,
    pub op: PacketOp,
    #[serde(default, deserialize_with = "scalar_map")]
    pub raw_metadata: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default)]
    pub geography: String,
}

impl UpdatePacket {
    pub fn has_image(&self) -> bool {
        self.image_ref.as_ref().is_some_and(|r| !r.is_empty())
    }

    /// Schema rules beyond what deserialization enforces.
    pub fn validate(&self) -> Result<(), String> {
        if self.packet_id.trim().is_empty() {
            return Err("packet_id is empty".into());
        }
        if self.product_id.trim().is_empty() {
            return Err("product_id is empty".into());
        }
        if self.op == PacketOp::NewProduct && !self.has_image() {
            return Err("new_product packet has no image_ref".into());
        }
        Ok(())
    }

    pub fn parse(line: &str) -> Result<Self, String> {
        let p: Self = serde_json::from_str(line).map_err(|e| e.to_string())?;
        p.validate()?;
        Ok(p)
    }
}

/// Vendor feeds send numbers and booleans as JSON scalars; store them as text.
fn scalar_map<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, String>, D::Error> {
    let raw = Option::<BTreeMap<String, Value>>::deserialize(d)?.unwrap_or_default();
    Ok(raw
        .into_iter()
        .filter_map(|(k, v)| match v {
            Value::Null => None,
            Value::String(s) => Some((k, s)),
            Value::Array(items) => Some((
                k,
                items
                    .iter()
                    .map(|i| i.as_str().map(str::to_owned).unwrap_or_else(|| i.to_string()))
                    .collect::<Vec<_>>()
                    .join(","),
            )),
            other => Some((k, other.to_string())),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_vendor_shapes() {
        let p = UpdatePacket::parse(
            r#"{"packet_id":"k1","product_id":"p1","op":"new_product",
                "raw_metadata":{"price":49.99,"sizes":["S","M"],"in_stock":true,"note":null},
                "image_ref":"base64:aW1n","geography":"US"}"#,
        )
        .unwrap();
        assert_eq!(p.raw_metadata["price"], "49.99");
        assert_eq!(p.raw_metadata["sizes"], "S,M");
        assert_eq!(p.raw_metadata["in_stock"], "true");
        assert!(!p.raw_metadata.contains_key("note"));
    }

    #[test]
    fn new_product_needs_image() {
        let err = UpdatePacket::parse(r#"{"packet_id":"k1","product_id":"p1","op":"new_product"}"#).unwrap_err();
        assert!(err.contains("image_ref"));
        assert!(UpdatePacket::parse(r#"{"packet_id":"k1","product_id":"p1","op":"metadata_update"}"#).is_ok());
        assert!(UpdatePacket::parse(r#"{"packet_id":"","product_id":"p1","op":"metadata_update"}"#).is_err());
        assert!(UpdatePacket::parse(r#"{"packet_id":"k","product_id":"p1","op":"delete"}"#).is_err());
        assert!(UpdatePacket::parse("not json").is_err());
    }
}
