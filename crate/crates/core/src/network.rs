//! Network documents: JSON text to a validated [`NetworkIR`].

use serde_json::Value;
use thiserror::Error;

use crate::lowering::{topo_layers, LowerError, NetworkIR};

pub const NETWORK_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("parse error at {path}: {msg}")]
    Schema { path: String, msg: String },
    #[error("unsupported layer kind `{kind}` at {path}")]
    UnsupportedLayer { path: String, kind: String },
    #[error("cyclic layer graph")]
    Cyclic,
    #[error(transparent)]
    Invalid(LowerError),
}

impl ParseError {
    /// Stable machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            ParseError::Schema { .. } => "parse",
            ParseError::UnsupportedLayer { .. } => "unsupported_layer",
            ParseError::Cyclic => "cyclic",
            ParseError::Invalid(_) => "invalid_network",
        }
    }
}

fn schema(path: &str, msg: impl Into<String>) -> ParseError {
    ParseError::Schema {
        path: path.into(),
        msg: msg.into(),
    }
}

fn unsupported_kind(doc: &Value, path: &str) -> Option<String> {
    // path looks like "layers[3]..." when the failure is inside a layer
    let idx: usize = path.strip_prefix("layers[")?.split(']').next()?.parse().ok()?;
    doc["layers"][idx]["kind"].as_str().map(str::to_string)
}

pub fn parse_network(text: &str) -> Result<NetworkIR, ParseError> {
    let mut doc: Value = serde_json::from_str(text).map_err(|e| schema(".", e.to_string()))?;
    let Some(obj) = doc.as_object_mut() else {
        return Err(schema(".", "document must be a JSON object"));
    };
    match obj.remove("version") {
        None => {}
        Some(Value::Number(n)) if n.as_u64() == Some(NETWORK_VERSION) => {}
        Some(v) => return Err(schema("version", format!("unsupported network version {v}"))),
    }
    if !obj.get("layers").is_some_and(Value::is_array) {
        return Err(schema("layers", "missing `layers` array"));
    }
    let net: NetworkIR = serde_path_to_error::deserialize(&doc).map_err(|e| {
        let path = e.path().to_string();
        let msg = e.inner().to_string();
        match unsupported_kind(&doc, &path) {
            Some(kind) if msg.starts_with("unsupported layer kind") => {
                ParseError::UnsupportedLayer { path, kind }
            }
            _ => schema(&path, msg),
        }
    })?;
    match topo_layers(&net) {
        Ok(_) => Ok(net),
        Err(LowerError::Cyclic) => Err(ParseError::Cyclic),
        Err(e) => Err(ParseError::Invalid(e)),
    }
}
