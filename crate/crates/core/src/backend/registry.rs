//! Backend lookup by id.
//!
//! Built-in ids are `toy` (seed 0) and `toy:<seed>`. A JSON file named by
//! `ITB_BACKEND_REGISTRY` may map extra aliases onto built-in ids, e.g.
//! `{"desk": "toy:7"}`. Adapters for pretrained models register here under
//! their own ids; none ship with this crate.

use std::collections::BTreeMap;
use std::path::Path;

use super::{DiffusionBackend, ToyBackend};
use crate::error::{Error, Result};

pub const DEFAULT_BACKEND_ID: &str = "toy";
pub const REGISTRY_ENV: &str = "ITB_BACKEND_REGISTRY";

fn builtin(id: &str) -> Option<Box<dyn DiffusionBackend>> {
    if id == "toy" {
        return Some(Box::new(ToyBackend::new(0)));
    }
    let seed = id.strip_prefix("toy:")?.parse::<u64>().ok()?;
    Some(Box::new(ToyBackend::new(seed)))
}

fn load_aliases(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Resolves a backend id, consulting the alias registry when set.
pub fn backend_from_id(id: &str) -> Result<Box<dyn DiffusionBackend>> {
    if let Some(backend) = builtin(id) {
        return Ok(backend);
    }
    if let Some(path) = std::env::var_os(REGISTRY_ENV) {
        let aliases = load_aliases(Path::new(&path))?;
        if let Some(target) = aliases.get(id) {
            return builtin(target).ok_or_else(|| Error::UnknownBackend(target.clone()));
        }
    }
    Err(Error::UnknownBackend(id.to_string()))
}
