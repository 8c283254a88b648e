//! Versioned namespace snapshots.
//!
//! Each binding is serialized on its own, so a single unpicklable value ends
//! up in `skipped` instead of failing the whole snapshot. Modules are stored
//! by import name and re-imported on restore.

use std::path::Path;

use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::{Deserialize, Serialize};

use super::{
    create_runtime, describe_pyerr, kernel, InjectedDescriptor, Origin, PyValue, Runtime,
    RuntimeConfig, RuntimeError, RuntimeHandle,
};
use crate::descriptor::VariableDescriptor;

pub const SNAPSHOT_VERSION: &str = "cellagent-snapshot/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    Pickle,
    Module,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub name: String,
    pub type_tag: String,
    pub origin: Origin,
    pub encoding: Encoding,
    #[serde(with = "b64")]
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedEntry {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: String,
    pub cell_counter: u64,
    pub entries: Vec<SnapshotEntry>,
    pub skipped: Vec<SkippedEntry>,
    /// Descriptors for injected entries that made it into `entries`.
    #[serde(default)]
    pub manifest: Vec<InjectedDescriptor>,
}

mod b64 {
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(text)
            .map_err(serde::de::Error::custom)
    }
}

impl Snapshot {
    pub fn to_json(&self) -> Result<String, RuntimeError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, RuntimeError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<(), RuntimeError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self, RuntimeError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Every name the snapshot accounts for, serialized or not.
    pub fn names(&self) -> Vec<&str> {
        self.entries
            .iter()
            .map(|e| e.name.as_str())
            .chain(self.skipped.iter().map(|s| s.name.as_str()))
            .collect()
    }
}

/// Serialize one value. `Err` carries the reason it cannot be serialized.
pub(crate) fn encode_value(
    py: Python<'_>,
    name: &str,
    origin: Origin,
    value: &Bound<'_, PyAny>,
) -> Result<SnapshotEntry, SkippedEntry> {
    let dumped = kernel(py).and_then(|k| k.call_method1("dump_entry", (value,)));
    match dumped.and_then(|t| t.extract::<(String, String, Vec<u8>)>()) {
        Ok((type_tag, encoding, payload)) => Ok(SnapshotEntry {
            name: name.to_string(),
            type_tag,
            origin,
            encoding: if encoding == "module" {
                Encoding::Module
            } else {
                Encoding::Pickle
            },
            payload,
        }),
        Err(e) => Err(SkippedEntry {
            name: name.to_string(),
            reason: describe_pyerr(py, &e),
        }),
    }
}

pub(crate) fn decode_value(entry: &SnapshotEntry) -> Result<PyValue, RuntimeError> {
    Python::attach(|py| {
        let k = kernel(py).map_err(RuntimeError::py)?;
        let encoding = match entry.encoding {
            Encoding::Pickle => "pickle",
            Encoding::Module => "module",
        };
        k.call_method1("load_entry", (encoding, PyBytes::new(py, &entry.payload)))
            .map(Bound::unbind)
            .map_err(|e| RuntimeError::CorruptPayload {
                name: entry.name.clone(),
                reason: describe_pyerr(py, &e),
            })
    })
}

impl Runtime {
    pub fn snapshot(&self) -> Result<Snapshot, RuntimeError> {
        let names = self.names();
        let manifest = self.injected_manifest();
        let mut entries = Vec::new();
        let mut skipped = Vec::new();
        Python::attach(|py| -> Result<(), RuntimeError> {
            let g = self.globals.bind(py);
            for name in &names {
                let Some(value) = g.get_item(name).map_err(RuntimeError::py)? else {
                    continue;
                };
                let origin = if manifest.iter().any(|d| d.name() == name) {
                    Origin::Injected
                } else {
                    Origin::CellCreated
                };
                match encode_value(py, name, origin, &value) {
                    Ok(e) => entries.push(e),
                    Err(s) => skipped.push(s),
                }
            }
            Ok(())
        })?;
        let kept: Vec<InjectedDescriptor> = manifest
            .into_iter()
            .filter(|d| entries.iter().any(|e| e.name == d.name()))
            .collect();
        Ok(Snapshot {
            version: SNAPSHOT_VERSION.to_string(),
            cell_counter: self.cell_counter(),
            entries,
            skipped,
            manifest: kept,
        })
    }

    /// Serialize a single binding, for cross-process transfer.
    pub fn export_entry(&self, name: &str) -> Result<Result<SnapshotEntry, SkippedEntry>, RuntimeError> {
        let value = self.get_variable(name)?;
        let origin = self.origin_of(name);
        Ok(Python::attach(|py| encode_value(py, name, origin, value.bind(py))))
    }
}

/// Rebuild a runtime from a snapshot. Entries load in snapshot order.
pub fn restore(snapshot: &Snapshot, config: RuntimeConfig) -> Result<RuntimeHandle, RuntimeError> {
    if snapshot.version != SNAPSHOT_VERSION {
        return Err(RuntimeError::UnsupportedVersion(snapshot.version.clone()));
    }
    // Preloads would collide with restored bindings; the snapshot already has them.
    let rt = create_runtime(RuntimeConfig {
        preload: Vec::new(),
        ..config
    })?;
    for entry in &snapshot.entries {
        let value = decode_value(entry)?;
        match entry.origin {
            Origin::Injected => {
                let descriptor = snapshot
                    .manifest
                    .iter()
                    .find(|d| d.name() == entry.name)
                    .cloned()
                    .unwrap_or_else(|| {
                        InjectedDescriptor::Variable(VariableDescriptor {
                            name: entry.name.clone(),
                            type_label: short_type(&entry.type_tag),
                            description: String::new(),
                        })
                    });
                rt.bind_injected(descriptor, value, true)?;
            }
            Origin::CellCreated => {
                Python::attach(|py| rt.globals.bind(py).set_item(&entry.name, value.bind(py)))
                    .map_err(RuntimeError::py)?;
            }
        }
    }
    rt.restore_counter(snapshot.cell_counter);
    Ok(rt)
}

fn short_type(tag: &str) -> String {
    tag.rsplit('.').next().unwrap_or(tag).to_string()
}
