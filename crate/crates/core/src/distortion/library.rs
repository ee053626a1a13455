//! Distortion library config: a versioned TOML file with one `[[spec]]`
//! table per distortion.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DistortionError, DistortionSpec};

pub const LIBRARY_VERSION: u32 = 1;

const DEFAULT_LIBRARY: &str = include_str!("../../data/distortion_library_v1.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub id: String,
    #[serde(flatten)]
    pub spec: DistortionSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Library {
    pub version: u32,
    #[serde(rename = "spec", default)]
    pub entries: Vec<LibraryEntry>,
}

impl Library {
    pub fn from_entries(entries: Vec<LibraryEntry>) -> Result<Self, DistortionError> {
        let lib = Self {
            version: LIBRARY_VERSION,
            entries,
        };
        lib.validate()?;
        Ok(lib)
    }

    pub fn parse(text: &str) -> Result<Self, DistortionError> {
        let lib: Library =
            toml::from_str(text).map_err(|e| DistortionError::Library(e.to_string()))?;
        lib.validate()?;
        Ok(lib)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DistortionError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| DistortionError::Library(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("library serializes")
    }

    /// Checks version, id uniqueness, and every spec's parameters.
    pub fn validate(&self) -> Result<(), DistortionError> {
        if self.version != LIBRARY_VERSION {
            return Err(DistortionError::Library(format!(
                "unsupported library version {}",
                self.version
            )));
        }
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if e.id.is_empty() || e.id.contains(['/', '\\']) {
                return Err(DistortionError::Library(format!("bad variant id {:?}", e.id)));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(DistortionError::Library(format!("duplicate id `{}`", e.id)));
            }
            e.spec.resolve().map_err(|err| DistortionError::Variant {
                id: e.id.clone(),
                source: Box::new(err),
            })?;
        }
        Ok(())
    }
}

/// The bundled 66-entry library.
pub fn default_library() -> Library {
    Library::parse(DEFAULT_LIBRARY).expect("bundled library is valid")
}
