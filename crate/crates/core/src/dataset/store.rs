//! Where variant images live once a dataset is built.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::DatasetError;
use crate::image::Image;

pub fn reference_path(reference_id: &str) -> String {
    format!("images/{reference_id}/reference.png")
}

pub fn variant_path(reference_id: &str, variant_id: &str) -> String {
    format!("images/{reference_id}/variants/{variant_id}.png")
}

pub trait ImageStore: Sync {
    fn put(&self, rel_path: &str, img: &Image) -> Result<(), DatasetError>;
}

pub trait ImageSource: Sync {
    fn load(&self, rel_path: &str) -> Result<Image, DatasetError>;
}

/// PNG files under a root directory (normally the manifest's directory).
#[derive(Debug, Clone)]
pub struct DirStore {
    root: PathBuf,
}

impl DirStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl ImageStore for DirStore {
    fn put(&self, rel_path: &str, img: &Image) -> Result<(), DatasetError> {
        let path = self.root.join(rel_path);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
        }
        img.save_png(&path).map_err(DatasetError::Image)
    }
}

impl ImageSource for DirStore {
    fn load(&self, rel_path: &str) -> Result<Image, DatasetError> {
        Image::load_png(self.root.join(rel_path)).map_err(DatasetError::Image)
    }
}

/// In-memory store keyed by relative path.
#[derive(Debug, Default)]
pub struct MemoryStore {
    images: Mutex<BTreeMap<String, Image>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.images.lock().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn paths(&self) -> Vec<String> {
        self.images.lock().expect("store lock").keys().cloned().collect()
    }
}

impl ImageStore for MemoryStore {
    fn put(&self, rel_path: &str, img: &Image) -> Result<(), DatasetError> {
        self.images
            .lock()
            .expect("store lock")
            .insert(rel_path.to_owned(), img.clone());
        Ok(())
    }
}

impl ImageSource for MemoryStore {
    fn load(&self, rel_path: &str) -> Result<Image, DatasetError> {
        self.images
            .lock()
            .expect("store lock")
            .get(rel_path)
            .cloned()
            .ok_or_else(|| DatasetError::MissingImage(rel_path.to_owned()))
    }
}
