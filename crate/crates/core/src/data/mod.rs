//! Synthetic datasets, manifests, images and weight files.

pub mod image_io;
pub mod manifest;
pub mod synthetic;
pub mod weights;

use std::path::Path;

use loda_tensor::Tensor;

use crate::error::{Error, Result};
use manifest::{read_manifest, Manifest};

/// Images as normalized `(3, H, W)` tensors with their quality labels.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub names: Vec<String>,
    pub images: Vec<Tensor>,
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(&mut self, name: String, image: Tensor, label: f64) {
        self.names.push(name);
        self.images.push(image);
        self.labels.push(label);
    }

    /// The rows at `indices`, in that order. Image payloads are shared.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut d = Dataset::default();
        for &i in indices {
            d.push(self.names[i].clone(), self.images[i].clone(), self.labels[i]);
        }
        d
    }

    /// Load every image listed in a manifest (paths relative to its folder).
    pub fn from_manifest(path: &Path) -> Result<Dataset> {
        let m = read_manifest(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Dataset::load_rows(&m, dir)
    }

    pub fn load_rows(m: &Manifest, dir: &Path) -> Result<Dataset> {
        let mut d = Dataset::default();
        for row in &m.rows {
            let img = image_io::load_ppm(&dir.join(&row.path))?;
            d.push(row.path.clone(), image_io::to_tensor(&img), row.mos);
        }
        if d.is_empty() {
            return Err(Error::Input("manifest lists no images".into()));
        }
        Ok(d)
    }

    /// In-memory synthetic dataset (no files written).
    pub fn synthetic(data_cfg: &crate::config::DataConfig, seed: u64) -> Result<Dataset> {
        let mut d = Dataset::default();
        for s in synthetic::generate_samples(data_cfg, seed)? {
            d.push(s.name, image_io::to_tensor(&s.image), s.mos);
        }
        Ok(d)
    }
}
