//! Embedding records, datasets, and their on-disk carriers.

pub mod store;
pub mod synth;
pub mod tables;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One backbone layer's output for an image.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerEmbedding {
    /// Global summary token, `[d_layer]`.
    pub cls: Tensor,
    /// Patch-token grid, `[h_p, w_p, d_layer]`.
    pub patches: Tensor,
}

/// Frozen backbone output for one image: the last L layers' patch grids and
/// [CLS] tokens. All layers share the grid and width.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub image_id: u64,
    pub layers: Vec<LayerEmbedding>,
}

impl EmbeddingRecord {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn grid(&self) -> (usize, usize) {
        let s = self.layers[0].patches.shape();
        (s[0], s[1])
    }

    pub fn d_layer(&self) -> usize {
        self.layers[0].cls.shape()[0]
    }

    /// Width of the per-token features after concatenating all layers.
    pub fn d_model(&self) -> usize {
        self.n_layers() * self.d_layer()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::data("embedding record without layers"));
        }
        let (h, w) = self.grid();
        let d = self.d_layer();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.cls.shape() != [d] {
                return Err(Error::shape(format!(
                    "layer {i} cls shape {:?}, expected [{d}]",
                    layer.cls.shape()
                )));
            }
            if layer.patches.shape() != [h, w, d] {
                return Err(Error::shape(format!(
                    "layer {i} patch shape {:?}, expected [{h}, {w}, {d}]",
                    layer.patches.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Records with an aligned binary label matrix.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<EmbeddingRecord>,
    /// Row-major `[n_images, n_findings]`.
    pub labels: Vec<u8>,
    pub finding_names: Vec<String>,
}

impl Dataset {
    pub fn new(records: Vec<EmbeddingRecord>, labels: Vec<u8>, finding_names: Vec<String>) -> Result<Self> {
        let n = records.len();
        let m = finding_names.len();
        if labels.len() != n * m {
            return Err(Error::data(format!(
                "label matrix {} entries for {n} images x {m} findings",
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::data("labels must be 0 or 1"));
        }
        let ds = Dataset { records, labels, finding_names };
        ds.validate_homogeneous()?;
        Ok(ds)
    }

    fn validate_homogeneous(&self) -> Result<()> {
        if self.records.is_empty() {
            return Ok(());
        }
        self.records[0].validate()?;
        let (h, w) = self.records[0].grid();
        let (l, d) = (self.records[0].n_layers(), self.records[0].d_layer());
        for r in &self.records {
            r.validate()?;
            if r.grid() != (h, w) || r.n_layers() != l || r.d_layer() != d {
                return Err(Error::data(format!(
                    "inhomogeneous record {}: grid {:?}, {} layers, d_layer {}",
                    r.image_id,
                    r.grid(),
                    r.n_layers(),
                    r.d_layer()
                )));
            }
        }
        Ok(())
    }

    pub fn n_images(&self) -> usize {
        self.records.len()
    }

    pub fn n_findings(&self) -> usize {
        self.finding_names.len()
    }

    pub fn image_ids(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.image_id).collect()
    }

    pub fn label_row(&self, i: usize) -> &[u8] {
        let m = self.n_findings();
        &self.labels[i * m..(i + 1) * m]
    }

    /// Error when the two datasets share any image id.
    pub fn ensure_disjoint(&self, other: &Dataset) -> Result<()> {
        let ids: std::collections::HashSet<u64> = self.image_ids().into_iter().collect();
        for r in &other.records {
            if ids.contains(&r.image_id) {
                return Err(Error::data(format!(
                    "image id {} appears in both splits",
                    r.image_id
                )));
            }
        }
        Ok(())
    }

    /// Concatenate two disjoint datasets with identical finding lists.
    pub fn union(&self, other: &Dataset) -> Result<Dataset> {
        self.ensure_disjoint(other)?;
        if self.finding_names != other.finding_names {
            return Err(Error::data("cannot union datasets with different findings"));
        }
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Dataset::new(records, labels, self.finding_names.clone())
    }
}
