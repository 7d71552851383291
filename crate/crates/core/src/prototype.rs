//! Prototype extraction: visual prototypes are masked means of feature cells
//! over the regions of a split support mask; textual prototypes are ingested
//! class-name and description embeddings, with the class name kept as its own
//! prototype in slot 0.

use serde::{Deserialize, Serialize};

use crate::partition::{m_splitting, BinaryMask};
use crate::{ClassId, Error, Result};

/// Dense per-cell feature grid, the stand-in for a frozen encoder output.
/// Values are row-major by cell, `dim` contiguous channels per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        FeatureMap {
            height,
            width,
            dim,
            values: vec![0.0; height * width * dim],
        }
    }

    pub fn from_values(height: usize, width: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if height * width == 0 || dim == 0 {
            return Err(Error::shape(
                "feature map dims must be positive".to_string(),
            ));
        }
        if values.len() != height * width * dim {
            return Err(Error::shape(format!(
                "feature map {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape(
                "feature map contains non-finite values".to_string(),
            ));
        }
        Ok(FeatureMap {
            height,
            width,
            dim,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let base = (y * self.width + x) * self.dim;
        &self.values[base..base + self.dim]
    }

    pub fn cell_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let base = (y * self.width + x) * self.dim;
        &mut self.values[base..base + self.dim]
    }

    /// Average pooling by an integer factor; trailing blocks may be smaller
    /// when the grid does not divide evenly.
    pub fn avg_pool(&self, factor: usize) -> FeatureMap {
        assert!(factor >= 1);
        let h = self.height.div_ceil(factor);
        let w = self.width.div_ceil(factor);
        let mut out = FeatureMap::zeros(h, w, self.dim);
        for cy in 0..h {
            for cx in 0..w {
                let y1 = ((cy + 1) * factor).min(self.height);
                let x1 = ((cx + 1) * factor).min(self.width);
                let mut count = 0.0;
                let mut acc = vec![0.0; self.dim];
                for y in cy * factor..y1 {
                    for x in cx * factor..x1 {
                        for (a, &v) in acc.iter_mut().zip(self.cell(x, y)) {
                            *a += v;
                        }
                        count += 1.0;
                    }
                }
                for (o, a) in out.cell_mut(cx, cy).iter_mut().zip(&acc) {
                    *o = a / count;
                }
            }
        }
        out
    }
}

/// Feature-resolution mask with weights in `[0, 1]`, the pooled form of a
/// pixel-resolution [`BinaryMask`].
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    height: usize,
    width: usize,
    weights: Vec<f64>,
}

impl SoftMask {
    pub fn from_weights(height: usize, width: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != height * width {
            return Err(Error::shape(format!(
                "soft mask {height}x{width} needs {} weights, got {}",
                height * width,
                weights.len()
            )));
        }
        if weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
            return Err(Error::shape(
                "soft mask weights must lie in [0,1]".to_string(),
            ));
        }
        Ok(SoftMask {
            height,
            width,
            weights,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, x: usize, y: usize) -> f64 {
        self.weights[y * self.width + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Textual,
    Visual,
}

/// One prototype vector with its modality and per-modality slot index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeEntry {
    pub vector: Vec<f64>,
    pub modality: Modality,
    pub slot: usize,
}

/// Ordered prototypes for one class. Textual slot 0 is always the class-name
/// embedding; visual slots follow the region selection order of the split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub class_id: ClassId,
    pub entries: Vec<PrototypeEntry>,
}

impl PrototypeSet {
    pub fn dim(&self) -> usize {
        self.entries.first().map_or(0, |e| e.vector.len())
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(|e| e.vector.as_slice())
    }
}

/// Encoder outputs for one class, ingested from files: the class-name
/// embedding plus `n-1` description embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub class_id: ClassId,
    pub name_embedding: Vec<f64>,
    pub description_embeddings: Vec<Vec<f64>>,
}

/// Pools a pixel mask down to a feature grid. Each cell's weight is the mean
/// of the mask over the pixel area it covers, with fractional-area weighting
/// when the grids do not divide evenly.
pub fn downsample_mask(mask: &BinaryMask, h: usize, w: usize) -> Result<SoftMask> {
    if h == 0 || w == 0 {
        return Err(Error::shape(
            "downsample target dims must be positive".to_string(),
        ));
    }
    if h > mask.height() || w > mask.width() {
        return Err(Error::shape(format!(
            "downsample target {h}x{w} exceeds mask {}x{}",
            mask.height(),
            mask.width()
        )));
    }
    let sy = mask.height() as f64 / h as f64;
    let sx = mask.width() as f64 / w as f64;
    let mut weights = Vec::with_capacity(h * w);
    for cy in 0..h {
        let (y0, y1) = (cy as f64 * sy, (cy + 1) as f64 * sy);
        for cx in 0..w {
            let (x0, x1) = (cx as f64 * sx, (cx + 1) as f64 * sx);
            let mut covered = 0.0;
            for py in y0.floor() as usize..(y1.ceil() as usize).min(mask.height()) {
                let oy = (py as f64 + 1.0).min(y1) - (py as f64).max(y0);
                if oy <= 0.0 {
                    continue;
                }
                for px in x0.floor() as usize..(x1.ceil() as usize).min(mask.width()) {
                    let ox = (px as f64 + 1.0).min(x1) - (px as f64).max(x0);
                    if ox > 0.0 && mask.get(px, py) {
                        covered += oy * ox;
                    }
                }
            }
            weights.push((covered / (sy * sx)).clamp(0.0, 1.0));
        }
    }
    SoftMask::from_weights(h, w, weights)
}

/// Weighted mean of feature cells with the mask weights normalized to sum 1.
pub fn masked_mean_prototype(f: &FeatureMap, m: &SoftMask) -> Result<Vec<f64>> {
    if f.height() != m.height() || f.width() != m.width() {
        return Err(Error::shape(format!(
            "feature grid {}x{} vs mask grid {}x{}",
            f.height(),
            f.width(),
            m.height(),
            m.width()
        )));
    }
    let total: f64 = m.weights().iter().sum();
    if total == 0.0 {
        return Err(Error::EmptySupport);
    }
    let mut acc = vec![0.0; f.dim()];
    for y in 0..f.height() {
        for x in 0..f.width() {
            let w = m.weight(x, y);
            if w == 0.0 {
                continue;
            }
            for (a, &v) in acc.iter_mut().zip(f.cell(x, y)) {
                *a += w * v;
            }
        }
    }
    for a in &mut acc {
        *a /= total;
    }
    Ok(acc)
}

/// Splits the pixel mask into `n` regions, pools each region to the feature
/// grid and takes its masked mean. Entries follow the center selection order.
pub fn visual_prototypes(
    class_id: ClassId,
    f: &FeatureMap,
    mask: &BinaryMask,
    n: usize,
    seed: u64,
) -> Result<PrototypeSet> {
    let partition = m_splitting(mask, n, seed)?;
    let mut entries = Vec::with_capacity(n);
    for (slot, part) in partition.parts.iter().enumerate() {
        let soft = downsample_mask(part, f.height(), f.width())?;
        let vector = masked_mean_prototype(f, &soft)?;
        entries.push(PrototypeEntry {
            vector,
            modality: Modality::Visual,
            slot,
        });
    }
    Ok(PrototypeSet { class_id, entries })
}

/// Lays out the ingested embeddings as prototypes: the class name in slot 0,
/// then the descriptions in file order.
pub fn textual_prototypes(rec: &EmbeddingRecord) -> Result<PrototypeSet> {
    let dim = rec.name_embedding.len();
    if rec.description_embeddings.iter().any(|d| d.len() != dim) {
        return Err(Error::shape(
            "description embedding dim differs from name embedding".to_string(),
        ));
    }
    let mut entries = vec![PrototypeEntry {
        vector: rec.name_embedding.clone(),
        modality: Modality::Textual,
        slot: 0,
    }];
    for (i, d) in rec.description_embeddings.iter().enumerate() {
        entries.push(PrototypeEntry {
            vector: d.clone(),
            modality: Modality::Textual,
            slot: i + 1,
        });
    }
    Ok(PrototypeSet {
        class_id: rec.class_id,
        entries,
    })
}
