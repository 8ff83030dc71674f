//! Shared clip containers: frames as float RGB in [0,1] plus integer label
//! maps where 0 is background and k is object k.

use ndarray::{Array2, Array3};

use crate::error::{Result, VosError};

/// One annotated video clip.
#[derive(Clone)]
pub struct Clip {
    pub id: String,
    /// (3, h, w) per frame, values in [0, 1].
    pub frames: Vec<Array3<f64>>,
    /// (h, w) per frame; same length as `frames`.
    pub labels: Vec<Array2<u8>>,
    pub n_objects: u8,
}

impl Clip {
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() || self.frames.len() != self.labels.len() {
            return Err(VosError::Dataset(format!(
                "clip {}: {} frames vs {} label maps",
                self.id,
                self.frames.len(),
                self.labels.len()
            )));
        }
        let (_, h, w) = self.frames[0].dim();
        for (i, (f, l)) in self.frames.iter().zip(&self.labels).enumerate() {
            if f.dim() != (3, h, w) || l.dim() != (h, w) {
                return Err(VosError::Dataset(format!(
                    "clip {}: frame {i} has inconsistent shape",
                    self.id
                )));
            }
        }
        for l in &self.labels {
            if let Some(&v) = l.iter().find(|&&v| v > self.n_objects) {
                return Err(VosError::Dataset(format!(
                    "clip {}: label {v} exceeds object count {}",
                    self.id, self.n_objects
                )));
            }
        }
        Ok(())
    }

    pub fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.frames[0].dim();
        (h, w)
    }
}

/// Binary mask of one object id within a label map.
pub fn object_mask(labels: &Array2<u8>, id: u8) -> Array2<f64> {
    labels.mapv(|v| if v == id { 1.0 } else { 0.0 })
}

/// Object ids with at least one pixel in the label map, ascending.
pub fn present_objects(labels: &Array2<u8>, n_objects: u8) -> Vec<u8> {
    (1..=n_objects)
        .filter(|&id| labels.iter().any(|&v| v == id))
        .collect()
}

/// A train/validation split of clips.
pub struct Dataset {
    pub train: Vec<Clip>,
    pub val: Vec<Clip>,
}
