//! Labelled datasets: synthetic generators, parameterized domain shifts, and
//! NPY-backed ingestion of externally prepared arrays.

pub mod manifest;
pub mod npy;
pub mod shift;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use manifest::DatasetManifest;
pub use shift::{apply_shift, ShiftKind, ShiftSpec};
pub use synth::{blob_means, make_blobs, make_rings, RING_RADII};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub domain: String,
    #[serde(default)]
    pub shift: Option<ShiftSpec>,
}

/// `N` examples of shape `[C]` or `[C, W, H]` with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, meta: DatasetMeta) -> Result<Self> {
        if !matches!(inputs.shape().len(), 2 | 4) {
            return Err(Error::invalid(format!(
                "dataset inputs must be N×C or N×C×W×H, got {:?}",
                inputs.shape()
            )));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                lhs: inputs.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {num_classes} classes")));
        }
        if !inputs.all_finite() {
            return Err(Error::invalid("dataset inputs must be finite"));
        }
        Ok(Dataset { inputs, labels, num_classes, meta })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Per-example shape (`[C]` or `[C, W, H]`).
    pub fn example_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Inputs and labels of the selected examples, in the given order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let f = self.inputs.cols();
        let mut data = Vec::with_capacity(indices.len() * f);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("example index {i} out of range")));
            }
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// Consecutive batches of at most `batch_size` examples, in dataset order.
    pub fn chunks(&self, batch_size: usize) -> impl Iterator<Item = Vec<usize>> + '_ {
        let n = self.len();
        (0..n.div_ceil(batch_size.max(1))).map(move |b| (b * batch_size..((b + 1) * batch_size).min(n)).collect())
    }

    pub(crate) fn with_inputs(&self, inputs: Tensor, meta: DatasetMeta) -> Result<Self> {
        Dataset::new(inputs, self.labels.clone(), self.num_classes, meta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invariants_checked() {
        let x = Tensor::zeros(&[3, 2]);
        assert!(Dataset::new(x.clone(), vec![0, 1], 2, DatasetMeta::default()).is_err());
        assert!(Dataset::new(x.clone(), vec![0, 1, 2], 2, DatasetMeta::default()).is_err());
        let ds = Dataset::new(x, vec![0, 1, 1], 2, DatasetMeta::default()).unwrap();
        assert_eq!(ds.chunks(2).collect::<Vec<_>>(), vec![vec![0, 1], vec![2]]);
        let mut bad = Tensor::zeros(&[1, 2]);
        bad.data_mut()[0] = f64::NAN;
        assert!(Dataset::new(bad, vec![0], 2, DatasetMeta::default()).is_err());
    }

    #[test]
    fn batch_keeps_image_shape() {
        let x = Tensor::new(vec![3, 1, 2, 2], (0..12).map(f64::from).collect()).unwrap();
        let ds = Dataset::new(x, vec![0, 1, 0], 2, DatasetMeta::default()).unwrap();
        let (b, y) = ds.batch(&[2, 0]).unwrap();
        assert_eq!(b.shape(), &[2, 1, 2, 2]);
        assert_eq!(b.data()[..4], [8.0, 9.0, 10.0, 11.0]);
        assert_eq!(y, vec![0, 0]);
    }
}
