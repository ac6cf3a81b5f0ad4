use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::npy::{read_npy, write_npy, Dtype};
use crate::data::{Dataset, DatasetMeta, ShiftSpec};
use crate::error::{Error, Result};
use crate::autodiff::Tensor;

/// JSON description of an NPY-backed dataset. Relative paths are resolved
/// against the directory holding the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub inputs: PathBuf,
    pub labels: PathBuf,
    pub domain: String,
    #[serde(default)]
    pub shift: Option<ShiftSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

impl DatasetManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Loads the arrays; `base` is the directory relative paths refer to.
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let inputs = read_npy(resolve(&self.inputs))?;
        let raw = read_npy(resolve(&self.labels))?;
        let labels = raw
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < usize::MAX as f64 {
                    Ok(v as usize)
                } else {
                    Err(Error::invalid(format!("label {v} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let num_classes = self
            .num_classes
            .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        let inputs = if inputs.shape().len() == 1 {
            inputs.reshape(vec![inputs.numel(), 1])?
        } else {
            inputs
        };
        Dataset::new(
            inputs,
            labels,
            num_classes,
            DatasetMeta {
                domain: self.domain.clone(),
                shift: self.shift,
            },
        )
    }

    /// Loads the dataset described by the manifest file at `path`.
    pub fn load_file(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let m = Self::read(path)?;
        m.load(path.parent().unwrap_or(Path::new(".")))
    }

    /// Writes `ds` as `<stem>_inputs.npy`, `<stem>_labels.npy` and `<stem>.json` in `dir`.
    pub fn save(ds: &Dataset, dir: &Path, stem: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let inputs = PathBuf::from(format!("{stem}_inputs.npy"));
        let labels = PathBuf::from(format!("{stem}_labels.npy"));
        write_npy(dir.join(&inputs), ds.inputs(), Dtype::F8)?;
        let y = Tensor::vector(ds.labels().iter().map(|&l| l as f64).collect())?;
        write_npy(dir.join(&labels), &y, Dtype::F8)?;
        let manifest = DatasetManifest {
            inputs,
            labels,
            domain: ds.meta.domain.clone(),
            shift: ds.meta.shift,
            num_classes: Some(ds.num_classes()),
        };
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, ShiftKind};

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = make_blobs(3, 7, 2, 4.0, 3).unwrap();
        ds.meta.shift = Some(ShiftSpec::new(ShiftKind::Rotation, 2).unwrap());
        let path = DatasetManifest::save(&ds, dir.path(), "target").unwrap();
        let back = DatasetManifest::load_file(&path).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn rejects_unknown_fields_and_bad_labels() {
        let err = serde_json::from_str::<DatasetManifest>(r#"{"inputs":"a","labels":"b","domain":"x","extra":1}"#);
        assert!(err.is_err());
        let dir = tempfile::tempdir().unwrap();
        write_npy(dir.path().join("x.npy"), &Tensor::zeros(&[2, 2]), Dtype::F8).unwrap();
        write_npy(dir.path().join("y.npy"), &Tensor::vector(vec![0.0, 0.5]).unwrap(), Dtype::F8).unwrap();
        let m = DatasetManifest {
            inputs: "x.npy".into(),
            labels: "y.npy".into(),
            domain: "d".into(),
            shift: None,
            num_classes: None,
        };
        assert!(m.load(dir.path()).is_err());
    }
}
