//! Synthetic domain shifts with five severity levels.
//!
//! Every shift acts on the flattened per-example feature vector. Magnitudes
//! come from the fixed tables below; severity 0 is the identity and the mean
//! squared perturbation never decreases with severity.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::rng;

pub const MAX_SEVERITY: u8 = 5;

/// Additive noise standard deviation.
pub const GAUSSIAN_NOISE_STD: [f64; 6] = [0.0, 0.25, 0.5, 0.75, 1.0, 1.5];
/// Additive noise half-width.
pub const UNIFORM_NOISE_HALF_WIDTH: [f64; 6] = [0.0, 0.4, 0.8, 1.2, 1.6, 2.4];
/// Rotation angle in degrees, applied to coordinate pairs about the feature mean.
pub const ROTATION_DEGREES: [f64; 6] = [0.0, 10.0, 20.0, 30.0, 48.0, 60.0];
/// Multiplicative factor about the origin.
pub const SCALE_FACTOR: [f64; 6] = [1.0, 0.9, 0.8, 0.65, 0.5, 0.35];
/// Multiplicative factor about the feature mean.
pub const CONTRAST_FACTOR: [f64; 6] = [1.0, 0.85, 0.7, 0.55, 0.4, 0.25];
/// Additive offset.
pub const BRIGHTNESS_OFFSET: [f64; 6] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0];
/// Neighbour weight `a` of the `[a, 1 - 2a, a]` kernel along the last axis.
pub const BLUR_WEIGHT: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    GaussianNoise,
    UniformNoise,
    Rotation,
    Scale,
    Contrast,
    Brightness,
    Blur1d,
}

impl ShiftKind {
    pub const ALL: [ShiftKind; 7] = [
        ShiftKind::GaussianNoise,
        ShiftKind::UniformNoise,
        ShiftKind::Rotation,
        ShiftKind::Scale,
        ShiftKind::Contrast,
        ShiftKind::Brightness,
        ShiftKind::Blur1d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShiftKind::GaussianNoise => "gaussian_noise",
            ShiftKind::UniformNoise => "uniform_noise",
            ShiftKind::Rotation => "rotation",
            ShiftKind::Scale => "scale",
            ShiftKind::Contrast => "contrast",
            ShiftKind::Brightness => "brightness",
            ShiftKind::Blur1d => "blur_1d",
        }
    }

    /// Kind-specific magnitude at `severity`.
    pub fn magnitude(self, severity: u8) -> f64 {
        let s = usize::from(severity.min(MAX_SEVERITY));
        match self {
            ShiftKind::GaussianNoise => GAUSSIAN_NOISE_STD[s],
            ShiftKind::UniformNoise => UNIFORM_NOISE_HALF_WIDTH[s],
            ShiftKind::Rotation => ROTATION_DEGREES[s],
            ShiftKind::Scale => SCALE_FACTOR[s],
            ShiftKind::Contrast => CONTRAST_FACTOR[s],
            ShiftKind::Brightness => BRIGHTNESS_OFFSET[s],
            ShiftKind::Blur1d => BLUR_WEIGHT[s],
        }
    }
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShiftKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown shift kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub severity: u8,
}

impl ShiftSpec {
    pub fn new(kind: ShiftKind, severity: u8) -> Result<Self> {
        let s = ShiftSpec { kind, severity };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.severity > MAX_SEVERITY {
            return Err(Error::invalid(format!(
                "severity must lie in 0..={MAX_SEVERITY}, got {}",
                self.severity
            )));
        }
        Ok(())
    }
}

fn feature_means(x: &Tensor) -> Vec<f64> {
    let f = x.cols();
    let mut m = vec![0.0; f];
    for row in x.data().chunks(f) {
        m.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|a| *a /= x.rows() as f64);
    m
}

/// Applies `shift` to every input; labels are untouched.
pub fn apply_shift(ds: &Dataset, shift: &ShiftSpec, seed: u64) -> Result<Dataset> {
    shift.validate()?;
    let x = ds.inputs();
    let f = x.cols();
    let mag = shift.kind.magnitude(shift.severity);
    let mut data = x.data().to_vec();

    if shift.severity > 0 {
        match shift.kind {
            ShiftKind::GaussianNoise => {
                let mut r = rng::rng(rng::derive(seed, &[rng::tag("gaussian_noise")]));
                for v in &mut data {
                    let z: f64 = StandardNormal.sample(&mut r);
                    *v += mag * z;
                }
            }
            ShiftKind::UniformNoise => {
                let mut r = rng::rng(rng::derive(seed, &[rng::tag("uniform_noise")]));
                let unit = rand_distr::Uniform::new_inclusive(-1.0, 1.0);
                for v in &mut data {
                    *v += mag * unit.sample(&mut r);
                }
            }
            ShiftKind::Rotation => {
                let (sin, cos) = mag.to_radians().sin_cos();
                let mean = feature_means(x);
                for row in data.chunks_mut(f) {
                    for p in 0..f / 2 {
                        let (i, j) = (2 * p, 2 * p + 1);
                        let (a, b) = (row[i] - mean[i], row[j] - mean[j]);
                        row[i] = mean[i] + cos * a - sin * b;
                        row[j] = mean[j] + sin * a + cos * b;
                    }
                }
            }
            ShiftKind::Scale => data.iter_mut().for_each(|v| *v *= mag),
            ShiftKind::Contrast => {
                let mean = feature_means(x);
                for row in data.chunks_mut(f) {
                    row.iter_mut().zip(&mean).for_each(|(v, m)| *v = m + mag * (*v - m));
                }
            }
            ShiftKind::Brightness => data.iter_mut().for_each(|v| *v += mag),
            ShiftKind::Blur1d => {
                let len = *x.shape().last().expect("nonempty shape");
                let src = data.clone();
                for (dst, line) in data.chunks_mut(len).zip(src.chunks(len)) {
                    for k in 0..len {
                        let left = line[k.saturating_sub(1)];
                        let right = line[(k + 1).min(len - 1)];
                        dst[k] = mag * left + (1.0 - 2.0 * mag) * line[k] + mag * right;
                    }
                }
            }
        }
    }

    let meta = DatasetMeta {
        domain: if shift.severity == 0 {
            ds.meta.domain.clone()
        } else {
            format!("{}+{}{}", ds.meta.domain, shift.kind, shift.severity)
        },
        shift: Some(*shift),
    };
    let shifted = ds.with_inputs(Tensor::new(x.shape().to_vec(), data)?, meta)?;
    if shift.severity == 0 {
        // identity: keep the original metadata as well
        return Ok(Dataset { meta: ds.meta.clone(), ..shifted });
    }
    Ok(shifted)
}

/// Mean over examples of the squared perturbation norm.
pub fn mean_sq_perturbation(a: &Dataset, b: &Dataset) -> f64 {
    let total: f64 = a
        .inputs()
        .data()
        .iter()
        .zip(b.inputs().data())
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    total / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::make_blobs;

    #[test]
    fn severity_zero_is_identity() {
        let ds = make_blobs(3, 10, 2, 4.0, 1).unwrap();
        for kind in ShiftKind::ALL {
            assert_eq!(apply_shift(&ds, &ShiftSpec::new(kind, 0).unwrap(), 3).unwrap(), ds);
        }
    }

    #[test]
    fn labels_preserved_and_severity_bounded() {
        let ds = make_blobs(3, 10, 2, 4.0, 1).unwrap();
        for kind in ShiftKind::ALL {
            let s = apply_shift(&ds, &ShiftSpec::new(kind, 5).unwrap(), 3).unwrap();
            assert_eq!(s.labels(), ds.labels());
        }
        assert!(ShiftSpec::new(ShiftKind::Scale, 6).is_err());
        assert!("fog".parse::<ShiftKind>().is_err());
        assert_eq!("blur_1d".parse::<ShiftKind>().unwrap(), ShiftKind::Blur1d);
    }

    #[test]
    fn gaussian_noise_variance_matches_table() {
        let ds = make_blobs(2, 5000, 2, 4.0, 8).unwrap();
        for sev in 1..=5u8 {
            let s = apply_shift(&ds, &ShiftSpec::new(ShiftKind::GaussianNoise, sev).unwrap(), 9).unwrap();
            let deltas: Vec<f64> = s.inputs().data().iter().zip(ds.inputs().data()).map(|(a, b)| a - b).collect();
            let n = deltas.len() as f64;
            let var = deltas.iter().map(|d| d * d).sum::<f64>() / n;
            let sigma2 = GAUSSIAN_NOISE_STD[usize::from(sev)].powi(2);
            // the sample second moment of N(0, s²) has standard error s²·sqrt(2/n)
            let se = sigma2 * (2.0 / n).sqrt();
            assert!((var - sigma2).abs() < 3.0 * se, "severity {sev}: {var} vs {sigma2}");
        }
    }

    #[test]
    fn rotation_is_an_isometry() {
        let ds = make_blobs(3, 15, 2, 4.0, 2).unwrap();
        let s = apply_shift(&ds, &ShiftSpec::new(ShiftKind::Rotation, 3).unwrap(), 0).unwrap();
        let dist = |d: &Dataset, i: usize, j: usize| {
            d.inputs().row(i).iter().zip(d.inputs().row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        for i in 0..ds.len() {
            for j in 0..ds.len() {
                assert!((dist(&ds, i, j) - dist(&s, i, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn perturbation_is_monotone_in_severity() {
        for seed in 0..10 {
            let ds = make_blobs(3, 30, 4, 4.0, seed).unwrap();
            for kind in ShiftKind::ALL {
                let mut last = 0.0;
                for sev in 0..=MAX_SEVERITY {
                    let s = apply_shift(&ds, &ShiftSpec::new(kind, sev).unwrap(), seed).unwrap();
                    let p = mean_sq_perturbation(&ds, &s);
                    assert!(p >= last - 1e-12, "{kind} severity {sev}: {p} < {last}");
                    last = p;
                }
            }
        }
    }
}
