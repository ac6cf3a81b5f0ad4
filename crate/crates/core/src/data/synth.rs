use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::data::{Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::rng;

/// Radii of the inner and outer ring produced by [`make_rings`].
pub const RING_RADII: [f64; 2] = [1.0, 2.0];

/// Class means of [`make_blobs`]: evenly spaced on a circle in the first two
/// coordinates so that neighbouring means are `separation` apart (on a line
/// when `dim == 1`).
pub fn blob_means(num_classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|k| {
            let mut m = vec![0.0; dim];
            if dim == 1 {
                m[0] = separation * (k as f64 - (num_classes as f64 - 1.0) / 2.0);
            } else {
                let radius = separation / (2.0 * (PI / num_classes as f64).sin());
                let angle = 2.0 * PI * k as f64 / num_classes as f64;
                m[0] = radius * angle.cos();
                m[1] = radius * angle.sin();
            }
            m
        })
        .collect()
}

fn shuffled(rows: Vec<(Vec<f64>, usize)>, seed: u64, num_classes: usize, domain: &str) -> Result<Dataset> {
    let mut rows = rows;
    rows.shuffle(&mut rng::rng(rng::derive(seed, &[rng::tag("shuffle")])));
    let dim = rows[0].0.len();
    let labels = rows.iter().map(|r| r.1).collect();
    let data = rows.into_iter().flat_map(|r| r.0).collect::<Vec<_>>();
    let n = data.len() / dim;
    Dataset::new(
        Tensor::matrix(n, dim, data)?,
        labels,
        num_classes,
        DatasetMeta {
            domain: domain.to_string(),
            shift: None,
        },
    )
}

/// Unit-variance isotropic Gaussian clusters around [`blob_means`], in shuffled order.
pub fn make_blobs(num_classes: usize, n_per_class: usize, dim: usize, class_separation: f64, seed: u64) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::invalid("make_blobs needs at least two classes"));
    }
    if n_per_class == 0 || dim == 0 {
        return Err(Error::invalid("make_blobs needs n_per_class >= 1 and dim >= 1"));
    }
    let means = blob_means(num_classes, dim, class_separation);
    let mut r = rng::rng(rng::derive(seed, &[rng::tag("blobs")]));
    let mut rows = Vec::with_capacity(num_classes * n_per_class);
    for (k, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            let x = mean
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    m + z
                })
                .collect();
            rows.push((x, k));
        }
    }
    shuffled(rows, seed, num_classes, "blobs")
}

/// Two concentric rings in the plane, labelled by ring; `noise` is the
/// standard deviation of the radial jitter.
pub fn make_rings(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::invalid(format!("make_rings needs n >= 10, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::invalid("ring noise must be finite and >= 0"));
    }
    let mut r = rng::rng(rng::derive(seed, &[rng::tag("rings")]));
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let theta = r.gen_range(0.0..2.0 * PI);
        let z: f64 = StandardNormal.sample(&mut r);
        let radius = RING_RADII[label] + noise * z;
        rows.push((vec![radius * theta.cos(), radius * theta.sin()], label));
    }
    shuffled(rows, seed, 2, "rings")
}
