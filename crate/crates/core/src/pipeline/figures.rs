//! Tabular data behind the diagnostic plots: density-ratio heatmaps, sampled
//! noise with its soft labels, a learned discriminator's gradient field, the
//! expected out-of-distribution label against the noise ratio, and adaptation
//! accuracy curves.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{OptimState, Tensor};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::nce::{expected_label, kde_posterior, posterior_logit, NoiseConfig, NoiseDraw, ViewClass};
use crate::numeric::sigmoid;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FigureKind {
    PosteriorGrid,
    SamplesProbs,
    GradientField,
    BetaCurve,
    AccuracyCurve,
}

impl FigureKind {
    pub const ALL: [FigureKind; 5] = [
        FigureKind::PosteriorGrid,
        FigureKind::SamplesProbs,
        FigureKind::GradientField,
        FigureKind::BetaCurve,
        FigureKind::AccuracyCurve,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FigureKind::PosteriorGrid => "posterior_grid",
            FigureKind::SamplesProbs => "samples_probs",
            FigureKind::GradientField => "gradient_field",
            FigureKind::BetaCurve => "beta_curve",
            FigureKind::AccuracyCurve => "accuracy_curve",
        }
    }
}

impl fmt::Display for FigureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FigureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FigureKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown figure kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FigureParams {
    pub sigma_s: f64,
    pub sigma_o: f64,
    /// Noise dimension for `beta_curve`.
    pub dim: usize,
    /// Number of KDE centers (or discriminator training points), uniform in `[-1, 1]²`.
    pub centers: usize,
    /// Grid points per axis.
    pub grid: usize,
    /// The grid spans `[-extent, extent]²`.
    pub extent: f64,
    /// Draws per class for `samples_probs`.
    pub samples: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub beta_step: f64,
    /// Discriminator training steps for `gradient_field`.
    pub steps: usize,
    pub seed: u64,
    /// Accuracy after `i` adaptation iterations, for `accuracy_curve`.
    pub curve: Vec<f64>,
}

impl Default for FigureParams {
    fn default() -> Self {
        FigureParams {
            sigma_s: 0.05,
            sigma_o: 1.0,
            dim: 16,
            centers: 20,
            grid: 200,
            extent: 2.0,
            samples: 500,
            beta_min: 1.0,
            beta_max: 3.0,
            beta_step: 0.01,
            steps: 300,
            seed: 0,
            curve: Vec::new(),
        }
    }
}

/// Square grid of values, row-major with `y` varying slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub n: usize,
    pub extent: f64,
    pub values: Vec<f64>,
}

impl Heatmap {
    /// Fraction of cells whose value exceeds `level`.
    pub fn area_above(&self, level: f64) -> f64 {
        self.values.iter().filter(|&&v| v > level).count() as f64 / self.values.len() as f64
    }

    /// Grayscale SVG, white at 0 and black at 1.
    pub fn to_svg(&self, cell_px: usize) -> String {
        let side = self.n * cell_px;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{side}\" height=\"{side}\" shape-rendering=\"crispEdges\">\n"
        );
        for iy in 0..self.n {
            for ix in 0..self.n {
                let v = self.values[iy * self.n + ix].clamp(0.0, 1.0);
                let g = (255.0 * (1.0 - v)).round() as u8;
                // SVG y grows downwards
                let row = self.n - 1 - iy;
                let _ = writeln!(
                    s,
                    "<rect x=\"{}\" y=\"{}\" width=\"{cell_px}\" height=\"{cell_px}\" fill=\"rgb({g},{g},{g})\"/>",
                    ix * cell_px,
                    row * cell_px
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FigureData {
    pub kind: FigureKind,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<f64>>,
    pub heatmap: Option<Heatmap>,
}

impl FigureData {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.header.iter().position(|h| *h == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        w.write_record(&self.header).map_err(csv_error)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes an SVG rendering when the figure is a heatmap; returns whether it did.
    pub fn write_svg(&self, path: impl AsRef<Path>) -> Result<bool> {
        match &self.heatmap {
            Some(h) => {
                std::fs::write(path, h.to_svg((400 / h.n).max(1)))?;
                Ok(true)
            }
            None => Ok(false),
        }
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// `n` points drawn uniformly from `[-1, 1]²`.
pub fn random_centers(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::rng(rng::derive(seed, &[rng::tag("centers")]));
    (0..n).map(|_| vec![r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]).collect()
}

fn grid_axis(p: &FigureParams) -> Result<Vec<f64>> {
    if p.grid < 2 {
        return Err(Error::invalid(format!("grid needs at least 2 points per axis, got {}", p.grid)));
    }
    if !(p.extent > 0.0 && p.extent.is_finite()) {
        return Err(Error::invalid(format!("grid extent must be positive, got {}", p.extent)));
    }
    let step = 2.0 * p.extent / (p.grid - 1) as f64;
    Ok((0..p.grid).map(|i| -p.extent + step * i as f64).collect())
}

fn posterior_grid(p: &FigureParams) -> Result<FigureData> {
    if p.centers == 0 {
        return Err(Error::invalid("posterior_grid needs at least one center"));
    }
    let centers = random_centers(p.centers, p.seed);
    let axis = grid_axis(p)?;
    let mut rows = Vec::with_capacity(axis.len() * axis.len());
    let mut values = Vec::with_capacity(rows.capacity());
    for &y in &axis {
        for &x in &axis {
            let v = kde_posterior(&[x, y], &centers, p.sigma_s, p.sigma_o)?;
            rows.push(vec![x, y, v]);
            values.push(v);
        }
    }
    Ok(FigureData {
        kind: FigureKind::PosteriorGrid,
        header: vec!["x", "y", "value"],
        rows,
        heatmap: Some(Heatmap { n: axis.len(), extent: p.extent, values }),
    })
}

fn samples_probs(p: &FigureParams) -> Result<FigureData> {
    let cfg = NoiseConfig::new(p.sigma_s, p.sigma_o, 2)?;
    let draw = NoiseDraw::sample(p.samples, &cfg, rng::derive(p.seed, &[rng::tag("samples")]))?;
    let mut rows = Vec::with_capacity(draw.len());
    for k in 0..draw.len() {
        let class = match draw.class[k] {
            ViewClass::In => 1.0,
            ViewClass::Out => 0.0,
        };
        let prob = sigmoid(posterior_logit(draw.eps_norm_sq[k], &cfg)?);
        rows.push(vec![draw.noise[2 * k], draw.noise[2 * k + 1], class, prob]);
    }
    Ok(FigureData {
        kind: FigureKind::SamplesProbs,
        header: vec!["x", "y", "in_class", "value"],
        rows,
        heatmap: None,
    })
}

/// Trains a discriminator on fixed 2-D points and returns it.
pub fn train_planar_discriminator(p: &FigureParams) -> Result<Model> {
    let mut spec = ModelSpec::mlp(2, &[2], 2, 1, 2);
    spec.discriminator.hidden = 64;
    let mut model = Model::new(spec, p.seed)?;
    let z = Tensor::from_rows(&random_centers(p.centers.max(1), p.seed))?;
    let cfg = NoiseConfig::new(p.sigma_s, p.sigma_o, 2)?.with_views(8)?;
    let mut opt = OptimState::adam(1e-2);
    for step in 0..p.steps {
        let seed = rng::derive(p.seed, &[rng::tag("disc"), step as u64]);
        model.train_discriminator_step(&z, &cfg, seed, &mut opt)?;
    }
    Ok(model)
}

fn gradient_field(p: &FigureParams) -> Result<FigureData> {
    let model = train_planar_discriminator(p)?;
    let axis = grid_axis(p)?;
    let pts: Vec<Vec<f64>> = axis.iter().flat_map(|&y| axis.iter().map(move |&x| vec![x, y])).collect();
    let (log_q, grad) = model.log_q_and_grad(&Tensor::from_rows(&pts)?)?;
    let mut rows = Vec::with_capacity(pts.len());
    for (i, pt) in pts.iter().enumerate() {
        let g = grad.row(i);
        rows.push(vec![pt[0], pt[1], log_q[i].exp(), g[0], g[1]]);
    }
    Ok(FigureData {
        kind: FigureKind::GradientField,
        header: vec!["x", "y", "value", "grad_x", "grad_y"],
        heatmap: Some(Heatmap {
            n: axis.len(),
            extent: p.extent,
            values: rows.iter().map(|r| r[2]).collect(),
        }),
        rows,
    })
}

fn beta_curve(p: &FigureParams) -> Result<FigureData> {
    if !(p.beta_step > 0.0 && p.beta_min >= 1.0 && p.beta_max >= p.beta_min) {
        return Err(Error::invalid("beta_curve needs 1 <= beta_min <= beta_max and beta_step > 0"));
    }
    if p.dim == 0 {
        return Err(Error::invalid("beta_curve needs dim >= 1"));
    }
    let n = ((p.beta_max - p.beta_min) / p.beta_step + 1e-9).floor() as usize;
    let rows = (0..=n)
        .map(|i| {
            let beta = p.beta_min + p.beta_step * i as f64;
            // at beta = 1 both kernels coincide and every view is labelled 1/2
            let label = if beta == 1.0 { 0.5 } else { expected_label(beta, p.dim)? };
            Ok(vec![beta, label])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FigureData {
        kind: FigureKind::BetaCurve,
        header: vec!["beta", "expected_label"],
        rows,
        heatmap: None,
    })
}

fn accuracy_curve(p: &FigureParams) -> Result<FigureData> {
    if p.curve.is_empty() {
        return Err(Error::invalid("accuracy_curve needs a nonempty curve"));
    }
    Ok(FigureData {
        kind: FigureKind::AccuracyCurve,
        header: vec!["iteration", "accuracy"],
        rows: p.curve.iter().enumerate().map(|(i, &a)| vec![i as f64, a]).collect(),
        heatmap: None,
    })
}

pub fn emit_figure_data(kind: FigureKind, params: &FigureParams) -> Result<FigureData> {
    match kind {
        FigureKind::PosteriorGrid => posterior_grid(params),
        FigureKind::SamplesProbs => samples_probs(params),
        FigureKind::GradientField => gradient_field(params),
        FigureKind::BetaCurve => beta_curve(params),
        FigureKind::AccuracyCurve => accuracy_curve(params),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FigureParams {
        FigureParams { grid: 60, ..FigureParams::default() }
    }

    #[test]
    fn kinds_parse() {
        for k in FigureKind::ALL {
            assert_eq!(k.name().parse::<FigureKind>().unwrap(), k);
        }
        assert!("histogram".parse::<FigureKind>().is_err());
    }

    #[test]
    fn beta_curve_crosses_half_at_one_and_decreases() {
        let f = emit_figure_data(FigureKind::BetaCurve, &FigureParams::default()).unwrap();
        let labels = f.column("expected_label").unwrap();
        assert_eq!(labels.len(), 201);
        assert_eq!(labels[0], 0.5);
        assert!(labels.windows(2).all(|w| w[1] < w[0]));
        let at2 = f.rows.iter().find(|r| (r[0] - 2.0).abs() < 1e-9).unwrap()[1];
        assert!(at2 < 1e-4, "{at2}");
    }

    #[test]
    fn wider_outer_kernel_grows_in_domain_area() {
        let area = |sigma_o: f64| {
            let p = FigureParams { sigma_o, ..small() };
            emit_figure_data(FigureKind::PosteriorGrid, &p).unwrap().heatmap.unwrap().area_above(0.5)
        };
        assert!(area(1.0) > area(0.5));
    }

    #[test]
    fn sample_probabilities_follow_the_logit() {
        let p = FigureParams { samples: 200, ..FigureParams::default() };
        let f = emit_figure_data(FigureKind::SamplesProbs, &p).unwrap();
        let cfg = NoiseConfig::new(p.sigma_s, p.sigma_o, 2).unwrap();
        assert_eq!(f.rows.len(), 400);
        for r in &f.rows {
            let want = sigmoid(posterior_logit(r[0] * r[0] + r[1] * r[1], &cfg).unwrap());
            assert!((r[3] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_and_svg_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let p = FigureParams { grid: 10, steps: 5, ..FigureParams::default() };
        let f = emit_figure_data(FigureKind::GradientField, &p).unwrap();
        f.write_csv(dir.path().join("g.csv")).unwrap();
        assert!(f.write_svg(dir.path().join("g.svg")).unwrap());
        let text = std::fs::read_to_string(dir.path().join("g.csv")).unwrap();
        assert!(text.starts_with("x,y,value,grad_x,grad_y\n"));
        assert_eq!(text.lines().count(), 101);
        let svg = std::fs::read_to_string(dir.path().join("g.svg")).unwrap();
        assert_eq!(svg.matches("<rect").count(), 100);
        assert!(emit_figure_data(FigureKind::AccuracyCurve, &FigureParams::default()).is_err());
    }
}
