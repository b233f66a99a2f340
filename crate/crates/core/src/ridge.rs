//! Closed-form per-pixel Ridge regression from embedding bands to height.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{io_at, Error, Result};
use crate::grid::{Grid, GridData};
use crate::preprocess::PairedGrid;

pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_SUBSAMPLE: usize = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Subsample {
    pub max_pixels: usize,
    pub seed: u64,
}

impl Default for Subsample {
    fn default() -> Self {
        Subsample {
            max_pixels: DEFAULT_SUBSAMPLE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    pub lambda: f64,
    pub beta: Vec<f64>,
    pub intercept: f64,
    pub feature_mean: Vec<f64>,
    pub target_mean: f64,
}

/// In-place Cholesky `A = L Lᵀ` of a row-major `n x n` matrix (lower triangle).
pub fn cholesky(a: &mut [f64], n: usize) -> Result<()> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Singular(format!("normal matrix not positive definite at pivot {j}")));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    Ok(())
}

/// Solves `L Lᵀ x = b` given the factor from [`cholesky`].
pub fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    y
}

fn features_f64(g: &Grid) -> Vec<f64> {
    match g.data() {
        GridData::Float64(v) => v.clone(),
        _ => g.to_f32_vec().into_iter().map(f64::from).collect(),
    }
}

/// Centered normal equations solved by Cholesky; the intercept is not penalized.
pub fn fit(pair: &PairedGrid, lambda: f64, subsample: Option<Subsample>) -> Result<RidgeModel> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let c = pair.inputs().bands();
    let n = pair.width() * pair.height();
    let mut pixels: Vec<usize> = (0..n).filter(|&i| pair.mask()[i]).collect();
    if let Some(s) = subsample {
        if pixels.len() > s.max_pixels {
            let mut pick = index::sample(&mut ChaCha8Rng::seed_from_u64(s.seed), pixels.len(), s.max_pixels).into_vec();
            pick.sort_unstable();
            pixels = pick.into_iter().map(|k| pixels[k]).collect();
        }
    }
    if pixels.len() < c + 1 {
        return Err(Error::InsufficientData(format!(
            "ridge needs at least {} valid pixels, got {}",
            c + 1,
            pixels.len()
        )));
    }
    let x = features_f64(pair.inputs());
    let y = pair.target().band_f64(0);
    let m = pixels.len() as f64;

    let mut x_mean = vec![0.0; c];
    let mut y_mean = 0.0;
    for &p in &pixels {
        for (k, mk) in x_mean.iter_mut().enumerate() {
            *mk += x[k * n + p];
        }
        y_mean += y[p];
    }
    x_mean.iter_mut().for_each(|v| *v /= m);
    y_mean /= m;

    let mut gram = vec![0.0; c * c];
    let mut rhs = vec![0.0; c];
    let mut xc = vec![0.0; c];
    for &p in &pixels {
        for k in 0..c {
            xc[k] = x[k * n + p] - x_mean[k];
        }
        let yc = y[p] - y_mean;
        for i in 0..c {
            rhs[i] += xc[i] * yc;
            let row = &mut gram[i * c..i * c + i + 1];
            for (j, g) in row.iter_mut().enumerate() {
                *g += xc[i] * xc[j];
            }
        }
    }
    for i in 0..c {
        gram[i * c + i] += lambda;
        for j in 0..i {
            gram[j * c + i] = gram[i * c + j];
        }
    }
    cholesky(&mut gram, c)?;
    let beta = cholesky_solve(&gram, c, &rhs);
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Singular("non-finite ridge coefficients".into()));
    }
    let intercept = y_mean - beta.iter().zip(&x_mean).map(|(b, m)| b * m).sum::<f64>();
    Ok(RidgeModel {
        lambda,
        beta,
        intercept,
        feature_mean: x_mean,
        target_mean: y_mean,
    })
}

impl RidgeModel {
    /// `β·(x - x̄) + ȳ` for every pixel, row-major.
    pub fn predict_values(&self, embeddings: &Grid) -> Result<Vec<f64>> {
        let c = self.beta.len();
        if embeddings.bands() != c {
            return Err(Error::ShapeMismatch(format!(
                "model has {c} coefficients, grid has {} bands",
                embeddings.bands()
            )));
        }
        let n = embeddings.pixels();
        let x = features_f64(embeddings);
        let mut out = vec![self.target_mean; n];
        for k in 0..c {
            let (b, m) = (self.beta[k], self.feature_mean[k]);
            for (o, &v) in out.iter_mut().zip(&x[k * n..(k + 1) * n]) {
                *o += b * (v - m);
            }
        }
        Ok(out)
    }

    pub fn predict(&self, embeddings: &Grid) -> Result<Grid> {
        let v = self.predict_values(embeddings)?;
        Grid::new(
            embeddings.width(),
            embeddings.height(),
            1,
            *embeddings.geo(),
            embeddings.crs(),
            GridData::Float32(v.into_iter().map(|x| x as f32).collect()),
        )
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        let mut s = String::from("ridge 1\n");
        writeln!(s, "lambda {:e}", self.lambda).unwrap();
        writeln!(s, "intercept {:e}", self.intercept).unwrap();
        writeln!(s, "target_mean {:e}", self.target_mean).unwrap();
        writeln!(s, "feature_mean {}", join(&self.feature_mean)).unwrap();
        writeln!(s, "beta {}", join(&self.beta)).unwrap();
        s
    }

    pub fn from_text(text: &str) -> Result<RidgeModel> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("ridge 1") {
            return Err(Error::Parse("missing 'ridge 1' header".into()));
        }
        let (mut lambda, mut intercept, mut target_mean) = (None, None, None);
        let (mut feature_mean, mut beta) = (None, None);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut it = line.split_whitespace();
            let key = it.next().unwrap_or_default();
            let vals: Vec<f64> = it
                .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad number {t:?} in {key}"))))
                .collect::<Result<_>>()?;
            let one = |v: &[f64]| match v {
                [x] => Ok(*x),
                _ => Err(Error::Parse(format!("{key} expects one value"))),
            };
            match key {
                "lambda" => lambda = Some(one(&vals)?),
                "intercept" => intercept = Some(one(&vals)?),
                "target_mean" => target_mean = Some(one(&vals)?),
                "feature_mean" => feature_mean = Some(vals),
                "beta" => beta = Some(vals),
                _ => return Err(Error::Parse(format!("unknown ridge key {key:?}"))),
            }
        }
        let missing = |k: &str| Error::Parse(format!("ridge model missing {k}"));
        let m = RidgeModel {
            lambda: lambda.ok_or_else(|| missing("lambda"))?,
            intercept: intercept.ok_or_else(|| missing("intercept"))?,
            target_mean: target_mean.ok_or_else(|| missing("target_mean"))?,
            feature_mean: feature_mean.ok_or_else(|| missing("feature_mean"))?,
            beta: beta.ok_or_else(|| missing("beta"))?,
        };
        if m.beta.len() != m.feature_mean.len() || m.beta.is_empty() {
            return Err(Error::Parse("beta and feature_mean lengths differ".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(io_at(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RidgeModel> {
        let path = path.as_ref();
        RidgeModel::from_text(&std::fs::read_to_string(path).map_err(io_at(path))?)
    }
}
