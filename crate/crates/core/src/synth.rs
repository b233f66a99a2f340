//! Seeded synthetic embedding/height scenes with a known height function.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{GeoTransform, Grid, GridData};
use crate::preprocess::{normalize_value, EMBEDDING_NODATA};

pub const BANDS: usize = 64;
/// int8 units per standard deviation of the smoothed field.
const QUANT_SCALE: f64 = 40.0;

const STREAM_FIELD: u64 = 1;
const STREAM_WEIGHTS: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_MIX: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mapping {
    Linear,
    Nonlinear,
}

impl FromStr for Mapping {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Mapping::Linear),
            "nonlinear" => Ok(Mapping::Nonlinear),
            _ => Err(Error::Parse(format!("unknown mapping {s:?}"))),
        }
    }
}

impl Mapping {
    pub fn name(self) -> &'static str {
        match self {
            Mapping::Linear => "linear",
            Mapping::Nonlinear => "nonlinear",
        }
    }
}

/// Height offset added to every column at or beyond `column`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shift {
    pub column: usize,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Box-filter radius in pixels; three passes approximate a Gaussian.
    pub radius: usize,
    pub mapping: Mapping,
    pub noise_sd: f64,
    /// Mean height (m).
    pub height_offset: f64,
    /// Standard deviation of the linear component (m).
    pub height_scale: f64,
    /// Standard deviation of the nonlinear component (m).
    pub nonlinear_scale: f64,
    /// Box radius of the single smoothing pass over the summed nonlinear terms.
    pub nonlinear_blur: usize,
    /// Band `k` draws its linear weight with scale `falloff^k`; 1 weights all bands alike.
    pub weight_falloff: f64,
    /// Bands mix this many shared smooth fields; 0 draws every band independently.
    pub latent_rank: usize,
    /// Spread of each band's own field relative to the shared part, in [0, 1].
    pub unique_sd: f64,
    pub shift: Option<Shift>,
    pub pixel_size: f64,
    pub crs: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            width: 128,
            height: 128,
            seed: 0,
            radius: 2,
            mapping: Mapping::Linear,
            noise_sd: 0.0,
            height_offset: 40.0,
            height_scale: 15.0,
            nonlinear_scale: 8.0,
            nonlinear_blur: 1,
            weight_falloff: 1.0,
            latent_rank: 6,
            unique_sd: 0.1,
            shift: None,
            pixel_size: 10.0,
            crs: 2154,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::InvalidArgument(format!(
                "scene must be at least 2x2, got {}x{}",
                self.width, self.height
            )));
        }
        for (name, v) in [
            ("noise_sd", self.noise_sd),
            ("height_scale", self.height_scale),
            ("nonlinear_scale", self.nonlinear_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.unique_sd) {
            return Err(Error::InvalidArgument(format!("unique_sd must lie in [0, 1], got {}", self.unique_sd)));
        }
        if !(self.weight_falloff > 0.0 && self.weight_falloff <= 1.0) {
            return Err(Error::InvalidArgument(format!("weight_falloff must lie in (0, 1], got {}", self.weight_falloff)));
        }
        if !self.height_offset.is_finite() || !(self.pixel_size > 0.0) {
            return Err(Error::InvalidArgument("height_offset and pixel_size must be finite, pixel_size > 0".into()));
        }
        Ok(())
    }

    fn geo(&self) -> GeoTransform {
        GeoTransform {
            origin_x: 500_000.0,
            origin_y: 6_400_000.0,
            px: self.pixel_size,
            py: self.pixel_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Term {
    Square { band: usize, coef: f64 },
    Product { a: usize, b: usize, coef: f64 },
}

/// Everything needed to evaluate the noiseless height function on an
/// embedding grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub mapping: Mapping,
    /// Coefficients on normalized features `x = (v + 128) / 256`.
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Standardization applied to `x` before nonlinear terms.
    pub band_mean: Vec<f64>,
    pub band_sd: Vec<f64>,
    pub terms: Vec<Term>,
    /// Box radius applied to the summed nonlinear terms.
    pub blur_radius: usize,
    pub shift: Option<Shift>,
}

impl Descriptor {
    pub fn linear_at(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    fn nonlinear_raw_at(&self, x: &[f64]) -> f64 {
        let z = |k: usize| (x[k] - self.band_mean[k]) / self.band_sd[k];
        self.terms
            .iter()
            .map(|t| match *t {
                Term::Square { band, coef } => coef * z(band) * z(band),
                Term::Product { a, b, coef } => coef * z(a) * z(b),
            })
            .sum()
    }

    /// Noiseless heights, row-major.
    pub fn evaluate(&self, embeddings: &Grid) -> Result<Vec<f64>> {
        if embeddings.bands() != self.weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "descriptor has {} weights, grid has {} bands",
                self.weights.len(),
                embeddings.bands()
            )));
        }
        let (w, h) = (embeddings.width(), embeddings.height());
        let features = normalized_features(embeddings)?;
        let mut lin = vec![0.0; w * h];
        let mut nl = vec![0.0; w * h];
        let mut x = vec![0.0; self.weights.len()];
        for p in 0..w * h {
            for (k, xv) in x.iter_mut().enumerate() {
                *xv = features[k * w * h + p];
            }
            lin[p] = self.linear_at(&x);
            if self.mapping == Mapping::Nonlinear {
                nl[p] = self.nonlinear_raw_at(&x);
            }
        }
        if self.mapping == Mapping::Nonlinear {
            nl = box_blur(&nl, w, h, self.blur_radius, 1);
        }
        Ok((0..w * h)
            .map(|p| {
                let shift = match self.shift {
                    Some(s) if p % w >= s.column => s.offset,
                    _ => 0.0,
                };
                lin[p] + nl[p] + shift
            })
            .collect())
    }

    /// `key value...` lines.
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        writeln!(s, "mapping {}", self.mapping.name()).unwrap();
        writeln!(s, "bias {:e}", self.bias).unwrap();
        writeln!(s, "weights {}", join(&self.weights)).unwrap();
        writeln!(s, "band_mean {}", join(&self.band_mean)).unwrap();
        writeln!(s, "band_sd {}", join(&self.band_sd)).unwrap();
        writeln!(s, "blur_radius {}", self.blur_radius).unwrap();
        for t in &self.terms {
            match t {
                Term::Square { band, coef } => writeln!(s, "square {band} {coef:e}").unwrap(),
                Term::Product { a, b, coef } => writeln!(s, "product {a} {b} {coef:e}").unwrap(),
            }
        }
        if let Some(sh) = self.shift {
            writeln!(s, "shift {} {:e}", sh.column, sh.offset).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Descriptor> {
        let bad = |line: &str| Error::Parse(format!("descriptor line {line:?}"));
        let floats = |it: std::str::SplitWhitespace, line: &str| -> Result<Vec<f64>> {
            it.map(|t| t.parse::<f64>().map_err(|_| bad(line))).collect()
        };
        let mut d = Descriptor {
            mapping: Mapping::Linear,
            weights: vec![],
            bias: 0.0,
            band_mean: vec![],
            band_sd: vec![],
            terms: vec![],
            blur_radius: 0,
            shift: None,
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut it = line.split_whitespace();
            let key = it.next().ok_or_else(|| bad(line))?;
            let mut next = || it.next().ok_or_else(|| bad(line));
            match key {
                "mapping" => d.mapping = next()?.parse()?,
                "bias" => d.bias = next()?.parse().map_err(|_| bad(line))?,
                "blur_radius" => d.blur_radius = next()?.parse().map_err(|_| bad(line))?,
                "weights" => d.weights = floats(line[key.len()..].split_whitespace(), line)?,
                "band_mean" => d.band_mean = floats(line[key.len()..].split_whitespace(), line)?,
                "band_sd" => d.band_sd = floats(line[key.len()..].split_whitespace(), line)?,
                "square" => {
                    let band = next()?.parse().map_err(|_| bad(line))?;
                    let coef = next()?.parse().map_err(|_| bad(line))?;
                    d.terms.push(Term::Square { band, coef });
                }
                "product" => {
                    let a = next()?.parse().map_err(|_| bad(line))?;
                    let b = next()?.parse().map_err(|_| bad(line))?;
                    let coef = next()?.parse().map_err(|_| bad(line))?;
                    d.terms.push(Term::Product { a, b, coef });
                }
                "shift" => {
                    let column = next()?.parse().map_err(|_| bad(line))?;
                    let offset = next()?.parse().map_err(|_| bad(line))?;
                    d.shift = Some(Shift { column, offset });
                }
                _ => return Err(bad(line)),
            }
        }
        let n = d.weights.len();
        if n == 0 || d.band_mean.len() != n || d.band_sd.len() != n {
            return Err(Error::Parse("descriptor band vectors missing or inconsistent".into()));
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub embeddings: Grid,
    pub heights: Grid,
    pub descriptor: Descriptor,
}

/// Band-sequential `(v + 128) / 256` as f64.
fn normalized_features(g: &Grid) -> Result<Vec<f64>> {
    match g.data() {
        GridData::Int8(v) => Ok(v.iter().map(|&q| normalize_value(q) as f64).collect()),
        GridData::Float32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
        GridData::Float64(v) => Ok(v.clone()),
    }
}

/// Separable moving average over `[i - r, i + r]`, truncated at the borders,
/// repeated `passes` times.
pub fn box_blur(src: &[f64], w: usize, h: usize, r: usize, passes: usize) -> Vec<f64> {
    if r == 0 {
        return src.to_vec();
    }
    let mut cur = src.to_vec();
    let mut tmp = vec![0.0; w * h];
    let pass_1d = |input: &[f64], out: &mut [f64], n: usize, count: usize, at: &dyn Fn(usize, usize) -> usize| {
        for line in 0..count {
            let mut prefix = vec![0.0; n + 1];
            for i in 0..n {
                prefix[i + 1] = prefix[i] + input[at(line, i)];
            }
            for i in 0..n {
                let lo = i.saturating_sub(r);
                let hi = (i + r + 1).min(n);
                out[at(line, i)] = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
            }
        }
    };
    for _ in 0..passes {
        pass_1d(&cur, &mut tmp, w, h, &|y, x| y * w + x);
        pass_1d(&tmp, &mut cur, h, w, &|x, y| y * w + x);
    }
    cur
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn nonlinear_terms() -> Vec<Term> {
    vec![
        Term::Square { band: 0, coef: 1.0 },
        Term::Square { band: 1, coef: -0.8 },
        Term::Product { a: 2, b: 3, coef: 1.2 },
        Term::Product { a: 4, b: 5, coef: -1.0 },
        Term::Product { a: 0, b: 5, coef: 0.7 },
    ]
}

pub fn generate(spec: &SynthSpec) -> Result<Scene> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let n = w * h;

    let mut field_rng = rng(spec.seed, STREAM_FIELD);
    let mut field = || {
        let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut field_rng)).collect();
        let mut smooth = box_blur(&white, w, h, spec.radius, 3);
        let (m, sd) = mean_sd(&smooth);
        let sd = if sd > 0.0 { sd } else { 1.0 };
        smooth.iter_mut().for_each(|v| *v = (*v - m) / sd);
        smooth
    };
    let latents: Vec<Vec<f64>> = (0..spec.latent_rank).map(|_| field()).collect();
    let mut mix_rng = rng(spec.seed, STREAM_MIX);
    let mut q = Vec::with_capacity(BANDS * n);
    for _ in 0..BANDS {
        let mut smooth = field();
        if !latents.is_empty() {
            let a: Vec<f64> = (0..latents.len()).map(|_| StandardNormal.sample(&mut mix_rng)).collect();
            let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let shared = (1.0 - spec.unique_sd * spec.unique_sd).sqrt() / norm;
            for (p, v) in smooth.iter_mut().enumerate() {
                let s: f64 = a.iter().zip(&latents).map(|(c, l)| c * l[p]).sum();
                *v = spec.unique_sd * *v + shared * s;
            }
        }
        let (m, sd) = mean_sd(&smooth);
        let sd = if sd > 0.0 { sd } else { 1.0 };
        q.extend(
            smooth
                .iter()
                .map(|v| ((v - m) / sd * QUANT_SCALE).round().clamp(-127.0, 127.0) as i8),
        );
    }
    let embeddings = Grid::new(w, h, BANDS, spec.geo(), spec.crs, GridData::Int8(q))?
        .with_nodata(Some(EMBEDDING_NODATA as f64))?;
    let x = normalized_features(&embeddings)?;

    let mut band_mean = Vec::with_capacity(BANDS);
    let mut band_sd = Vec::with_capacity(BANDS);
    for k in 0..BANDS {
        let (m, sd) = mean_sd(&x[k * n..(k + 1) * n]);
        band_mean.push(m);
        band_sd.push(if sd > 0.0 { sd } else { 1.0 });
    }

    let mut wrng = rng(spec.seed, STREAM_WEIGHTS);
    let raw_w: Vec<f64> = (0..BANDS)
        .map(|k| {
            let z: f64 = StandardNormal.sample(&mut wrng);
            z * spec.weight_falloff.powi(k as i32)
        })
        .collect();
    let mut d = Descriptor {
        mapping: spec.mapping,
        weights: raw_w,
        bias: 0.0,
        band_mean,
        band_sd,
        terms: if spec.mapping == Mapping::Nonlinear { nonlinear_terms() } else { vec![] },
        blur_radius: spec.nonlinear_blur,
        shift: None,
    };

    // Rescale so each component hits its target spread and the scene mean sits at the offset.
    let linear = {
        let mut l = Descriptor { mapping: Mapping::Linear, terms: vec![], ..d.clone() };
        l.bias = 0.0;
        l.evaluate(&embeddings)?
    };
    let (lm, lsd) = mean_sd(&linear);
    let ls = if lsd > 0.0 { spec.height_scale / lsd } else { 0.0 };
    d.weights.iter_mut().for_each(|v| *v *= ls);
    let mut bias = spec.height_offset - lm * ls;
    if spec.mapping == Mapping::Nonlinear {
        let nl_only = Descriptor {
            weights: vec![0.0; BANDS],
            bias: 0.0,
            ..d.clone()
        };
        let nl = nl_only.evaluate(&embeddings)?;
        let (nm, nsd) = mean_sd(&nl);
        let s = if nsd > 0.0 { spec.nonlinear_scale / nsd } else { 0.0 };
        for t in &mut d.terms {
            match t {
                Term::Square { coef, .. } | Term::Product { coef, .. } => *coef *= s,
            }
        }
        bias -= nm * s;
    }
    d.bias = bias;
    d.shift = spec.shift;

    let clean = d.evaluate(&embeddings)?;
    let heights: Vec<f32> = if spec.noise_sd > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut nrng = rng(spec.seed, STREAM_NOISE);
        clean.iter().map(|&v| (v + noise.sample(&mut nrng)) as f32).collect()
    } else {
        clean.iter().map(|&v| v as f32).collect()
    };
    let heights = Grid::new(w, h, 1, spec.geo(), spec.crs, GridData::Float32(heights))?;
    Ok(Scene {
        embeddings,
        heights,
        descriptor: d,
    })
}

/// Sets a seeded uniform subset of `round(fraction * pixels)` pixels to the
/// sentinel in every band.
pub fn inject_nodata(embeddings: &Grid, fraction: f64, seed: u64) -> Result<Grid> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("fraction must lie in [0, 1), got {fraction}")));
    }
    let GridData::Int8(values) = embeddings.data() else {
        return Err(Error::UnsupportedDtype("inject_nodata expects an int8 grid".into()));
    };
    let n = embeddings.pixels();
    let count = (fraction * n as f64).round() as usize;
    let mut out = values.clone();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for p in index::sample(&mut r, n, count) {
        for b in 0..embeddings.bands() {
            out[b * n + p] = EMBEDDING_NODATA;
        }
    }
    embeddings.with_data(GridData::Int8(out))
}
