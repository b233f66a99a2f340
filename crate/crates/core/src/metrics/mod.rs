//! Height-difference statistics, correlation scores and histograms.

pub mod svg;

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::preprocess::GEO_TOLERANCE;

pub const NMAD_SCALE: f64 = 1.4826;

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Difference plane `pred - ref`; NaN where excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct Delta {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Delta {
    pub fn valid(&self) -> Vec<f64> {
        self.values.iter().copied().filter(|v| !v.is_nan()).collect()
    }
}

fn check_aligned(pred: &Grid, reference: &Grid, mask: Option<&[bool]>) -> Result<()> {
    if pred.width() != reference.width() || pred.height() != reference.height() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs reference {}x{}",
            pred.width(),
            pred.height(),
            reference.width(),
            reference.height()
        )));
    }
    if !pred.geo().approx_eq(reference.geo(), GEO_TOLERANCE) {
        return Err(Error::ShapeMismatch("prediction and reference georeferences differ".into()));
    }
    if let Some(m) = mask {
        if m.len() != pred.pixels() {
            return Err(Error::ShapeMismatch(format!("mask has {} entries, grid {}", m.len(), pred.pixels())));
        }
    }
    Ok(())
}

/// Pixel pairs `(pred, ref)` that are masked in, finite and not nodata in either grid.
pub fn paired_values(pred: &Grid, reference: &Grid, mask: Option<&[bool]>) -> Result<(Vec<f64>, Vec<f64>)> {
    check_aligned(pred, reference, mask)?;
    let (mut p, mut r) = (Vec::new(), Vec::new());
    for i in 0..pred.pixels() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let (a, b) = (pred.data().get_f64(i), reference.data().get_f64(i));
        if a.is_finite() && b.is_finite() && !pred.is_nodata_value(a) && !reference.is_nodata_value(b) {
            p.push(a);
            r.push(b);
        }
    }
    Ok((p, r))
}

/// `pred - ref` per pixel; negative means under-prediction.
pub fn delta(pred: &Grid, reference: &Grid, mask: Option<&[bool]>) -> Result<Delta> {
    check_aligned(pred, reference, mask)?;
    let values = (0..pred.pixels())
        .map(|i| {
            let (a, b) = (pred.data().get_f64(i), reference.data().get_f64(i));
            let ok = mask.is_none_or(|m| m[i])
                && a.is_finite()
                && b.is_finite()
                && !pred.is_nodata_value(a)
                && !reference.is_nodata_value(b);
            if ok {
                a - b
            } else {
                f64::NAN
            }
        })
        .collect();
    Ok(Delta {
        width: pred.width(),
        height: pred.height(),
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffStats {
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub rmse: f64,
    pub nmad: f64,
    pub p25: f64,
    pub p75: f64,
    pub n: usize,
}

/// Linear interpolation between order statistics of a sorted slice.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn sorted_copy(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

fn require_finite(v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("value at index {i}"))),
        None => Ok(()),
    }
}

pub fn diff_stats(d: &[f64]) -> Result<DiffStats> {
    let n = d.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("difference statistics need n >= 2, got {n}")));
    }
    require_finite(d)?;
    // Welford for mean and variance; compensated sum of squares for RMSE.
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    let mut sq = KahanSum::default();
    for (k, &x) in d.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (x - mean);
        sq.add(x * x);
    }
    let sorted = sorted_copy(d);
    let median = percentile_sorted(&sorted, 0.5);
    let abs_dev = sorted_copy(&d.iter().map(|x| (x - median).abs()).collect::<Vec<_>>());
    Ok(DiffStats {
        mean,
        median,
        sd: (m2 / (n - 1) as f64).sqrt(),
        rmse: (sq.value() / n as f64).sqrt(),
        nmad: NMAD_SCALE * percentile_sorted(&abs_dev, 0.5),
        p25: percentile_sorted(&sorted, 0.25),
        p75: percentile_sorted(&sorted, 0.75),
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrStats {
    pub r2: f64,
    pub pearson: f64,
    pub spearman: f64,
    /// Least-squares line `pred = slope * ref + intercept`.
    pub slope: f64,
    pub intercept: f64,
}

fn mean(v: &[f64]) -> f64 {
    let mut s = KahanSum::default();
    v.iter().for_each(|&x| s.add(x));
    s.value() / v.len() as f64
}

/// Returns `(cov, var_x, var_y)` as centered sums.
fn centered_moments(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (KahanSum::default(), KahanSum::default(), KahanSum::default());
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy.add(da * db);
        sxx.add(da * da);
        syy.add(db * db);
    }
    (sxy.value(), sxx.value(), syy.value())
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (sxy, sxx, syy) = centered_moments(x, y);
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// 1-based ranks; ties share their mean rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&average_ranks(x), &average_ranks(y))
}

pub fn corr_stats(pred: &[f64], reference: &[f64]) -> Result<CorrStats> {
    if pred.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions vs {} references", pred.len(), reference.len())));
    }
    if pred.len() < 3 {
        return Err(Error::InsufficientData(format!("correlation needs n >= 3, got {}", pred.len())));
    }
    require_finite(pred)?;
    require_finite(reference)?;
    let (sxy, sxx, syy) = centered_moments(reference, pred);
    if sxx == 0.0 {
        return Err(Error::InsufficientData("reference has zero variance".into()));
    }
    let mut sse = KahanSum::default();
    for (&p, &r) in pred.iter().zip(reference) {
        sse.add((r - p) * (r - p));
    }
    let slope = sxy / sxx;
    let pearson = if syy == 0.0 { 0.0 } else { (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0) };
    let spearman = if syy == 0.0 { 0.0 } else { spearman(pred, reference) };
    Ok(CorrStats {
        r2: 1.0 - sse.value() / sxx,
        pearson,
        spearman,
        slope,
        intercept: mean(pred) - slope * mean(reference),
    })
}

/// Shared half-open bins `[e, e + w)` with edges on multiples of `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<Vec<u64>>,
}

pub fn histogram(series: &[&[f64]], bin_width: f64) -> Result<Histogram> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(Error::InvalidArgument(format!("bin width must be > 0, got {bin_width}")));
    }
    let all = series.iter().flat_map(|s| s.iter());
    let (mut lo, mut hi) = (i64::MAX, i64::MIN);
    let mut any = false;
    for &v in all {
        if !v.is_finite() {
            return Err(Error::NonFinite("histogram value".into()));
        }
        let b = (v / bin_width).floor() as i64;
        lo = lo.min(b);
        hi = hi.max(b);
        any = true;
    }
    if !any {
        return Err(Error::InsufficientData("histogram of empty input".into()));
    }
    let nbins = (hi - lo + 1) as usize;
    let edges = (0..=nbins).map(|k| (lo + k as i64) as f64 * bin_width).collect();
    let counts = series
        .iter()
        .map(|s| {
            let mut c = vec![0u64; nbins];
            for &v in s.iter() {
                c[((v / bin_width).floor() as i64 - lo) as usize] += 1;
            }
            c
        })
        .collect();
    Ok(Histogram { edges, counts })
}

impl Histogram {
    pub fn to_csv(&self, names: &[&str]) -> String {
        let mut s = String::from("bin_start,bin_end");
        for n in names {
            write!(s, ",{n}").unwrap();
        }
        s.push('\n');
        for (k, w) in self.edges.windows(2).enumerate() {
            write!(s, "{},{}", w[0], w[1]).unwrap();
            for c in &self.counts {
                write!(s, ",{}", c[k]).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// The ten evaluation statistics in report order.
pub const STATISTICS: [&str; 10] = [
    "r2",
    "pearson",
    "spearman",
    "mean_difference_m",
    "median_difference_m",
    "sd_m",
    "rmse_m",
    "nmad_m",
    "p25_m",
    "p75_m",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub label: String,
    pub diff: DiffStats,
    pub corr: CorrStats,
}

impl Evaluation {
    pub fn compute(label: &str, pred: &[f64], reference: &[f64]) -> Result<Evaluation> {
        let d: Vec<f64> = pred.iter().zip(reference).map(|(p, r)| p - r).collect();
        Ok(Evaluation {
            label: label.to_string(),
            diff: diff_stats(&d)?,
            corr: corr_stats(pred, reference)?,
        })
    }

    pub fn values(&self) -> [f64; 10] {
        let (d, c) = (&self.diff, &self.corr);
        [c.r2, c.pearson, c.spearman, d.mean, d.median, d.sd, d.rmse, d.nmad, d.p25, d.p75]
    }
}

/// Rows are statistics, columns are evaluated series (e.g. `unetpp_test`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub columns: Vec<Evaluation>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("statistic");
        for c in &self.columns {
            write!(s, ",{}", c.label).unwrap();
        }
        s.push('\n');
        let values: Vec<[f64; 10]> = self.columns.iter().map(Evaluation::values).collect();
        for (k, name) in STATISTICS.iter().enumerate() {
            s.push_str(name);
            for v in &values {
                write!(s, ",{:.6}", v[k]).unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// `label.statistic=value` lines, plus the pixel count.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.columns {
            writeln!(s, "{}.n={}", c.label, c.diff.n).unwrap();
            for (name, v) in STATISTICS.iter().zip(c.values()) {
                writeln!(s, "{}.{name}={v:.6}", c.label).unwrap();
            }
        }
        s
    }
}
