//! Embedding and DSM preparation: nodata remap, normalization, nearest-neighbor
//! resampling, input/target stacking and the spatial train/test split.

use std::fmt;

use crate::error::{Error, Result};
use crate::grid::{DType, GeoTransform, Grid, GridData};

/// Sentinel marking invalid embedding pixels.
pub const EMBEDDING_NODATA: i8 = -128;

/// Tolerance (map units) when comparing georeferences of paired grids.
pub const GEO_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreprocessReport {
    /// Pixels with at least one sentinel band.
    pub invalid: u64,
    pub total: u64,
}

impl PreprocessReport {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.invalid as f64 / self.total as f64
        }
    }
}

impl fmt::Display for PreprocessReport {
    /// `key=value` lines.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid_pixels={}", self.invalid)?;
        writeln!(f, "total_pixels={}", self.total)?;
        writeln!(f, "invalid_fraction={:.9}", self.fraction())?;
        writeln!(f, "invalid_percent={:.4}", self.fraction() * 100.0)
    }
}

fn int8_values(g: &Grid) -> Result<&[i8]> {
    match g.data() {
        GridData::Int8(v) => Ok(v),
        _ => Err(Error::UnsupportedDtype(format!("expected int8 grid, got {:?}", g.dtype()))),
    }
}

/// Replaces every `-128` sample with 0.
///
/// A pixel counts as invalid when any of its bands holds the sentinel.
pub fn remap_nodata(g: &Grid) -> Result<(Grid, PreprocessReport)> {
    let values = int8_values(g)?;
    let n = g.pixels();
    let mut bad = vec![false; n];
    let out: Vec<i8> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v == EMBEDDING_NODATA {
                bad[i % n] = true;
                0
            } else {
                v
            }
        })
        .collect();
    let grid = Grid::new(g.width(), g.height(), g.bands(), *g.geo(), g.crs(), GridData::Int8(out))?;
    let report = PreprocessReport {
        invalid: bad.iter().filter(|&&b| b).count() as u64,
        total: n as u64,
    };
    Ok((grid, report))
}

#[inline]
pub fn normalize_value(v: i8) -> f32 {
    (v as f32 + 128.0) / 256.0
}

/// Inverse of [`normalize_value`].
#[inline]
pub fn denormalize_value(x: f32) -> i8 {
    (256.0 * x - 128.0).round() as i8
}

/// Maps int8 samples to `(v + 128) / 256`, a float32 grid in `[0, 255/256]`.
pub fn normalize(g: &Grid) -> Result<Grid> {
    let values = int8_values(g)?;
    let out = values.iter().map(|&v| normalize_value(v)).collect();
    Grid::new(g.width(), g.height(), g.bands(), *g.geo(), g.crs(), GridData::Float32(out))
}

/// Nearest-center resampling onto a target pixel grid.
///
/// For each target pixel center, the source pixel whose center is closest
/// along each axis is taken; an exact tie between two source centers goes to
/// the smaller index. Target pixels whose center falls outside the source
/// extent become nodata (or NaN for float grids without a sentinel).
pub fn resample_nearest(
    g: &Grid,
    target_geo: &GeoTransform,
    target_crs: u32,
    target_w: usize,
    target_h: usize,
) -> Result<Grid> {
    if g.crs() != target_crs {
        return Err(Error::CrsMismatch(g.crs(), target_crs));
    }
    target_geo.validate()?;
    let src = g.geo();

    let axis_map = |n_out: usize, out_origin: f64, out_step: f64, in_origin: f64, in_step: f64, n_in: usize, sign: f64| {
        (0..n_out)
            .map(|i| {
                let center = out_origin + sign * (i as f64 + 0.5) * out_step;
                // Continuous source coordinate; nearest center is at floor(u) when u is not a half-integer tie.
                let u = sign * (center - in_origin) / in_step;
                if !(0.0..n_in as f64).contains(&u) {
                    return None;
                }
                // Centers sit at k + 0.5; the nearest is round(u - 0.5) with ties to the smaller k.
                let t = u - 0.5;
                let k = if (t - t.floor() - 0.5).abs() < 1e-9 { t.floor() } else { t.round() };
                Some((k.max(0.0) as usize).min(n_in - 1))
            })
            .collect::<Vec<_>>()
    };
    let xmap = axis_map(target_w, target_geo.origin_x, target_geo.px, src.origin_x, src.px, g.width(), 1.0);
    let ymap = axis_map(target_h, target_geo.origin_y, target_geo.py, src.origin_y, src.py, g.height(), -1.0);
    if xmap.iter().all(Option::is_none) || ymap.iter().all(Option::is_none) {
        return Err(Error::EmptyOverlap);
    }

    let fill = g.nodata();
    let n_out = target_w * target_h;
    let index = |b: usize, x: usize, y: usize| -> Option<usize> {
        Some(g.index(b, xmap[x]?, ymap[y]?))
    };
    let needs_fill = xmap.iter().any(Option::is_none) || ymap.iter().any(Option::is_none);
    let data = match g.data() {
        GridData::Int8(v) => {
            if needs_fill && fill.is_none() {
                return Err(Error::InvalidArgument(
                    "target extends beyond an int8 source without nodata".into(),
                ));
            }
            let nd = fill.unwrap_or(0.0) as i8;
            GridData::Int8(gather(g.bands(), target_w, target_h, n_out, &index, |i| i.map_or(nd, |i| v[i])))
        }
        GridData::Float32(v) => {
            let nd = fill.map_or(f32::NAN, |x| x as f32);
            GridData::Float32(gather(g.bands(), target_w, target_h, n_out, &index, |i| i.map_or(nd, |i| v[i])))
        }
        GridData::Float64(v) => {
            let nd = fill.unwrap_or(f64::NAN);
            GridData::Float64(gather(g.bands(), target_w, target_h, n_out, &index, |i| i.map_or(nd, |i| v[i])))
        }
    };
    let out = Grid::new(target_w, target_h, g.bands(), *target_geo, target_crs, data)?;
    out.with_nodata(fill)
}

fn gather<V>(
    bands: usize,
    w: usize,
    h: usize,
    n_out: usize,
    index: &dyn Fn(usize, usize, usize) -> Option<usize>,
    pick: impl Fn(Option<usize>) -> V,
) -> Vec<V> {
    let mut out = Vec::with_capacity(bands * n_out);
    for b in 0..bands {
        for y in 0..h {
            for x in 0..w {
                out.push(pick(index(b, x, y)));
            }
        }
    }
    out
}

/// Embedding inputs aligned with one target band and its validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedGrid {
    inputs: Grid,
    target: Grid,
    mask: Vec<bool>,
}

impl PairedGrid {
    /// Skips the range and georeference checks of [`stack_pairs`]; mask is target finiteness.
    #[cfg(test)]
    pub(crate) fn from_parts_unchecked(inputs: Grid, target: Grid) -> PairedGrid {
        let mask = target.band_f64(0).iter().map(|v| v.is_finite() && !target.is_nodata_value(*v)).collect();
        PairedGrid { inputs, target, mask }
    }

    pub fn inputs(&self) -> &Grid {
        &self.inputs
    }
    pub fn target(&self) -> &Grid {
        &self.target
    }
    /// Row-major, true where the target is valid.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
    pub fn width(&self) -> usize {
        self.inputs.width()
    }
    pub fn height(&self) -> usize {
        self.inputs.height()
    }
    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Column range `x0..x0 + w`, row range `y0..y0 + h`.
    pub fn window(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<PairedGrid> {
        let inputs = self.inputs.window(x0, y0, w, h)?;
        let target = self.target.window(x0, y0, w, h)?;
        let width = self.width();
        let mask = (y0..y0 + h)
            .flat_map(|y| (x0..x0 + w).map(move |x| y * width + x))
            .map(|i| self.mask[i])
            .collect();
        Ok(PairedGrid { inputs, target, mask })
    }
}

/// Pairs normalized embeddings with a single-band DSM on the same pixel grid.
pub fn stack_pairs(embeddings: &Grid, dsm: &Grid) -> Result<PairedGrid> {
    if embeddings.width() != dsm.width() || embeddings.height() != dsm.height() {
        return Err(Error::ShapeMismatch(format!(
            "embeddings {}x{} vs dsm {}x{}",
            embeddings.width(),
            embeddings.height(),
            dsm.width(),
            dsm.height()
        )));
    }
    if !embeddings.geo().approx_eq(dsm.geo(), GEO_TOLERANCE) {
        return Err(Error::ShapeMismatch(format!(
            "georeference mismatch: {:?} vs {:?}",
            embeddings.geo(),
            dsm.geo()
        )));
    }
    if embeddings.crs() != dsm.crs() {
        return Err(Error::CrsMismatch(embeddings.crs(), dsm.crs()));
    }
    if dsm.bands() != 1 {
        return Err(Error::ShapeMismatch(format!("dsm must have 1 band, got {}", dsm.bands())));
    }
    let inputs = match embeddings.dtype() {
        DType::Int8 => {
            return Err(Error::UnsupportedDtype(
                "embeddings must be normalized to float before stacking".into(),
            ))
        }
        DType::Float32 => embeddings.clone(),
        DType::Float64 => embeddings.with_data(GridData::Float32(embeddings.to_f32_vec()))?,
    };
    if let GridData::Float32(v) = inputs.data() {
        if let Some(bad) = v.iter().find(|x| !(0.0..1.0).contains(*x)) {
            return Err(Error::InvalidArgument(format!(
                "normalized embeddings must lie in [0, 1), found {bad}"
            )));
        }
    }
    let mask = (0..dsm.pixels())
        .map(|i| {
            let v = dsm.data().get_f64(i);
            v.is_finite() && !dsm.is_nodata_value(v)
        })
        .collect();
    let target = dsm.with_data(GridData::Float32(dsm.to_f32_vec()))?;
    Ok(PairedGrid { inputs, target, mask })
}

/// Splits at a column: `[0, boundary)` west, `[boundary, width)` east.
pub fn split_aoi(pair: &PairedGrid, boundary_column: usize) -> Result<(PairedGrid, PairedGrid)> {
    let (w, h) = (pair.width(), pair.height());
    if boundary_column == 0 || boundary_column >= w {
        return Err(Error::InvalidArgument(format!(
            "boundary column {boundary_column} must lie in 1..{w}"
        )));
    }
    Ok((
        pair.window(0, 0, boundary_column, h)?,
        pair.window(boundary_column, 0, w - boundary_column, h)?,
    ))
}

/// Default boundary: 70% of the columns go to the training side.
pub fn default_boundary(width: usize) -> usize {
    (0.7 * width as f64).floor() as usize
}

/// Rectangle `(x0, y0, w, h)` selections for region pairs not expressible as a column cut.
pub fn split_rects(
    pair: &PairedGrid,
    train: (usize, usize, usize, usize),
    test: (usize, usize, usize, usize),
) -> Result<(PairedGrid, PairedGrid)> {
    let overlaps = |a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)| {
        a.0 < b.0 + b.2 && b.0 < a.0 + a.2 && a.1 < b.1 + b.3 && b.1 < a.1 + a.3
    };
    if overlaps(train, test) {
        return Err(Error::InvalidArgument("train and test rectangles overlap".into()));
    }
    Ok((
        pair.window(train.0, train.1, train.2, train.3)?,
        pair.window(test.0, test.1, test.2, test.3)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geo(px: f64) -> GeoTransform {
        GeoTransform::new(1000.0, 2000.0, px, px).unwrap()
    }

    fn int8_grid(values: Vec<i8>, w: usize, h: usize, b: usize) -> Grid {
        Grid::new(w, h, b, geo(10.0), 2154, GridData::Int8(values)).unwrap()
    }

    #[test]
    fn remap_replaces_sentinel() {
        let (g, r) = remap_nodata(&int8_grid(vec![-128, 5, -128], 3, 1, 1)).unwrap();
        assert_eq!(g.data(), &GridData::Int8(vec![0, 5, 0]));
        assert_eq!((r.invalid, r.total), (2, 3));
    }

    #[test]
    fn remap_counts_pixels_not_samples() {
        // Two bands, three pixels; pixel 1 is invalid in both bands, pixel 2 in one.
        let (_, r) = remap_nodata(&int8_grid(vec![1, -128, 3, 4, -128, -128], 3, 1, 2)).unwrap();
        assert_eq!((r.invalid, r.total), (2, 3));
    }

    #[test]
    fn remap_clean_grid_unchanged() {
        let src = int8_grid(vec![1, -127, 127, 0], 2, 2, 1);
        let (g, r) = remap_nodata(&src).unwrap();
        assert_eq!(g, src);
        assert_eq!(r.invalid, 0);
    }

    #[test]
    fn report_fraction_training_scale() {
        let r = PreprocessReport {
            invalid: 1_043,
            total: 54_634_398,
        };
        assert!((r.fraction() * 100.0 - 0.0019).abs() < 0.00005);
        assert!(r.to_string().contains("invalid_percent=0.0019"));
    }

    #[test]
    fn remap_rejects_float() {
        let g = Grid::new(1, 1, 1, geo(10.0), 0, GridData::Float32(vec![0.0])).unwrap();
        assert!(remap_nodata(&g).is_err());
        assert!(normalize(&g).is_err());
    }

    #[test]
    fn normalize_formula() {
        assert_eq!(normalize_value(-127), 0.00390625);
        assert_eq!(normalize_value(0), 0.5);
        assert_eq!(normalize_value(127), 0.99609375);
        let (g, _) = remap_nodata(&int8_grid(vec![-128], 1, 1, 1)).unwrap();
        assert_eq!(normalize(&g).unwrap().data(), &GridData::Float32(vec![0.5]));
    }

    #[test]
    fn normalize_monotone_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let (a, b): (i8, i8) = (rng.random(), rng.random());
            if a < b {
                assert!(normalize_value(a) < normalize_value(b));
            }
        }
    }

    #[test]
    fn normalize_inverts_exactly() {
        for v in i8::MIN..=i8::MAX {
            assert_eq!(denormalize_value(normalize_value(v)), v);
        }
    }

    #[test]
    fn resample_tie_picks_smaller_index() {
        // 2x2 at 5 m onto one 10 m pixel: the target center sits on the shared corner.
        let src = Grid::new(2, 2, 1, geo(5.0), 2154, GridData::Float32(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let out = resample_nearest(&src, &geo(10.0), 2154, 1, 1).unwrap();
        assert_eq!(out.data(), &GridData::Float32(vec![1.0]));
    }

    #[test]
    fn resample_identity() {
        let src = Grid::new(3, 2, 1, geo(10.0), 2154, GridData::Float32((0..6).map(|v| v as f32).collect())).unwrap();
        let out = resample_nearest(&src, src.geo(), 2154, 3, 2).unwrap();
        assert_eq!(out, src);
    }

    /// Exhaustive nearest-center search with the smaller-index tie rule.
    fn brute_force(src: &Grid, tgeo: &GeoTransform, w: usize, h: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for ty in 0..h {
            for tx in 0..w {
                let (cx, cy) = tgeo.pixel_center(tx as f64, ty as f64);
                let mut best = (f64::INFINITY, f64::INFINITY, 0usize, 0usize);
                for sy in 0..src.height() {
                    for sx in 0..src.width() {
                        let (px, py) = src.geo().pixel_center(sx as f64, sy as f64);
                        let (dx, dy) = ((px - cx).abs(), (py - cy).abs());
                        let better_x = dx < best.0 - 1e-9 || ((dx - best.0).abs() <= 1e-9 && sx < best.2);
                        let better_y = dy < best.1 - 1e-9 || ((dy - best.1).abs() <= 1e-9 && sy < best.3);
                        if better_x {
                            best.0 = dx;
                            best.2 = sx;
                        }
                        if better_y {
                            best.1 = dy;
                            best.3 = sy;
                        }
                    }
                }
                out.push(src.get_f64(0, best.2, best.3));
            }
        }
        out
    }

    #[test]
    fn resample_checkerboard_matches_brute_force() {
        let vals: Vec<f32> = (0..16).map(|i| ((i % 4 + i / 4) % 2) as f32 * 10.0 + i as f32).collect();
        let src = Grid::new(4, 4, 1, geo(5.0), 2154, GridData::Float32(vals)).unwrap();
        let out = resample_nearest(&src, &geo(10.0), 2154, 2, 2).unwrap();
        let got: Vec<f64> = out.band_f64(0);
        assert_eq!(got, brute_force(&src, &geo(10.0), 2, 2));
        // Offset target grid with no ties.
        let shifted = GeoTransform::new(1003.0, 1996.0, 7.0, 7.0).unwrap();
        let out = resample_nearest(&src, &shifted, 2154, 2, 2).unwrap();
        assert_eq!(out.band_f64(0), brute_force(&src, &shifted, 2, 2));
    }

    #[test]
    fn resample_errors() {
        let src = Grid::new(2, 2, 1, geo(5.0), 2154, GridData::Float32(vec![0.0; 4])).unwrap();
        assert!(matches!(resample_nearest(&src, &geo(10.0), 4326, 1, 1), Err(Error::CrsMismatch(..))));
        let far = GeoTransform::new(1e6, 1e6, 10.0, 10.0).unwrap();
        assert!(matches!(resample_nearest(&src, &far, 2154, 2, 2), Err(Error::EmptyOverlap)));
    }

    fn float_embeddings(w: usize, h: usize) -> Grid {
        Grid::new(w, h, 64, geo(10.0), 2154, GridData::Float32(vec![0.5; w * h * 64])).unwrap()
    }

    #[test]
    fn stack_full_mask() {
        let dsm = Grid::new(10, 10, 1, geo(10.0), 2154, GridData::Float32(vec![50.0; 100])).unwrap();
        let pair = stack_pairs(&float_embeddings(10, 10), &dsm).unwrap();
        assert!(pair.mask().iter().all(|&m| m));
    }

    #[test]
    fn stack_counts_nodata() {
        let mut v = vec![50.0f32; 100];
        for i in [3, 40, 99] {
            v[i] = -9999.0;
        }
        let dsm = Grid::new(10, 10, 1, geo(10.0), 2154, GridData::Float32(v))
            .unwrap()
            .with_nodata(Some(-9999.0))
            .unwrap();
        let pair = stack_pairs(&float_embeddings(10, 10), &dsm).unwrap();
        assert_eq!(pair.mask().iter().filter(|&&m| !m).count(), 3);
    }

    #[test]
    fn stack_rejects_offset_origin() {
        let g = GeoTransform::new(1005.0, 2000.0, 10.0, 10.0).unwrap();
        let dsm = Grid::new(10, 10, 1, g, 2154, GridData::Float32(vec![0.0; 100])).unwrap();
        assert!(matches!(stack_pairs(&float_embeddings(10, 10), &dsm), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn split_widths() {
        let dsm = Grid::new(100, 4, 1, geo(10.0), 2154, GridData::Float32((0..400).map(|v| v as f32).collect())).unwrap();
        let pair = stack_pairs(&float_embeddings(100, 4), &dsm).unwrap();
        assert_eq!(default_boundary(100), 70);
        let (a, b) = split_aoi(&pair, 70).unwrap();
        assert_eq!((a.width(), b.width()), (70, 30));
        assert!(split_aoi(&pair, 0).is_err());
        assert!(split_aoi(&pair, 100).is_err());
    }

    proptest! {
        #[test]
        fn split_partitions_pixels(w in 2usize..20, h in 1usize..5, frac in 0.01f64..0.99) {
            let boundary = ((w as f64 * frac) as usize).clamp(1, w - 1);
            let vals: Vec<f32> = (0..w * h).map(|v| v as f32).collect();
            let dsm = Grid::new(w, h, 1, geo(10.0), 2154, GridData::Float32(vals)).unwrap();
            let pair = stack_pairs(&float_embeddings(w, h), &dsm).unwrap();
            let (a, b) = split_aoi(&pair, boundary).unwrap();
            let mut seen: Vec<f64> = a.target().band_f64(0);
            seen.extend(b.target().band_f64(0));
            seen.sort_by(f64::total_cmp);
            let all: Vec<f64> = (0..w * h).map(|v| v as f64).collect();
            prop_assert_eq!(seen, all);
        }

        #[test]
        fn remap_is_idempotent(vals in proptest::collection::vec(any::<i8>(), 1..50)) {
            let n = vals.len();
            let (once, _) = remap_nodata(&int8_grid(vals, n, 1, 1)).unwrap();
            let (twice, r) = remap_nodata(&once).unwrap();
            prop_assert_eq!(once, twice);
            prop_assert_eq!(r.invalid, 0);
        }

        #[test]
        fn resample_introduces_no_values(seed in 0u64..1000, ox in -20.0f64..20.0, step in 3.0f64..15.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f32> = (0..36).map(|_| rng.random_range(0..5) as f32).collect();
            let src = Grid::new(6, 6, 1, geo(5.0), 2154, GridData::Float32(vals.clone())).unwrap();
            let t = GeoTransform::new(1000.0 + ox.abs(), 2000.0 - ox.abs(), step, step).unwrap();
            if let Ok(out) = resample_nearest(&src, &t, 2154, 2, 2) {
                for v in out.band_f64(0) {
                    prop_assert!(v.is_nan() || vals.contains(&(v as f32)));
                }
            }
        }
    }
}
