//! Georeferenced multi-band rasters and the EGRID v1 container.
//!
//! Values are stored band-sequential and row-major: sample `(band, x, y)`
//! lives at `band * width * height + y * width + x`.
//!
//! EGRID v1 is little-endian with a fixed 64-byte header:
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `EGR1`                  |
//! | 4      | 2    | version (1)                   |
//! | 6      | 1    | dtype (0 int8, 1 f32, 2 f64)  |
//! | 7      | 1    | flags (bit 0: nodata present) |
//! | 8      | 16   | width, height, bands, crs u32 |
//! | 24     | 40   | nodata, origin_x, origin_y, px, py f64 |
//!
//! followed by `width * height * bands` scalars.

use std::fs;
use std::path::Path;

use crate::error::{io_at, Error, Result};

pub const EGRID_MAGIC: [u8; 4] = *b"EGR1";
pub const EGRID_VERSION: u16 = 1;
pub const EGRID_HEADER_LEN: usize = 64;

/// Affine pixel-to-map mapping for north-up rasters.
///
/// `py` is stored positive; rows descend in northing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub px: f64,
    pub py: f64,
}

impl GeoTransform {
    pub fn new(origin_x: f64, origin_y: f64, px: f64, py: f64) -> Result<Self> {
        let gt = GeoTransform {
            origin_x,
            origin_y,
            px,
            py,
        };
        gt.validate()?;
        Ok(gt)
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.origin_x, self.origin_y, self.px, self.py]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidGrid("non-finite geotransform".into()));
        }
        if self.px <= 0.0 || self.py <= 0.0 {
            return Err(Error::InvalidGrid(format!(
                "pixel sizes must be positive, got ({}, {})",
                self.px, self.py
            )));
        }
        Ok(())
    }

    /// Map coordinate of the center of pixel `(col, row)`.
    pub fn pixel_center(&self, col: f64, row: f64) -> (f64, f64) {
        (
            self.origin_x + (col + 0.5) * self.px,
            self.origin_y - (row + 0.5) * self.py,
        )
    }

    /// Geotransform of a sub-window starting at pixel `(x0, y0)`.
    pub fn shifted(&self, x0: usize, y0: usize) -> GeoTransform {
        GeoTransform {
            origin_x: self.origin_x + x0 as f64 * self.px,
            origin_y: self.origin_y - y0 as f64 * self.py,
            ..*self
        }
    }

    /// True when every field agrees within `tol` (map units).
    pub fn approx_eq(&self, other: &GeoTransform, tol: f64) -> bool {
        (self.origin_x - other.origin_x).abs() <= tol
            && (self.origin_y - other.origin_y).abs() <= tol
            && (self.px - other.px).abs() <= tol
            && (self.py - other.py).abs() <= tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    Int8,
    Float32,
    Float64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::Int8 => 0,
            DType::Float32 => 1,
            DType::Float64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::Int8),
            1 => Ok(DType::Float32),
            2 => Ok(DType::Float64),
            other => Err(Error::UnsupportedDtype(format!("dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::Int8 => 1,
            DType::Float32 => 4,
            DType::Float64 => 8,
        }
    }
}

/// Raster samples, band-sequential row-major.
#[derive(Debug, Clone, PartialEq)]
pub enum GridData {
    Int8(Vec<i8>),
    Float32(Vec<f32>),
    Float64(Vec<f64>),
}

impl GridData {
    pub fn len(&self) -> usize {
        match self {
            GridData::Int8(v) => v.len(),
            GridData::Float32(v) => v.len(),
            GridData::Float64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            GridData::Int8(_) => DType::Int8,
            GridData::Float32(_) => DType::Float32,
            GridData::Float64(_) => DType::Float64,
        }
    }

    #[inline]
    pub fn get_f64(&self, idx: usize) -> f64 {
        match self {
            GridData::Int8(v) => v[idx] as f64,
            GridData::Float32(v) => v[idx] as f64,
            GridData::Float64(v) => v[idx],
        }
    }

    fn gather(&self, indices: impl Iterator<Item = usize>) -> GridData {
        match self {
            GridData::Int8(v) => GridData::Int8(indices.map(|i| v[i]).collect()),
            GridData::Float32(v) => GridData::Float32(indices.map(|i| v[i]).collect()),
            GridData::Float64(v) => GridData::Float64(indices.map(|i| v[i]).collect()),
        }
    }
}

/// A georeferenced raster. Immutable once built; modifications produce new grids.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    bands: usize,
    nodata: Option<f64>,
    geo: GeoTransform,
    crs: u32,
    data: GridData,
}

impl Grid {
    pub fn new(
        width: usize,
        height: usize,
        bands: usize,
        geo: GeoTransform,
        crs: u32,
        data: GridData,
    ) -> Result<Self> {
        if width == 0 || height == 0 || bands == 0 {
            return Err(Error::InvalidGrid(format!(
                "dimensions must be >= 1, got {width}x{height}x{bands}"
            )));
        }
        for (name, v) in [("width", width), ("height", height), ("bands", bands)] {
            if u32::try_from(v).is_err() {
                return Err(Error::InvalidGrid(format!("{name} {v} exceeds u32")));
            }
        }
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(bands))
            .ok_or_else(|| Error::InvalidGrid("dimension overflow".into()))?;
        if data.len() != expected {
            return Err(Error::InvalidGrid(format!(
                "expected {expected} values for {width}x{height}x{bands}, got {}",
                data.len()
            )));
        }
        geo.validate()?;
        Ok(Grid {
            width,
            height,
            bands,
            nodata: None,
            geo,
            crs,
            data,
        })
    }

    /// Sets the nodata sentinel. For int8 grids it must be an integer in `[-128, 127]`.
    pub fn with_nodata(mut self, nodata: Option<f64>) -> Result<Self> {
        if let (Some(nd), DType::Int8) = (nodata, self.dtype()) {
            if nd.fract() != 0.0 || !(-128.0..=127.0).contains(&nd) {
                return Err(Error::InvalidGrid(format!(
                    "nodata {nd} is not representable as int8"
                )));
            }
        }
        self.nodata = nodata;
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn bands(&self) -> usize {
        self.bands
    }
    pub fn nodata(&self) -> Option<f64> {
        self.nodata
    }
    pub fn geo(&self) -> &GeoTransform {
        &self.geo
    }
    pub fn crs(&self) -> u32 {
        self.crs
    }
    pub fn data(&self) -> &GridData {
        &self.data
    }
    pub fn into_data(self) -> GridData {
        self.data
    }
    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn index(&self, band: usize, x: usize, y: usize) -> usize {
        band * self.width * self.height + y * self.width + x
    }

    #[inline]
    pub fn get_f64(&self, band: usize, x: usize, y: usize) -> f64 {
        self.data.get_f64(self.index(band, x, y))
    }

    /// True when the sample equals the nodata sentinel (NaN sentinels match NaN).
    pub fn is_nodata_value(&self, v: f64) -> bool {
        match self.nodata {
            Some(nd) if nd.is_nan() => v.is_nan(),
            Some(nd) => v == nd,
            None => false,
        }
    }

    /// Copy of the grid with the same metadata and new samples.
    pub fn with_data(&self, data: GridData) -> Result<Grid> {
        let g = Grid::new(self.width, self.height, self.bands, self.geo, self.crs, data)?;
        match g.dtype() {
            DType::Int8 => g.with_nodata(self.nodata),
            _ => Ok(Grid {
                nodata: self.nodata,
                ..g
            }),
        }
    }

    /// All samples converted to `f32`, band-sequential.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            GridData::Int8(v) => v.iter().map(|&x| x as f32).collect(),
            GridData::Float32(v) => v.clone(),
            GridData::Float64(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn band_f64(&self, band: usize) -> Vec<f64> {
        let n = self.pixels();
        (band * n..(band + 1) * n)
            .map(|i| self.data.get_f64(i))
            .collect()
    }

    /// Crop `w x h` pixels at `(x0, y0)` across all bands.
    pub fn window(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Grid> {
        let fits = w >= 1
            && h >= 1
            && x0.checked_add(w).is_some_and(|e| e <= self.width)
            && y0.checked_add(h).is_some_and(|e| e <= self.height);
        if !fits {
            return Err(Error::WindowOutOfBounds {
                x0,
                y0,
                w,
                h,
                width: self.width,
                height: self.height,
            });
        }
        let (width, height) = (self.width, self.height);
        let indices = (0..self.bands).flat_map(move |b| {
            (y0..y0 + h).flat_map(move |y| (x0..x0 + w).map(move |x| b * width * height + y * width + x))
        });
        let data = self.data.gather(indices);
        Ok(Grid {
            width: w,
            height: h,
            bands: self.bands,
            nodata: self.nodata,
            geo: self.geo.shifted(x0, y0),
            crs: self.crs,
            data,
        })
    }

    /// Serialize to EGRID v1 bytes.
    pub fn to_egrid_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(EGRID_HEADER_LEN + self.data.len() * self.dtype().size());
        out.extend_from_slice(&EGRID_MAGIC);
        out.extend_from_slice(&EGRID_VERSION.to_le_bytes());
        out.push(self.dtype().code());
        out.push(u8::from(self.nodata.is_some()));
        for v in [self.width, self.height, self.bands] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.crs.to_le_bytes());
        for v in [
            self.nodata.unwrap_or(0.0),
            self.geo.origin_x,
            self.geo.origin_y,
            self.geo.px,
            self.geo.py,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        debug_assert_eq!(out.len(), EGRID_HEADER_LEN);
        match &self.data {
            GridData::Int8(v) => out.extend(v.iter().map(|&x| x as u8)),
            GridData::Float32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            GridData::Float64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Parse EGRID v1 bytes.
    pub fn from_egrid_bytes(bytes: &[u8]) -> Result<Grid> {
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                expected: EGRID_HEADER_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != EGRID_MAGIC {
            return Err(Error::BadMagic {
                expected: EGRID_MAGIC,
                found: magic,
            });
        }
        if bytes.len() < EGRID_HEADER_LEN {
            return Err(Error::Truncated {
                expected: EGRID_HEADER_LEN,
                found: bytes.len(),
            });
        }
        let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());

        let version = u16_at(4);
        if version != EGRID_VERSION {
            return Err(Error::HeaderMismatch(format!("unsupported EGRID version {version}")));
        }
        let dtype = DType::from_code(bytes[6])?;
        let flags = bytes[7];
        let (width, height, bands) = (u32_at(8), u32_at(12), u32_at(16));
        let crs = u32_at(20) as u32;
        let nodata = (flags & 1 == 1).then(|| f64_at(24));
        let geo = GeoTransform {
            origin_x: f64_at(32),
            origin_y: f64_at(40),
            px: f64_at(48),
            py: f64_at(56),
        };

        let count = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(bands))
            .ok_or_else(|| Error::HeaderMismatch("dimension overflow".into()))?;
        let payload = &bytes[EGRID_HEADER_LEN..];
        let expected = count * dtype.size();
        if payload.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(Error::HeaderMismatch(format!(
                "header declares {expected} payload bytes, file holds {}",
                payload.len()
            )));
        }
        let data = match dtype {
            DType::Int8 => GridData::Int8(payload.iter().map(|&b| b as i8).collect()),
            DType::Float32 => GridData::Float32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::Float64 => GridData::Float64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Grid::new(width, height, bands, geo, crs, data)?.with_nodata(nodata)
    }
}

/// Write `grid` as EGRID v1; returns the number of bytes written.
pub fn write_internal(grid: &Grid, path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let bytes = grid.to_egrid_bytes();
    fs::write(path, &bytes).map_err(io_at(path))?;
    Ok(bytes.len() as u64)
}

pub fn read_internal(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_at(path))?;
    Grid::from_egrid_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geo() -> GeoTransform {
        GeoTransform::new(500_000.0, 6_400_000.0, 10.0, 10.0).unwrap()
    }

    fn seq_grid(w: usize, h: usize) -> Grid {
        let data = GridData::Float32((0..w * h).map(|v| v as f32).collect());
        Grid::new(w, h, 1, geo(), 2154, data).unwrap()
    }

    #[test]
    fn single_pixel_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.egrid");
        let g = Grid::new(1, 1, 1, geo(), 2154, GridData::Float32(vec![0.0])).unwrap();
        assert_eq!(write_internal(&g, &path).unwrap(), 68);
        assert_eq!(fs::metadata(&path).unwrap().len(), 68);
        assert_eq!(read_internal(&path).unwrap(), g);
    }

    #[test]
    fn int8_payload_length() {
        let g = Grid::new(3, 2, 64, geo(), 0, GridData::Int8(vec![7; 384])).unwrap();
        assert_eq!(g.to_egrid_bytes().len() - EGRID_HEADER_LEN, 384);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = seq_grid(2, 2).to_egrid_bytes();
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(Grid::from_egrid_bytes(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = seq_grid(4, 4).to_egrid_bytes();
        let short = &bytes[..EGRID_HEADER_LEN + 15 * 4];
        assert!(matches!(Grid::from_egrid_bytes(short), Err(Error::Truncated { .. })));
    }

    #[test]
    fn oversized_payload_rejected() {
        let mut bytes = seq_grid(2, 2).to_egrid_bytes();
        bytes.extend_from_slice(&[0; 4]);
        assert!(matches!(Grid::from_egrid_bytes(&bytes), Err(Error::HeaderMismatch(_))));
    }

    #[test]
    fn invalid_dimensions() {
        assert!(Grid::new(0, 1, 1, geo(), 0, GridData::Int8(vec![])).is_err());
        assert!(Grid::new(2, 2, 1, geo(), 0, GridData::Int8(vec![0; 3])).is_err());
        let bad_geo = GeoTransform { px: -1.0, ..geo() };
        assert!(Grid::new(1, 1, 1, bad_geo, 0, GridData::Int8(vec![0])).is_err());
    }

    #[test]
    fn int8_nodata_must_be_representable() {
        let g = Grid::new(1, 1, 1, geo(), 0, GridData::Int8(vec![0])).unwrap();
        assert!(g.clone().with_nodata(Some(-128.0)).is_ok());
        assert!(g.clone().with_nodata(Some(-129.0)).is_err());
        assert!(g.with_nodata(Some(0.5)).is_err());
    }

    #[test]
    fn identity_window() {
        let g = seq_grid(4, 3);
        assert_eq!(g.window(0, 0, 4, 3).unwrap(), g);
    }

    #[test]
    fn interior_window_values() {
        let g = seq_grid(4, 4);
        let w = g.window(1, 1, 2, 2).unwrap();
        assert_eq!(w.data(), &GridData::Float32(vec![5.0, 6.0, 9.0, 10.0]));
        assert_eq!(w.geo().origin_x, 500_010.0);
        assert_eq!(w.geo().origin_y, 6_399_990.0);
    }

    #[test]
    fn window_out_of_bounds() {
        let g = seq_grid(4, 4);
        assert!(matches!(g.window(3, 0, 2, 1), Err(Error::WindowOutOfBounds { .. })));
        assert!(g.window(0, 0, 0, 1).is_err());
    }

    #[test]
    fn multiband_window_is_per_band() {
        let data = GridData::Int8((0..18).map(|v| v as i8).collect());
        let g = Grid::new(3, 3, 2, geo(), 0, data).unwrap();
        let w = g.window(1, 1, 1, 1).unwrap();
        assert_eq!(w.data(), &GridData::Int8(vec![4, 13]));
    }

    fn arb_grid() -> impl Strategy<Value = Grid> {
        (1usize..6, 1usize..6, 1usize..4, 0u8..3, any::<bool>(), any::<u32>()).prop_flat_map(
            |(w, h, b, dt, has_nd, crs)| {
                let n = w * h * b;
                let data = match dt {
                    0 => proptest::collection::vec(any::<i8>(), n)
                        .prop_map(GridData::Int8)
                        .boxed(),
                    1 => proptest::collection::vec(-1e6f32..1e6, n)
                        .prop_map(GridData::Float32)
                        .boxed(),
                    _ => proptest::collection::vec(-1e12f64..1e12, n)
                        .prop_map(GridData::Float64)
                        .boxed(),
                };
                (data, -1e6f64..1e6, 0.1f64..100.0).prop_map(move |(data, ox, px)| {
                    let geo = GeoTransform::new(ox, -ox, px, px * 0.5).unwrap();
                    let nd = has_nd.then_some(-128.0);
                    Grid::new(w, h, b, geo, crs, data).unwrap().with_nodata(nd).unwrap()
                })
            },
        )
    }

    proptest! {
        #[test]
        fn egrid_round_trip(g in arb_grid()) {
            let bytes = g.to_egrid_bytes();
            prop_assert_eq!(bytes.len(), EGRID_HEADER_LEN + g.data().len() * g.dtype().size());
            let back = Grid::from_egrid_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_egrid_bytes(), bytes);
            prop_assert_eq!(back, g);
        }

        #[test]
        fn window_composition(a in 0usize..3, b in 0usize..3, c in 0usize..2, d in 0usize..2) {
            let g = seq_grid(8, 7);
            let outer = g.window(a, b, 5, 4).unwrap();
            let inner = outer.window(c, d, 3, 2).unwrap();
            let direct = g.window(a + c, b + d, 3, 2).unwrap();
            prop_assert_eq!(inner.data(), direct.data());
            prop_assert!(inner.geo().approx_eq(direct.geo(), 1e-6));
        }

        #[test]
        fn pixel_centers_stable_under_window(x0 in 0usize..4, y0 in 0usize..4, i in 0usize..3, j in 0usize..3) {
            let g = seq_grid(8, 8);
            let w = g.window(x0, y0, 4, 4).unwrap();
            let (ax, ay) = w.geo().pixel_center(i as f64, j as f64);
            let (bx, by) = g.geo().pixel_center((i + x0) as f64, (j + y0) as f64);
            prop_assert!((ax - bx).abs() < 1e-6 && (ay - by).abs() < 1e-6);
        }
    }
}
