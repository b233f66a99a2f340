//! GeoTIFF subset reader: first IFD only, strips or tiles, chunky or planar,
//! no compression or deflate, int8/uint8/float32/float64 samples,
//! georeferenced by ModelPixelScale + ModelTiepoint.

use std::io::Read;

use flate2::read::ZlibDecoder;

use super::source::ByteSource;
use crate::error::{Error, Result};
use crate::grid::{GeoTransform, Grid, GridData};

pub mod tag {
    pub const IMAGE_WIDTH: u16 = 256;
    pub const IMAGE_LENGTH: u16 = 257;
    pub const BITS_PER_SAMPLE: u16 = 258;
    pub const COMPRESSION: u16 = 259;
    pub const PHOTOMETRIC: u16 = 262;
    pub const STRIP_OFFSETS: u16 = 273;
    pub const SAMPLES_PER_PIXEL: u16 = 277;
    pub const ROWS_PER_STRIP: u16 = 278;
    pub const STRIP_BYTE_COUNTS: u16 = 279;
    pub const PLANAR_CONFIGURATION: u16 = 284;
    pub const PREDICTOR: u16 = 317;
    pub const TILE_WIDTH: u16 = 322;
    pub const TILE_LENGTH: u16 = 323;
    pub const TILE_OFFSETS: u16 = 324;
    pub const TILE_BYTE_COUNTS: u16 = 325;
    pub const SAMPLE_FORMAT: u16 = 339;
    pub const MODEL_PIXEL_SCALE: u16 = 33550;
    pub const MODEL_TIEPOINT: u16 = 33922;
    pub const MODEL_TRANSFORMATION: u16 = 34264;
    pub const GEO_KEY_DIRECTORY: u16 = 34735;
    pub const GDAL_NODATA: u16 = 42113;
}

const GEOKEY_RASTER_TYPE: u16 = 1025;
const GEOKEY_GEOGRAPHIC_TYPE: u16 = 2048;
const GEOKEY_PROJECTED_TYPE: u16 = 3072;
const USER_DEFINED: u16 = 32767;
const PREFETCH: u64 = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteOrder {
    II,
    MM,
}

impl ByteOrder {
    fn u16(self, b: &[u8]) -> u16 {
        let a = [b[0], b[1]];
        match self {
            ByteOrder::II => u16::from_le_bytes(a),
            ByteOrder::MM => u16::from_be_bytes(a),
        }
    }
    fn u32(self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        match self {
            ByteOrder::II => u32::from_le_bytes(a),
            ByteOrder::MM => u32::from_be_bytes(a),
        }
    }
    fn u64(self, b: &[u8]) -> u64 {
        let a: [u8; 8] = b[..8].try_into().unwrap();
        match self {
            ByteOrder::II => u64::from_le_bytes(a),
            ByteOrder::MM => u64::from_be_bytes(a),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Strips { rows_per_strip: usize },
    Tiles { width: usize, height: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Compression {
    None,
    Deflate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleType {
    Int8,
    UInt8,
    Float32,
    Float64,
}

impl SampleType {
    pub fn size(self) -> usize {
        match self {
            SampleType::Int8 | SampleType::UInt8 => 1,
            SampleType::Float32 => 4,
            SampleType::Float64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Planar {
    Chunky,
    Separate,
}

/// Everything read from the first IFD.
#[derive(Debug, Clone, PartialEq)]
pub struct TiffInfo {
    pub byte_order: ByteOrder,
    pub width: usize,
    pub height: usize,
    pub samples: usize,
    pub sample_type: SampleType,
    pub compression: Compression,
    pub layout: Layout,
    pub planar: Planar,
    pub offsets: Vec<u64>,
    pub byte_counts: Vec<u64>,
    pub pixel_scale: [f64; 3],
    pub tiepoint: [f64; 6],
    pub epsg: Option<u32>,
    pub pixel_is_point: bool,
    pub nodata: Option<f64>,
}

impl TiffInfo {
    /// Top-left corner geotransform.
    pub fn geo_transform(&self) -> Result<GeoTransform> {
        let [sx, sy, _] = self.pixel_scale;
        let [i, j, _, x, y, _] = self.tiepoint;
        let (mut ox, mut oy) = (x - i * sx, y + j * sy);
        if self.pixel_is_point {
            ox -= 0.5 * sx;
            oy += 0.5 * sy;
        }
        GeoTransform::new(ox, oy, sx, sy)
    }

    fn block_dims(&self) -> (usize, usize) {
        match self.layout {
            Layout::Strips { rows_per_strip } => (self.width, rows_per_strip),
            Layout::Tiles { width, height } => (width, height),
        }
    }

    fn blocks_per_plane(&self) -> (usize, usize) {
        let (bw, bh) = self.block_dims();
        (self.width.div_ceil(bw), self.height.div_ceil(bh))
    }

    fn planes(&self) -> usize {
        match self.planar {
            Planar::Chunky => 1,
            Planar::Separate => self.samples,
        }
    }
}

struct Entry {
    tag: u16,
    kind: u16,
    count: u64,
    raw: [u8; 4],
}

fn type_size(kind: u16) -> Option<u64> {
    match kind {
        1 | 2 | 6 | 7 => Some(1),
        3 | 8 => Some(2),
        4 | 9 | 11 => Some(4),
        5 | 10 | 12 => Some(8),
        _ => None,
    }
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::Tiff(msg.into())
}

/// Serves reads from a prefetched head when possible.
struct Reader<'a> {
    src: &'a dyn ByteSource,
    head: Vec<u8>,
    len: u64,
    order: ByteOrder,
}

impl Reader<'_> {
    fn at(&self, offset: u64, n: u64) -> Result<Vec<u8>> {
        let end = offset.checked_add(n).filter(|&e| e <= self.len).ok_or_else(|| {
            malformed(format!("range {offset}+{n} outside file of {} bytes", self.len))
        })?;
        if end <= self.head.len() as u64 {
            Ok(self.head[offset as usize..end as usize].to_vec())
        } else {
            self.src.read_range(offset, n)
        }
    }

    fn entry_bytes(&self, e: &Entry) -> Result<Vec<u8>> {
        let size = type_size(e.kind).ok_or_else(|| malformed(format!("tag {} has unknown type {}", e.tag, e.kind)))?;
        let n = size
            .checked_mul(e.count)
            .ok_or_else(|| malformed(format!("tag {} count overflows", e.tag)))?;
        if n <= 4 {
            Ok(e.raw[..n as usize].to_vec())
        } else {
            self.at(self.order.u32(&e.raw) as u64, n)
        }
    }

    fn uints(&self, e: &Entry) -> Result<Vec<u64>> {
        let b = self.entry_bytes(e)?;
        let o = self.order;
        Ok(match e.kind {
            1 | 7 => b.iter().map(|&v| v as u64).collect(),
            3 => b.chunks_exact(2).map(|c| o.u16(c) as u64).collect(),
            4 => b.chunks_exact(4).map(|c| o.u32(c) as u64).collect(),
            k => return Err(malformed(format!("tag {} expects unsigned integers, found type {k}", e.tag))),
        })
    }

    fn doubles(&self, e: &Entry) -> Result<Vec<f64>> {
        let b = self.entry_bytes(e)?;
        let o = self.order;
        Ok(match e.kind {
            12 => b.chunks_exact(8).map(|c| f64::from_bits(o.u64(c))).collect(),
            11 => b.chunks_exact(4).map(|c| f32::from_bits(o.u32(c)) as f64).collect(),
            1 | 3 | 4 => self.uints(e)?.into_iter().map(|v| v as f64).collect(),
            k => return Err(malformed(format!("tag {} expects numbers, found type {k}", e.tag))),
        })
    }
}

fn single(r: &Reader, e: Option<&Entry>, name: &str) -> Result<Option<u64>> {
    let Some(e) = e else { return Ok(None) };
    let v = r.uints(e)?;
    match v.split_first() {
        Some((first, rest)) if rest.iter().all(|x| x == first) => Ok(Some(*first)),
        Some(_) => Err(malformed(format!("{name} differs between samples"))),
        None => Err(malformed(format!("{name} is empty"))),
    }
}

/// Parse the header and first IFD.
pub fn read_info(src: &dyn ByteSource) -> Result<TiffInfo> {
    let len = src.len()?;
    let head = src.read_range(0, len.min(PREFETCH))?;
    if head.len() < 8 {
        return Err(malformed("file shorter than the 8-byte header"));
    }
    let order = match &head[..2] {
        b"II" => ByteOrder::II,
        b"MM" => ByteOrder::MM,
        _ => return Err(malformed("missing II/MM byte-order mark")),
    };
    match order.u16(&head[2..4]) {
        42 => {}
        43 => return Err(malformed("BigTIFF is not supported")),
        m => return Err(malformed(format!("bad magic number {m}"))),
    }
    let r = Reader { src, head, len, order };
    let ifd = order.u32(&r.head[4..8]) as u64;
    let n = order.u16(&r.at(ifd, 2)?) as u64;
    let table = r.at(ifd + 2, n * 12)?;
    let entries: Vec<Entry> = table
        .chunks_exact(12)
        .map(|c| Entry {
            tag: order.u16(&c[0..2]),
            kind: order.u16(&c[2..4]),
            count: order.u32(&c[4..8]) as u64,
            raw: c[8..12].try_into().unwrap(),
        })
        .collect();
    let find = |t: u16| entries.iter().find(|e| e.tag == t);
    let required = |t: u16, name: &str| -> Result<u64> {
        single(&r, find(t), name)?.ok_or_else(|| malformed(format!("missing {name}")))
    };

    let width = required(tag::IMAGE_WIDTH, "ImageWidth")? as usize;
    let height = required(tag::IMAGE_LENGTH, "ImageLength")? as usize;
    if width == 0 || height == 0 {
        return Err(malformed("zero image dimension"));
    }
    let samples = single(&r, find(tag::SAMPLES_PER_PIXEL), "SamplesPerPixel")?.unwrap_or(1) as usize;
    let bits = single(&r, find(tag::BITS_PER_SAMPLE), "BitsPerSample")?.unwrap_or(1) as u16;
    let format = single(&r, find(tag::SAMPLE_FORMAT), "SampleFormat")?.unwrap_or(1) as u16;
    let sample_type = match (format, bits) {
        (2, 8) => SampleType::Int8,
        (1, 8) => SampleType::UInt8,
        (3, 32) => SampleType::Float32,
        (3, 64) => SampleType::Float64,
        (format, bits) => return Err(Error::UnsupportedSampleFormat { format, bits }),
    };
    let compression = match single(&r, find(tag::COMPRESSION), "Compression")?.unwrap_or(1) {
        1 => Compression::None,
        8 | 32946 => Compression::Deflate,
        c => return Err(Error::UnsupportedCompression(c as u16)),
    };
    if let Some(p) = single(&r, find(tag::PREDICTOR), "Predictor")? {
        if p != 1 {
            return Err(malformed(format!("predictor {p} is not supported")));
        }
    }
    let planar = match single(&r, find(tag::PLANAR_CONFIGURATION), "PlanarConfiguration")?.unwrap_or(1) {
        1 => Planar::Chunky,
        2 => Planar::Separate,
        p => return Err(malformed(format!("PlanarConfiguration {p}"))),
    };

    let tiled = find(tag::TILE_OFFSETS).is_some();
    let stripped = find(tag::STRIP_OFFSETS).is_some();
    let (layout, offsets, byte_counts) = match (tiled, stripped) {
        (true, false) => {
            let tw = required(tag::TILE_WIDTH, "TileWidth")? as usize;
            let th = required(tag::TILE_LENGTH, "TileLength")? as usize;
            if tw == 0 || th == 0 {
                return Err(malformed("zero tile dimension"));
            }
            let counts = find(tag::TILE_BYTE_COUNTS).ok_or_else(|| malformed("missing TileByteCounts"))?;
            (
                Layout::Tiles { width: tw, height: th },
                r.uints(find(tag::TILE_OFFSETS).unwrap())?,
                r.uints(counts)?,
            )
        }
        (false, true) => {
            let rps = single(&r, find(tag::ROWS_PER_STRIP), "RowsPerStrip")?.unwrap_or(u32::MAX as u64);
            let rows_per_strip = (rps as usize).clamp(1, height);
            let counts = find(tag::STRIP_BYTE_COUNTS).ok_or_else(|| malformed("missing StripByteCounts"))?;
            (
                Layout::Strips { rows_per_strip },
                r.uints(find(tag::STRIP_OFFSETS).unwrap())?,
                r.uints(counts)?,
            )
        }
        (true, true) => return Err(malformed("both strip and tile layouts present")),
        (false, false) => return Err(malformed("no strip or tile offsets")),
    };

    if find(tag::MODEL_TRANSFORMATION).is_some() {
        return Err(malformed("ModelTransformation georeferencing is not supported; expected pixel scale + tiepoint"));
    }
    let scale = match find(tag::MODEL_PIXEL_SCALE) {
        Some(e) => r.doubles(e)?,
        None => return Err(Error::MissingGeotags("ModelPixelScale")),
    };
    let tie = match find(tag::MODEL_TIEPOINT) {
        Some(e) => r.doubles(e)?,
        None => return Err(Error::MissingGeotags("ModelTiepoint")),
    };
    if scale.len() < 2 || tie.len() < 6 {
        return Err(malformed("short ModelPixelScale or ModelTiepoint"));
    }

    let (mut epsg, mut pixel_is_point) = (None, false);
    if let Some(e) = find(tag::GEO_KEY_DIRECTORY) {
        let keys = r.uints(e)?;
        if keys.len() < 4 {
            return Err(malformed("short GeoKeyDirectory"));
        }
        let count = keys[3] as usize;
        let (mut projected, mut geographic) = (None, None);
        for k in keys[4..].chunks_exact(4).take(count) {
            let (id, location, value) = (k[0] as u16, k[1], k[3] as u16);
            if location != 0 {
                continue;
            }
            match id {
                GEOKEY_RASTER_TYPE => pixel_is_point = value == 2,
                GEOKEY_PROJECTED_TYPE if value != USER_DEFINED => projected = Some(value as u32),
                GEOKEY_GEOGRAPHIC_TYPE if value != USER_DEFINED => geographic = Some(value as u32),
                _ => {}
            }
        }
        epsg = projected.or(geographic);
    }

    let nodata = match find(tag::GDAL_NODATA) {
        Some(e) if e.kind == 2 => {
            let b = r.entry_bytes(e)?;
            let s = String::from_utf8_lossy(&b);
            let s = s.trim_matches(|c: char| c == '\0' || c.is_whitespace());
            let v = if s.eq_ignore_ascii_case("nan") {
                f64::NAN
            } else {
                s.parse().map_err(|_| malformed(format!("GDAL_NODATA value {s:?}")))?
            };
            Some(v)
        }
        Some(_) => return Err(malformed("GDAL_NODATA must be ASCII")),
        None => None,
    };

    let info = TiffInfo {
        byte_order: order,
        width,
        height,
        samples,
        sample_type,
        compression,
        layout,
        planar,
        offsets,
        byte_counts,
        pixel_scale: [scale[0], scale[1], scale.get(2).copied().unwrap_or(0.0)],
        tiepoint: tie[..6].try_into().unwrap(),
        epsg,
        pixel_is_point,
        nodata,
    };
    let (across, down) = info.blocks_per_plane();
    let expected = across * down * info.planes();
    if info.offsets.len() != expected || info.byte_counts.len() != expected {
        return Err(malformed(format!(
            "expected {expected} blocks, found {} offsets and {} byte counts",
            info.offsets.len(),
            info.byte_counts.len()
        )));
    }
    for (o, c) in info.offsets.iter().zip(&info.byte_counts) {
        if o.checked_add(*c).is_none_or(|end| end > len) {
            return Err(malformed(format!("block at {o}+{c} outside file of {len} bytes")));
        }
    }
    Ok(info)
}

fn decode_block(info: &TiffInfo, raw: Vec<u8>, expected: usize, index: usize) -> Result<Vec<u8>> {
    let data = match info.compression {
        Compression::None => raw,
        Compression::Deflate => {
            let mut out = Vec::with_capacity(expected);
            ZlibDecoder::new(raw.as_slice())
                .read_to_end(&mut out)
                .map_err(|e| malformed(format!("block {index}: deflate error: {e}")))?;
            out
        }
    };
    if data.len() < expected {
        return Err(malformed(format!("block {index} holds {} bytes, expected {expected}", data.len())));
    }
    Ok(data)
}

fn to_grid_data(info: &TiffInfo, raw: &[u8]) -> GridData {
    let o = info.byte_order;
    match info.sample_type {
        SampleType::Int8 => GridData::Int8(raw.iter().map(|&b| b as i8).collect()),
        SampleType::UInt8 => GridData::Float32(raw.iter().map(|&b| b as f32).collect()),
        SampleType::Float32 => GridData::Float32(raw.chunks_exact(4).map(|c| f32::from_bits(o.u32(c))).collect()),
        SampleType::Float64 => GridData::Float64(raw.chunks_exact(8).map(|c| f64::from_bits(o.u64(c))).collect()),
    }
}

/// Decode the first image of a GeoTIFF from any byte source; blocks are
/// fetched one range at a time.
pub fn decode_source(src: &dyn ByteSource) -> Result<Grid> {
    let info = read_info(src)?;
    let (w, h, spp, bs) = (info.width, info.height, info.samples, info.sample_type.size());
    let (bw, bh) = info.block_dims();
    let (across, down) = info.blocks_per_plane();
    let per_plane = across * down;
    let mut out = vec![0u8; w * h * spp * bs];
    for (index, (&offset, &count)) in info.offsets.iter().zip(&info.byte_counts).enumerate() {
        let (plane, k) = (index / per_plane, index % per_plane);
        let (bx, by) = (k % across * bw, k / across * bh);
        let rows = bh.min(h - by);
        let cols = bw.min(w - bx);
        // Tiles are always stored full size; the last strip only holds its rows.
        let stored_rows = match info.layout {
            Layout::Tiles { .. } => bh,
            Layout::Strips { .. } => rows,
        };
        let chunk = match info.planar {
            Planar::Chunky => spp,
            Planar::Separate => 1,
        };
        let expected = stored_rows * bw * chunk * bs;
        let data = decode_block(&info, src.read_range(offset, count)?, expected, index)?;
        for r in 0..rows {
            for c in 0..cols {
                for s in 0..chunk {
                    let band = plane + s;
                    let from = ((r * bw + c) * chunk + s) * bs;
                    let to = ((band * h + by + r) * w + bx + c) * bs;
                    out[to..to + bs].copy_from_slice(&data[from..from + bs]);
                }
            }
        }
    }
    if info.sample_type == SampleType::UInt8 {
        log::warn!("uint8 samples widened to float32");
    }
    let data = to_grid_data(&info, &out);
    Grid::new(w, h, spp, info.geo_transform()?, info.epsg.unwrap_or(0), data)?.with_nodata(info.nodata)
}

pub fn decode_geotiff(bytes: &[u8]) -> Result<Grid> {
    decode_source(&bytes)
}

pub fn read_geotiff(path: impl AsRef<std::path::Path>) -> Result<Grid> {
    decode_source(&super::source::FileSource::open(path)?)
}
