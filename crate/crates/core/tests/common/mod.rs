//! Shared test support: an independent reference GeoTIFF writer and a stub
//! HTTP server with range support and fault injection.
#![allow(dead_code)]

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use embedheight::{GeoTransform, Grid, GridData};

// ---------------------------------------------------------------- writer

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    Little,
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sample {
    I8,
    U8,
    F32,
    F64,
}

impl Sample {
    fn bytes(self) -> usize {
        match self {
            Sample::I8 | Sample::U8 => 1,
            Sample::F32 => 4,
            Sample::F64 => 8,
        }
    }
    fn format(self) -> u16 {
        match self {
            Sample::I8 => 2,
            Sample::U8 => 1,
            Sample::F32 | Sample::F64 => 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TiffSpec {
    pub order: Order,
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub sample: Sample,
    /// Band-sequential values; converted to the sample type on write.
    pub values: Vec<f64>,
    pub tile: Option<(usize, usize)>,
    pub rows_per_strip: usize,
    pub planar_separate: bool,
    pub deflate: bool,
    pub compression_code: Option<u16>,
    pub pixel_scale: Option<[f64; 3]>,
    pub tiepoint: Option<[f64; 6]>,
    pub epsg: Option<u16>,
    pub nodata: Option<String>,
    pub extra: Vec<(u16, u16, Vec<u8>)>,
    /// Added to every block offset, for out-of-bounds tests.
    pub offset_bias: u32,
}

impl TiffSpec {
    pub fn new(width: usize, height: usize, bands: usize, sample: Sample, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height * bands);
        TiffSpec {
            order: Order::Little,
            width,
            height,
            bands,
            sample,
            values,
            tile: None,
            rows_per_strip: height,
            planar_separate: false,
            deflate: false,
            compression_code: None,
            pixel_scale: Some([10.0, 10.0, 0.0]),
            tiepoint: Some([0.0, 0.0, 0.0, 500000.0, 6400000.0, 0.0]),
            epsg: Some(2154),
            nodata: None,
            extra: Vec::new(),
            offset_bias: 0,
        }
    }
}

struct Out {
    order: Order,
    buf: Vec<u8>,
}

impl Out {
    fn u16(&mut self, v: u16) {
        let b = match self.order {
            Order::Little => v.to_le_bytes(),
            Order::Big => v.to_be_bytes(),
        };
        self.buf.extend_from_slice(&b);
    }
    fn u32(&mut self, v: u32) {
        let b = match self.order {
            Order::Little => v.to_le_bytes(),
            Order::Big => v.to_be_bytes(),
        };
        self.buf.extend_from_slice(&b);
    }
    fn encode_u16s(&self, v: &[u16]) -> Vec<u8> {
        v.iter()
            .flat_map(|x| match self.order {
                Order::Little => x.to_le_bytes(),
                Order::Big => x.to_be_bytes(),
            })
            .collect()
    }
    fn encode_u32s(&self, v: &[u32]) -> Vec<u8> {
        v.iter()
            .flat_map(|x| match self.order {
                Order::Little => x.to_le_bytes(),
                Order::Big => x.to_be_bytes(),
            })
            .collect()
    }
    fn encode_f64s(&self, v: &[f64]) -> Vec<u8> {
        v.iter()
            .flat_map(|x| match self.order {
                Order::Little => x.to_le_bytes(),
                Order::Big => x.to_be_bytes(),
            })
            .collect()
    }
}

fn sample_bytes(order: Order, sample: Sample, v: f64) -> Vec<u8> {
    match (sample, order) {
        (Sample::I8, _) => vec![(v as i8) as u8],
        (Sample::U8, _) => vec![v as u8],
        (Sample::F32, Order::Little) => (v as f32).to_le_bytes().to_vec(),
        (Sample::F32, Order::Big) => (v as f32).to_be_bytes().to_vec(),
        (Sample::F64, Order::Little) => v.to_le_bytes().to_vec(),
        (Sample::F64, Order::Big) => v.to_be_bytes().to_vec(),
    }
}

fn zlib(data: &[u8]) -> Vec<u8> {
    let mut e = flate2::write::ZlibEncoder::new(Vec::new(), flate2::Compression::default());
    e.write_all(data).unwrap();
    e.finish().unwrap()
}

/// Serializes `spec` as a classic TIFF: header, blocks, out-of-line values, IFD.
pub fn write_tiff(spec: &TiffSpec) -> Vec<u8> {
    let (w, h, nb) = (spec.width, spec.height, spec.bands);
    let (bw, bh) = spec.tile.unwrap_or((w, spec.rows_per_strip.clamp(1, h)));
    let across = w.div_ceil(bw);
    let down = h.div_ceil(bh);
    let planes = if spec.planar_separate { nb } else { 1 };
    let per_pixel = if spec.planar_separate { 1 } else { nb };
    let value = |b: usize, x: usize, y: usize| spec.values[(b * h + y) * w + x];

    let mut blocks: Vec<Vec<u8>> = Vec::new();
    for plane in 0..planes {
        for ty in 0..down {
            for tx in 0..across {
                let rows = if spec.tile.is_some() { bh } else { bh.min(h - ty * bh) };
                let mut raw = Vec::new();
                for r in 0..rows {
                    for c in 0..bw {
                        for s in 0..per_pixel {
                            let (x, y) = (tx * bw + c, ty * bh + r);
                            let band = plane + s;
                            let v = if x < w && y < h { value(band, x, y) } else { 0.0 };
                            raw.extend(sample_bytes(spec.order, spec.sample, v));
                        }
                    }
                }
                blocks.push(if spec.deflate { zlib(&raw) } else { raw });
            }
        }
    }

    let mut out = Out {
        order: spec.order,
        buf: Vec::new(),
    };
    out.buf.extend_from_slice(match spec.order {
        Order::Little => b"II",
        Order::Big => b"MM",
    });
    out.u16(42);
    out.u32(0); // IFD offset, patched below
    let mut offsets = Vec::new();
    for b in &blocks {
        offsets.push(out.buf.len() as u32 + spec.offset_bias);
        out.buf.extend_from_slice(b);
    }
    let counts: Vec<u32> = blocks.iter().map(|b| b.len() as u32).collect();

    // (tag, type, count, payload bytes)
    let mut tags: Vec<(u16, u16, u32, Vec<u8>)> = Vec::new();
    let short = |o: &Out, v: &[u16]| (3u16, v.len() as u32, o.encode_u16s(v));
    let long = |o: &Out, v: &[u32]| (4u16, v.len() as u32, o.encode_u32s(v));
    let mut push = |tag: u16, t: (u16, u32, Vec<u8>)| tags.push((tag, t.0, t.1, t.2));
    push(256, long(&out, &[w as u32]));
    push(257, long(&out, &[h as u32]));
    push(258, short(&out, &vec![(spec.sample.bytes() * 8) as u16; nb]));
    let compression = spec.compression_code.unwrap_or(if spec.deflate { 8 } else { 1 });
    push(259, short(&out, &[compression]));
    push(262, short(&out, &[1]));
    if spec.tile.is_none() {
        push(273, long(&out, &offsets));
    }
    push(277, short(&out, &[nb as u16]));
    if spec.tile.is_none() {
        push(278, long(&out, &[bh as u32]));
        push(279, long(&out, &counts));
    }
    push(284, short(&out, &[if spec.planar_separate { 2 } else { 1 }]));
    if let Some((tw, th)) = spec.tile {
        push(322, long(&out, &[tw as u32]));
        push(323, long(&out, &[th as u32]));
        push(324, long(&out, &offsets));
        push(325, long(&out, &counts));
    }
    push(339, short(&out, &vec![spec.sample.format(); nb]));
    if let Some(s) = spec.pixel_scale {
        push(33550, (12, 3, out.encode_f64s(&s)));
    }
    if let Some(t) = spec.tiepoint {
        push(33922, (12, 6, out.encode_f64s(&t)));
    }
    if let Some(e) = spec.epsg {
        let keys = [1, 1, 0, 2, 1024, 0, 1, 1, 3072, 0, 1, e];
        push(34735, short(&out, &keys));
    }
    if let Some(nd) = &spec.nodata {
        let mut b = nd.as_bytes().to_vec();
        b.push(0);
        let n = b.len() as u32;
        push(42113, (2, n, b));
    }
    for (tag, kind, bytes) in &spec.extra {
        let size = match kind {
            1 | 2 | 6 | 7 => 1,
            3 => 2,
            4 | 11 => 4,
            _ => 8,
        };
        push(*tag, (*kind, (bytes.len() / size) as u32, bytes.clone()));
    }
    tags.sort_by_key(|t| t.0);

    let mut value_offsets = Vec::new();
    for (_, _, _, payload) in &tags {
        if payload.len() > 4 {
            if out.buf.len() % 2 == 1 {
                out.buf.push(0);
            }
            value_offsets.push(Some(out.buf.len() as u32));
            out.buf.extend_from_slice(payload);
        } else {
            value_offsets.push(None);
        }
    }
    if out.buf.len() % 2 == 1 {
        out.buf.push(0);
    }
    let ifd = out.buf.len() as u32;
    let ifd_bytes = match spec.order {
        Order::Little => ifd.to_le_bytes(),
        Order::Big => ifd.to_be_bytes(),
    };
    out.buf[4..8].copy_from_slice(&ifd_bytes);
    out.u16(tags.len() as u16);
    for ((tag, kind, count, payload), off) in tags.iter().zip(&value_offsets) {
        out.u16(*tag);
        out.u16(*kind);
        out.u32(*count);
        match off {
            Some(o) => out.u32(*o),
            None => {
                let mut inline = payload.clone();
                inline.resize(4, 0);
                out.buf.extend_from_slice(&inline);
            }
        }
    }
    out.u32(0);
    out.buf
}

// ---------------------------------------------------------------- server

#[derive(Debug, Clone, Default)]
pub struct Route {
    pub body: Vec<u8>,
    /// Answer this many requests with 500 before serving normally.
    pub fail_first: usize,
    /// Flip one byte of every response body.
    pub corrupt: bool,
    /// Reply 200 with the whole body even when a range is requested.
    pub ignore_range: bool,
    pub delay: Duration,
}

#[derive(Debug, Clone)]
pub struct Logged {
    pub method: String,
    pub path: String,
    pub range: Option<String>,
}

#[derive(Default)]
struct State {
    routes: HashMap<String, Route>,
    served: HashMap<String, usize>,
    log: Vec<Logged>,
}

pub struct StubServer {
    port: u16,
    state: Arc<Mutex<State>>,
    active: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
}

impl StubServer {
    pub fn start() -> StubServer {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        let state = Arc::new(Mutex::new(State::default()));
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let (s, a, p) = (state.clone(), active.clone(), peak.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let (s, a, p) = (s.clone(), a.clone(), p.clone());
                std::thread::spawn(move || {
                    let now = a.fetch_add(1, Ordering::SeqCst) + 1;
                    p.fetch_max(now, Ordering::SeqCst);
                    let _ = handle(stream, &s);
                    a.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        StubServer { port, state, active, peak }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://127.0.0.1:{}/{}", self.port, path.trim_start_matches('/'))
    }

    pub fn serve(&self, path: &str, body: Vec<u8>) {
        self.route(path, Route { body, ..Route::default() });
    }

    pub fn route(&self, path: &str, route: Route) {
        self.state.lock().unwrap().routes.insert(format!("/{}", path.trim_start_matches('/')), route);
    }

    pub fn log(&self) -> Vec<Logged> {
        self.state.lock().unwrap().log.clone()
    }

    pub fn requests_to(&self, path: &str) -> usize {
        let p = format!("/{}", path.trim_start_matches('/'));
        self.log().iter().filter(|l| l.path == p).count()
    }

    pub fn peak_concurrency(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

fn handle(stream: TcpStream, state: &Mutex<State>) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or("").to_string();
    let path = parts.next().unwrap_or("").to_string();
    let mut range = None;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h)? == 0 || h == "\r\n" || h == "\n" {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.trim().eq_ignore_ascii_case("range") {
                range = Some(v.trim().to_string());
            }
        }
    }
    let (route, nth) = {
        let mut st = state.lock().unwrap();
        st.log.push(Logged {
            method: method.clone(),
            path: path.clone(),
            range: range.clone(),
        });
        let nth = {
            let c = st.served.entry(path.clone()).or_insert(0);
            *c += 1;
            *c
        };
        (st.routes.get(&path).cloned(), nth)
    };
    let mut out = stream;
    let Some(route) = route else {
        return respond(&mut out, "404 Not Found", &[], b"not found", &method);
    };
    std::thread::sleep(route.delay);
    if nth <= route.fail_first {
        return respond(&mut out, "500 Internal Server Error", &[], b"boom", &method);
    }
    let mut body = route.body.clone();
    if route.corrupt && !body.is_empty() {
        body[0] ^= 0xff;
    }
    let total = body.len();
    match range.as_deref().and_then(parse_range).filter(|_| !route.ignore_range) {
        Some((first, last)) => {
            if first >= total {
                let cr = format!("bytes */{total}");
                return respond(&mut out, "416 Range Not Satisfiable", &[("Content-Range", &cr)], b"", &method);
            }
            let last = last.unwrap_or(total - 1).min(total - 1);
            let cr = format!("bytes {first}-{last}/{total}");
            respond(&mut out, "206 Partial Content", &[("Content-Range", &cr)], &body[first..=last], &method)
        }
        None => respond(&mut out, "200 OK", &[], &body, &method),
    }
}

fn parse_range(v: &str) -> Option<(usize, Option<usize>)> {
    let spec = v.strip_prefix("bytes=")?;
    let (a, b) = spec.split_once('-')?;
    Some((a.parse().ok()?, if b.is_empty() { None } else { Some(b.parse().ok()?) }))
}

fn respond(out: &mut TcpStream, status: &str, headers: &[(&str, &str)], body: &[u8], method: &str) -> std::io::Result<()> {
    let mut head = format!("HTTP/1.1 {status}\r\nContent-Length: {}\r\nConnection: close\r\n", body.len());
    for (k, v) in headers {
        head.push_str(&format!("{k}: {v}\r\n"));
    }
    head.push_str("\r\n");
    out.write_all(head.as_bytes())?;
    if method != "HEAD" {
        out.write_all(body)?;
    }
    out.flush()
}

// ---------------------------------------------------------------- misc

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

// ---------------------------------------------------------------- fixtures

/// Deterministic samples exercising each type's range.
pub fn values(sample: Sample, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| match sample {
            Sample::I8 => ((i * 37 % 256) as i64 - 128) as f64,
            Sample::U8 => (i * 53 % 256) as f64,
            Sample::F32 => ((i as f64) * 0.37 - 11.0) as f32 as f64,
            Sample::F64 => (i as f64).sqrt() * -1.25 + 1e-9 * i as f64,
        })
        .collect()
}

/// What decoding `spec` must produce, passed once through EGRID.
pub fn expected_grid(spec: &TiffSpec) -> Grid {
    let data = match spec.sample {
        Sample::I8 => GridData::Int8(spec.values.iter().map(|&v| v as i8).collect()),
        Sample::U8 | Sample::F32 => GridData::Float32(spec.values.iter().map(|&v| v as f32).collect()),
        Sample::F64 => GridData::Float64(spec.values.clone()),
    };
    let geo = GeoTransform::new(500000.0, 6400000.0, 10.0, 10.0).unwrap();
    let g = Grid::new(spec.width, spec.height, spec.bands, geo, 2154, data).unwrap();
    Grid::from_egrid_bytes(&g.to_egrid_bytes()).unwrap()
}

/// Byte order x sample type x strips/tiles x deflate x planar layout.
pub fn combos() -> Vec<TiffSpec> {
    let mut out = Vec::new();
    for order in [Order::Little, Order::Big] {
        for sample in [Sample::I8, Sample::U8, Sample::F32, Sample::F64] {
            for tile in [None, Some((16, 16))] {
                for deflate in [false, true] {
                    for planar_separate in [false, true] {
                        let (w, h, b) = (37, 21, 3);
                        let mut s = TiffSpec::new(w, h, b, sample, values(sample, w * h * b));
                        s.order = order;
                        s.tile = tile;
                        s.rows_per_strip = 4;
                        s.deflate = deflate;
                        s.planar_separate = planar_separate;
                        out.push(s);
                    }
                }
            }
        }
    }
    out
}
