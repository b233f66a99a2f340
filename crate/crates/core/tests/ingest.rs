mod common;

use std::io::Cursor;
use std::time::Duration;

use common::{combos, expected_grid, sha256_hex, values, write_tiff, Route, Sample, StubServer, TiffSpec};
use embedheight::ingest::{
    decode_geotiff, decode_source, fetch_with, read_info, read_range, ByteSource, FetchManifest, FetchOptions,
    HttpSource,
};
use embedheight::{Error, GridData};

#[test]
fn every_supported_combination_matches_egrid_round_trip() {
    let all = combos();
    assert_eq!(all.len(), 64);
    for spec in all {
        let bytes = write_tiff(&spec);
        let got = decode_geotiff(&bytes).unwrap_or_else(|e| panic!("{spec:?}: {e}"));
        let want = expected_grid(&spec);
        assert_eq!(got.width(), want.width());
        assert_eq!(got.geo(), want.geo());
        assert_eq!(got.crs(), 2154);
        assert_eq!(got.to_egrid_bytes(), want.to_egrid_bytes(), "{:?}", (spec.order, spec.sample, spec.tile, spec.deflate, spec.planar_separate));
    }
}

/// The reference writer itself is checked against an independent decoder.
#[test]
fn reference_writer_agrees_with_tiff_crate() {
    use tiff::decoder::{Decoder, DecodingResult};
    for spec in combos().into_iter().filter(|s| !s.planar_separate) {
        let bytes = write_tiff(&spec);
        let mut d = Decoder::new(Cursor::new(&bytes)).unwrap();
        assert_eq!(d.dimensions().unwrap(), (spec.width as u32, spec.height as u32));
        let img = d.read_image().unwrap();
        let interleaved: Vec<f64> = match img {
            DecodingResult::I8(v) => v.into_iter().map(f64::from).collect(),
            DecodingResult::U8(v) => v.into_iter().map(f64::from).collect(),
            DecodingResult::F32(v) => v.into_iter().map(f64::from).collect(),
            DecodingResult::F64(v) => v,
            other => panic!("unexpected {:?}", std::mem::discriminant(&other)),
        };
        let (w, h, b) = (spec.width, spec.height, spec.bands);
        for y in 0..h {
            for x in 0..w {
                for k in 0..b {
                    let a = interleaved[(y * w + x) * b + k];
                    let e = spec.values[(k * h + y) * w + x];
                    assert_eq!(a.to_bits(), e.to_bits(), "{:?} ({x},{y},{k})", (spec.sample, spec.order));
                }
            }
        }
        let scale = d.get_tag_f64_vec(tiff::tags::Tag::ModelPixelScaleTag).unwrap();
        assert_eq!(scale, vec![10.0, 10.0, 0.0]);
    }
}

#[test]
fn tiny_float_tiff_and_its_deflate_twin() {
    let spec = TiffSpec::new(2, 2, 1, Sample::F32, vec![1.5, -2.25, 3.0e6, 0.0]);
    let plain = decode_geotiff(&write_tiff(&spec)).unwrap();
    assert_eq!((plain.geo().px, plain.geo().py), (10.0, 10.0));
    assert_eq!(plain.to_f32_vec(), vec![1.5, -2.25, 3.0e6, 0.0]);
    let packed = decode_geotiff(&write_tiff(&TiffSpec { deflate: true, ..spec })).unwrap();
    assert_eq!(plain, packed);
}

#[test]
fn jpeg_and_other_codecs_are_rejected() {
    for code in [7u16, 5, 32773] {
        let spec = TiffSpec {
            compression_code: Some(code),
            ..TiffSpec::new(2, 2, 1, Sample::F32, vec![0.0; 4])
        };
        match decode_geotiff(&write_tiff(&spec)) {
            Err(Error::UnsupportedCompression(c)) => assert_eq!(c, code),
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn malformed_and_unsupported_files() {
    let base = TiffSpec::new(3, 2, 1, Sample::F32, vec![0.0; 6]);
    let no_scale = TiffSpec { pixel_scale: None, ..base.clone() };
    assert!(matches!(decode_geotiff(&write_tiff(&no_scale)), Err(Error::MissingGeotags(_))));
    let no_tie = TiffSpec { tiepoint: None, ..base.clone() };
    assert!(matches!(decode_geotiff(&write_tiff(&no_tie)), Err(Error::MissingGeotags(_))));
    let transform = TiffSpec {
        extra: vec![(34264, 12, vec![0u8; 128])],
        ..base.clone()
    };
    assert!(matches!(decode_geotiff(&write_tiff(&transform)), Err(Error::Tiff(m)) if m.contains("ModelTransformation")));
    let oob = TiffSpec { offset_bias: 1_000_000, ..base.clone() };
    assert!(matches!(decode_geotiff(&write_tiff(&oob)), Err(Error::Tiff(m)) if m.contains("outside")));
    // int16 is outside the subset.
    let mut bytes = write_tiff(&TiffSpec::new(2, 1, 1, Sample::I8, vec![1.0, 2.0]));
    let info = read_info(&bytes.as_slice()).unwrap();
    assert_eq!(info.width, 2);
    patch_short_tag(&mut bytes, 258, 16);
    assert!(matches!(decode_geotiff(&bytes), Err(Error::UnsupportedSampleFormat { format: 2, bits: 16 })));
    // Truncated file: IFD cut off.
    let full = write_tiff(&base);
    assert!(decode_geotiff(&full[..full.len() - 10]).is_err());
}

/// Overwrite the inline SHORT value of `tag` in a little-endian IFD.
fn patch_short_tag(bytes: &mut [u8], tag: u16, value: u16) {
    let ifd = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n = u16::from_le_bytes([bytes[ifd], bytes[ifd + 1]]) as usize;
    for i in 0..n {
        let e = ifd + 2 + i * 12;
        if u16::from_le_bytes([bytes[e], bytes[e + 1]]) == tag {
            bytes[e + 8..e + 10].copy_from_slice(&value.to_le_bytes());
            return;
        }
    }
    panic!("tag {tag} not found");
}

#[test]
fn nodata_and_crs_tags() {
    let mut spec = TiffSpec::new(4, 1, 1, Sample::I8, vec![-128.0, 0.0, 5.0, 127.0]);
    spec.nodata = Some("-128".into());
    spec.epsg = Some(32631);
    let g = decode_geotiff(&write_tiff(&spec)).unwrap();
    assert_eq!(g.nodata(), Some(-128.0));
    assert_eq!(g.crs(), 32631);
    assert!(matches!(g.data(), GridData::Int8(_)));

    let mut f = TiffSpec::new(2, 1, 1, Sample::F32, vec![1.0, 2.0]);
    f.nodata = Some("nan".into());
    f.epsg = None;
    let g = decode_geotiff(&write_tiff(&f)).unwrap();
    assert!(g.nodata().unwrap().is_nan());
    assert_eq!(g.crs(), 0);
}

#[test]
fn decoding_is_deterministic() {
    let spec = &combos()[13];
    let bytes = write_tiff(spec);
    assert_eq!(decode_geotiff(&bytes).unwrap(), decode_geotiff(&bytes).unwrap());
}

#[test]
fn decode_over_http_uses_ranges() {
    let server = StubServer::start();
    let mut spec = TiffSpec::new(40, 40, 2, Sample::F32, values(Sample::F32, 3200));
    spec.tile = Some((16, 16));
    spec.deflate = true;
    let bytes = write_tiff(&spec);
    server.serve("scene.tif", bytes.clone());
    let remote = decode_source(&HttpSource::new(server.url("scene.tif"))).unwrap();
    assert_eq!(remote, decode_geotiff(&bytes).unwrap());
    let log = server.log();
    assert!(log.len() > 2);
    assert!(log.iter().all(|l| l.range.is_some()));
}

#[test]
fn range_reads() {
    let server = StubServer::start();
    let bytes = write_tiff(&TiffSpec::new(2, 2, 1, Sample::F32, vec![0.0; 4]));
    server.serve("a.tif", bytes.clone());
    let url = server.url("a.tif");
    assert_eq!(read_range(&url, 0, 4).unwrap(), b"II*\0");
    match read_range(&url, bytes.len() as u64 + 10, 4) {
        Err(Error::ShortRead { .. }) => {}
        other => panic!("{other:?}"),
    }
    match read_range(&url, bytes.len() as u64 - 2, 4) {
        Err(Error::ShortRead { got: 2, .. }) => {}
        other => panic!("{other:?}"),
    }
    let mut joined = read_range(&url, 3, 7).unwrap();
    joined.extend(read_range(&url, 10, 5).unwrap());
    assert_eq!(joined, read_range(&url, 3, 12).unwrap());
    assert_eq!(HttpSource::new(url.as_str()).len().unwrap(), bytes.len() as u64);

    server.route("plain.tif", Route { body: bytes, ignore_range: true, ..Route::default() });
    assert!(matches!(read_range(&server.url("plain.tif"), 0, 4), Err(Error::RangeNotSupported(_))));
    assert!(matches!(read_range(&server.url("missing"), 0, 4), Err(Error::Http(_))));
}

fn quick() -> FetchOptions {
    FetchOptions {
        backoff: Duration::from_millis(5),
        ..FetchOptions::default()
    }
}

fn manifest_line(server: &StubServer, path: &str, body: &[u8], name: &str) -> String {
    format!("{} {} {} {name}\n", server.url(path), body.len(), sha256_hex(body))
}

#[test]
fn warm_cache_needs_no_requests() {
    let server = StubServer::start();
    let body = b"embedding tile".to_vec();
    server.serve("t1", body.clone());
    let dir = tempfile::tempdir().unwrap();
    let m = FetchManifest::parse(&manifest_line(&server, "t1", &body, "t1.tif"), dir.path()).unwrap();
    let first = fetch_with(&m, &quick()).unwrap();
    assert_eq!(server.requests_to("t1"), 1);
    assert_eq!(std::fs::read(&first[0]).unwrap(), body);
    let again = fetch_with(&m, &quick()).unwrap();
    assert_eq!(again, first);
    assert_eq!(server.requests_to("t1"), 1);
}

#[test]
fn wrong_checksum_fails_after_three_retries() {
    let server = StubServer::start();
    let body = b"true content".to_vec();
    server.route("bad", Route { body: body.clone(), corrupt: true, ..Route::default() });
    let dir = tempfile::tempdir().unwrap();
    let m = FetchManifest::parse(&manifest_line(&server, "bad", &body, "bad.bin"), dir.path()).unwrap();
    match fetch_with(&m, &quick()) {
        Err(Error::ChecksumMismatch { .. }) => {}
        other => panic!("{other:?}"),
    }
    assert_eq!(server.requests_to("bad"), 4);
    // Nothing half-written is left behind.
    let blobs: Vec<_> = std::fs::read_dir(dir.path().join("blobs")).unwrap().collect();
    assert!(blobs.is_empty());
}

#[test]
fn backoff_doubles() {
    let server = StubServer::start();
    server.route("flaky", Route { body: b"x".to_vec(), fail_first: 3, ..Route::default() });
    let dir = tempfile::tempdir().unwrap();
    let m = FetchManifest::parse(&manifest_line(&server, "flaky", b"x", "f"), dir.path()).unwrap();
    let opts = FetchOptions { backoff: Duration::from_millis(40), ..FetchOptions::default() };
    let t = std::time::Instant::now();
    fetch_with(&m, &opts).unwrap();
    let elapsed = t.elapsed();
    assert!(elapsed >= Duration::from_millis(280), "{elapsed:?}");
    assert_eq!(server.requests_to("flaky"), 4);

    server.route("dead", Route { body: b"y".to_vec(), fail_first: 99, ..Route::default() });
    let m = FetchManifest::parse(&manifest_line(&server, "dead", b"y", "d"), dir.path()).unwrap();
    assert!(matches!(fetch_with(&m, &quick()), Err(Error::Http(_))));
    assert_eq!(server.requests_to("dead"), 4);
}

#[test]
fn partial_cache_downloads_only_the_missing_entry() {
    let server = StubServer::start();
    let (a, b) = (b"first".to_vec(), b"second".to_vec());
    server.serve("a", a.clone());
    server.serve("b", b.clone());
    let dir = tempfile::tempdir().unwrap();
    let one = FetchManifest::parse(&manifest_line(&server, "a", &a, "a"), dir.path()).unwrap();
    fetch_with(&one, &quick()).unwrap();
    let both = FetchManifest::parse(
        &(manifest_line(&server, "a", &a, "a") + &manifest_line(&server, "b", &b, "b")),
        dir.path(),
    )
    .unwrap();
    let paths = fetch_with(&both, &quick()).unwrap();
    assert_eq!((server.requests_to("a"), server.requests_to("b")), (1, 1));
    assert_eq!(std::fs::read(&paths[1]).unwrap(), b);
}

#[test]
fn mirrors_share_one_blob() {
    let server = StubServer::start();
    let body = b"same bytes".to_vec();
    server.serve("m1", body.clone());
    server.serve("m2", body.clone());
    let dir = tempfile::tempdir().unwrap();
    let first = FetchManifest::parse(&manifest_line(&server, "m1", &body, "one"), dir.path()).unwrap();
    fetch_with(&first, &quick()).unwrap();
    let mirror = FetchManifest::parse(&manifest_line(&server, "m2", &body, "two"), dir.path()).unwrap();
    fetch_with(&mirror, &quick()).unwrap();
    assert_eq!(server.requests_to("m2"), 0);
    assert_eq!(std::fs::read(dir.path().join("two")).unwrap(), body);
}

#[test]
fn worker_pool_is_bounded() {
    let server = StubServer::start();
    let mut text = String::new();
    for i in 0..10 {
        let body = format!("tile {i}").into_bytes();
        server.route(&format!("p{i}"), Route { body: body.clone(), delay: Duration::from_millis(60), ..Route::default() });
        text += &manifest_line(&server, &format!("p{i}"), &body, &format!("p{i}"));
    }
    let dir = tempfile::tempdir().unwrap();
    let m = FetchManifest::parse(&text, dir.path()).unwrap();
    let paths = fetch_with(&m, &quick()).unwrap();
    assert_eq!(paths.len(), 10);
    let peak = server.peak_concurrency();
    assert!((2..=4).contains(&peak), "peak {peak}");
    for (i, p) in paths.iter().enumerate() {
        assert_eq!(std::fs::read(p).unwrap(), format!("tile {i}").into_bytes());
    }
}
