//! Fixtures shared by the benchmarks.

use std::io::Write;

use embedheight::preprocess::{normalize, stack_pairs};
use embedheight::synth::{generate, Mapping, SynthSpec};
use embedheight::PairedGrid;

pub fn scene(size: usize, mapping: Mapping) -> PairedGrid {
    let s = generate(&SynthSpec {
        width: size,
        height: size,
        mapping,
        noise_sd: 1.0,
        ..SynthSpec::default()
    })
    .expect("valid synthetic spec");
    stack_pairs(&normalize(&s.embeddings).unwrap(), &s.heights).unwrap()
}

/// Chunky int8 GeoTIFF, one strip per `rows_per_strip` rows, optionally deflated.
pub fn int8_geotiff(width: usize, height: usize, bands: usize, rows_per_strip: usize, deflate: bool) -> Vec<u8> {
    let row = width * bands;
    let strips: Vec<Vec<u8>> = (0..height.div_ceil(rows_per_strip))
        .map(|s| {
            let rows = rows_per_strip.min(height - s * rows_per_strip);
            let raw: Vec<u8> = (0..rows * row).map(|i| ((i * 31 + s * 7) % 251) as u8).collect();
            if deflate {
                let mut z = flate2::write::ZlibEncoder::new(Vec::new(), flate2::Compression::default());
                z.write_all(&raw).unwrap();
                z.finish().unwrap()
            } else {
                raw
            }
        })
        .collect();
    let n = strips.len() as u32;

    let entries = 14u32;
    let ifd_end = 8 + 2 + 12 * entries + 4;
    let offsets_at = ifd_end;
    let counts_at = offsets_at + 4 * n;
    let scale_at = counts_at + 4 * n;
    let tie_at = scale_at + 24;
    let keys_at = tie_at + 48;
    let data_at = keys_at + 16;

    let mut t = Vec::new();
    t.extend_from_slice(b"II*\0");
    t.extend_from_slice(&8u32.to_le_bytes());
    t.extend_from_slice(&(entries as u16).to_le_bytes());
    let one_or = |v: u32, at: u32| if n == 1 { v } else { at };
    let mut data_offsets = Vec::new();
    let mut pos = data_at;
    for s in &strips {
        data_offsets.push(pos);
        pos += s.len() as u32;
    }
    for (tag, ty, count, value) in [
        (256u16, 4u16, 1u32, width as u32),
        (257, 4, 1, height as u32),
        (258, 3, 1, 8),
        (259, 3, 1, if deflate { 8 } else { 1 }),
        (262, 3, 1, 1),
        (273, 4, n, one_or(data_offsets[0], offsets_at)),
        (277, 3, 1, bands as u32),
        (278, 4, 1, rows_per_strip as u32),
        (279, 4, n, one_or(strips[0].len() as u32, counts_at)),
        (284, 3, 1, 1),
        (339, 3, 1, 2),
        (33550, 12, 3, scale_at),
        (33922, 12, 6, tie_at),
        (34735, 3, 8, keys_at),
    ] {
        t.extend_from_slice(&tag.to_le_bytes());
        t.extend_from_slice(&ty.to_le_bytes());
        t.extend_from_slice(&count.to_le_bytes());
        t.extend_from_slice(&value.to_le_bytes());
    }
    t.extend_from_slice(&0u32.to_le_bytes());
    for o in &data_offsets {
        t.extend_from_slice(&o.to_le_bytes());
    }
    for s in &strips {
        t.extend_from_slice(&(s.len() as u32).to_le_bytes());
    }
    for v in [10.0f64, 10.0, 0.0, 0.0, 0.0, 0.0, 500_000.0, 6_400_000.0, 0.0] {
        t.extend_from_slice(&v.to_le_bytes());
    }
    for k in [1u16, 1, 0, 1, 3072, 0, 1, 2154] {
        t.extend_from_slice(&k.to_le_bytes());
    }
    debug_assert_eq!(t.len() as u32, data_at);
    for s in &strips {
        t.extend_from_slice(s);
    }
    t
}
