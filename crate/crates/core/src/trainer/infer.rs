use crate::autodiff::{reflect_index, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::grid::{Grid, GridData};
use crate::nets::Network;

pub const DEFAULT_MARGIN: usize = 16;

/// Reflect-padded `c x th x tw` window whose top-left sits at `(x0, y0)`
/// (may be negative or run past the grid).
fn gather_tile<T: Scalar>(src: &[f32], c: usize, w: usize, h: usize, x0: isize, y0: isize, tw: usize, th: usize, out: &mut Vec<T>) {
    for ch in 0..c {
        let band = &src[ch * w * h..(ch + 1) * w * h];
        for dy in 0..th {
            let sy = reflect_index(y0 + dy as isize, h);
            for dx in 0..tw {
                let sx = reflect_index(x0 + dx as isize, w);
                out.push(T::from_f64(band[sy * w + sx] as f64));
            }
        }
    }
}

/// Full-scene heights. Scenes within one `patch x patch` tile run as a single
/// reflect-padded tile; larger scenes use overlapping tiles of stride
/// `patch - 2 * margin` and keep only each tile's central crop.
pub fn infer_scene<T: Scalar>(
    network: &Network<T>,
    embeddings: &Grid,
    patch: usize,
    margin: usize,
    batch_size: usize,
) -> Result<Grid> {
    let spec = network.spec();
    if embeddings.bands() != spec.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "network expects {} bands, grid has {}",
            spec.in_channels,
            embeddings.bands()
        )));
    }
    let m = spec.size_multiple();
    if patch % m != 0 || patch == 0 {
        return Err(Error::InvalidArgument(format!("patch size {patch} must be a positive multiple of {m}")));
    }
    let (w, h, c) = (embeddings.width(), embeddings.height(), embeddings.bands());
    let src = match embeddings.data() {
        GridData::Float32(v) => std::borrow::Cow::Borrowed(v),
        GridData::Float64(_) => std::borrow::Cow::Owned(embeddings.to_f32_vec()),
        GridData::Int8(_) => {
            return Err(Error::UnsupportedDtype("inference expects normalized float embeddings".into()));
        }
    };
    let mut out = vec![0.0f32; w * h];

    if w <= patch && h <= patch {
        let (tw, th) = (w.div_ceil(m) * m, h.div_ceil(m) * m);
        let mut data = Vec::with_capacity(c * tw * th);
        gather_tile::<T>(&src, c, w, h, 0, 0, tw, th, &mut data);
        let pred = network.predict(Tensor::new(vec![1, c, th, tw], data)?)?;
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = pred.data()[y * tw + x].as_f64() as f32;
            }
        }
    } else {
        if patch <= 2 * margin {
            return Err(Error::InvalidArgument(format!("patch {patch} leaves no interior with margin {margin}")));
        }
        let stride = patch - 2 * margin;
        let origins: Vec<(usize, usize)> = (0..h.div_ceil(stride))
            .flat_map(|ty| (0..w.div_ceil(stride)).map(move |tx| (tx * stride, ty * stride)))
            .collect();
        for group in origins.chunks(batch_size.max(1)) {
            let mut data = Vec::with_capacity(group.len() * c * patch * patch);
            for &(ox, oy) in group {
                gather_tile::<T>(&src, c, w, h, ox as isize - margin as isize, oy as isize - margin as isize, patch, patch, &mut data);
            }
            let pred = network.predict(Tensor::new(vec![group.len(), c, patch, patch], data)?)?;
            for (k, &(ox, oy)) in group.iter().enumerate() {
                let tile = &pred.data()[k * patch * patch..(k + 1) * patch * patch];
                for dy in 0..stride.min(h - oy) {
                    for dx in 0..stride.min(w - ox) {
                        out[(oy + dy) * w + ox + dx] = tile[(margin + dy) * patch + margin + dx].as_f64() as f32;
                    }
                }
            }
        }
    }
    Grid::new(w, h, 1, *embeddings.geo(), embeddings.crs(), GridData::Float32(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GeoTransform;
    use crate::nets::{NetworkSpec, Variant};

    fn net() -> Network<f32> {
        let spec = NetworkSpec {
            variant: Variant::Unet,
            depth: 2,
            base_channels: 2,
            seed: 5,
            ..NetworkSpec::default()
        };
        Network::build(&spec).unwrap()
    }

    fn scene(w: usize, h: usize, f: impl Fn(usize, usize, usize) -> f32) -> Grid {
        let mut v = Vec::with_capacity(64 * w * h);
        for c in 0..64 {
            for y in 0..h {
                for x in 0..w {
                    v.push(f(c, x, y));
                }
            }
        }
        Grid::new(w, h, 64, GeoTransform::new(100.0, 900.0, 10.0, 10.0).unwrap(), 2154, GridData::Float32(v)).unwrap()
    }

    #[test]
    fn exact_tile_and_geo_passthrough() {
        let g = scene(16, 16, |c, x, y| ((c + x * 3 + y * 5) % 17) as f32 / 17.0);
        let out = infer_scene(&net(), &g, 16, 4, 4).unwrap();
        assert_eq!((out.width(), out.height(), out.bands()), (16, 16, 1));
        assert_eq!(out.geo(), g.geo());
        let direct = net().predict(Tensor::new(vec![1, 64, 16, 16], g.to_f32_vec()).unwrap()).unwrap();
        assert_eq!(out.to_f32_vec(), direct.data());
    }

    #[test]
    fn constant_scene_has_no_seams() {
        let g = scene(40, 28, |_, _, _| 0.4);
        let tiled = infer_scene(&net(), &g, 16, 4, 3).unwrap();
        let v = tiled.to_f32_vec();
        let (lo, hi) = v.iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        assert!(hi - lo <= 1e-4, "{lo}..{hi}");
        let single = infer_scene(&net(), &g, 64, 4, 3).unwrap();
        for (a, b) in v.iter().zip(single.to_f32_vec()) {
            assert!((a - b).abs() <= 1e-4);
        }
    }

    #[test]
    fn interior_matches_single_tile_when_margin_covers_receptive_field() {
        // Depth 2 with two 3x3 convs per block sees at most 10 px away.
        let g = scene(40, 40, |c, x, y| (((c * 7 + x * 13 + y * 29) % 31) as f32) / 31.0);
        let single = infer_scene(&net(), &g, 64, 12, 4).unwrap();
        let tiled = infer_scene(&net(), &g, 32, 12, 4).unwrap();
        for y in 12..28 {
            for x in 12..28 {
                let (a, b) = (single.get_f64(0, x, y), tiled.get_f64(0, x, y));
                assert!((a - b).abs() < 1e-4, "({x},{y}) {a} vs {b}");
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = scene(8, 8, |_, _, _| 0.5);
        assert!(infer_scene(&net(), &g, 15, 4, 1).is_err());
        let small = Grid::new(8, 8, 3, *g.geo(), 2154, GridData::Float32(vec![0.5; 192])).unwrap();
        assert!(infer_scene(&net(), &small, 16, 4, 1).is_err());
        assert!(infer_scene(&net(), &scene(40, 8, |_, _, _| 0.5), 16, 8, 1).is_err());
    }
}
