//! Patch extraction, the train/validation split and batch ordering.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{reflect_index, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::grid::GridData;
use crate::preprocess::PairedGrid;

pub const MIN_PATCH: usize = 8;
pub const VALIDATION_FRACTION: f64 = 0.2;

/// A `P x P` training sample. `input` is channel-first.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub channels: usize,
    pub input: Vec<f32>,
    pub target: Vec<f32>,
    pub mask: Vec<bool>,
    pub x0: usize,
    pub y0: usize,
}

impl Patch {
    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn origins(extent: usize, p: usize, stride: usize, pad: bool) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        if o + p > extent && !pad {
            break;
        }
        out.push(o);
        if o + p >= extent {
            break;
        }
        o += stride;
    }
    out
}

/// Row-major patches. Remainders past the right/bottom edge are filled by
/// reflection and masked out; with `pad` false they are dropped instead.
pub fn tile(pair: &PairedGrid, p: usize, stride: usize, pad: bool) -> Result<Vec<Patch>> {
    if p < MIN_PATCH {
        return Err(Error::InvalidArgument(format!("patch size must be >= {MIN_PATCH}, got {p}")));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let (w, h) = (pair.width(), pair.height());
    let xs = origins(w, p, stride, pad);
    let ys = origins(h, p, stride, pad);
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "patch size {p} exceeds the {w}x{h} grid and padding is disabled"
        )));
    }
    let GridData::Float32(inp) = pair.inputs().data() else {
        return Err(Error::UnsupportedDtype("paired inputs must be float32".into()));
    };
    let GridData::Float32(tgt) = pair.target().data() else {
        return Err(Error::UnsupportedDtype("paired target must be float32".into()));
    };
    let c = pair.inputs().bands();
    let n = w * h;
    let mut patches = Vec::with_capacity(xs.len() * ys.len());
    for &y0 in &ys {
        for &x0 in &xs {
            let mut input = vec![0.0f32; c * p * p];
            let mut target = vec![0.0f32; p * p];
            let mut mask = vec![false; p * p];
            for dy in 0..p {
                let y = y0 + dy;
                let sy = reflect_index(y as isize, h);
                for dx in 0..p {
                    let x = x0 + dx;
                    let sx = reflect_index(x as isize, w);
                    let src = sy * w + sx;
                    let dst = dy * p + dx;
                    target[dst] = tgt[src];
                    mask[dst] = x < w && y < h && pair.mask()[src];
                    for ch in 0..c {
                        input[ch * p * p + dst] = inp[ch * n + src];
                    }
                }
            }
            patches.push(Patch {
                size: p,
                channels: c,
                input,
                target,
                mask,
                x0,
                y0,
            });
        }
    }
    Ok(patches)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub seed: u64,
}

/// Validation size `round(0.2 n)`, kept within `[1, n - 1]`.
pub fn validation_count(n: usize) -> usize {
    ((VALIDATION_FRACTION * n as f64).round() as usize).clamp(1, n - 1)
}

/// Seeded permutation; the last 20% go to validation.
pub fn split(n_patches: usize, seed: u64) -> Result<SplitPlan> {
    if n_patches < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 patches to split, got {n_patches}")));
    }
    let mut order: Vec<usize> = (0..n_patches).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = order.split_off(n_patches - validation_count(n_patches));
    Ok(SplitPlan { train: order, val, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Train,
    Val,
}

/// Patch indices per batch. Training order is reshuffled from `epoch_seed`;
/// validation keeps the plan order. The last batch may be short.
pub fn batches(plan: &SplitPlan, which: Which, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut order = match which {
        Which::Train => plan.train.clone(),
        Which::Val => plan.val.clone(),
    };
    if order.is_empty() {
        return Err(Error::InsufficientData(format!("{which:?} split is empty")));
    }
    if which == Which::Train {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stacked NCHW inputs with targets and masks flattened in the same order.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub input: Tensor<T>,
    pub target: Vec<T>,
    pub mask: Vec<bool>,
}

/// `target_map` converts heights before stacking (e.g. standardization).
pub fn assemble<T: Scalar>(patches: &[Patch], indices: &[usize], target_map: impl Fn(f32) -> f64) -> Result<Batch<T>> {
    let first = patches
        .get(*indices.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?)
        .ok_or_else(|| Error::InvalidArgument("batch index out of range".into()))?;
    let (c, p) = (first.channels, first.size);
    let mut input = Vec::with_capacity(indices.len() * c * p * p);
    let mut target = Vec::with_capacity(indices.len() * p * p);
    let mut mask = Vec::with_capacity(indices.len() * p * p);
    for &i in indices {
        let patch = patches
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("batch index {i} out of range")))?;
        if patch.channels != c || patch.size != p {
            return Err(Error::ShapeMismatch("patches in a batch must share shape".into()));
        }
        input.extend(patch.input.iter().map(|&v| T::from_f64(v as f64)));
        target.extend(patch.target.iter().map(|&v| T::from_f64(target_map(v))));
        mask.extend_from_slice(&patch.mask);
    }
    Ok(Batch {
        input: Tensor::new(vec![indices.len(), c, p, p], input)?,
        target,
        mask,
    })
}
