//! U-Net and U-Net++ regression networks.
//!
//! Both variants are described by a [`Topology`], a set of nodes `X(i, j)`
//! where `i` is the resolution level and `j` the decoder column. Column 0 is
//! the encoder. In U-Net++, node `(i, j)` consumes every same-level
//! predecessor `X(i, 0..j)` plus the upsampled `X(i+1, j-1)`; plain U-Net
//! keeps only the diagonal `i + j = depth - 1` with a single `X(i, 0)` skip.
//!
//! Each node is two 3x3 conv + ReLU layers; downsampling is 2x2 max pooling
//! and upsampling is nearest-neighbor followed by the receiving node's first
//! conv. A 1x1 conv maps `X(0, depth-1)` to one channel with a linear output,
//! followed by a fixed affine map from standardized to metric heights.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, PrngState, TrainProgress, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::autodiff::{Conv2dOptions, Padding, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Unet,
    UnetPlusPlus,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Unet => "unet",
            Variant::UnetPlusPlus => "unetpp",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(Variant::Unet),
            "unetpp" | "unet++" => Ok(Variant::UnetPlusPlus),
            other => Err(Error::InvalidArgument(format!("unknown network variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkSpec {
    pub variant: Variant,
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub padding: Padding,
    pub seed: u64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            variant: Variant::Unet,
            depth: 4,
            base_channels: 32,
            in_channels: 64,
            out_channels: 1,
            padding: Padding::Reflect,
            seed: 0,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidArgument(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.base_channels == 0 {
            return Err(Error::InvalidArgument("base_channels must be >= 1".into()));
        }
        if self.in_channels != 64 || self.out_channels != 1 {
            return Err(Error::InvalidArgument(format!(
                "networks map 64 embedding bands to 1 height channel, got {} -> {}",
                self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    /// Channel width at resolution level `i`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeDef {
    pub level: usize,
    pub column: usize,
    /// Columns `j'` of same-level inputs `X(level, j')`.
    pub skips: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub depth: usize,
    /// Decoder nodes in evaluation order (column-major).
    pub decoder: Vec<NodeDef>,
}

impl Topology {
    pub fn unet(depth: usize) -> Self {
        let decoder = (1..depth)
            .map(|j| NodeDef {
                level: depth - 1 - j,
                column: j,
                skips: vec![0],
            })
            .collect();
        Topology { depth, decoder }
    }

    pub fn unetpp(depth: usize) -> Self {
        let mut decoder = Vec::new();
        for j in 1..depth {
            for i in 0..depth - j {
                decoder.push(NodeDef {
                    level: i,
                    column: j,
                    skips: (0..j).collect(),
                });
            }
        }
        Topology { depth, decoder }
    }

    pub fn for_spec(spec: &NetworkSpec) -> Self {
        match spec.variant {
            Variant::Unet => Self::unet(spec.depth),
            Variant::UnetPlusPlus => Self::unetpp(spec.depth),
        }
    }

    /// Drops every nested node off the output diagonal and all skips except
    /// the encoder one.
    pub fn pruned(&self) -> Self {
        let decoder = self
            .decoder
            .iter()
            .filter(|n| n.level + n.column == self.depth - 1)
            .map(|n| NodeDef {
                skips: vec![0],
                ..n.clone()
            })
            .collect();
        Topology {
            depth: self.depth,
            decoder,
        }
    }
}

/// A network with its parameters. Parameters are stored in a fixed order:
/// encoder nodes by level, decoder nodes in topology order, then the head.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    spec: NetworkSpec,
    topology: Topology,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    /// Inputs enter as `x * input_scale + input_shift`.
    pub input_scale: f64,
    pub input_shift: f64,
    /// Heights = `raw * output_scale + output_shift`.
    pub output_scale: f64,
    pub output_shift: f64,
}

fn he_init<T: Scalar>(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    let sd = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(sd * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

impl<T: Scalar> Network<T> {
    pub fn build(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let topology = Topology::for_spec(spec);
        Self::with_topology(spec, topology)
    }

    pub(crate) fn with_topology(spec: &NetworkSpec, topology: Topology) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut block = |name: String, cin: usize, cout: usize, rng: &mut ChaCha8Rng| {
            for (k, c_in) in [(1, cin), (2, cout)] {
                names.push(format!("{name}.conv{k}.weight"));
                params.push(he_init::<T>(vec![cout, c_in, 3, 3], rng));
                names.push(format!("{name}.conv{k}.bias"));
                params.push(Tensor::zeros(vec![cout]));
            }
        };
        for i in 0..spec.depth {
            let cin = if i == 0 { spec.in_channels } else { spec.channels(i - 1) };
            block(format!("x{i}_0"), cin, spec.channels(i), &mut rng);
        }
        for node in &topology.decoder {
            let ci = spec.channels(node.level);
            let cin = node.skips.len() * ci + spec.channels(node.level + 1);
            block(format!("x{}_{}", node.level, node.column), cin, ci, &mut rng);
        }
        names.push("head.weight".into());
        params.push(he_init::<T>(vec![spec.out_channels, spec.channels(0), 1, 1], &mut rng));
        names.push("head.bias".into());
        params.push(Tensor::zeros(vec![spec.out_channels]));
        Ok(Network {
            spec: *spec,
            topology,
            names,
            params,
            input_scale: 1.0,
            input_shift: 0.0,
            output_scale: 1.0,
            output_shift: 0.0,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }
    pub fn topology(&self) -> &Topology {
        &self.topology
    }
    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }
    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Replaces all parameters; shapes must match.
    pub fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::ShapeMismatch("parameter set does not match network layout".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Encoder channel widths by level.
    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..self.spec.depth).map(|i| self.spec.channels(i)).collect()
    }

    /// Records parameters as trainable leaves and runs the forward pass.
    /// Returns the output and the parameter handles (in parameter order).
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect();
        let out = self.forward_with_params(tape, x, &vars)?;
        Ok((out, vars))
    }

    /// Forward pass against caller-supplied parameter handles.
    pub fn forward_with_params(&self, tape: &mut Tape<T>, x: Var, p: &[Var]) -> Result<Var> {
        if p.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameter handles, got {}",
                self.params.len(),
                p.len()
            )));
        }
        let [_, c, h, w] = tape.value(x).dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let m = self.spec.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::InvalidArgument(format!(
                "input {h}x{w} is not divisible by {m} (depth {})",
                self.spec.depth
            )));
        }
        let opts = Conv2dOptions::same(3, self.spec.padding);
        let mut cursor = 0;
        let mut block = |tape: &mut Tape<T>, input: Var| -> Result<Var> {
            let a = tape.conv2d(input, p[cursor], Some(p[cursor + 1]), opts)?;
            let a = tape.relu(a);
            let b = tape.conv2d(a, p[cursor + 2], Some(p[cursor + 3]), opts)?;
            cursor += 4;
            Ok(tape.relu(b))
        };

        let depth = self.spec.depth;
        // grid[i][j] = X(i, j)
        let mut grid: Vec<Vec<Option<Var>>> = vec![vec![None; depth]; depth];
        let mut prev = if self.input_scale == 1.0 && self.input_shift == 0.0 {
            x
        } else {
            tape.affine(x, T::from_f64(self.input_scale), T::from_f64(self.input_shift))
        };
        for (i, row) in grid.iter_mut().enumerate() {
            let input = if i == 0 { prev } else { tape.maxpool2d(prev, 2)? };
            prev = block(tape, input)?;
            row[0] = Some(prev);
        }
        for node in &self.topology.decoder {
            let below = grid[node.level + 1][node.column - 1].ok_or_else(|| {
                Error::InvalidArgument(format!("topology: X({}, {}) missing", node.level + 1, node.column - 1))
            })?;
            let mut inputs = Vec::with_capacity(node.skips.len() + 1);
            for &j in &node.skips {
                inputs.push(grid[node.level][j].ok_or_else(|| {
                    Error::InvalidArgument(format!("topology: X({}, {j}) missing", node.level))
                })?);
            }
            inputs.push(tape.upsample_nearest(below, 2)?);
            let cat = tape.concat(&inputs)?;
            grid[node.level][node.column] = Some(block(tape, cat)?);
        }
        let top = grid[0][depth - 1].ok_or_else(|| Error::InvalidArgument("topology has no output node".into()))?;
        let head = tape.conv2d(top, p[cursor], Some(p[cursor + 1]), Conv2dOptions::default())?;
        Ok(tape.affine(head, T::from_f64(self.output_scale), T::from_f64(self.output_shift)))
    }

    /// Inference on an NCHW batch without gradient tracking.
    pub fn predict(&self, input: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(input);
        let (y, _) = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(variant: Variant, depth: usize, base: usize) -> NetworkSpec {
        NetworkSpec {
            variant,
            depth,
            base_channels: base,
            seed: 3,
            ..NetworkSpec::default()
        }
    }

    #[test]
    fn encoder_doubling() {
        let net = Network::<f32>::build(&NetworkSpec::default()).unwrap();
        assert_eq!(net.encoder_channels(), vec![32, 64, 128, 256]);
    }

    #[test]
    fn nested_has_more_parameters() {
        for depth in [2, 3, 4] {
            let a = Network::<f32>::build(&spec(Variant::Unet, depth, 8)).unwrap();
            let b = Network::<f32>::build(&spec(Variant::UnetPlusPlus, depth, 8)).unwrap();
            if depth == 2 {
                assert_eq!(a.param_count(), b.param_count());
            } else {
                assert!(b.param_count() > a.param_count());
            }
        }
    }

    #[test]
    fn seeded_init_is_bit_identical() {
        let a = Network::<f32>::build(&spec(Variant::UnetPlusPlus, 3, 4)).unwrap();
        let b = Network::<f32>::build(&spec(Variant::UnetPlusPlus, 3, 4)).unwrap();
        assert_eq!(a, b);
        let c = Network::<f32>::build(&NetworkSpec { seed: 4, ..*a.spec() }).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn invalid_specs() {
        assert!(Network::<f32>::build(&NetworkSpec { depth: 1, ..NetworkSpec::default() }).is_err());
        assert!(Network::<f32>::build(&NetworkSpec { in_channels: 3, ..NetworkSpec::default() }).is_err());
        assert!(Network::<f32>::build(&NetworkSpec { base_channels: 0, ..NetworkSpec::default() }).is_err());
    }

    #[test]
    fn output_shape_contract() {
        for variant in [Variant::Unet, Variant::UnetPlusPlus] {
            let net = Network::<f32>::build(&spec(variant, 4, 4)).unwrap();
            let out = net.predict(Tensor::zeros(vec![1, 64, 32, 32])).unwrap();
            assert_eq!(out.shape(), &[1, 1, 32, 32]);
            assert!(out.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn indivisible_patch_rejected() {
        let net = Network::<f32>::build(&spec(Variant::Unet, 4, 4)).unwrap();
        assert!(matches!(
            net.predict(Tensor::zeros(vec![1, 64, 20, 20])),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn pruned_nested_topology_is_unet() {
        for depth in 2..6 {
            assert_eq!(Topology::unetpp(depth).pruned(), Topology::unet(depth));
        }
    }

    #[test]
    fn pruned_nested_network_matches_unet_forward() {
        let s = spec(Variant::UnetPlusPlus, 3, 4);
        let pruned = Network::<f64>::with_topology(&s, Topology::unetpp(3).pruned()).unwrap();
        let mut unet = Network::<f64>::build(&NetworkSpec { variant: Variant::Unet, ..s }).unwrap();
        assert_eq!(pruned.param_names(), unet.param_names());
        unet.set_params(pruned.params().to_vec()).unwrap();
        let x: Vec<f64> = (0..64 * 8 * 8).map(|i| ((i * 37 % 101) as f64) / 101.0).collect();
        let x = Tensor::new(vec![1, 64, 8, 8], x).unwrap();
        assert_eq!(pruned.predict(x.clone()).unwrap(), unet.predict(x).unwrap());
    }

    #[test]
    fn interior_translation_covariance() {
        let s = NetworkSpec {
            padding: Padding::Reflect,
            ..spec(Variant::UnetPlusPlus, 2, 4)
        };
        let net = Network::<f32>::build(&s).unwrap();
        let (h, w) = (48usize, 48usize);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base: Vec<f32> = (0..64 * (h + 2) * w).map(|_| rng.random::<f32>()).collect();
        // Two views of one random field, offset by 2 rows.
        let view = |dy: usize| {
            let mut data = Vec::with_capacity(64 * h * w);
            for c in 0..64 {
                for y in 0..h {
                    let row = c * (h + 2) * w + (y + dy) * w;
                    data.extend_from_slice(&base[row..row + w]);
                }
            }
            Tensor::new(vec![1, 64, h, w], data).unwrap()
        };
        let a = net.predict(view(0)).unwrap();
        let b = net.predict(view(2)).unwrap();
        for y in 16..32 {
            for x in 16..32 {
                let va = a.data()[(y + 2) * w + x];
                let vb = b.data()[y * w + x];
                assert!((va - vb).abs() <= 1e-4, "({x},{y}): {va} vs {vb}");
            }
        }
    }
}
