//! Trainable heads (per-attribute MLPs, the two light fusion networks) and the
//! frozen decoder stand-in.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checksum;
use crate::error::{LdagError, Result};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tensor;

const PARAM_STREAM: u64 = 0x9A7A_11E7;
const DECODER_STREAM: u64 = 0xDEC0_DE55;

/// How the n projected attributes enter the support fusion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Average the projected vectors into one broadcast block.
    #[default]
    Mean,
    /// Fuse once per attribute and average the fused grids.
    PerAttribute,
}

/// Widths that fix every parameter shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    /// Text embedding width `D`.
    pub text_dim: usize,
    /// Segmentation feature width `Ds`.
    pub feat_dim: usize,
    /// Number of attribute descriptions.
    pub n: usize,
}

impl ModelShape {
    pub fn f2_input(&self) -> usize {
        2 * self.feat_dim + self.n + 1
    }
}

/// Named trainable tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    shape: ModelShape,
    seed: u64,
    decoder_seed: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph handles for one dense or 1x1 two-layer block.
#[derive(Clone, Copy, Debug)]
pub struct TwoLayer {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl TwoLayer {
    /// `w2 * relu(w1 * x + b1) + b2` on a vector.
    pub fn apply_vector(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.linear(self.w1, self.b1, x)?;
        let h = g.relu(h);
        g.linear(self.w2, self.b2, h)
    }

    /// The same, as 1x1 convolutions over a `[C, H, W]` grid.
    pub fn apply_grid(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.channel_linear(self.w1, self.b1, x)?;
        let h = g.relu(h);
        g.channel_linear(self.w2, self.b2, h)
    }
}

/// All parameters registered as differentiable leaves of one graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
    pub mlp: Vec<TwoLayer>,
    pub f1: TwoLayer,
    pub f2: TwoLayer,
}

impl BoundParams {
    /// Group vars already on a graph, in [`ModelParameters::names`] order.
    pub fn from_vars(n: usize, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != 4 * (n + 2) {
            return Err(LdagError::Contract(format!(
                "{} vars cannot hold {n} projection heads and two fusion blocks",
                vars.len()
            )));
        }
        let block = |k: usize| TwoLayer {
            w1: vars[4 * k],
            b1: vars[4 * k + 1],
            w2: vars[4 * k + 2],
            b2: vars[4 * k + 3],
        };
        Ok(Self {
            mlp: (0..n).map(block).collect(),
            f1: block(n),
            f2: block(n + 1),
            vars,
        })
    }
}

fn block_specs(prefix: &str, input: usize, hidden: usize, output: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        (format!("{prefix}.w1"), vec![hidden, input]),
        (format!("{prefix}.b1"), vec![hidden]),
        (format!("{prefix}.w2"), vec![output, hidden]),
        (format!("{prefix}.b2"), vec![output]),
    ]
}

impl ModelParameters {
    /// Gaussian weights with scale `1/sqrt(fan_in)`, zero biases.
    pub fn init(shape: ModelShape, seed: u64) -> Result<Self> {
        if shape.text_dim == 0 || shape.feat_dim == 0 {
            return Err(LdagError::Dimension("model widths must be positive".into()));
        }
        let (d, ds) = (shape.text_dim, shape.feat_dim);
        let mut specs = Vec::new();
        for i in 0..shape.n {
            specs.extend(block_specs(&format!("mlp.{i}"), d, d, ds));
        }
        specs.extend(block_specs("f1", 3 * ds, ds, ds));
        specs.extend(block_specs("f2", shape.f2_input(), ds, ds));

        let mut rng = SplitMix64::new(derive_seed(seed, PARAM_STREAM));
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, dims) in specs {
            let t = if dims.len() == 2 {
                let data = rng.gaussian_vec(dims[0] * dims[1], 1.0 / (dims[1] as f64).sqrt());
                Tensor::new(dims, data)?
            } else {
                Tensor::zeros(dims)
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            shape,
            seed,
            decoder_seed: derive_seed(seed, DECODER_STREAM),
            names,
            tensors,
        })
    }

    /// Rebuild from named tensors, checking every name and shape against `shape`.
    pub fn from_named(shape: ModelShape, seed: u64, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut reference = Self::init(shape, seed)?;
        if named.len() != reference.names.len() {
            return Err(LdagError::Contract(format!(
                "expected {} parameter tensors, got {}",
                reference.names.len(),
                named.len()
            )));
        }
        for (name, tensor) in named {
            reference.set(&name, tensor)?;
        }
        Ok(reference)
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn decoder_seed(&self) -> u64 {
        self.decoder_seed
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| LdagError::NotFound(format!("parameter {name}")))?;
        if tensor.shape() != self.tensors[i].shape() {
            return Err(LdagError::Dimension(format!(
                "parameter {name} has shape {:?}, got {:?}",
                self.tensors[i].shape(),
                tensor.shape()
            )));
        }
        self.tensors[i] = tensor;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Hex SHA-256 over all parameter tensors in order.
    pub fn checksum(&self) -> String {
        checksum::digest(&self.tensors)
    }

    /// Register every tensor as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let vars: Vec<Var> = self.tensors.iter().map(|t| g.param(t)).collect();
        BoundParams::from_vars(self.shape.n, vars).expect("one var per tensor")
    }
}

/// Fixed seeded `Ds -> 1` projection per grid cell followed by bilinear upsampling.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenDecoder {
    seed: u64,
    weight: Tensor,
}

impl FrozenDecoder {
    pub fn new(feat_dim: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let data = rng.gaussian_vec(feat_dim, 1.0);
        Self {
            seed,
            weight: Tensor::new(vec![1, feat_dim], data).expect("length matches"),
        }
    }

    pub fn for_params(params: &ModelParameters) -> Self {
        Self::new(params.shape().feat_dim, params.decoder_seed())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn checksum(&self) -> String {
        checksum::digest(std::slice::from_ref(&self.weight))
    }

    /// `[Ds, Hs, Ws]` features to `[1, H, W]` logits.
    pub fn decode(&self, g: &mut Graph, x: Var, out: (usize, usize)) -> Result<Var> {
        let (c, h, w) = match g.shape(x) {
            &[c, h, w] => (c, h, w),
            s => return Err(LdagError::Dimension(format!("decoder input must be C x H x W, got {s:?}"))),
        };
        let weight = g.constant(&self.weight);
        let bias = g.constant(&Tensor::zeros(vec![1]));
        if c != self.weight.numel() {
            return Err(LdagError::Dimension(format!(
                "decoder expects {} channels, got {c}",
                self.weight.numel()
            )));
        }
        let cells = g.channel_linear(weight, bias, x)?;
        debug_assert_eq!(g.shape(cells), &[1, h, w]);
        g.upsample_bilinear(cells, out.0, out.1)
    }
}
