#![allow(dead_code)]

pub mod fd;
pub mod oracles;
pub mod protocol;
pub mod suites;

use ldag_core::image::Mask;
use ldag_core::maa::PrototypePair;
use ldag_core::mae::{MapRange, PriorStack};
use ldag_core::model::{ModelParameters, ModelShape};
use ldag_core::pipeline::{PreparedEpisode, PreparedSupport};
use ldag_core::rng::SplitMix64;
use ldag_core::tensor::Tensor;

pub fn gaussian(rng: &mut SplitMix64, shape: Vec<usize>, scale: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, rng.gaussian_vec(len, scale)).unwrap()
}

pub fn uniform(rng: &mut SplitMix64, shape: Vec<usize>) -> Tensor {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.next_f64() as f32).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn random_mask(rng: &mut SplitMix64, w: usize, h: usize) -> Mask {
    let data = (0..w * h).map(|_| u8::from(rng.next_f64() < 0.5)).collect();
    Mask::new(w, h, data).unwrap()
}

/// Small dimensions so every parameter entry can be probed.
#[derive(Clone, Copy, Debug)]
pub struct Tiny {
    pub text_dim: usize,
    pub feat_dim: usize,
    pub n: usize,
    pub grid: (usize, usize),
    pub out: (usize, usize),
    pub shots: usize,
}

impl Default for Tiny {
    fn default() -> Self {
        Self {
            text_dim: 5,
            feat_dim: 4,
            n: 2,
            grid: (3, 3),
            out: (6, 6),
            shots: 2,
        }
    }
}

/// A prepared episode with random frozen inputs, and parameters with nonzero biases.
pub fn tiny_episode(t: Tiny, seed: u64) -> (ModelParameters, PreparedEpisode) {
    let mut rng = SplitMix64::new(seed);
    let (h, w) = t.grid;
    let shape = ModelShape {
        text_dim: t.text_dim,
        feat_dim: t.feat_dim,
        n: t.n,
    };
    let mut params = ModelParameters::init(shape, seed).unwrap();
    for tensor in params.tensors_mut() {
        if tensor.rank() == 1 {
            let len = tensor.numel();
            tensor.data_mut().copy_from_slice(&rng.gaussian_vec(len, 0.1));
        }
    }
    let supports = (0..t.shots)
        .map(|_| PreparedSupport {
            features: gaussian(&mut rng, vec![t.feat_dim, h, w], 1.0),
            prototypes: PrototypePair {
                foreground: gaussian(&mut rng, vec![t.feat_dim], 1.0),
                background: gaussian(&mut rng, vec![t.feat_dim], 1.0),
                fg_pixel_count: 1,
                bg_pixel_count: 1,
            },
        })
        .collect();
    let ep = PreparedEpisode {
        episode_id: format!("tiny-{seed}"),
        class_id: 0,
        class_name: "tiny".into(),
        fold: 0,
        supports,
        query_features: gaussian(&mut rng, vec![t.feat_dim, h, w], 1.0),
        query_mask: random_mask(&mut rng, t.out.1, t.out.0),
        priors: PriorStack {
            maps: uniform(&mut rng, vec![t.n + 1, h, w]),
            ranges: vec![MapRange { min: 0.0, max: 1.0 }; t.n + 1],
        },
        scores: None,
        attributes: (0..t.n).map(|_| gaussian(&mut rng, vec![t.text_dim], 1.0)).collect(),
    };
    (params, ep)
}
