//! Dense row-major `f32` tensors and the small set of frozen-path helpers
//! (bilinear resizing, spatial pooling) that never need gradients on their own.

use serde::{Deserialize, Serialize};

use crate::error::{LdagError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(LdagError::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| x as f32).collect())
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| f64::from(x)).collect()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Extents `(channels, height, width)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(LdagError::Dimension(format!(
                "expected a C x H x W tensor, got shape {other:?}"
            ))),
        }
    }

    /// Little-endian bytes of the payload, used for checksums.
    pub fn payload_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }
}

/// Where a feature tensor came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Toy,
    Imported,
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Source::Toy => f.write_str("toy"),
            Source::Imported => f.write_str("imported"),
        }
    }
}

/// A `C x H x W` dense feature map with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    tensor: Tensor,
    pub source: Source,
}

impl FeatureGrid {
    pub fn new(tensor: Tensor, source: Source) -> Result<Self> {
        tensor.chw()?;
        Ok(Self { tensor, source })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    /// Mean over the spatial extents, accumulated in f64.
    pub fn spatial_mean(&self) -> Tensor {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        let plane = h * w;
        let data = self.tensor.data();
        let means = (0..c)
            .map(|ch| {
                let sum: f64 = data[ch * plane..(ch + 1) * plane]
                    .iter()
                    .map(|&x| f64::from(x))
                    .sum();
                (sum / plane as f64) as f32
            })
            .collect();
        Tensor::vector(means)
    }
}

/// One output coordinate of a 1-D linear resampling: two source taps and the
/// weight of the second one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Half-pixel-centre linear taps from `input` samples to `output` samples,
/// clamped at the borders. Equal extents give the identity.
pub(crate) fn linear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize of a stack of `planes` maps, each `h x w`, to `out_h x out_w`.
pub(crate) fn bilinear_resize_f64(
    input: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (out_h, out_w): (usize, usize),
) -> Vec<f64> {
    let rows = linear_taps(h, out_h);
    let cols = linear_taps(w, out_w);
    let mut out = vec![0.0; planes * out_h * out_w];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, ry) in rows.iter().enumerate() {
            for (ox, cx) in cols.iter().enumerate() {
                let top = src[ry.lo * w + cx.lo] * (1.0 - cx.frac) + src[ry.lo * w + cx.hi] * cx.frac;
                let bottom =
                    src[ry.hi * w + cx.lo] * (1.0 - cx.frac) + src[ry.hi * w + cx.hi] * cx.frac;
                dst[oy * out_w + ox] = top * (1.0 - ry.frac) + bottom * ry.frac;
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize_f64`]: scatters output gradients back to the input grid.
pub(crate) fn bilinear_resize_adjoint(
    grad_out: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (out_h, out_w): (usize, usize),
) -> Vec<f64> {
    let rows = linear_taps(h, out_h);
    let cols = linear_taps(w, out_w);
    let mut grad_in = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &grad_out[p * out_h * out_w..(p + 1) * out_h * out_w];
        let dst = &mut grad_in[p * h * w..(p + 1) * h * w];
        for (oy, ry) in rows.iter().enumerate() {
            for (ox, cx) in cols.iter().enumerate() {
                let v = g[oy * out_w + ox];
                dst[ry.lo * w + cx.lo] += v * (1.0 - ry.frac) * (1.0 - cx.frac);
                dst[ry.lo * w + cx.hi] += v * (1.0 - ry.frac) * cx.frac;
                dst[ry.hi * w + cx.lo] += v * ry.frac * (1.0 - cx.frac);
                dst[ry.hi * w + cx.hi] += v * ry.frac * cx.frac;
            }
        }
    }
    grad_in
}

/// Bilinear resize of a rank-3 tensor's spatial extents.
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(LdagError::Dimension("cannot resize an empty grid".into()));
    }
    let out = bilinear_resize_f64(&input.to_f64(), c, (h, w), (out_h, out_w));
    Tensor::from_f64(vec![c, out_h, out_w], &out)
}
