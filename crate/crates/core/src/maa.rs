//! Attribute alignment: masked-average prototypes, per-attribute projections
//! and the InfoNCE loss pulling the foreground prototype toward them.

use crate::autodiff::{Graph, Precision, Var};
use crate::error::{LdagError, Result};
use crate::image::Mask;
use crate::model::{BoundParams, ModelParameters};
use crate::providers::SamEncoding;
use crate::tensor::Tensor;

/// Foreground and background prototypes of one support image.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypePair {
    pub foreground: Tensor,
    pub background: Tensor,
    pub fg_pixel_count: usize,
    pub bg_pixel_count: usize,
}

impl PrototypePair {
    /// Both prototypes zero; stands in for a removed support image.
    pub fn zeros(dim: usize) -> Self {
        Self {
            foreground: Tensor::zeros(vec![dim]),
            background: Tensor::zeros(vec![dim]),
            fg_pixel_count: 0,
            bg_pixel_count: 0,
        }
    }
}

/// Masked average pooling of `feat` under the nearest-downsampled `mask`.
pub fn map_prototypes(feat: &SamEncoding, mask: &Mask) -> Result<PrototypePair> {
    let grid = &feat.features;
    let (c, h, w) = (grid.channels(), grid.height(), grid.width());
    let small = mask.resize_nearest(w, h);
    let fg_pixel_count = small.foreground_count();
    let bg_pixel_count = h * w - fg_pixel_count;
    if fg_pixel_count == 0 || bg_pixel_count == 0 {
        return Err(LdagError::DegenerateEpisode(format!(
            "support mask at {w}x{h} has {fg_pixel_count} foreground and {bg_pixel_count} background cells"
        )));
    }
    let data = grid.tensor().data();
    let plane = h * w;
    let mut fg = vec![0.0f64; c];
    let mut bg = vec![0.0f64; c];
    for (cell, &on) in small.data().iter().enumerate() {
        let acc = if on != 0 { &mut fg } else { &mut bg };
        for (ch, a) in acc.iter_mut().enumerate() {
            *a += f64::from(data[ch * plane + cell]);
        }
    }
    fg.iter_mut().for_each(|v| *v /= fg_pixel_count as f64);
    bg.iter_mut().for_each(|v| *v /= bg_pixel_count as f64);
    Ok(PrototypePair {
        foreground: Tensor::from_f64(vec![c], &fg)?,
        background: Tensor::from_f64(vec![c], &bg)?,
        fg_pixel_count,
        bg_pixel_count,
    })
}

/// The n projected attribute vectors; `vectors[i]` comes from `MLP_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedAttributes {
    pub vectors: Vec<Tensor>,
    pub mlp_index: Vec<usize>,
}

fn check_index(bound: &BoundParams, i: usize) -> Result<()> {
    if i >= bound.mlp.len() {
        return Err(LdagError::Contract(format!(
            "attribute index {i} out of range for {} projection heads",
            bound.mlp.len()
        )));
    }
    Ok(())
}

/// `MLP_i(embedding)` recorded on `g`.
pub fn project_attribute_var(g: &mut Graph, bound: &BoundParams, i: usize, embedding: Var) -> Result<Var> {
    check_index(bound, i)?;
    bound.mlp[i].apply_vector(g, embedding)
}

/// `MLP_i(embedding)` evaluated once (0-based `i`).
pub fn project_attribute(embedding: &Tensor, i: usize, params: &ModelParameters) -> Result<Tensor> {
    let mut g = Graph::new(Precision::F32);
    let bound = params.bind(&mut g);
    let x = g.constant(embedding);
    let y = project_attribute_var(&mut g, &bound, i, x)?;
    Ok(g.tensor(y))
}

/// Project every attribute embedding with its own head.
pub fn project_all(embeddings: &[Tensor], params: &ModelParameters) -> Result<ProjectedAttributes> {
    let vectors = embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| project_attribute(e, i, params))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProjectedAttributes {
        mlp_index: (0..vectors.len()).collect(),
        vectors,
    })
}

/// `mean_i softplus((sim(Pf, Pb) - sim(Pf, F'_i)) / tau1)`, which equals the
/// negative log of the two-way softmax of the positive pair.
pub fn infonce_var(g: &mut Graph, fg: Var, bg: Var, projected: &[Var], tau1: f64) -> Result<Var> {
    if !(tau1 > 0.0) {
        return Err(LdagError::Contract(format!("tau1 must be positive, got {tau1}")));
    }
    if projected.is_empty() {
        return Err(LdagError::Contract("InfoNCE needs at least one attribute".into()));
    }
    let negative = g.cosine(fg, bg)?;
    let terms = projected
        .iter()
        .map(|&p| {
            let positive = g.cosine(fg, p)?;
            let gap = g.sub(negative, positive)?;
            let gap = g.scale(gap, 1.0 / tau1);
            let term = g.softplus(gap);
            g.reshape(term, vec![1])
        })
        .collect::<Result<Vec<_>>>()?;
    let stacked = g.concat(&terms)?;
    Ok(g.mean_all(stacked))
}

pub fn infonce(protos: &PrototypePair, projected: &ProjectedAttributes, tau1: f64) -> Result<f64> {
    let mut g = Graph::new(Precision::F64);
    let fg = g.constant(&protos.foreground);
    let bg = g.constant(&protos.background);
    let vars: Vec<Var> = projected.vectors.iter().map(|v| g.constant(v)).collect();
    let loss = infonce_var(&mut g, fg, bg, &vars, tau1)?;
    Ok(g.scalar(loss))
}
