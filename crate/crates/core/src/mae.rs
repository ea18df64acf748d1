//! Attribute priors: image-text scores, their softmax, Grad-CAM maps per
//! foreground description, and the normalized prior stack.

use serde::{Deserialize, Serialize};

use crate::attributes::AttributeSet;
use crate::autodiff::{Graph, Precision, Var};
use crate::error::{LdagError, Result};
use crate::providers::ClipEncoding;
use crate::tensor::{bilinear_resize_f64, Tensor};

/// How foreground and background scores are normalized against each other.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftmaxScope {
    /// An independent two-way softmax for every (foreground i, background) pair.
    #[default]
    Pairwise,
    /// One softmax over all n+1 foreground scores and the background score.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    /// `S_f` for the n attributes followed by the template.
    pub s_f: Vec<f64>,
    pub s_b: f64,
    pub tau: f64,
    pub scope: SoftmaxScope,
    /// `(softmaxed foreground i, softmaxed background)` per foreground entry.
    pub softmaxed: Vec<(f64, f64)>,
}

/// The recorded score graph for one query, reusable for every attribute's CAM.
pub struct GradCam {
    graph: Graph,
    tokens: Var,
    extents: (usize, usize, usize),
    fg_probs: Vec<Var>,
    scores: ScoreSet,
}

/// One Grad-CAM map before normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    /// `H x W`, elementwise >= 0.
    pub values: Vec<f64>,
    /// The channel weights were all zero (fully saturated softmax).
    pub saturated: bool,
}

impl GradCam {
    pub fn new(clip: &ClipEncoding, attrs: &AttributeSet, tau: f64, scope: SoftmaxScope) -> Result<Self> {
        Self::with_precision(clip, attrs, tau, scope, Precision::F32)
    }

    pub fn with_precision(
        clip: &ClipEncoding,
        attrs: &AttributeSet,
        tau: f64,
        scope: SoftmaxScope,
        precision: Precision,
    ) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(LdagError::Contract(format!("temperature must be positive, got {tau}")));
        }
        let (d, h, w) = clip.tokens.tensor().chw()?;
        if attrs.text_dim() != d {
            return Err(LdagError::Dimension(format!(
                "text width {} differs from image token width {d}",
                attrs.text_dim()
            )));
        }
        let mut graph = Graph::new(precision);
        let tokens = graph.param(clip.tokens.tensor());
        let flat = graph.reshape(tokens, vec![d, h * w])?;
        let pooled = graph.mean_axis(flat, 1)?;
        if graph.value(pooled).iter().all(|&v| v == 0.0) {
            return Err(LdagError::Degenerate("pooled query vector is zero".into()));
        }

        let cos_scaled = |g: &mut Graph, t: &Tensor| -> Result<Var> {
            let text = g.constant(t);
            let c = g.cosine(pooled, text)?;
            Ok(g.scale(c, 1.0 / tau))
        };
        let s_f: Vec<Var> = attrs
            .foreground
            .iter()
            .map(|e| cos_scaled(&mut graph, &e.vector))
            .collect::<Result<_>>()?;
        let s_b = cos_scaled(&mut graph, &attrs.background.vector)?;

        let as_row = |g: &mut Graph, v: Var| g.reshape(v, vec![1]);
        let (fg_probs, bg_probs) = match scope {
            SoftmaxScope::Pairwise => {
                let mut fg = Vec::with_capacity(s_f.len());
                let mut bg = Vec::with_capacity(s_f.len());
                for &s in &s_f {
                    let a = as_row(&mut graph, s)?;
                    let b = as_row(&mut graph, s_b)?;
                    let pair = graph.concat(&[a, b])?;
                    let probs = graph.softmax(pair)?;
                    fg.push(graph.select(probs, 0)?);
                    bg.push(graph.select(probs, 1)?);
                }
                (fg, bg)
            }
            SoftmaxScope::Joint => {
                let mut rows = s_f
                    .iter()
                    .map(|&s| as_row(&mut graph, s))
                    .collect::<Result<Vec<_>>>()?;
                rows.push(as_row(&mut graph, s_b)?);
                let all = graph.concat(&rows)?;
                let probs = graph.softmax(all)?;
                let fg = (0..s_f.len())
                    .map(|i| graph.select(probs, i))
                    .collect::<Result<Vec<_>>>()?;
                let b = graph.select(probs, s_f.len())?;
                (fg, vec![b; s_f.len()])
            }
        };

        let scores = ScoreSet {
            s_f: s_f.iter().map(|&v| graph.scalar(v)).collect(),
            s_b: graph.scalar(s_b),
            tau,
            scope,
            softmaxed: fg_probs
                .iter()
                .zip(&bg_probs)
                .map(|(&f, &b)| (graph.scalar(f), graph.scalar(b)))
                .collect(),
        };
        Ok(Self {
            graph,
            tokens,
            extents: (d, h, w),
            fg_probs,
            scores,
        })
    }

    pub fn scores(&self) -> &ScoreSet {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.fg_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fg_probs.is_empty()
    }

    /// Gradient of the i-th softmaxed foreground score with respect to the tokens.
    pub fn token_gradient(&self, i: usize) -> Result<Vec<f64>> {
        let target = *self
            .fg_probs
            .get(i)
            .ok_or_else(|| LdagError::Contract(format!("attribute index {i} out of range")))?;
        let grads = self.graph.backward(target)?;
        Ok(grads.get_or_zero(&self.graph, self.tokens))
    }

    /// `relu(sum_m w_m * F[m])` with `w_m` the spatial mean of the token gradient.
    pub fn map(&self, i: usize) -> Result<CamMap> {
        let (_, h, w) = self.extents;
        let plane = h * w;
        let grad = self.token_gradient(i)?;
        let weights: Vec<f64> = grad
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let saturated = weights.iter().all(|&x| x == 0.0);
        let values = combine_cam(&weights, self.graph.value(self.tokens), plane)?;
        Ok(CamMap { values, saturated })
    }

    pub fn maps(&self) -> Result<Vec<CamMap>> {
        (0..self.len()).map(|i| self.map(i)).collect()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.extents.1, self.extents.2)
    }
}

/// `relu(sum_m weights[m] * tokens[m])` over `plane` cells per channel.
pub fn combine_cam(weights: &[f64], tokens: &[f64], plane: usize) -> Result<Vec<f64>> {
    if tokens.len() != weights.len() * plane {
        return Err(LdagError::Dimension(format!(
            "{} channel weights do not cover {} token values",
            weights.len(),
            tokens.len()
        )));
    }
    let mut values = vec![0.0; plane];
    for (wm, channel) in weights.iter().zip(tokens.chunks(plane.max(1))) {
        if *wm != 0.0 {
            values.iter_mut().zip(channel).for_each(|(v, &f)| *v += wm * f);
        }
    }
    values.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(values)
}

pub fn compute_scores(clip: &ClipEncoding, attrs: &AttributeSet, tau: f64, scope: SoftmaxScope) -> Result<ScoreSet> {
    Ok(GradCam::new(clip, attrs, tau, scope)?.scores)
}

/// Per-map min-max range recorded before rescaling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapRange {
    pub min: f64,
    pub max: f64,
}

/// `(n+1) x H x W` prior maps with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorStack {
    pub maps: Tensor,
    pub ranges: Vec<MapRange>,
}

impl PriorStack {
    pub fn zeros(count: usize, h: usize, w: usize) -> Self {
        Self {
            maps: Tensor::zeros(vec![count, h, w]),
            ranges: vec![MapRange { min: 0.0, max: 0.0 }; count],
        }
    }

    pub fn count(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.maps.shape()[1], self.maps.shape()[2])
    }

    pub fn map(&self, i: usize) -> &[f32] {
        let (h, w) = self.extent();
        &self.maps.data()[i * h * w..(i + 1) * h * w]
    }
}

/// Min-max each map to `[0, 1]` (constant maps become zero), then resize to `target`.
pub fn refine_prior(raw: &[Vec<f64>], grid: (usize, usize), target: (usize, usize)) -> Result<PriorStack> {
    let plane = grid.0 * grid.1;
    if let Some(bad) = raw.iter().find(|m| m.len() != plane) {
        return Err(LdagError::Dimension(format!(
            "prior map has {} cells, expected {plane}",
            bad.len()
        )));
    }
    let mut ranges = Vec::with_capacity(raw.len());
    let mut normalized = Vec::with_capacity(raw.len() * plane);
    for map in raw {
        let min = map.iter().copied().fold(f64::INFINITY, f64::min);
        let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ranges.push(MapRange { min, max });
        if max > min {
            normalized.extend(map.iter().map(|v| (v - min) / (max - min)));
        } else {
            normalized.extend(std::iter::repeat(0.0).take(plane));
        }
    }
    let resized = bilinear_resize_f64(&normalized, raw.len(), grid, target);
    let maps = Tensor::from_f64(vec![raw.len(), target.0, target.1], &resized)?;
    Ok(PriorStack { maps, ranges })
}

/// Scores and the refined prior stack for one query image.
pub fn prior_stack(
    clip: &ClipEncoding,
    attrs: &AttributeSet,
    tau: f64,
    scope: SoftmaxScope,
    target: (usize, usize),
) -> Result<(ScoreSet, PriorStack)> {
    let cam = GradCam::new(clip, attrs, tau, scope)?;
    let raw: Vec<Vec<f64>> = cam.maps()?.into_iter().map(|m| m.values).collect();
    let stack = refine_prior(&raw, cam.grid(), target)?;
    Ok((cam.scores, stack))
}
