//! One episode end to end: frozen-feature preparation, the recorded forward
//! pass with its losses, and k-shot inference.

use serde::{Deserialize, Serialize};

use crate::attributes::AttributeSet;
use crate::autodiff::{Graph, Precision, Var};
use crate::episodes::EncodedEpisode;
use crate::error::{LdagError, Result};
use crate::fusion::{fuse_support_var, kshot_aggregate, predict_query_var, Prediction};
use crate::image::Mask;
use crate::maa::{infonce_var, map_prototypes, project_attribute_var, PrototypePair};
use crate::mae::{prior_stack, PriorStack, ScoreSet, SoftmaxScope};
use crate::model::{BoundParams, FrozenDecoder, FusionMode, ModelParameters};
use crate::tensor::Tensor;

/// Module switches used by the ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub mae_on: bool,
    pub maa_on: bool,
    pub use_support: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            mae_on: true,
            maa_on: true,
            use_support: true,
        }
    }
}

/// Everything that shapes the forward pass and the loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardConfig {
    pub n: usize,
    pub alpha: f64,
    pub tau: f64,
    pub tau1: f64,
    pub scope: SoftmaxScope,
    pub fusion: FusionMode,
    pub toggles: Toggles,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        Self {
            n: 5,
            alpha: 0.5,
            tau: 1.0,
            tau1: 1.0,
            scope: SoftmaxScope::Pairwise,
            fusion: FusionMode::Mean,
            toggles: Toggles::default(),
        }
    }
}

impl ForwardConfig {
    /// Whether the alignment loss contributes at all.
    pub fn inf_active(&self) -> bool {
        self.toggles.maa_on && self.toggles.use_support && self.n > 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSupport {
    pub features: Tensor,
    pub prototypes: PrototypePair,
}

/// An episode with every frozen quantity computed once: support features and
/// prototypes, query features, the prior stack, and the attribute text vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedEpisode {
    pub episode_id: String,
    pub class_id: usize,
    pub class_name: String,
    pub fold: usize,
    pub supports: Vec<PreparedSupport>,
    pub query_features: Tensor,
    pub query_mask: Mask,
    pub priors: PriorStack,
    pub scores: Option<ScoreSet>,
    /// The n attribute embeddings (template excluded).
    pub attributes: Vec<Tensor>,
}

impl PreparedEpisode {
    pub fn output_extent(&self) -> (usize, usize) {
        (self.query_mask.height(), self.query_mask.width())
    }

    pub fn feature_extent(&self) -> (usize, usize, usize) {
        let s = self.query_features.shape();
        (s[0], s[1], s[2])
    }
}

pub fn prepare(ep: &EncodedEpisode, attrs: &AttributeSet, cfg: &ForwardConfig) -> Result<PreparedEpisode> {
    if attrs.n() != cfg.n {
        return Err(LdagError::Contract(format!(
            "attribute set has {} descriptions, config asks for {}",
            attrs.n(),
            cfg.n
        )));
    }
    if ep.supports.is_empty() {
        return Err(LdagError::Contract("episode has no supports".into()));
    }
    let query = ep.query_sam.features.tensor();
    let (ds, hs, ws) = query.chw()?;
    let supports = ep
        .supports
        .iter()
        .map(|s| {
            if s.sam.features.tensor().shape() != query.shape() {
                return Err(LdagError::Dimension(format!(
                    "support features {:?} differ from query features {:?}",
                    s.sam.features.tensor().shape(),
                    query.shape()
                )));
            }
            Ok(if cfg.toggles.use_support {
                PreparedSupport {
                    features: s.sam.features.tensor().clone(),
                    prototypes: map_prototypes(&s.sam, &s.mask)?,
                }
            } else {
                PreparedSupport {
                    features: Tensor::zeros(query.shape().to_vec()),
                    prototypes: PrototypePair::zeros(ds),
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (scores, priors) = if cfg.toggles.mae_on {
        let (s, p) = prior_stack(&ep.query_clip, attrs, cfg.tau, cfg.scope, (hs, ws))?;
        (Some(s), p)
    } else {
        (None, PriorStack::zeros(cfg.n + 1, hs, ws))
    };
    Ok(PreparedEpisode {
        episode_id: ep.episode_id.clone(),
        class_id: ep.class_id,
        class_name: ep.class_name.clone(),
        fold: ep.fold,
        supports,
        query_features: query.clone(),
        query_mask: ep.query_mask.clone(),
        priors,
        scores,
        attributes: attrs.foreground[..cfg.n].iter().map(|e| e.vector.clone()).collect(),
    })
}

/// Handles to the recorded losses and per-support logits.
#[derive(Clone, Debug)]
pub struct EpisodeGraph {
    pub pre: Var,
    pub inf: Var,
    pub total: Var,
    pub logits: Vec<Var>,
}

fn mean_of_scalars(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let rows = xs.iter().map(|&x| g.reshape(x, vec![1])).collect::<Result<Vec<_>>>()?;
    let stacked = g.concat(&rows)?;
    Ok(g.mean_all(stacked))
}

/// Record the forward pass: per support, fuse and decode the query; losses are
/// averaged over supports. `L = L_pre + alpha * L_inf`.
pub fn record_episode(
    g: &mut Graph,
    bound: &BoundParams,
    ep: &PreparedEpisode,
    decoder: &FrozenDecoder,
    cfg: &ForwardConfig,
) -> Result<EpisodeGraph> {
    if bound.mlp.len() != cfg.n || ep.attributes.len() != cfg.n {
        return Err(LdagError::Contract(format!(
            "config n = {} but parameters hold {} heads and the episode {} attributes",
            cfg.n,
            bound.mlp.len(),
            ep.attributes.len()
        )));
    }
    let projected = ep
        .attributes
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let x = g.constant(t);
            project_attribute_var(g, bound, i, x)
        })
        .collect::<Result<Vec<_>>>()?;
    let query = g.constant(&ep.query_features);
    let priors = g.constant(&ep.priors.maps);
    let target = ep.query_mask.as_f64();
    let out = ep.output_extent();

    let mut bces = Vec::with_capacity(ep.supports.len());
    let mut infs = Vec::new();
    let mut logits = Vec::with_capacity(ep.supports.len());
    for s in &ep.supports {
        let support = g.constant(&s.features);
        let fg = g.constant(&s.prototypes.foreground);
        let fused = fuse_support_var(g, bound, support, &projected, fg, cfg.fusion)?;
        let l = predict_query_var(g, bound, fused, query, priors, decoder, out)?;
        bces.push(g.bce_with_logits(l, &target)?);
        logits.push(l);
        if cfg.inf_active() {
            let bg = g.constant(&s.prototypes.background);
            infs.push(infonce_var(g, fg, bg, &projected, cfg.tau1)?);
        }
    }
    let pre = mean_of_scalars(g, &bces)?;
    let inf = if infs.is_empty() {
        g.leaf(vec![], vec![0.0], false)?
    } else {
        mean_of_scalars(g, &infs)?
    };
    let weighted = g.scale(inf, cfg.alpha);
    let total = g.add(pre, weighted)?;
    Ok(EpisodeGraph {
        pre,
        inf,
        total,
        logits,
    })
}

/// `L = L_pre + alpha * L_inf` with its parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pre: f64,
    pub inf: f64,
    pub alpha: f64,
    pub total: f64,
}

pub fn total_loss(pre: f64, inf: f64, alpha: f64) -> LossBreakdown {
    LossBreakdown {
        pre,
        inf,
        alpha,
        total: pre + alpha * inf,
    }
}

/// Result of one forward and backward pass.
#[derive(Clone, Debug)]
pub struct EpisodeStep {
    pub loss: LossBreakdown,
    /// One gradient per parameter tensor, in parameter order.
    pub grads: Vec<Vec<f64>>,
    pub prediction: Prediction,
}

fn predictions(g: &Graph, eg: &EpisodeGraph, out: (usize, usize)) -> Result<Prediction> {
    let preds = eg
        .logits
        .iter()
        .map(|&l| Prediction::from_logits(out.0, out.1, g.value(l)))
        .collect::<Result<Vec<_>>>()?;
    kshot_aggregate(&preds)
}

pub fn episode_step(
    params: &ModelParameters,
    decoder: &FrozenDecoder,
    ep: &PreparedEpisode,
    cfg: &ForwardConfig,
    precision: Precision,
) -> Result<EpisodeStep> {
    let mut g = Graph::new(precision);
    let bound = params.bind(&mut g);
    let eg = record_episode(&mut g, &bound, ep, decoder, cfg)?;
    let grads = g.backward(eg.total)?;
    let loss = total_loss(g.scalar(eg.pre), g.scalar(eg.inf), cfg.alpha);
    Ok(EpisodeStep {
        loss,
        grads: bound.vars.iter().map(|&v| grads.get_or_zero(&g, v)).collect(),
        prediction: predictions(&g, &eg, ep.output_extent())?,
    })
}

/// k-shot prediction and loss without gradients.
pub fn predict_episode(
    params: &ModelParameters,
    decoder: &FrozenDecoder,
    ep: &PreparedEpisode,
    cfg: &ForwardConfig,
) -> Result<(Prediction, LossBreakdown)> {
    let mut g = Graph::new(Precision::F32);
    let bound = params.bind(&mut g);
    let eg = record_episode(&mut g, &bound, ep, decoder, cfg)?;
    let loss = total_loss(g.scalar(eg.pre), g.scalar(eg.inf), cfg.alpha);
    Ok((predictions(&g, &eg, ep.output_extent())?, loss))
}
