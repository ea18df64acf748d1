//! Support fusion, query decoding through the frozen decoder, and k-shot
//! aggregation of predictions.

use crate::autodiff::{logistic, Graph, Precision, Var};
use crate::error::{LdagError, Result};
use crate::image::Mask;
use crate::maa::{PrototypePair, ProjectedAttributes};
use crate::mae::PriorStack;
use crate::model::{BoundParams, FrozenDecoder, FusionMode, ModelParameters};
use crate::providers::SamEncoding;
use crate::tensor::{FeatureGrid, Tensor};

fn grid_extents(g: &Graph, x: Var, what: &str) -> Result<(usize, usize, usize)> {
    match g.shape(x) {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(LdagError::Dimension(format!("{what} must be C x H x W, got {s:?}"))),
    }
}

/// `F1([support || attr || P_f])` with the attribute block built per `mode`.
pub fn fuse_support_var(
    g: &mut Graph,
    bound: &BoundParams,
    support: Var,
    projected: &[Var],
    proto_fg: Var,
    mode: FusionMode,
) -> Result<Var> {
    let (ds, h, w) = grid_extents(g, support, "support features")?;
    if g.shape(proto_fg) != [ds] {
        return Err(LdagError::Dimension(format!(
            "prototype shape {:?} does not match {ds} feature channels",
            g.shape(proto_fg)
        )));
    }
    if let Some(&bad) = projected.iter().find(|&&p| g.shape(p) != [ds]) {
        return Err(LdagError::Dimension(format!(
            "projected attribute shape {:?} does not match {ds} feature channels",
            g.shape(bad)
        )));
    }
    let proto = g.broadcast_spatial(proto_fg, h, w)?;
    let fuse = |g: &mut Graph, attr: Var| -> Result<Var> {
        let block = g.broadcast_spatial(attr, h, w)?;
        let stacked = g.concat(&[support, block, proto])?;
        bound.f1.apply_grid(g, stacked)
    };
    if projected.is_empty() {
        let zero = g.constant(&Tensor::zeros(vec![ds]));
        return fuse(g, zero);
    }
    match mode {
        FusionMode::Mean => {
            let rows = projected
                .iter()
                .map(|&p| g.reshape(p, vec![1, ds]))
                .collect::<Result<Vec<_>>>()?;
            let stacked = g.concat(&rows)?;
            let mean = g.mean_axis(stacked, 0)?;
            fuse(g, mean)
        }
        FusionMode::PerAttribute => {
            let grids = projected
                .iter()
                .map(|&p| {
                    let fused = fuse(g, p)?;
                    g.reshape(fused, vec![1, ds, h, w])
                })
                .collect::<Result<Vec<_>>>()?;
            let stacked = g.concat(&grids)?;
            g.mean_axis(stacked, 0)
        }
    }
}

/// Logits `[1, H, W]` from `D(F2([fused || query || priors]))`.
pub fn predict_query_var(
    g: &mut Graph,
    bound: &BoundParams,
    fused: Var,
    query: Var,
    priors: Var,
    decoder: &FrozenDecoder,
    out: (usize, usize),
) -> Result<Var> {
    let (_, h, w) = grid_extents(g, fused, "fused support")?;
    let (_, qh, qw) = grid_extents(g, query, "query features")?;
    let (maps, ph, pw) = grid_extents(g, priors, "prior stack")?;
    if (qh, qw) != (h, w) || (ph, pw) != (h, w) {
        return Err(LdagError::Dimension(format!(
            "extents disagree: fused {h}x{w}, query {qh}x{qw}, priors {ph}x{pw}"
        )));
    }
    let n = bound.mlp.len();
    if maps != n + 1 {
        return Err(LdagError::Contract(format!(
            "prior stack has {maps} maps, expected n+1 = {}",
            n + 1
        )));
    }
    let stacked = g.concat(&[fused, query, priors])?;
    let mixed = bound.f2.apply_grid(g, stacked)?;
    decoder.decode(g, mixed, out)
}

/// Eager [`fuse_support_var`] on tensors.
pub fn fuse_support(
    feat: &SamEncoding,
    projected: &ProjectedAttributes,
    protos: &PrototypePair,
    params: &ModelParameters,
    mode: FusionMode,
) -> Result<FeatureGrid> {
    let mut g = Graph::new(Precision::F32);
    let bound = params.bind(&mut g);
    let support = g.constant(feat.features.tensor());
    let vars: Vec<Var> = projected.vectors.iter().map(|v| g.constant(v)).collect();
    let proto = g.constant(&protos.foreground);
    let fused = fuse_support_var(&mut g, &bound, support, &vars, proto, mode)?;
    FeatureGrid::new(g.tensor(fused), feat.source())
}

/// Eager [`predict_query_var`] on tensors.
pub fn predict_query(
    fused: &FeatureGrid,
    query: &SamEncoding,
    priors: &PriorStack,
    params: &ModelParameters,
    decoder: &FrozenDecoder,
    out: (usize, usize),
) -> Result<Prediction> {
    let mut g = Graph::new(Precision::F32);
    let bound = params.bind(&mut g);
    let f = g.constant(fused.tensor());
    let q = g.constant(query.features.tensor());
    let p = g.constant(&priors.maps);
    let logits = predict_query_var(&mut g, &bound, f, q, p, decoder, out)?;
    Prediction::from_logits(out.0, out.1, g.value(logits))
}

/// Logits, probabilities and the thresholded mask of one query.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[H, W]`.
    pub logits: Tensor,
    /// `[H, W]`, `sigmoid(logits)`.
    pub probabilities: Tensor,
    /// Foreground where probability >= 0.5.
    pub mask: Mask,
}

fn threshold(h: usize, w: usize, probs: &Tensor) -> Result<Mask> {
    let bits = probs.data().iter().map(|&p| u8::from(p >= 0.5)).collect();
    Mask::new(w, h, bits)
}

impl Prediction {
    pub fn from_logits(h: usize, w: usize, logits: &[f64]) -> Result<Self> {
        let probs: Vec<f64> = logits.iter().map(|&l| logistic(l)).collect();
        let probabilities = Tensor::from_f64(vec![h, w], &probs)?;
        Ok(Self {
            logits: Tensor::from_f64(vec![h, w], logits)?,
            mask: threshold(h, w, &probabilities)?,
            probabilities,
        })
    }

    pub fn height(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.logits.shape()[1]
    }
}

/// Average the probability maps of k predictions and threshold at 0.5.
pub fn kshot_aggregate(preds: &[Prediction]) -> Result<Prediction> {
    let first = preds
        .first()
        .ok_or_else(|| LdagError::Contract("k-shot aggregation of zero predictions".into()))?;
    if preds.len() == 1 {
        return Ok(first.clone());
    }
    let shape = first.logits.shape().to_vec();
    if let Some(bad) = preds.iter().find(|p| p.logits.shape() != shape.as_slice()) {
        return Err(LdagError::Dimension(format!(
            "prediction extents {:?} and {:?} differ",
            shape,
            bad.logits.shape()
        )));
    }
    let k = preds.len() as f64;
    let cells = first.logits.numel();
    let mut probs = vec![0.0f64; cells];
    let mut logits = vec![0.0f64; cells];
    for (i, (p, l)) in probs.iter_mut().zip(logits.iter_mut()).enumerate() {
        let mean = preds.iter().map(|q| f64::from(q.probabilities.data()[i])).sum::<f64>() / k;
        *p = mean;
        let l0 = first.logits.data()[i];
        // identical inputs keep their logit; otherwise invert the mean probability
        *l = if preds.iter().all(|q| q.logits.data()[i] == l0) {
            f64::from(l0)
        } else {
            (mean / (1.0 - mean)).ln()
        };
    }
    let probabilities = Tensor::from_f64(shape.clone(), &probs)?;
    Ok(Prediction {
        logits: Tensor::from_f64(shape.clone(), &logits)?,
        mask: threshold(shape[0], shape[1], &probabilities)?,
        probabilities,
    })
}
