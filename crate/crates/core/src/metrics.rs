//! IoU, class-balanced fold mIoU, FB-IoU, and evaluation reports.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{LdagError, Result};
use crate::image::Mask;

/// `|pred ∩ gt| / |pred ∪ gt|`, 1.0 when both are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(LdagError::Dimension(format!(
            "mask extents {}x{} and {}x{} differ",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += usize::from(p & g);
        union += usize::from(p | g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// One evaluated episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_id: String,
    pub class: String,
    pub fold: usize,
    pub fg_iou: f64,
    pub bg_iou: f64,
}

impl EpisodeRecord {
    pub fn score(episode_id: &str, class: &str, fold: usize, pred: &Mask, gt: &Mask) -> Result<Self> {
        Ok(Self {
            episode_id: episode_id.to_owned(),
            class: class.to_owned(),
            fold,
            fg_iou: iou(pred, gt)?,
            bg_iou: iou(&pred.inverted(), &gt.inverted())?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_iou: BTreeMap<String, f64>,
    pub per_fold_miou: BTreeMap<usize, f64>,
    /// Mean of the per-fold mIoUs.
    pub miou: f64,
    pub fbiou: f64,
    pub episode_count: usize,
    pub config: serde_json::Value,
    pub episodes: Vec<EpisodeRecord>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

/// Per-class mean IoU, class-balanced fold means, and FB-IoU over all episodes.
pub fn aggregate(records: &[EpisodeRecord], config: serde_json::Value) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(LdagError::Contract("cannot aggregate zero episodes".into()));
    }
    let mut by_class: BTreeMap<(usize, &str), Vec<f64>> = BTreeMap::new();
    for r in records {
        by_class.entry((r.fold, &r.class)).or_default().push(r.fg_iou);
    }
    let class_iou: BTreeMap<(usize, &str), f64> = by_class
        .into_iter()
        .map(|(k, v)| (k, mean(v)))
        .collect();
    let mut per_fold: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (&(fold, _), &v) in &class_iou {
        per_fold.entry(fold).or_default().push(v);
    }
    let per_fold_miou: BTreeMap<usize, f64> = per_fold.into_iter().map(|(f, v)| (f, mean(v))).collect();
    let fg = mean(records.iter().map(|r| r.fg_iou));
    let bg = mean(records.iter().map(|r| r.bg_iou));
    Ok(EvalReport {
        per_class_iou: class_iou
            .iter()
            .map(|(&(_, c), &v)| (c.to_owned(), v))
            .collect(),
        miou: mean(per_fold_miou.values().copied()),
        per_fold_miou,
        fbiou: (fg + bg) / 2.0,
        episode_count: records.len(),
        config,
        episodes: records.to_vec(),
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    /// Per-episode rows: `episode_id,class,fold,fg_iou,bg_iou`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.episodes {
            w.serialize(r).map_err(|e| LdagError::Contract(format!("csv: {e}")))?;
        }
        w.flush().map_err(|e| LdagError::Contract(format!("csv: {e}")))
    }
}
