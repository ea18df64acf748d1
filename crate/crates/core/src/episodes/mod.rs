//! Fold splits, episodes, and the two episode sources: the synthetic world and
//! directories of imported features.

mod layout;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use layout::{load_text_set, write_episode_dir, write_text_set, FileDataset};
pub use synthetic::{
    gen_scene, synthetic_fixture, DatasetManifest, ShapeKind, SyntheticClassSpec, SyntheticWorld,
    DEFAULT_ATTRIBUTE_COUNT, SYNTHETIC_DATASET, SYNTHETIC_MODEL,
};

use crate::attributes::{assemble, AttributeSet, AttributeSource, ClassCatalog, Provenance};
use crate::error::{LdagError, Result};
use crate::image::{Image, Mask};
use crate::providers::{ClipEncoding, SamEncoding, ToyEncoders, GRID};

pub const FOLD_COUNT: usize = 4;

/// Disjoint train and test class sets for one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub catalog: ClassCatalog,
    pub fold_count: usize,
    pub fold_id: usize,
    /// Class indices into the catalog, in catalog order.
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
}

/// Test classes are the `fold_id`-th contiguous block of `M / fold_count` classes.
pub fn split_folds(catalog: &ClassCatalog, fold_count: usize, fold_id: usize) -> Result<DatasetSplit> {
    let m = catalog.len();
    if fold_count == 0 || m % fold_count != 0 {
        return Err(LdagError::Contract(format!(
            "{m} classes cannot be split into {fold_count} equal folds"
        )));
    }
    if fold_id >= fold_count {
        return Err(LdagError::Contract(format!(
            "fold {fold_id} out of range for {fold_count} folds"
        )));
    }
    let size = m / fold_count;
    let test = fold_id * size..(fold_id + 1) * size;
    Ok(DatasetSplit {
        catalog: catalog.clone(),
        fold_count,
        fold_id,
        train_classes: (0..m).filter(|c| !test.contains(c)).collect(),
        test_classes: test.collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Test,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Test => "test",
        }
    }
}

impl DatasetSplit {
    pub fn classes(&self, phase: Phase) -> &[usize] {
        match phase {
            Phase::Train => &self.train_classes,
            Phase::Test => &self.test_classes,
        }
    }

    pub fn class_name(&self, class_id: usize) -> &str {
        &self.catalog.classes[class_id]
    }
}

/// k support pairs and one query pair of the same class, as raw images.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub episode_id: String,
    pub class_id: usize,
    pub class_name: String,
    pub fold: usize,
    pub supports: Vec<(Image, Mask)>,
    pub query: (Image, Mask),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSupport {
    pub sam: SamEncoding,
    pub mask: Mask,
}

/// An episode after the frozen encoders: what the model actually consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedEpisode {
    pub episode_id: String,
    pub class_id: usize,
    pub class_name: String,
    pub fold: usize,
    pub supports: Vec<EncodedSupport>,
    pub query_clip: ClipEncoding,
    pub query_sam: SamEncoding,
    pub query_mask: Mask,
}

impl EncodedEpisode {
    pub fn shots(&self) -> usize {
        self.supports.len()
    }

    /// Keep only the first `k` supports.
    pub fn with_shots(mut self, k: usize) -> Result<Self> {
        if k == 0 || k > self.supports.len() {
            return Err(LdagError::Contract(format!(
                "cannot take {k} shots from an episode with {}",
                self.supports.len()
            )));
        }
        self.supports.truncate(k);
        Ok(self)
    }
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.supports.len()
    }

    pub fn encode(&self, encoders: &ToyEncoders) -> Result<EncodedEpisode> {
        let supports = self
            .supports
            .iter()
            .map(|(img, mask)| {
                Ok(EncodedSupport {
                    sam: encoders.encode_sam(img)?,
                    mask: mask.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedEpisode {
            episode_id: self.episode_id.clone(),
            class_id: self.class_id,
            class_name: self.class_name.clone(),
            fold: self.fold,
            supports,
            query_clip: encoders.encode_clip(&self.query.0)?,
            query_sam: encoders.encode_sam(&self.query.0)?,
            query_mask: self.query.1.clone(),
        })
    }
}

/// Whether a mask keeps both classes at the feature grid resolution.
pub fn survives_downsampling(mask: &Mask, grid: (usize, usize)) -> bool {
    let small = mask.resize_nearest(grid.1, grid.0);
    let fg = small.foreground_count();
    fg > 0 && fg < grid.0 * grid.1
}

/// Feature grid of the toy encoders.
pub const TOY_GRID: (usize, usize) = (GRID, GRID);

/// Anything that can hand out encoded episodes and class attribute sets.
pub trait EpisodeSource: Sync {
    fn catalog(&self) -> &ClassCatalog;

    /// Up to `count` episodes of the phase's classes with `shots` supports each.
    fn episodes(
        &self,
        split: &DatasetSplit,
        phase: Phase,
        count: usize,
        shots: usize,
        seed: u64,
    ) -> Result<Vec<EncodedEpisode>>;

    fn attribute_set(&self, class: &str, n: usize) -> Result<AttributeSet>;
}

impl EpisodeSource for SyntheticWorld {
    fn catalog(&self) -> &ClassCatalog {
        &self.catalog
    }

    fn episodes(
        &self,
        split: &DatasetSplit,
        phase: Phase,
        count: usize,
        shots: usize,
        seed: u64,
    ) -> Result<Vec<EncodedEpisode>> {
        let raw = SyntheticWorld::episodes(self, split, phase, count, shots, seed)?;
        crate::exec::try_map_ordered(&raw, |e| e.encode(&self.encoders))
    }

    /// Prompts come from the fixture cache when one is attached, otherwise from
    /// the class's stored descriptions.
    fn attribute_set(&self, class: &str, n: usize) -> Result<AttributeSet> {
        let class_id = self.catalog.index_of(class)?;
        let (prompts, provenance) = match &self.fixtures {
            Some(cache) => AttributeSource::offline(cache.clone(), SYNTHETIC_MODEL).fetch(&self.catalog, class, n)?,
            None => {
                let fx = synthetic_fixture(self.spec(class_id), n)?;
                (fx.prompts, Provenance::FixtureFile(format!("builtin:{class}")))
            }
        };
        assemble(&prompts, class, &self.encoders, provenance)
    }
}

impl EpisodeSource for FileDataset {
    fn catalog(&self) -> &ClassCatalog {
        &self.catalog
    }

    /// Stored episodes in id order; `count = 0` keeps all of them.
    fn episodes(
        &self,
        split: &DatasetSplit,
        phase: Phase,
        count: usize,
        shots: usize,
        _seed: u64,
    ) -> Result<Vec<EncodedEpisode>> {
        let mut eps = FileDataset::episodes(self, split, phase)?;
        if count > 0 {
            eps.truncate(count);
        }
        eps.into_iter().map(|e| e.with_shots(shots)).collect()
    }

    fn attribute_set(&self, class: &str, n: usize) -> Result<AttributeSet> {
        FileDataset::attribute_set(self, class, n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog(m: usize) -> ClassCatalog {
        ClassCatalog::new("d", (0..m).map(|i| format!("c{i}")).collect()).unwrap()
    }

    #[test]
    fn twenty_classes_fold_zero_is_first_five() {
        let s = split_folds(&catalog(20), 4, 0).unwrap();
        assert_eq!(s.test_classes, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.train_classes.len(), 15);
    }

    #[test]
    fn eight_classes_fold_three_is_last_two() {
        let s = split_folds(&catalog(8), 4, 3).unwrap();
        assert_eq!(s.test_classes, vec![6, 7]);
    }

    #[test]
    fn folds_are_disjoint_and_exhaustive() {
        for m in [8, 20, 80] {
            let mut seen = vec![0; m];
            for f in 0..4 {
                let s = split_folds(&catalog(m), 4, f).unwrap();
                assert!(s.test_classes.iter().all(|c| !s.train_classes.contains(c)));
                assert_eq!(s.test_classes.len() + s.train_classes.len(), m);
                s.test_classes.iter().for_each(|&c| seen[c] += 1);
            }
            assert!(seen.iter().all(|&k| k == 1));
        }
    }

    #[test]
    fn indivisible_catalog_is_rejected() {
        assert!(split_folds(&catalog(10), 4, 0).is_err());
        assert!(split_folds(&catalog(8), 4, 4).is_err());
    }
}
