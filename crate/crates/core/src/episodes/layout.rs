//! Episode directories on disk.
//!
//! ```text
//! <root>/manifest.json                      {dataset, classes: [name | {name, ...}], ...}
//! <root>/text/<class>/attr_<i>.ldt          attribute embeddings, i = 0..
//! <root>/text/<class>/template.ldt
//! <root>/text/<class>/bg.ldt
//! <root>/episodes/<id>/episode.json         {episode_id, class, fold, shots}
//! <root>/episodes/<id>/query_clip.ldt
//! <root>/episodes/<id>/query_sam.ldt
//! <root>/episodes/<id>/query_mask.pgm
//! <root>/episodes/<id>/support_<j>_sam.ldt
//! <root>/episodes/<id>/support_<j>_mask.pgm
//! <root>/episodes/<id>/query.ppm, support_<j>.ppm   optional, for inspection
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attributes::{AttributeSet, ClassCatalog, Provenance};
use crate::error::{LdagError, Result};
use crate::netpbm;
use crate::providers::{load_feature_file, save_feature_file, FeatureFile};

use super::{DatasetSplit, EncodedEpisode, EncodedSupport, Episode, Phase};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct EpisodeHeader {
    episode_id: String,
    class: String,
    fold: usize,
    shots: usize,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ClassEntry {
    Name(String),
    Spec { name: String },
}

#[derive(Deserialize)]
struct ManifestHead {
    dataset: String,
    classes: Vec<ClassEntry>,
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| LdagError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| LdagError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Write one encoded episode, plus its images when the raw episode is given.
pub fn write_episode_dir(root: &Path, encoded: &EncodedEpisode, raw: Option<&Episode>) -> Result<PathBuf> {
    let dir = root.join("episodes").join(&encoded.episode_id);
    mkdir(&dir)?;
    let header = EpisodeHeader {
        episode_id: encoded.episode_id.clone(),
        class: encoded.class_name.clone(),
        fold: encoded.fold,
        shots: encoded.shots(),
    };
    let path = dir.join("episode.json");
    fs::write(&path, serde_json::to_vec_pretty(&header)?).map_err(|e| LdagError::io(&path, e))?;
    save_feature_file(&FeatureFile::Clip(encoded.query_clip.clone()), dir.join("query_clip.ldt"))?;
    save_feature_file(&FeatureFile::Sam(encoded.query_sam.clone()), dir.join("query_sam.ldt"))?;
    netpbm::write_mask(dir.join("query_mask.pgm"), &encoded.query_mask)?;
    for (j, s) in encoded.supports.iter().enumerate() {
        save_feature_file(&FeatureFile::Sam(s.sam.clone()), dir.join(format!("support_{j}_sam.ldt")))?;
        netpbm::write_mask(dir.join(format!("support_{j}_mask.pgm")), &s.mask)?;
    }
    if let Some(ep) = raw {
        netpbm::write_image(dir.join("query.ppm"), &ep.query.0)?;
        for (j, (img, _)) in ep.supports.iter().enumerate() {
            netpbm::write_image(dir.join(format!("support_{j}.ppm")), img)?;
        }
    }
    Ok(dir)
}

/// Write a class's text embeddings under `<root>/text/<class>/`.
pub fn write_text_set(root: &Path, attrs: &AttributeSet) -> Result<()> {
    let dir = root.join("text").join(&attrs.class_name);
    mkdir(&dir)?;
    let n = attrs.n();
    for (i, e) in attrs.foreground[..n].iter().enumerate() {
        save_feature_file(&FeatureFile::Text(e.clone()), dir.join(format!("attr_{i}.ldt")))?;
    }
    save_feature_file(&FeatureFile::Text(attrs.foreground[n].clone()), dir.join("template.ldt"))?;
    save_feature_file(&FeatureFile::Text(attrs.background.clone()), dir.join("bg.ldt"))
}

/// Read the first `n` attribute embeddings, the template and the background for `class`.
pub fn load_text_set(root: &Path, class: &str, n: usize) -> Result<AttributeSet> {
    let dir = root.join("text").join(class);
    let load = |name: String| load_feature_file(dir.join(name))?.into_text();
    let attributes = (0..n)
        .map(|i| {
            let path = dir.join(format!("attr_{i}.ldt"));
            if !path.exists() {
                return Err(LdagError::NotFound(format!(
                    "attribute embedding {} (class {class} has fewer than {n})",
                    path.display()
                )));
            }
            load(format!("attr_{i}.ldt"))
        })
        .collect::<Result<Vec<_>>>()?;
    AttributeSet::from_embeddings(
        class,
        attributes,
        load("template.ldt".into())?,
        load("bg.ldt".into())?,
        Provenance::FixtureFile(dir.display().to_string()),
    )
}

/// Episodes read from an imported feature directory.
#[derive(Clone, Debug)]
pub struct FileDataset {
    root: PathBuf,
    pub catalog: ClassCatalog,
    ids: Vec<String>,
}

impl FileDataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let head: ManifestHead = read_json(&root.join("manifest.json"))?;
        let classes = head
            .classes
            .into_iter()
            .map(|c| match c {
                ClassEntry::Name(n) | ClassEntry::Spec { name: n } => n,
            })
            .collect();
        let catalog = ClassCatalog::new(head.dataset, classes)?;
        let episodes = root.join("episodes");
        let mut ids = Vec::new();
        if episodes.is_dir() {
            for entry in fs::read_dir(&episodes).map_err(|e| LdagError::io(&episodes, e))? {
                let entry = entry.map_err(|e| LdagError::io(&episodes, e))?;
                if entry.path().join("episode.json").is_file() {
                    ids.push(entry.file_name().to_string_lossy().into_owned());
                }
            }
        }
        ids.sort();
        Ok(Self { root, catalog, ids })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn episode_ids(&self) -> &[String] {
        &self.ids
    }

    pub fn load(&self, id: &str) -> Result<EncodedEpisode> {
        let dir = self.root.join("episodes").join(id);
        let header: EpisodeHeader = read_json(&dir.join("episode.json"))?;
        let class_id = self.catalog.index_of(&header.class)?;
        let supports = (0..header.shots)
            .map(|j| {
                Ok(EncodedSupport {
                    sam: load_feature_file(dir.join(format!("support_{j}_sam.ldt")))?.into_sam()?,
                    mask: netpbm::read_mask(dir.join(format!("support_{j}_mask.pgm")))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedEpisode {
            episode_id: header.episode_id,
            class_id,
            class_name: header.class,
            fold: header.fold,
            supports,
            query_clip: load_feature_file(dir.join("query_clip.ldt"))?.into_clip()?,
            query_sam: load_feature_file(dir.join("query_sam.ldt"))?.into_sam()?,
            query_mask: netpbm::read_mask(dir.join("query_mask.pgm"))?,
        })
    }

    /// Every stored episode whose class belongs to the phase's side of `split`.
    pub fn episodes(&self, split: &DatasetSplit, phase: Phase) -> Result<Vec<EncodedEpisode>> {
        let wanted = split.classes(phase);
        let all = crate::exec::try_map_ordered(&self.ids, |id| self.load(id))?;
        Ok(all.into_iter().filter(|e| wanted.contains(&e.class_id)).collect())
    }

    pub fn attribute_set(&self, class: &str, n: usize) -> Result<AttributeSet> {
        load_text_set(&self.root, class, n)
    }
}
