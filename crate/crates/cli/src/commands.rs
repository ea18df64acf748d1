use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::json;

use ldag_core::attributes::{
    assemble, AttributeSet, AttributeSource, ChatBackend, ChatEndpointConfig, FixtureCache, HttpChat,
};
use ldag_core::episodes::{
    split_folds, synthetic_fixture, write_episode_dir, write_text_set, EncodedEpisode, EpisodeSource, FileDataset,
    Phase, SyntheticWorld, DEFAULT_ATTRIBUTE_COUNT, FOLD_COUNT, SYNTHETIC_MODEL,
};
use ldag_core::mae::prior_stack;
use ldag_core::metrics::{aggregate, EpisodeRecord, EvalReport};
use ldag_core::model::{FrozenDecoder, ModelParameters};
use ldag_core::netpbm::{write_mask, write_unit_map};
use ldag_core::pipeline::{predict_episode, prepare, Toggles};
use ldag_core::rng::derive_seed;
use ldag_core::training::{self, load_checkpoint, save_checkpoint, write_metrics_log, TrainConfig};

use crate::config::{Provider, RunConfig, UsageError};
use crate::{Opts, Sweep};

/// Attribute counts written by `gen-fixtures`.
pub const FIXTURE_COUNTS: [usize; 6] = [1, 2, 3, 4, 5, 10];

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn world(cfg: &RunConfig) -> Result<SyntheticWorld> {
    let w = SyntheticWorld::new(cfg.train.seed)?;
    Ok(match cfg.fixture_dir() {
        Some(dir) => w.with_fixtures(FixtureCache::new(dir)),
        None => w,
    })
}

fn source(cfg: &RunConfig) -> Result<Box<dyn EpisodeSource>> {
    Ok(match cfg.provider {
        Provider::Toy => Box::new(world(cfg)?),
        Provider::Files => {
            let dir = cfg.data.as_ref().expect("validated");
            Box::new(FileDataset::open(dir).with_context(|| format!("opening {}", dir.display()))?)
        }
    })
}

/// The `index`-th test episode in the same order `eval` visits them.
fn test_episode(cfg: &RunConfig, src: &dyn EpisodeSource, index: usize) -> Result<EncodedEpisode> {
    let split = split_folds(src.catalog(), FOLD_COUNT, cfg.train.fold)?;
    let seed = derive_seed(cfg.train.seed, Phase::Test as u64 + 1);
    let mut eps = src.episodes(&split, Phase::Test, index + 1, cfg.train.shots, seed)?;
    if eps.len() <= index {
        return Err(UsageError(format!("episode {index} out of range ({} test episodes)", eps.len())).into());
    }
    Ok(eps.swap_remove(index))
}

pub fn gen_fixtures(cfg: &RunConfig, force: bool) -> Result<()> {
    let manifest_path = cfg.out.join("manifest.json");
    if manifest_path.exists() && !force {
        bail!("{} exists; pass --force to overwrite", manifest_path.display());
    }
    mkdir(&cfg.out)?;
    let w = SyntheticWorld::new(cfg.train.seed)?;
    write_json(&manifest_path, &w.manifest)?;

    let cache = FixtureCache::new(cfg.out.join("fixtures"));
    for spec in &w.manifest.classes {
        for n in FIXTURE_COUNTS {
            cache.store(&synthetic_fixture(spec, n)?)?;
        }
    }

    let data = cfg.out.join("dataset");
    mkdir(&data)?;
    write_json(&data.join("manifest.json"), &w.manifest)?;
    let split = split_folds(&w.catalog, FOLD_COUNT, cfg.train.fold)?;
    let t = &cfg.train;
    for (phase, count) in [(Phase::Train, t.episodes), (Phase::Test, t.eval_episodes)] {
        let seed = derive_seed(t.seed, phase as u64 + 1);
        for ep in w.episodes(&split, phase, count, t.shots, seed)? {
            write_episode_dir(&data, &ep.encode(&w.encoders)?, Some(&ep))?;
        }
    }
    for spec in &w.manifest.classes {
        let fx = synthetic_fixture(spec, DEFAULT_ATTRIBUTE_COUNT)?;
        let provenance = ldag_core::attributes::Provenance::FixtureFile(format!("builtin:{}", spec.name));
        write_text_set(&data, &assemble(&fx.prompts, &spec.name, &w.encoders, provenance)?)?;
    }
    println!(
        "wrote {} classes, {} fixtures, {} + {} episodes (fold {}) under {}",
        w.catalog.len(),
        w.catalog.len() * FIXTURE_COUNTS.len(),
        t.episodes,
        t.eval_episodes,
        t.fold,
        cfg.out.display()
    );
    Ok(())
}

fn resolve_attributes(cfg: &RunConfig, class: &str) -> Result<AttributeSet> {
    let n = cfg.train.n;
    match cfg.provider {
        Provider::Files => Ok(source(cfg)?.attribute_set(class, n)?),
        Provider::Toy => {
            let w = world(cfg)?;
            let endpoint = if cfg.offline { None } else { ChatEndpointConfig::from_env() };
            match (cfg.fixture_dir(), endpoint) {
                (dir, Some(endpoint)) => {
                    let backend: Box<dyn ChatBackend> = Box::new(HttpChat::new(endpoint.clone()));
                    let src = AttributeSource {
                        cache: FixtureCache::new(dir.unwrap_or_else(|| cfg.out.join("fixtures"))),
                        model: endpoint.model.clone(),
                        backend: Some(backend),
                        offline: false,
                        retries: endpoint.retries,
                    };
                    let (prompts, provenance) = src.fetch(&w.catalog, class, n)?;
                    Ok(assemble(&prompts, class, &w.encoders, provenance)?)
                }
                (Some(dir), None) => {
                    let src = AttributeSource::offline(FixtureCache::new(dir), SYNTHETIC_MODEL);
                    let (prompts, provenance) = src.fetch(&w.catalog, class, n)?;
                    Ok(assemble(&prompts, class, &w.encoders, provenance)?)
                }
                (None, None) => Ok(w.attribute_set(class, n)?),
            }
        }
    }
}

pub fn attributes(cfg: &RunConfig, class: &str) -> Result<()> {
    let src = source(cfg)?;
    if src.catalog().index_of(class).is_err() {
        return Err(UsageError(format!(
            "unknown class {class:?}; known: {}",
            src.catalog().classes.join(", ")
        ))
        .into());
    }
    let attrs = resolve_attributes(cfg, class)?;
    let mut text = String::new();
    for (i, p) in attrs.attribute_prompts.iter().enumerate() {
        writeln!(text, "fg {i}: {p}")?;
    }
    writeln!(text, "fg {}: {}", attrs.n(), attrs.template_prompt)?;
    writeln!(text, "bg: {}", attrs.background_prompt)?;
    writeln!(text, "source: {}", attrs.provenance)?;
    print!("{text}");

    let dir = cfg.out.join("attributes");
    mkdir(&dir)?;
    let mut foreground = attrs.attribute_prompts.clone();
    foreground.push(attrs.template_prompt.clone());
    write_json(
        &dir.join(format!("{class}__n{}.json", attrs.n())),
        &json!({
            "class": class,
            "n": attrs.n(),
            "foreground": foreground,
            "background": attrs.background_prompt,
            "provenance": attrs.provenance.to_string(),
        }),
    )
}

pub fn prior(cfg: &RunConfig, index: usize) -> Result<()> {
    let src = source(cfg)?;
    let ep = test_episode(cfg, src.as_ref(), index)?;
    let attrs = src.attribute_set(&ep.class_name, cfg.train.n)?;
    let (h, w) = (ep.query_mask.height(), ep.query_mask.width());
    let (scores, stack) = prior_stack(&ep.query_clip, &attrs, cfg.train.tau, cfg.train.scope, (h, w))?;
    let dir = cfg.out.join("prior").join(&ep.episode_id);
    mkdir(&dir)?;
    for i in 0..stack.count() {
        write_unit_map(dir.join(format!("prior_{i}.pgm")), w, h, stack.map(i))?;
    }
    write_mask(dir.join("query_mask.pgm"), &ep.query_mask)?;
    write_json(
        &dir.join("scores.json"),
        &json!({
            "episode_id": ep.episode_id,
            "class": ep.class_name,
            "n": cfg.train.n,
            "scores": scores,
            "ranges": stack.ranges,
        }),
    )?;
    println!("{} prior maps for {} ({}) in {}", stack.count(), ep.episode_id, ep.class_name, dir.display());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let src = source(cfg)?;
    let out = training::train(&cfg.train, src.as_ref())?;
    mkdir(&cfg.out)?;
    save_checkpoint(&cfg.out.join("checkpoint"), &out.params, cfg.echo())?;
    write_metrics_log(&cfg.out.join("metrics.jsonl"), &out.log)?;
    let last = out.log.last().context("training ran zero epochs")?;
    println!(
        "{} steps, loss {:.4}, train mIoU {:.4}, {} skipped, checksum {}",
        out.step_losses.len(),
        last.loss_total,
        last.train_miou,
        out.skipped,
        &out.params.checksum()[..16]
    );
    Ok(())
}

fn checkpoint(opts: &Opts, path: Option<&Path>) -> Result<(RunConfig, ModelParameters)> {
    let provisional = opts.resolve(None)?;
    let dir = path.map(Path::to_path_buf).unwrap_or_else(|| provisional.out.join("checkpoint"));
    let (params, manifest) = load_checkpoint(&dir).with_context(|| format!("loading {}", dir.display()))?;
    let cfg = opts.resolve(Some(&manifest.config))?;
    if cfg.train.n != params.shape().n {
        return Err(UsageError(format!("checkpoint was trained with n={}, not {}", params.shape().n, cfg.train.n)).into());
    }
    Ok((cfg, params))
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    mkdir(dir)?;
    fs::write(dir.join("report.json"), report.to_json()?)?;
    let csv = fs::File::create(dir.join("report.csv"))?;
    report.write_csv(csv)?;
    Ok(())
}

pub fn eval(opts: &Opts, path: Option<&Path>) -> Result<()> {
    let (cfg, params) = checkpoint(opts, path)?;
    let src = source(&cfg)?;
    let records = evaluate_records(&params, &cfg.train, src.as_ref())?;
    let report = aggregate(&records, cfg.echo())?;
    write_report(&cfg.out, &report)?;
    println!(
        "fold {} {}-shot: mIoU {:.4}, FB-IoU {:.4} over {} episodes",
        cfg.train.fold, cfg.train.shots, report.miou, report.fbiou, report.episode_count
    );
    Ok(())
}

fn evaluate_records(params: &ModelParameters, t: &TrainConfig, src: &dyn EpisodeSource) -> Result<Vec<EpisodeRecord>> {
    let set = training::prepare_set(src, t, Phase::Test, t.eval_episodes, t.shots)?;
    Ok(training::evaluate_prepared(params, &set.episodes, &t.forward())?)
}

pub fn predict(opts: &Opts, path: Option<&Path>, index: usize) -> Result<()> {
    let (cfg, params) = checkpoint(opts, path)?;
    let src = source(&cfg)?;
    let ep = test_episode(&cfg, src.as_ref(), index)?;
    let attrs = src.attribute_set(&ep.class_name, cfg.train.n)?;
    let forward = cfg.train.forward();
    let prepared = prepare(&ep, &attrs, &forward)?;
    let (pred, _) = predict_episode(&params, &FrozenDecoder::for_params(&params), &prepared, &forward)?;
    let record = EpisodeRecord::score(&ep.episode_id, &ep.class_name, ep.fold, &pred.mask, &ep.query_mask)?;
    let dir = cfg.out.join("predict").join(&ep.episode_id);
    mkdir(&dir)?;
    write_unit_map(dir.join("probability.pgm"), pred.width(), pred.height(), pred.probabilities.data())?;
    write_mask(dir.join("mask.pgm"), &pred.mask)?;
    write_json(
        &dir.join("prediction.json"),
        &json!({
            "episode_id": ep.episode_id,
            "class": ep.class_name,
            "fold": ep.fold,
            "iou": record.fg_iou,
        }),
    )?;
    println!("{} ({}): IoU {:.4} -> {}", ep.episode_id, ep.class_name, record.fg_iou, dir.display());
    Ok(())
}

pub const ALPHAS: [f64; 5] = [0.0, 0.3, 0.5, 0.8, 1.0];
pub const NS: [usize; 7] = [0, 1, 2, 3, 4, 5, 10];

/// `(sweep, cell, config)` for every requested cell.
fn cells(base: &TrainConfig, sweep: Sweep) -> Vec<(&'static str, String, TrainConfig)> {
    let mut out = Vec::new();
    if matches!(sweep, Sweep::Alpha | Sweep::All) {
        for alpha in ALPHAS {
            out.push(("alpha", format!("alpha-{alpha}"), TrainConfig { alpha, ..base.clone() }));
        }
    }
    if matches!(sweep, Sweep::N | Sweep::All) {
        for n in NS {
            out.push(("n", format!("n-{n}"), TrainConfig { n, ..base.clone() }));
        }
    }
    if matches!(sweep, Sweep::Toggles | Sweep::All) {
        let t = |mae_on, maa_on, use_support| Toggles { mae_on, maa_on, use_support };
        for (name, toggles) in [
            ("baseline", t(false, false, true)),
            ("mae", t(true, false, true)),
            ("mae-maa", t(true, true, true)),
            ("no-support", t(true, true, false)),
        ] {
            out.push(("toggles", name.to_owned(), TrainConfig { toggles, ..base.clone() }));
        }
    }
    out
}

pub fn ablate(cfg: &RunConfig, sweep: Sweep, all_folds: bool) -> Result<()> {
    let src = source(cfg)?;
    let root = cfg.out.join("ablate");
    let mut summary = String::from("sweep,cell,alpha,n,mae,maa,support,miou,fbiou,episodes\n");
    for (group, cell, t) in cells(&cfg.train, sweep) {
        let folds: Vec<usize> = if all_folds { (0..FOLD_COUNT).collect() } else { vec![t.fold] };
        let mut records = Vec::new();
        for fold in folds {
            let t = TrainConfig { fold, ..t.clone() };
            let out = training::train(&t, src.as_ref())?;
            records.extend(evaluate_records(&out.params, &t, src.as_ref())?);
        }
        let echo = RunConfig { train: t.clone(), ..cfg.clone() }.echo();
        let report = aggregate(&records, echo)?;
        write_report(&root.join(group).join(&cell), &report)?;
        writeln!(
            summary,
            "{group},{cell},{},{},{},{},{},{:.6},{:.6},{}",
            t.alpha,
            t.n,
            t.toggles.mae_on,
            t.toggles.maa_on,
            t.toggles.use_support,
            report.miou,
            report.fbiou,
            report.episode_count
        )?;
        println!("{group:<8} {cell:<12} mIoU {:.4}", report.miou);
    }
    mkdir(&root)?;
    fs::write(root.join("summary.csv"), summary)?;
    Ok(())
}
