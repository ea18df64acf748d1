mod common;

use common::suites::{overfit, window_means};
use ldag_core::episodes::SyntheticWorld;
use ldag_core::error::LdagError;
use ldag_core::metrics::{aggregate, EpisodeRecord};
use ldag_core::model::{ModelParameters, ModelShape};
use ldag_core::training::{
    evaluate, load_checkpoint, save_checkpoint, train, write_metrics_log, Adam, EpochMetrics, TrainConfig,
};

fn small(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 2,
        batch_size: 4,
        episodes: 8,
        eval_episodes: 6,
        ..TrainConfig::default()
    }
}

#[test]
fn seeded_runs_are_identical() {
    let world = SyntheticWorld::new(11).unwrap();
    let cfg = small(11);
    let run = || {
        let out = train(&cfg, &world).unwrap();
        let report = evaluate(&out.params, &cfg, &world).unwrap();
        (out.params.checksum(), out.step_losses, report.to_json().unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let other = train(&small(12), &SyntheticWorld::new(12).unwrap()).unwrap();
    assert_ne!(other.params.checksum(), a.0);
}

#[test]
fn thread_count_does_not_change_results() {
    let world = SyntheticWorld::new(13).unwrap();
    let cfg = small(13);
    let one = ldag_core::exec::with_threads(1, || train(&cfg, &world).unwrap().params.checksum()).unwrap();
    let four = ldag_core::exec::with_threads(4, || train(&cfg, &world).unwrap().params.checksum()).unwrap();
    assert_eq!(one, four);
}

#[test]
fn overfit_loss_decreases_in_windows() {
    let (out, miou) = overfit();
    assert_eq!(out.step_losses.len(), 200);
    let windows = window_means(&out.step_losses, 20);
    assert!(windows.windows(2).all(|w| w[1] <= w[0]), "{windows:?}");
    assert!(out.log.last().unwrap().loss_total < out.log[0].loss_total);
    assert!(miou > out.log[0].train_miou, "{miou}");
}

#[test]
fn checkpoint_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let world = SyntheticWorld::new(14).unwrap();
    let cfg = small(14);
    let out = train(&cfg, &world).unwrap();
    save_checkpoint(tmp.path(), &out.params, cfg.echo()).unwrap();
    let (back, manifest) = load_checkpoint(tmp.path()).unwrap();
    assert_eq!(back, out.params);
    assert_eq!(manifest.config, cfg.echo());
    assert_eq!(
        evaluate(&back, &cfg, &world).unwrap().to_json().unwrap(),
        evaluate(&out.params, &cfg, &world).unwrap().to_json().unwrap()
    );

    let f2 = tmp.path().join("f2.w1.ldt");
    let mut bytes = std::fs::read(&f2).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&f2, bytes).unwrap();
    assert!(load_checkpoint(tmp.path()).is_err());
}

#[test]
fn untrained_parameters_give_a_valid_report() {
    let world = SyntheticWorld::new(15).unwrap();
    let cfg = TrainConfig { eval_episodes: 10, ..small(15) };
    let params = ModelParameters::init(ModelShape { text_dim: 64, feat_dim: 64, n: cfg.n }, 15).unwrap();
    let report = evaluate(&params, &cfg, &world).unwrap();
    assert_eq!(report.episode_count, 10);
    assert!((0.0..=1.0).contains(&report.miou));
    assert_eq!(report.per_class_iou.len(), 2);
}

#[test]
fn five_shot_evaluation_runs() {
    let world = SyntheticWorld::new(16).unwrap();
    let cfg = TrainConfig { shots: 5, ..small(16) };
    let out = train(&cfg, &world).unwrap();
    let report = evaluate(&out.params, &cfg, &world).unwrap();
    assert_eq!(report.config["shots"], 5);
    assert!(report.miou.is_finite());
}

#[test]
fn non_finite_gradient_names_the_tensor() {
    let mut params = ModelParameters::init(ModelShape { text_dim: 3, feat_dim: 2, n: 1 }, 1).unwrap();
    let mut grads: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    let idx = params.names().iter().position(|n| n == "f1.w2").unwrap();
    grads[idx][1] = f64::NAN;
    let before = params.clone();
    match Adam::new(&params, 1e-3).step(&mut params, &grads) {
        Err(LdagError::NonFiniteGradient(name)) => assert_eq!(name, "f1.w2"),
        other => panic!("{other:?}"),
    }
    assert_eq!(params, before);
}

#[test]
fn report_totals_recompute_from_records() {
    let rec = |id: &str, class: &str, fold, fg, bg| EpisodeRecord {
        episode_id: id.into(),
        class: class.into(),
        fold,
        fg_iou: fg,
        bg_iou: bg,
    };
    // three "a" episodes and one "b": class balance keeps b at half weight
    let records = vec![
        rec("1", "a", 0, 1.0, 1.0),
        rec("2", "a", 0, 1.0, 1.0),
        rec("3", "a", 0, 1.0, 1.0),
        rec("4", "b", 0, 0.0, 0.5),
    ];
    let r = aggregate(&records, serde_json::json!({"k": 1})).unwrap();
    assert_eq!(r.miou, 0.5);
    assert_eq!(r.per_class_iou["a"], 1.0);
    assert!((r.fbiou - (0.75 + 0.875) / 2.0).abs() < 1e-12);
    let mut csv = Vec::new();
    r.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("episode_id,class,fold,fg_iou,bg_iou"));
    assert!(aggregate(&[], serde_json::Value::Null).is_err());
}

#[test]
fn metrics_log_is_json_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("metrics.jsonl");
    let log: Vec<EpochMetrics> = (0..3)
        .map(|epoch| EpochMetrics {
            epoch,
            loss_pre: 1.0,
            loss_inf: 0.5,
            loss_total: 1.25,
            train_miou: 0.1,
        })
        .collect();
    write_metrics_log(&path, &log).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let back: Vec<EpochMetrics> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, log);
}
