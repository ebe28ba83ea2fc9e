use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use uq_core::data::SyntheticSpec;
use uq_core::experiment::*;
use uq_core::model::{BaseWeights, ModelConfig};
use uq_core::train::{early_stop_select, Checkpoint};

fn tiny(root: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        model: ModelConfig {
            embed_dim: 16,
            num_layers: 1,
            num_heads: 2,
            mlp_dim: 32,
            max_seq_len: 128,
            ..ModelConfig::default()
        },
        dataset: DatasetConfig::Synthetic {
            spec: SyntheticSpec {
                train_size: 24,
                validation_size: 12,
                ood_size: 10,
                ..SyntheticSpec::default()
            },
            seed: 3,
        },
        output_dir: root.to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.pretrain.steps = 4;
    cfg.pretrain.corpus_size = 24;
    cfg.pretrain.heldout_size = 8;
    cfg.train.members = 2;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 8;
    cfg.train.early_stop = false;
    cfg.lora.rank = 2;
    cfg.hist_bins = 5;
    cfg
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn csv_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    lines
        .map(|l| header.iter().cloned().zip(l.split(',').map(String::from)).collect())
        .collect()
}

#[test]
fn config_hash_ignores_key_order_and_has_twelve_hex_digits() {
    let a: serde_json::Value = serde_json::from_str(r#"{"b": 1, "a": {"y": 2, "x": 3}}"#).unwrap();
    let b: serde_json::Value = serde_json::from_str(r#"{"a": {"x": 3, "y": 2}, "b": 1}"#).unwrap();
    assert_eq!(canonical_json(&a).unwrap(), r#"{"a":{"x":3,"y":2},"b":1}"#);
    let h = config_hash(&a).unwrap();
    assert_eq!(h, config_hash(&b).unwrap());
    assert_eq!(h.len(), 12);
    assert!(h.chars().all(|c| c.is_ascii_hexdigit()));
}

#[test]
fn config_file_round_trips_and_rejects_unknown_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let path = dir.path().join("c.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
    fs::write(&path, r#"{"train": {"epochs": 3, "epohcs": 4}}"#).unwrap();
    assert!(ExperimentConfig::load(&path).is_err());
    fs::write(&path, r#"{"train": {"epochs": 3}}"#).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap().train.epochs, 3);
}

#[test]
fn zero_step_pretraining_keeps_the_random_init() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.pretrain.steps = 0;
    let out = cmd_pretrain(&cfg).unwrap();
    let saved = BaseWeights::load(&out.dir.join("base.ckpt")).unwrap();
    assert_eq!(saved, BaseWeights::init(&cfg.model, cfg.pretrain.seed).unwrap());
    assert_eq!(out.perplexity_init, out.perplexity_final);
}

#[test]
fn pretraining_is_reproducible_and_lowers_perplexity() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = tiny(d1.path());
    cfg.pretrain.steps = 30;
    let a = cmd_pretrain(&cfg).unwrap();
    cfg.output_dir = d2.path().to_path_buf();
    let b = cmd_pretrain(&cfg).unwrap();
    assert_eq!(a.digest, b.digest);
    assert_eq!(
        fs::read(a.dir.join("base.ckpt")).unwrap(),
        fs::read(b.dir.join("base.ckpt")).unwrap()
    );
    assert!(a.perplexity_final < a.perplexity_init);
}

#[test]
fn finetune_writes_one_checkpoint_per_member_and_epoch_and_guards_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train.members = 1;
    cfg.train.epochs = 3;
    let base = cmd_pretrain(&cfg).unwrap();
    let run = cmd_finetune(&cfg, &base.dir, false).unwrap();
    assert_eq!(run.checkpoints.len(), 3);
    let ckpts: Vec<_> = fs::read_dir(run.dir.join("checkpoints")).unwrap().collect();
    assert_eq!(ckpts.len(), 3);
    for p in run.paths() {
        assert!(p.is_file(), "{}", p.display());
    }
    let err = cmd_finetune(&cfg, &base.dir, false).unwrap_err();
    assert!(err.to_string().contains("--force"));
    let again = cmd_finetune(&cfg, &base.dir, true).unwrap();
    assert_eq!(again.dir, run.dir);
}

#[test]
fn finetune_without_base_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let err = cmd_finetune(&cfg, &dir.path().join("nope"), false).unwrap_err();
    assert!(matches!(err, uq_core::error::Error::Input(_)));
}

#[test]
fn lambda_sweep_makes_four_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train.members = 1;
    cfg.train.epochs = 1;
    let base = cmd_pretrain(&cfg).unwrap();
    let runs = cmd_finetune_sweep(&cfg, &base.dir, false).unwrap();
    assert_eq!(runs.len(), 4);
    let dirs: std::collections::BTreeSet<_> = runs.iter().map(|r| r.dir.clone()).collect();
    assert_eq!(dirs.len(), 4);
    for (r, lambda) in runs.iter().zip(LAMBDA_GRID) {
        let text = fs::read_to_string(r.dir.join("config.json")).unwrap();
        let c: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(c.train.lambda_half, lambda);
    }
}

#[test]
fn evaluation_and_report_artifacts_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let base = cmd_pretrain(&cfg).unwrap();
    let run = cmd_finetune(&cfg, &base.dir, false).unwrap();
    let art = cmd_evaluate(&run.dir, None).unwrap();
    // 2 epochs × (validation + ood)
    assert_eq!(art.records.len(), 4);
    for p in art.paths() {
        assert!(p.is_file(), "{}", p.display());
    }

    let auroc = csv_rows(&run.dir.join("eval/auroc.csv"));
    assert_eq!(auroc.len(), 4);
    for r in &auroc {
        if r["other"] == "synthetic" {
            assert_eq!(r["status"], "skipped");
            assert_eq!(r["auroc_mi"], "");
        } else {
            assert_eq!(r["status"], "ok");
            let v: f64 = r["auroc_mi"].parse().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }

    let sizes = [("synthetic", 12usize), ("synthetic-ood", 10)];
    for (name, n) in sizes {
        let hist = csv_rows(&run.dir.join(format!("eval/histogram_{name}.csv")));
        let summary = csv_rows(&run.dir.join(format!("eval/histogram_summary_{name}.csv")));
        for epoch in ["1", "2"] {
            let total: usize = hist
                .iter()
                .filter(|r| r["epoch"] == epoch)
                .map(|r| r["count"].parse::<usize>().unwrap())
                .sum();
            assert_eq!(total, n);
            for group in ["correct", "incorrect"] {
                let in_group: usize = hist
                    .iter()
                    .filter(|r| r["epoch"] == epoch && r["group"] == group)
                    .map(|r| r["count"].parse::<usize>().unwrap())
                    .sum();
                let s = summary
                    .iter()
                    .find(|r| r["epoch"] == epoch && r["group"] == group)
                    .unwrap();
                assert_eq!(s["total"].parse::<usize>().unwrap(), in_group);
            }
        }
    }

    let metrics = csv_rows(&run.dir.join("eval/metrics.csv"));
    for m in &metrics {
        let nll: f64 = m["nll"].parse().unwrap();
        let member: f64 = m["mean_member_nll"].parse().unwrap();
        assert!(nll <= member + 1e-12);
    }

    let text = cmd_report(&run.dir).unwrap();
    let first = fs::read(run.dir.join("report.csv")).unwrap();
    assert_eq!(cmd_report(&run.dir).unwrap(), text);
    assert_eq!(fs::read(run.dir.join("report.csv")).unwrap(), first);
    let rows = report_rows(&run.dir).unwrap();
    assert_eq!(rows.len(), 2 * 2);
    let in_domain: Vec<_> = rows.iter().filter(|r| r.dataset == "synthetic").collect();
    let nlls: Vec<f64> = in_domain.iter().map(|r| r.nll).collect();
    let best = in_domain[early_stop_select(&nlls).unwrap()].epoch;
    for r in &rows {
        assert_eq!(r.best, r.epoch == best);
    }
    // the in-domain validation NLL is the one the trainer logged
    let log = read_train_log(&run.dir).unwrap();
    for r in &in_domain {
        assert_eq!(log.value(None, r.epoch, "validation", "nll").unwrap(), r.nll);
    }
}

#[test]
fn single_member_has_zero_mi_and_chance_mi_auroc() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train.members = 1;
    cfg.train.epochs = 1;
    let base = cmd_pretrain(&cfg).unwrap();
    let run = cmd_finetune(&cfg, &base.dir, false).unwrap();
    let art = cmd_evaluate(&run.dir, None).unwrap();
    for p in &art.records {
        for line in fs::read_to_string(p).unwrap().lines() {
            let r: RecordLine = serde_json::from_str(line).unwrap();
            assert_eq!(r.mi, 0.0);
            assert_eq!(r.epoch, 1);
        }
    }
    let auroc = csv_rows(&run.dir.join("eval/auroc.csv"));
    let ok = auroc.iter().find(|r| r["status"] == "ok").unwrap();
    assert_eq!(ok["auroc_mi"].parse::<f64>().unwrap(), 0.5);
}

#[test]
fn evaluate_names_the_missing_epoch_and_unknown_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let base = cmd_pretrain(&cfg).unwrap();
    let run = cmd_finetune(&cfg, &base.dir, false).unwrap();
    let err = cmd_evaluate(&run.dir, Some(&["nope".to_string()])).unwrap_err();
    assert!(err.to_string().contains("nope"));
    let only = cmd_evaluate(&run.dir, Some(&["synthetic".to_string()])).unwrap();
    assert_eq!(only.records.len(), 2);
    fs::remove_file(run.dir.join("checkpoints").join(Checkpoint::file_name(1, 2))).unwrap();
    let err = cmd_evaluate(&run.dir, None).unwrap_err();
    assert!(err.to_string().contains("epoch 2"), "{err}");
}

#[test]
fn full_pipeline_is_byte_identical_across_invocations() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run_once = |root: &Path, force: bool| {
        let cfg = tiny(root);
        let base = cmd_pretrain(&cfg).unwrap();
        let run = cmd_finetune(&cfg, &base.dir, force).unwrap();
        cmd_evaluate(&run.dir, None).unwrap();
        cmd_report(&run.dir).unwrap();
        files(root)
    };
    let same = |a: &BTreeMap<PathBuf, Vec<u8>>, b: &BTreeMap<PathBuf, Vec<u8>>| {
        assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
        for (k, v) in a {
            assert!(v == &b[k], "{} differs", k.display());
        }
    };
    let first = run_once(d1.path(), false);
    assert!(first.len() > 10);
    same(&first, &run_once(d2.path(), false));
    same(&first, &run_once(d1.path(), true));
}

#[test]
fn a_moved_output_root_still_evaluates() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny(&d1.path().join("root"));
    let base = cmd_pretrain(&cfg).unwrap();
    let run = cmd_finetune(&cfg, &base.dir, false).unwrap();
    let moved = d2.path().join("elsewhere");
    fs::rename(d1.path().join("root"), &moved).unwrap();
    let run = moved.join(run.dir.file_name().unwrap());
    assert_eq!(cmd_evaluate(&run, None).unwrap().records.len(), 4);
}
