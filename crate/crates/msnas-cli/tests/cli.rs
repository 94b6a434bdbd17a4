//! End-to-end tests of the command-line pipeline on a miniature experiment.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_msnas")
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let config = format!(
        r#"{{
  "seed": 17,
  "search_space": {{
    "stages": 3,
    "num_classes": 4,
    "image_channels": 1,
    "stem_kernel": 3,
    "stem_stride": 1,
    "resolution_pool": [8, 10],
    "depth_pool": [1, 2],
    "kernel_pool": [3, 5],
    "cum_width_ratio_pool": ["1/2", "1/1"],
    "groups": [
      {{ "blocks": 2, "width": 4, "hidden": 6, "stride": 1 }},
      {{ "blocks": 2, "width": 6, "hidden": 8, "stride": 2 }}
    ]
  }},
  "train": {{
    "epochs": 1, "batch_size": 16, "momentum": 0.9, "weight_decay": 3e-5,
    "initial_lr": 0.01, "kd_weight": 1.0, "kd_temperature": 1.0,
    "seed": 0, "shards": 2
  }},
  "metric": {{ "omega": 0.09, "cost_target": 60000.0, "cost_kind": "macs" }},
  "evo": {{
    "population_size": 16, "total_evaluations": 120, "parent_sample_size": 4,
    "mutation_prob": 0.1, "crossover_fraction": 0.5, "seed": 0
  }},
  "predictor": {{
    "hidden_layers": 2, "hidden_units": 32, "epochs": 4, "lr": 1e-4,
    "weight_decay": 1e-5, "batch_size": 4, "val_fraction": 0.1
  }},
  "db": {{ "num_archs": 24, "num_images": 40, "batch_size": 20 }},
  "dataset": {{
    "kind": "synthetic", "classes": 4, "train_size": 80, "test_size": 30,
    "image_size": 10, "channels": 1
  }}{extra}
}}"#
    );
    let path = dir.join("config.json");
    std::fs::write(&path, config).unwrap();
    path
}

struct Pipeline {
    dir: PathBuf,
    config: PathBuf,
}

/// Shared miniature pipeline: train once, build the database once.
fn pipeline() -> &'static Pipeline {
    static PIPELINE: OnceLock<Pipeline> = OnceLock::new();
    PIPELINE.get_or_init(|| {
        let dir = std::env::temp_dir().join(format!("msnas_cli_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let config = write_config(&dir, "");
        let out = dir.join("run");

        let status = Command::new(bin())
            .args(["train-supernet", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success(), "train-supernet failed");

        let status = Command::new(bin())
            .args(["build-db", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success(), "build-db failed");
        Pipeline { dir, config }
    })
}

#[test]
fn missing_dataset_path_exits_2_with_the_path_named() {
    let dir = std::env::temp_dir().join(format!("msnas_cli_badpath_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let extra = r#",
  "grid": null"#;
    let mut cfg = std::fs::read_to_string(write_config(&dir, extra)).unwrap();
    cfg = cfg.replace(
        r#""kind": "synthetic", "classes": 4, "train_size": 80, "test_size": 30,
    "image_size": 10, "channels": 1"#,
        r#""kind": "binary", "train_paths": ["/nonexistent/data.bin"], "test_paths": [],
    "image_size": 10, "channels": 1"#,
    );
    let config = dir.join("bad.json");
    std::fs::write(&config, cfg).unwrap();

    let out = Command::new(bin())
        .args(["train-supernet", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/nonexistent/data.bin"), "stderr: {stderr}");
}

#[test]
fn smoke_checkpoint_exists_and_reloads() {
    let p = pipeline();
    let ck_path = p.dir.join("run/supernet.ckpt");
    assert!(ck_path.exists());
    let ck = msnas::checkpoint::load_checkpoint(&ck_path).unwrap();
    assert_eq!(ck.supernet.config.stages, 3);

    // Training log has header + steps rows.
    let log = std::fs::read_to_string(p.dir.join("run/train_log.csv")).unwrap();
    let rows: Vec<&str> = log.lines().collect();
    assert!(rows[0].starts_with("epoch,step,lr,total_loss"));
    assert_eq!(rows.len() - 1, 80 / 16); // one epoch of 80 images, batch 16

    // Manifest lists the checkpoint with a hash.
    let manifest = std::fs::read_to_string(p.dir.join("run/manifest.json")).unwrap();
    assert!(manifest.contains("supernet.ckpt"));
    assert!(manifest.contains("fnv1a64"));
}

#[test]
fn build_db_cardinality_and_rerun_identical() {
    let p = pipeline();
    let db = msnas::evaldb::EvalDatabase::load_dir(p.dir.join("run/db")).unwrap();
    assert_eq!(db.registry.len(), 24);
    assert_eq!(db.total_records(), 24 * 40);

    // Tiny override: 2 archs x 3 images = 6 records, rerun byte-identical.
    for run in ["dbA", "dbB"] {
        let out = p.dir.join(run);
        std::fs::create_dir_all(&out).unwrap();
        std::fs::copy(p.dir.join("run/supernet.ckpt"), out.join("supernet.ckpt")).unwrap();
        let status = Command::new(bin())
            .args(["build-db", "--config"])
            .arg(&p.config)
            .arg("--out")
            .arg(&out)
            .args(["--num-arch", "2", "--num-images", "3"])
            .status()
            .unwrap();
        assert!(status.success());
        let db = msnas::evaldb::EvalDatabase::load_dir(out.join("db")).unwrap();
        assert_eq!(db.total_records(), 6);
    }
    let reg_a = std::fs::read(p.dir.join("dbA/db/registry.jsonl")).unwrap();
    let reg_b = std::fs::read(p.dir.join("dbB/db/registry.jsonl")).unwrap();
    assert_eq!(reg_a, reg_b);
    let rec_a = std::fs::read(p.dir.join("dbA/db/records/a0000.jsonl")).unwrap();
    let rec_b = std::fs::read(p.dir.join("dbB/db/records/a0000.jsonl")).unwrap();
    assert_eq!(rec_a, rec_b);
}

#[test]
fn search_reuses_db_across_cost_targets_and_kinds() {
    let p = pipeline();
    let out = p.dir.join("run");

    for (name, target) in [("report_lo", "20000.0"), ("report_hi", "90000.0")] {
        let status = Command::new(bin())
            .args(["search", "--config"])
            .arg(&p.config)
            .arg("--out")
            .arg(&out)
            .args(["--cost-target", target, "--report-name", name])
            .status()
            .unwrap();
        assert!(status.success(), "search {name} failed");
    }
    let lo: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report_lo.json")).unwrap())
            .unwrap();
    let hi: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report_hi.json")).unwrap())
            .unwrap();
    assert_ne!(lo["metric"]["cost_target"], hi["metric"]["cost_target"]);
    // Reports carry true re-scored metrics and thresholds.
    assert!(lo["true_r"].as_f64().unwrap() > 0.0);
    assert_eq!(lo["thresholds"].as_array().unwrap().len(), 2);

    // Latency cost kind: needs a table; reuses the same database without
    // rebuilding records.
    let status = Command::new(bin())
        .args(["bench-latency", "--config"])
        .arg(&p.config)
        .arg("--out")
        .arg(&out)
        .args(["--device", "unit", "--repeats", "1", "--warmups", "0"])
        .status()
        .unwrap();
    assert!(status.success());
    let status = Command::new(bin())
        .args(["search", "--config"])
        .arg(&p.config)
        .arg("--out")
        .arg(&out)
        .args(["--cost-kind", "latency", "--cost-target", "5.0"])
        .args(["--report-name", "report_lat"])
        .arg("--latency-table")
        .arg(out.join("latency_unit.json"))
        .status()
        .unwrap();
    assert!(status.success(), "latency search failed");
    let lat: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report_lat.json")).unwrap())
            .unwrap();
    assert_eq!(lat["metric"]["cost_kind"], "latency");
    assert_eq!(lat["cost_profile"]["kind"], "latency");

    // Latency kind without a table is a usage error.
    let code = Command::new(bin())
        .args(["search", "--config"])
        .arg(&p.config)
        .arg("--out")
        .arg(&out)
        .args(["--cost-kind", "latency", "--report-name", "report_bad"])
        .output()
        .unwrap();
    assert_eq!(code.status.code(), Some(2));
}

#[test]
fn eval_arch_consistency_and_sweep() {
    let p = pipeline();
    let out = p.dir.join("run");
    // Make sure a search report exists for this test's thresholds source.
    let status = Command::new(bin())
        .args(["search", "--config"])
        .arg(&p.config)
        .arg("--out")
        .arg(&out)
        .args(["--report-name", "report_eval"])
        .status()
        .unwrap();
    assert!(status.success());

    // Sentinel thresholds: dynamic accuracy equals final-stage static accuracy.
    let status = Command::new(bin())
        .args(["eval-arch", "--config"])
        .arg(&p.config)
        .arg("--out")
        .arg(&out)
        .arg("--report")
        .arg(out.join("report_eval.json"))
        .args(["--sentinel", "--sweep"])
        .status()
        .unwrap();
    assert!(status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval_report.json")).unwrap())
            .unwrap();
    let counts: Vec<u64> = report["exit_counts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(counts[0], 0);
    assert_eq!(counts[1], 0);
    assert_eq!(counts[2], 30); // every sample reaches the final stage

    // Internal consistency: ACC_avg equals the fraction-weighted sum of
    // per-stage exiter accuracies.
    let fractions: Vec<f64> = report["exit_fractions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let accs: Vec<f64> = report["exit_accuracy"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let recomputed: f64 = fractions.iter().zip(&accs).map(|(f, a)| f * a).sum();
    let acc_avg = report["acc_avg"].as_f64().unwrap();
    assert!((recomputed - acc_avg).abs() < 1e-9);

    // Sweep: cost is non-decreasing as the shared threshold rises.
    let sweep = std::fs::read_to_string(out.join("tradeoff.csv")).unwrap();
    let costs: Vec<f64> = sweep
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(costs.windows(2).all(|w| w[1] >= w[0] - 1e-9), "costs {costs:?}");

    // Explicit thresholds work too.
    let status = Command::new(bin())
        .args(["eval-arch", "--config"])
        .arg(&p.config)
        .arg("--out")
        .arg(&out)
        .arg("--report")
        .arg(out.join("report_eval.json"))
        .args(["--thresholds", "0.5,0.6"])
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn export_arch_roundtrips() {
    let p = pipeline();
    let out = p.dir.join("run");
    let status = Command::new(bin())
        .args(["search", "--config"])
        .arg(&p.config)
        .arg("--out")
        .arg(&out)
        .args(["--report-name", "report_export"])
        .status()
        .unwrap();
    assert!(status.success());

    let arch_file = p.dir.join("winner.json");
    let status = Command::new(bin())
        .args(["export-arch", "--report"])
        .arg(out.join("report_export.json"))
        .arg("--out-file")
        .arg(&arch_file)
        .status()
        .unwrap();
    assert!(status.success());
    let arch: msnas::supernet::MultiStageArch =
        serde_json::from_str(&std::fs::read_to_string(&arch_file).unwrap()).unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report_export.json")).unwrap())
            .unwrap();
    let from_report: msnas::supernet::MultiStageArch =
        serde_json::from_value(report["arch"].clone()).unwrap();
    assert_eq!(arch, from_report);
}

#[test]
fn bench_latency_covers_enumerated_signatures() {
    let p = pipeline();
    let out = p.dir.join("run");
    let status = Command::new(bin())
        .args(["bench-latency", "--config"])
        .arg(&p.config)
        .arg("--out")
        .arg(&out)
        .args(["--device", "cov", "--repeats", "1", "--warmups", "0"])
        .status()
        .unwrap();
    assert!(status.success());
    let table = msnas::dyninfer::LatencyTable::from_json(
        &std::fs::read_to_string(out.join("latency_cov.json")).unwrap(),
    )
    .unwrap();
    let ck = msnas::checkpoint::load_checkpoint(out.join("supernet.ckpt")).unwrap();
    let sigs = msnas::dyninfer::enumerate_signatures(&ck.supernet.config).unwrap();
    assert_eq!(table.len(), sigs.len());
    // Every signature any sampled arch plans is in the table.
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let arch = msnas::supernet::sample_arch(&ck.supernet.config, &mut rng);
        let profile =
            msnas::dyninfer::profile_latency(&arch, &ck.supernet.config, &table).unwrap();
        assert_eq!(profile.cumulative.len(), 3);
    }
}
