//! Subcommand implementations for the pipeline stages.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use msnas::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use msnas::data::resize_bilinear;
use msnas::dyninfer::{
    bench_latency, count_macs, enumerate_signatures, infer_dynamic, profile_latency, CostKind,
    CostProfile, LatencyTable, TensorOpRunner, ThresholdVector,
};
use msnas::error::{Error, Result};
use msnas::evaldb::{
    average_metrics, build_eval_db, grid_search_thresholds, simulate_exits,
    EvalDatabase, ExitSummary, MetricConfig,
};
use msnas::evo::evolve_with_predictor;
use msnas::predictor::{
    build_training_set, encoding_layout, fit_predictor, save_predictor,
    ValidationReport,
};
use msnas::supernet::{build_supernet, sample_arch, MultiStageArch};
use msnas::trainer::{train_supernet_with, Trainer};

use crate::config::{ExperimentConfig, SeedPurpose};
use crate::manifest::Manifest;

fn ensure_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn checkpoint_path(out: &Path, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone().unwrap_or_else(|| out.join("supernet.ckpt"))
}

pub fn cmd_train_supernet(config_path: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    ensure_out(out)?;
    let data = cfg.load_train_dataset()?;
    let mut supernet = build_supernet(&cfg.search_space, cfg.seed_for(SeedPurpose::SupernetInit))?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed_for(SeedPurpose::Training);

    let batch = train_cfg.batch_size.min(data.len());
    let total_steps = (data.len() / batch).max(1) * train_cfg.epochs;
    let mut trainer = Trainer::new(&supernet, train_cfg.clone(), total_steps)?;

    let mut log = std::io::BufWriter::new(std::fs::File::create(out.join("train_log.csv"))?);
    let report = train_supernet_with(&mut trainer, &mut supernet, &data, Some(&mut log))?;
    log.flush()?;

    save_checkpoint(out.join("supernet.ckpt"), &supernet, &train_cfg, trainer.rng())?;
    std::fs::write(
        out.join("train_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Manifest::record(out, &["supernet.ckpt", "train_log.csv", "train_report.json"])?;
    eprintln!(
        "trained {} steps; final epoch loss {:.4}, accuracy {:.3}",
        report.steps,
        report.epoch_loss.last().unwrap(),
        report.epoch_accuracy.last().unwrap()
    );
    Ok(())
}

pub fn cmd_build_db(
    config_path: &Path,
    out: &Path,
    num_archs: Option<usize>,
    num_images: Option<usize>,
    latency_table: &Option<PathBuf>,
    checkpoint: &Option<PathBuf>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    ensure_out(out)?;
    let ck = load_checkpoint(checkpoint_path(out, checkpoint))?;
    let table = latency_table
        .as_ref()
        .map(|p| load_table(p))
        .transpose()?;

    let num_archs = num_archs.unwrap_or(cfg.db.num_archs);
    let num_images = num_images.unwrap_or(cfg.db.num_images);
    let mut arch_rng = ChaCha8Rng::seed_from_u64(cfg.seed_for(SeedPurpose::DbArchSampling));
    let archs: Vec<(String, MultiStageArch)> = (0..num_archs)
        .map(|i| (format!("a{i:04}"), sample_arch(&ck.supernet.config, &mut arch_rng)))
        .collect();

    let data = cfg.load_train_dataset()?;
    let mut img_rng = ChaCha8Rng::seed_from_u64(cfg.seed_for(SeedPurpose::DbImageSampling));
    let indices = data.sample_indices(num_images, &mut img_rng);
    if indices.len() < num_images {
        return Err(Error::Data(format!(
            "training split holds {} images, wanted {num_images}",
            data.len()
        )));
    }

    let outcome = build_eval_db(
        &ck.supernet,
        &archs,
        &data,
        &indices,
        cfg.db.batch_size,
        table.as_ref(),
    )?;
    for (id, reason) in &outcome.skipped {
        eprintln!("warning: skipped {id}: {reason}");
    }
    outcome.db.save_dir(out.join("db"))?;
    Manifest::record(out, &["db"])?;
    eprintln!(
        "database: {} architectures x {} samples = {} records",
        outcome.db.registry.len(),
        indices.len(),
        outcome.db.total_records()
    );
    Ok(())
}

fn load_table(path: &Path) -> Result<LatencyTable> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read latency table {}: {e}", path.display())))?;
    LatencyTable::from_json(&text)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SearchReport {
    pub metric: MetricConfig,
    pub arch: MultiStageArch,
    pub predicted_r: f64,
    pub true_r: f64,
    pub thresholds: ThresholdVector,
    pub acc_avg: f64,
    pub cost_avg: f64,
    pub cost_profile: CostProfile,
    pub cost_macs: CostProfile,
    pub exit_summary: ExitSummary,
    pub predictor_validation: ValidationReport,
    pub evaluations: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_search(
    config_path: &Path,
    out: &Path,
    omega: Option<f64>,
    cost_target: Option<f64>,
    cost_kind: Option<CostKind>,
    latency_table: &Option<PathBuf>,
    checkpoint: &Option<PathBuf>,
    report_name: &str,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    ensure_out(out)?;
    let mut metric = cfg.metric;
    if let Some(w) = omega {
        metric.omega = w;
    }
    if let Some(t) = cost_target {
        metric.cost_target = t;
    }
    if let Some(k) = cost_kind {
        metric.cost_kind = k;
    }
    metric.validate()?;
    let table = latency_table.as_ref().map(|p| load_table(p)).transpose()?;
    if metric.cost_kind == CostKind::Latency && table.is_none() {
        return Err(Error::Config(
            "cost kind latency needs --latency-table".into(),
        ));
    }

    let mut db = EvalDatabase::load_dir(out.join("db"))?;
    let ck = load_checkpoint(checkpoint_path(out, checkpoint))?;

    // The database is reusable across cost kinds: latency profiles are
    // derived on demand from the table without re-running inference.
    if let Some(table) = &table {
        for entry in db.registry.values_mut() {
            if entry.cost_latency.is_none() {
                entry.cost_latency =
                    Some(profile_latency(&entry.arch, &ck.supernet.config, table)?);
            }
        }
    }

    let grid = cfg.grid();
    let pairs = build_training_set(&db, &ck.supernet.config, &metric, &grid)?;
    let layout = encoding_layout(&ck.supernet.config);
    let (predictor, validation) = fit_predictor(
        &pairs,
        &layout,
        &cfg.predictor,
        &metric,
        cfg.seed_for(SeedPurpose::Predictor),
    )?;
    eprintln!(
        "predictor: rmse {:.4}, kendall tau {:.3} on {} held-out archs",
        validation.rmse, validation.kendall_tau, validation.n_val
    );
    save_predictor(out.join("predictor.bin"), &predictor)?;

    let mut evo = cfg.evo.clone();
    evo.seed = cfg.seed_for(SeedPurpose::Evolution);
    let result = evolve_with_predictor(&predictor, &metric, &ck.supernet.config, &evo)?;

    // True re-scoring on the evaluation images: evaluate the top candidates
    // and keep the one with the best true grid-searched R, so a predictor
    // that overrates some region cannot pick the final architecture alone.
    let candidates: Vec<MultiStageArch> =
        result.top.iter().map(|(a, _)| a.clone()).collect();
    let all_records = rescore(&cfg, &ck, &db, &candidates)?;
    let mut winner: Option<(usize, msnas::evaldb::GridSearchResult, CostProfile)> = None;
    for (i, records) in all_records.iter().enumerate() {
        let costs = match metric.cost_kind {
            CostKind::Macs => count_macs(&candidates[i], &ck.supernet.config)?,
            CostKind::Latency => {
                profile_latency(&candidates[i], &ck.supernet.config, table.as_ref().unwrap())?
            }
        };
        let gr = grid_search_thresholds(records, &costs, &metric, &grid)?;
        if winner.as_ref().map_or(true, |(_, w, _)| gr.r > w.r) {
            winner = Some((i, gr, costs));
        }
    }
    let (winner_idx, best, costs) =
        winner.ok_or_else(|| Error::Data("no candidates survived re-scoring".into()))?;
    let best_arch = candidates[winner_idx].clone();
    let predicted_r = result.top[winner_idx].1;

    let history_name = format!("{report_name}_history.csv");
    let mut hist = std::io::BufWriter::new(
        std::fs::File::create(out.join(&history_name))?,
    );
    writeln!(hist, "evaluation,best_predicted_r")?;
    for (i, h) in result.history.iter().enumerate() {
        writeln!(hist, "{},{:.9}", i + 1, h)?;
    }
    hist.flush()?;

    let report = SearchReport {
        metric,
        arch: best_arch.clone(),
        predicted_r,
        true_r: best.r,
        thresholds: best.thresholds.clone(),
        acc_avg: best.acc_avg,
        cost_avg: best.cost_avg,
        cost_profile: costs,
        cost_macs: count_macs(&best_arch, &ck.supernet.config)?,
        exit_summary: best.summary.clone(),
        predictor_validation: validation,
        evaluations: result.evaluations,
    };
    let report_file = format!("{report_name}.json");
    std::fs::write(out.join(&report_file), serde_json::to_string_pretty(&report)?)?;
    Manifest::record(out, &[report_file.as_str(), history_name.as_str(), "predictor.bin"])?;
    eprintln!(
        "search done: predicted R {:.4}, true R {:.4}, average cost {:.0}",
        report.predicted_r, report.true_r, report.cost_avg
    );
    Ok(())
}

/// Evaluate candidate architectures on the same evaluation images the
/// database was built from, returning full-stage records per candidate.
fn rescore(
    cfg: &ExperimentConfig,
    ck: &Checkpoint,
    db: &EvalDatabase,
    archs: &[MultiStageArch],
) -> Result<Vec<Vec<msnas::evaldb::EvalRecord>>> {
    let num_images = db
        .records
        .values()
        .next()
        .map(|r| r.len())
        .ok_or_else(|| Error::Data("database has no records".into()))?;
    let data = cfg.load_train_dataset()?;
    let mut img_rng = ChaCha8Rng::seed_from_u64(cfg.seed_for(SeedPurpose::DbImageSampling));
    let indices = data.sample_indices(num_images, &mut img_rng);
    let named: Vec<(String, MultiStageArch)> = archs
        .iter()
        .enumerate()
        .map(|(i, a)| (format!("c{i:02}"), a.clone()))
        .collect();
    let outcome =
        build_eval_db(&ck.supernet, &named, &data, &indices, cfg.db.batch_size, None)?;
    named
        .iter()
        .map(|(id, _)| {
            outcome
                .db
                .records
                .get(id)
                .cloned()
                .ok_or_else(|| Error::Data(format!("candidate {id} produced no records")))
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub arch: MultiStageArch,
    pub thresholds: ThresholdVector,
    pub acc_avg: f64,
    pub cost_avg_macs: f64,
    pub cumulative_macs: Vec<f64>,
    pub exit_fractions: Vec<f64>,
    pub exit_accuracy: Vec<f64>,
    pub exit_counts: Vec<usize>,
    pub samples: usize,
}

pub enum ThresholdSource {
    Explicit(Vec<f64>),
    FromReport(PathBuf),
    Sentinel,
}

pub fn cmd_eval_arch(
    config_path: &Path,
    out: &Path,
    arch_file: &Option<PathBuf>,
    report_file: &Option<PathBuf>,
    checkpoint: &Option<PathBuf>,
    thresholds: ThresholdSource,
    sweep: bool,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    ensure_out(out)?;
    let ck = load_checkpoint(checkpoint_path(out, checkpoint))?;
    let arch: MultiStageArch = match (arch_file, report_file) {
        (Some(p), _) => serde_json::from_str(
            &std::fs::read_to_string(p)
                .map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())))?,
        )?,
        (None, Some(p)) => {
            let r: SearchReport = serde_json::from_str(
                &std::fs::read_to_string(p)
                    .map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())))?,
            )?;
            r.arch
        }
        (None, None) => return Err(Error::Config("need --arch or --report".into())),
    };
    arch.validate(&ck.supernet.config)?;
    let stages = ck.supernet.config.stages;
    let thresholds = match thresholds {
        ThresholdSource::Explicit(v) => {
            if v.len() != stages - 1 {
                return Err(Error::Config(format!("need {} thresholds", stages - 1)));
            }
            ThresholdVector::new(v)?
        }
        ThresholdSource::FromReport(p) => {
            let r: SearchReport = serde_json::from_str(
                &std::fs::read_to_string(&p)
                    .map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())))?,
            )?;
            r.thresholds
        }
        ThresholdSource::Sentinel => ThresholdVector::sentinel(stages),
    };

    let test = cfg.load_test_dataset()?;
    let net = ck.supernet.materialize(&arch)?;
    let costs = count_macs(&arch, &ck.supernet.config)?;

    // True dynamic inference, one sample at a time.
    let mut exit_counts = vec![0usize; stages];
    let mut exit_correct = vec![0usize; stages];
    for i in 0..test.len() {
        let (image, labels) = test.batch(&[i]);
        let image = resize_bilinear(&image, arch.resolution);
        let outcome = infer_dynamic(&net, Some(&ck.supernet.store), &image, &thresholds)?;
        exit_counts[outcome.exit_stage - 1] += 1;
        if outcome.predicted_class == labels[0] {
            exit_correct[outcome.exit_stage - 1] += 1;
        }
    }
    let n = test.len();
    let exit_accuracy: Vec<f64> = exit_counts
        .iter()
        .zip(&exit_correct)
        .map(|(&c, &k)| if c == 0 { 0.0 } else { k as f64 / c as f64 })
        .collect();
    let summary = ExitSummary {
        exit_counts: exit_counts.clone(),
        exit_accuracy: exit_accuracy.clone(),
        total: n,
    };
    let (acc_avg, cost_avg) = average_metrics(&summary, &costs)?;

    let report = EvalReport {
        arch: arch.clone(),
        thresholds,
        acc_avg,
        cost_avg_macs: cost_avg,
        cumulative_macs: costs.cumulative.clone(),
        exit_fractions: exit_counts.iter().map(|&c| c as f64 / n as f64).collect(),
        exit_accuracy,
        exit_counts,
        samples: n,
    };
    std::fs::write(out.join("eval_report.json"), serde_json::to_string_pretty(&report)?)?;
    let mut written: Vec<&str> = vec!["eval_report.json"];

    if sweep {
        // Shared-threshold sweep over the grid: one (cost, accuracy) point
        // per threshold value, from full-stage records simulated offline.
        let idx: Vec<usize> = (0..test.len()).collect();
        let archs = vec![("sweep".to_string(), arch.clone())];
        let outcome =
            build_eval_db(&ck.supernet, &archs, &test, &idx, cfg.db.batch_size, None)?;
        let records = outcome.db.records.into_values().next().unwrap();
        let mut csv = String::from("threshold,cost_avg,acc_avg\n");
        for &t in &cfg.grid() {
            let tv = ThresholdVector::uniform(stages, t);
            let s = simulate_exits(&records, &tv)?;
            let (acc, cost) = average_metrics(&s, &costs)?;
            csv.push_str(&format!("{t},{cost},{acc}\n"));
        }
        std::fs::write(out.join("tradeoff.csv"), csv)?;
        written.push("tradeoff.csv");
    }
    Manifest::record(out, &written)?;
    eprintln!(
        "evaluated {} samples: average accuracy {:.4}, average MACs {:.0}",
        n, report.acc_avg, report.cost_avg_macs
    );
    Ok(())
}

pub fn cmd_bench_latency(
    config_path: &Path,
    out: &Path,
    device: &str,
    repeats: usize,
    warmups: usize,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    ensure_out(out)?;
    let signatures = enumerate_signatures(&cfg.search_space)?;
    eprintln!("benchmarking {} signatures on {device}", signatures.len());
    let mut runner = TensorOpRunner;
    let (table, failures) = bench_latency(&signatures, &mut runner, device, repeats, warmups);
    for (sig, reason) in &failures {
        eprintln!("warning: {sig}: {reason}");
    }
    let name = format!("latency_{device}.json");
    std::fs::write(out.join(&name), table.to_json()?)?;
    Manifest::record(out, &[name.as_str()])?;
    eprintln!("{} entries written", table.len());
    Ok(())
}

pub fn cmd_export_arch(report: &Path, out_file: &Path) -> Result<()> {
    let r: SearchReport = serde_json::from_str(
        &std::fs::read_to_string(report)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", report.display())))?,
    )?;
    std::fs::write(out_file, serde_json::to_string_pretty(&r.arch)?)?;
    eprintln!("architecture written to {}", out_file.display());
    Ok(())
}

