//! Confidence-and-correctness database: per-(architecture, sample, stage)
//! records collected with no early exit, offline exit simulation, the
//! accuracy/cost tradeoff metric R, and threshold grid search.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{resize_bilinear, Dataset};
use crate::dyninfer::{
    count_macs, exit_stage_for, profile_latency, CostKind, CostProfile, LatencyTable,
    ThresholdVector,
};
use crate::error::{Error, Result};
use crate::ms_ops::ExecCtx;
use crate::supernet::{MultiStageArch, Supernet};
use crate::tensor::Tensor;

/// One (architecture, sample) row: per-stage confidence and correctness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub arch_id: String,
    pub sample_id: u64,
    pub conf: Vec<f64>,
    pub correct: Vec<bool>,
}

/// Target cost and the exponent governing the accuracy/cost tradeoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub omega: f64,
    pub cost_target: f64,
    pub cost_kind: CostKind,
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0) {
            return Err(Error::Config("omega must be >= 0".into()));
        }
        if !(self.cost_target > 0.0) {
            return Err(Error::Config("cost target must be positive".into()));
        }
        Ok(())
    }
}

/// Exit counts and per-stage exiter accuracy over one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitSummary {
    pub exit_counts: Vec<usize>,
    /// Accuracy among the samples that exited at each stage (0 when none did).
    pub exit_accuracy: Vec<f64>,
    pub total: usize,
}

/// Apply the exit rule offline to every record of one architecture.
pub fn simulate_exits(records: &[EvalRecord], thresholds: &ThresholdVector) -> Result<ExitSummary> {
    if records.is_empty() {
        return Err(Error::Data("no records to simulate".into()));
    }
    let stages = records[0].conf.len();
    if thresholds.0.len() + 1 != stages {
        return Err(Error::Config(format!("threshold vector must have {} entries", stages - 1)));
    }
    let arch_id = &records[0].arch_id;
    let mut counts = vec![0usize; stages];
    let mut correct = vec![0usize; stages];
    for r in records {
        if &r.arch_id != arch_id {
            return Err(Error::Data("records from multiple architectures".into()));
        }
        let e = exit_stage_for(&r.conf, thresholds);
        counts[e - 1] += 1;
        if r.correct[e - 1] {
            correct[e - 1] += 1;
        }
    }
    let acc = counts
        .iter()
        .zip(&correct)
        .map(|(&n, &c)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect();
    Ok(ExitSummary { exit_counts: counts, exit_accuracy: acc, total: records.len() })
}

/// Exit-count-weighted average accuracy (fraction) and average cost.
pub fn average_metrics(summary: &ExitSummary, costs: &CostProfile) -> Result<(f64, f64)> {
    if summary.total == 0 {
        return Err(Error::Data("empty dataset".into()));
    }
    if costs.cumulative.len() != summary.exit_counts.len() {
        return Err(Error::Config("cost profile stage count mismatch".into()));
    }
    if summary.exit_counts.iter().sum::<usize>() != summary.total {
        return Err(Error::Data("exit counts do not sum to dataset size".into()));
    }
    let total = summary.total as f64;
    let mut acc = 0.0;
    let mut cost = 0.0;
    for s in 0..summary.exit_counts.len() {
        let n = summary.exit_counts[s] as f64;
        acc += summary.exit_accuracy[s] * n;
        cost += costs.cumulative[s] * n;
    }
    Ok((acc / total, cost / total))
}

/// `R = ACC_avg * min(cost_target / COST_avg, 1)^omega`.
pub fn metric_r(acc_avg: f64, cost_avg: f64, cfg: &MetricConfig) -> f64 {
    acc_avg * (cfg.cost_target / cost_avg).min(1.0).powf(cfg.omega)
}

/// Default threshold grid: 0.0, 0.05, ..., 1.0 plus the 1.1 sentinel, so
/// every fixed-exit policy is included in the search.
pub fn default_grid() -> Vec<f64> {
    let mut g: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
    g.push(crate::dyninfer::SENTINEL);
    g
}

#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub thresholds: ThresholdVector,
    pub r: f64,
    pub acc_avg: f64,
    pub cost_avg: f64,
    pub summary: ExitSummary,
}

/// Exhaustive search over all `grid^(S-1)` threshold vectors, maximizing R.
/// Ties break toward lower average cost, then lexicographically smaller
/// thresholds (the iteration order).
///
/// Records are pre-bucketed by their per-stage grid partition points, so the
/// combo loop touches buckets instead of records.
pub fn grid_search_thresholds(
    records: &[EvalRecord],
    costs: &CostProfile,
    cfg: &MetricConfig,
    grid: &[f64],
) -> Result<GridSearchResult> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Data("no records to search".into()));
    }
    if grid.is_empty() {
        return Err(Error::Config("empty threshold grid".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("grid must be strictly ascending".into()));
    }
    if grid[0] != 0.0 || *grid.last().unwrap() <= 1.0 {
        return Err(Error::Config(
            "grid must include 0 and a sentinel above 1 so fixed-exit policies are searchable"
                .into(),
        ));
    }
    if costs.kind != cfg.cost_kind {
        return Err(Error::Config("cost profile kind does not match metric config".into()));
    }
    let stages = records[0].conf.len();
    if costs.cumulative.len() != stages {
        return Err(Error::Config("cost profile stage count mismatch".into()));
    }

    if stages == 1 {
        let thresholds = ThresholdVector(Vec::new());
        let summary = simulate_exits(records, &thresholds)?;
        let (acc_avg, cost_avg) = average_metrics(&summary, costs)?;
        let r = metric_r(acc_avg, cost_avg, cfg);
        return Ok(GridSearchResult { thresholds, r, acc_avg, cost_avg, summary });
    }

    // Bucket records by per-stage partition points: stage s exits under
    // threshold index t iff t < k_s (strict confidence > threshold rule).
    struct Bucket {
        count: usize,
        correct: Vec<usize>,
    }
    let mut buckets: HashMap<Vec<u16>, Bucket> = HashMap::new();
    for r in records {
        if r.conf.len() != stages {
            return Err(Error::Data("inconsistent stage count in records".into()));
        }
        let key: Vec<u16> = (0..stages - 1)
            .map(|s| grid.partition_point(|&g| g < r.conf[s]) as u16)
            .collect();
        let b = buckets
            .entry(key)
            .or_insert_with(|| Bucket { count: 0, correct: vec![0; stages] });
        b.count += 1;
        for s in 0..stages {
            if r.correct[s] {
                b.correct[s] += 1;
            }
        }
    }
    let buckets: Vec<(Vec<u16>, Bucket)> = buckets.into_iter().collect();

    let g = grid.len();
    let combos = g.pow((stages - 1) as u32);
    let total = records.len() as f64;
    let mut best: Option<(f64, f64, Vec<usize>)> = None; // (r, cost_avg, combo)
    let mut idx = vec![0usize; stages - 1];
    for _ in 0..combos {
        let mut acc_sum = 0.0;
        let mut cost_sum = 0.0;
        for (key, b) in &buckets {
            let mut exit = stages;
            for s in 0..stages - 1 {
                if (idx[s] as u16) < key[s] {
                    exit = s + 1;
                    break;
                }
            }
            acc_sum += b.correct[exit - 1] as f64;
            cost_sum += costs.cumulative[exit - 1] * b.count as f64;
        }
        let acc_avg = acc_sum / total;
        let cost_avg = cost_sum / total;
        let r = metric_r(acc_avg, cost_avg, cfg);
        let better = match &best {
            None => true,
            Some((br, bc, _)) => r > *br || (r == *br && cost_avg < *bc),
        };
        if better {
            best = Some((r, cost_avg, idx.clone()));
        }
        // lexicographic odometer, last digit fastest
        for d in (0..stages - 1).rev() {
            idx[d] += 1;
            if idx[d] < g {
                break;
            }
            idx[d] = 0;
        }
    }

    let (_, _, combo) = best.unwrap();
    let thresholds = ThresholdVector(combo.iter().map(|&t| grid[t]).collect());
    let summary = simulate_exits(records, &thresholds)?;
    let (acc_avg, cost_avg) = average_metrics(&summary, costs)?;
    let r = metric_r(acc_avg, cost_avg, cfg);
    Ok(GridSearchResult { thresholds, r, acc_avg, cost_avg, summary })
}

// ---------------------------------------------------------------------------
// Database building and storage
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub arch_id: String,
    pub arch: MultiStageArch,
    pub cost_macs: CostProfile,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_latency: Option<CostProfile>,
}

#[derive(Debug, Clone)]
pub struct EvalDatabase {
    pub stages: usize,
    pub num_classes: usize,
    pub records: BTreeMap<String, Vec<EvalRecord>>,
    pub registry: BTreeMap<String, RegistryEntry>,
}

#[derive(Debug)]
pub struct BuildOutcome {
    pub db: EvalDatabase,
    /// Architectures skipped because inference produced non-finite values.
    pub skipped: Vec<(String, String)>,
}

/// Materialize every architecture and run all stages on every evaluation
/// sample with no early exit, recording per-stage confidence and correctness.
pub fn build_eval_db(
    supernet: &Supernet,
    archs: &[(String, MultiStageArch)],
    data: &Dataset,
    indices: &[usize],
    batch_size: usize,
    latency_table: Option<&LatencyTable>,
) -> Result<BuildOutcome> {
    if indices.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    {
        let mut seen = std::collections::HashSet::new();
        for (id, _) in archs {
            if !seen.insert(id) {
                return Err(Error::Data(format!("duplicate arch_id {id}")));
            }
        }
    }
    let stages = supernet.config.stages;
    let classes = supernet.config.num_classes;

    // Pre-resize the evaluation batches once per distinct resolution.
    let mut resolutions: Vec<usize> = archs.iter().map(|(_, a)| a.resolution).collect();
    resolutions.sort_unstable();
    resolutions.dedup();
    let mut batches_by_res: BTreeMap<usize, Vec<(Tensor, Vec<usize>)>> = BTreeMap::new();
    for &res in &resolutions {
        let mut batches = Vec::new();
        for chunk in indices.chunks(batch_size.max(1)) {
            let (images, labels) = data.batch(chunk);
            batches.push((resize_bilinear(&images, res), labels));
        }
        batches_by_res.insert(res, batches);
    }

    let results: Vec<(String, std::result::Result<Vec<EvalRecord>, String>)> = archs
        .par_iter()
        .map(|(id, arch)| {
            let run = || -> std::result::Result<Vec<EvalRecord>, String> {
                let net = supernet.materialize(arch).map_err(|e| e.to_string())?;
                let batches = &batches_by_res[&arch.resolution];
                let mut records = Vec::new();
                let mut sample_id = 0u64;
                for (images, labels) in batches {
                    let mut ctx = ExecCtx::new(false, Some(&supernet.store));
                    let mut stage_preds = Vec::with_capacity(stages);
                    for s in 1..=stages {
                        let out =
                            net.forward_stage(&mut ctx, s, images).map_err(|e| e.to_string())?;
                        stage_preds.push(out.predictions);
                    }
                    for (i, &label) in labels.iter().enumerate() {
                        let mut conf = Vec::with_capacity(stages);
                        let mut correct = Vec::with_capacity(stages);
                        for sp in &stage_preds {
                            let p = &sp[i];
                            if !p.confidence.is_finite() {
                                return Err(format!("non-finite confidence at sample {sample_id}"));
                            }
                            conf.push(p.confidence);
                            correct.push(p.predicted_class == label);
                        }
                        records.push(EvalRecord {
                            arch_id: id.clone(),
                            sample_id,
                            conf,
                            correct,
                        });
                        sample_id += 1;
                    }
                }
                Ok(records)
            };
            (id.clone(), run())
        })
        .collect();

    let mut db = EvalDatabase {
        stages,
        num_classes: classes,
        records: BTreeMap::new(),
        registry: BTreeMap::new(),
    };
    let mut skipped = Vec::new();
    for ((id, arch), (rid, result)) in archs.iter().zip(results) {
        debug_assert_eq!(id, &rid);
        match result {
            Ok(records) => {
                let cost_macs = count_macs(arch, &supernet.config)?;
                let cost_latency = match latency_table {
                    Some(t) => Some(profile_latency(arch, &supernet.config, t)?),
                    None => None,
                };
                db.records.insert(id.clone(), records);
                db.registry.insert(
                    id.clone(),
                    RegistryEntry { arch_id: id.clone(), arch: arch.clone(), cost_macs, cost_latency },
                );
            }
            Err(reason) => skipped.push((id.clone(), reason)),
        }
    }
    Ok(BuildOutcome { db, skipped })
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordsHeader {
    format: String,
    version: u32,
    arch_id: String,
    stages: usize,
    num_classes: usize,
    samples: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct RegistryHeader {
    format: String,
    version: u32,
    stages: usize,
    num_classes: usize,
    archs: usize,
}

impl EvalDatabase {
    pub fn total_records(&self) -> usize {
        self.records.values().map(|v| v.len()).sum()
    }

    /// Write `registry.jsonl` plus one `records/<arch_id>.jsonl` per
    /// architecture, each with a version header line.
    pub fn save_dir<P: AsRef<Path>>(&self, dir: P) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("records"))?;
        let mut reg = BufWriter::new(std::fs::File::create(dir.join("registry.jsonl"))?);
        let header = RegistryHeader {
            format: "msnas-evaldb-registry".into(),
            version: 1,
            stages: self.stages,
            num_classes: self.num_classes,
            archs: self.registry.len(),
        };
        writeln!(reg, "{}", serde_json::to_string(&header)?)?;
        for entry in self.registry.values() {
            writeln!(reg, "{}", serde_json::to_string(entry)?)?;
        }
        reg.flush()?;

        for (id, records) in &self.records {
            let path = dir.join("records").join(format!("{id}.jsonl"));
            let mut w = BufWriter::new(std::fs::File::create(path)?);
            let header = RecordsHeader {
                format: "msnas-evaldb-records".into(),
                version: 1,
                arch_id: id.clone(),
                stages: self.stages,
                num_classes: self.num_classes,
                samples: records.len(),
            };
            writeln!(w, "{}", serde_json::to_string(&header)?)?;
            for r in records {
                writeln!(w, "{}", serde_json::to_string(r)?)?;
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn load_dir<P: AsRef<Path>>(dir: P) -> Result<Self> {
        let dir = dir.as_ref();
        let reg_path = dir.join("registry.jsonl");
        let file = std::fs::File::open(&reg_path)
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", reg_path.display())))?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header: RegistryHeader = serde_json::from_str(
            &lines.next().ok_or_else(|| Error::Data("empty registry".into()))??,
        )?;
        if header.format != "msnas-evaldb-registry" || header.version != 1 {
            return Err(Error::Data("unrecognized registry header".into()));
        }
        let mut db = EvalDatabase {
            stages: header.stages,
            num_classes: header.num_classes,
            records: BTreeMap::new(),
            registry: BTreeMap::new(),
        };
        for line in lines {
            let entry: RegistryEntry = serde_json::from_str(&line?)?;
            db.registry.insert(entry.arch_id.clone(), entry);
        }

        let min_conf = 1.0 / db.num_classes as f64 - 1e-9;
        for id in db.registry.keys().cloned().collect::<Vec<_>>() {
            let path = dir.join("records").join(format!("{id}.jsonl"));
            let file = std::fs::File::open(&path)
                .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
            let mut lines = std::io::BufReader::new(file).lines();
            let header: RecordsHeader = serde_json::from_str(
                &lines.next().ok_or_else(|| Error::Data("empty records file".into()))??,
            )?;
            if header.format != "msnas-evaldb-records" || header.arch_id != id {
                return Err(Error::Data(format!("bad records header for {id}")));
            }
            let mut records = Vec::with_capacity(header.samples);
            for line in lines {
                let r: EvalRecord = serde_json::from_str(&line?)?;
                if r.conf.len() != db.stages || r.correct.len() != db.stages {
                    return Err(Error::Data(format!("record stage mismatch in {id}")));
                }
                if r.conf.iter().any(|&c| !(min_conf..=1.0 + 1e-9).contains(&c)) {
                    return Err(Error::Data(format!("confidence out of range in {id}")));
                }
                records.push(r);
            }
            if records.len() != header.samples {
                return Err(Error::Data(format!("record count mismatch in {id}")));
            }
            db.records.insert(id, records);
        }
        Ok(db)
    }
}
