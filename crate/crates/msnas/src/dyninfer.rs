//! Dynamic (early-exit) inference and exact cost accounting: an execution
//! plan derived from the architecture structure, closed-form MAC counts per
//! stage, and latency profiles summed from a measured lookup table.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ms_ops::{ExecCtx, MsNetwork, StagePrediction};
use crate::nn::ops::pool_out_size;
use crate::nn::ParamStore;
use crate::supernet::{
    arch_structure, BlockStructure, MultiStageArch, NetworkStructure, SearchSpaceConfig,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Macs,
    Latency,
}

/// Cumulative cost of an inference that exits at each stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    pub kind: CostKind,
    pub cumulative: Vec<f64>,
}

impl CostProfile {
    pub fn new(kind: CostKind, cumulative: Vec<f64>) -> Result<Self> {
        if cumulative.is_empty() {
            return Err(Error::Config("cost profile needs at least one stage".into()));
        }
        if cumulative[0] <= 0.0 || cumulative.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "cumulative cost must be positive and strictly increasing: {cumulative:?}"
            )));
        }
        Ok(CostProfile { kind, cumulative })
    }

    pub fn stages(&self) -> usize {
        self.cumulative.len()
    }
}

/// Exit thresholds for stages 1..S-1; the final stage exits unconditionally.
/// Values above 1 act as "never exit here" sentinels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdVector(pub Vec<f64>);

impl ThresholdVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("thresholds must be finite and >= 0: {values:?}")));
        }
        Ok(ThresholdVector(values))
    }

    pub fn sentinel(stages: usize) -> Self {
        ThresholdVector(vec![SENTINEL; stages.saturating_sub(1)])
    }

    pub fn uniform(stages: usize, t: f64) -> Self {
        ThresholdVector(vec![t; stages.saturating_sub(1)])
    }
}

/// Conventional "never exit" threshold (confidence never exceeds 1).
pub const SENTINEL: f64 = 1.1;

/// First stage `s < S` whose confidence strictly exceeds its threshold,
/// else the final stage.
pub fn exit_stage_for(confidences: &[f64], thresholds: &ThresholdVector) -> usize {
    let stages = confidences.len();
    for s in 1..stages {
        if confidences[s - 1] > thresholds.0[s - 1] {
            return s;
        }
    }
    stages
}

/// Outcome of one dynamic inference.
#[derive(Debug, Clone)]
pub struct DynamicInference {
    pub predicted_class: usize,
    pub exit_stage: usize,
    /// Predictions of every stage that was computed (1..=exit_stage).
    pub stage_predictions: Vec<StagePrediction>,
}

/// Run stages in order on a single sample (`[1, C, R, R]`), exiting at the
/// first stage whose confidence clears its threshold.
pub fn infer_dynamic(
    net: &MsNetwork,
    store: Option<&ParamStore>,
    image: &Tensor,
    thresholds: &ThresholdVector,
) -> Result<DynamicInference> {
    if thresholds.0.len() + 1 != net.stages {
        return Err(Error::Config(format!(
            "threshold vector must have {} entries",
            net.stages - 1
        )));
    }
    if image.shape()[0] != 1 {
        return Err(Error::Shape("dynamic inference takes one sample at a time".into()));
    }
    let mut ctx = ExecCtx::new(false, store);
    let mut preds = Vec::new();
    for s in 1..=net.stages {
        let out = net.forward_stage(&mut ctx, s, image)?;
        let p = out.predictions.into_iter().next().expect("batch of one");
        let conf = p.confidence;
        preds.push(p);
        if s < net.stages && conf > thresholds.0[s - 1] {
            break;
        }
    }
    let last = preds.last().unwrap();
    Ok(DynamicInference {
        predicted_class: last.predicted_class,
        exit_stage: preds.len(),
        stage_predictions: preds,
    })
}

// ---------------------------------------------------------------------------
// Execution plan and MAC accounting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanOpKind {
    Conv,
    DwConv,
    Linear,
    Norm,
    Relu,
    Add,
    AvgPool,
    GlobalAvgPool,
}

/// One operation a deployed stage executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedOp {
    pub kind: PlanOpKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_size: usize,
    pub out_size: usize,
}

impl PlannedOp {
    /// Multiply-accumulates under the standard convention: convolutions count
    /// `out*in*k^2` (or `c*k^2` depthwise) per output position, linear layers
    /// `in*out`; normalization, activations, pooling and additions count 0.
    pub fn macs(&self) -> u64 {
        let pos = (self.out_size * self.out_size) as u64;
        match self.kind {
            PlanOpKind::Conv => {
                (self.out_ch * self.in_ch * self.kernel * self.kernel) as u64 * pos
            }
            PlanOpKind::DwConv => (self.in_ch * self.kernel * self.kernel) as u64 * pos,
            PlanOpKind::Linear => (self.in_ch * self.out_ch) as u64,
            _ => 0,
        }
    }

    pub fn signature(&self) -> OpSignature {
        OpSignature {
            kind: self.kind,
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            kernel: self.kernel,
            stride: self.stride,
            in_size: self.in_size,
        }
    }
}

/// Hardware-latency lookup key: operation kind plus input conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OpSignature {
    pub kind: PlanOpKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_size: usize,
}

impl std::fmt::Display for OpSignature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:?} in={} out={} k={} stride={} size={}",
            self.kind, self.in_ch, self.out_ch, self.kernel, self.stride, self.in_size
        )
    }
}

/// Ops executed by each stage, in execution order.
#[derive(Debug, Clone)]
pub struct ExecutionPlan {
    pub stages: Vec<Vec<PlannedOp>>,
}

impl ExecutionPlan {
    pub fn stage_macs(&self) -> Vec<u64> {
        self.stages
            .iter()
            .map(|ops| ops.iter().map(|o| o.macs()).sum())
            .collect()
    }
}

fn stem_ops(ns: &NetworkStructure) -> Vec<PlannedOp> {
    let mut ops = Vec::new();
    ops.push(PlannedOp {
        kind: PlanOpKind::Conv,
        in_ch: ns.stem_in,
        out_ch: ns.stem_out,
        kernel: ns.stem_kernel,
        stride: ns.stem_stride,
        in_size: ns.resolution,
        out_size: ns.stem_out_size,
    });
    ops.push(norm_op(ns.stem_out, ns.stem_out_size));
    ops.push(relu_op(ns.stem_out, ns.stem_out_size));
    ops
}

fn norm_op(ch: usize, size: usize) -> PlannedOp {
    PlannedOp {
        kind: PlanOpKind::Norm,
        in_ch: ch,
        out_ch: ch,
        kernel: 0,
        stride: 1,
        in_size: size,
        out_size: size,
    }
}

fn relu_op(ch: usize, size: usize) -> PlannedOp {
    PlannedOp { kind: PlanOpKind::Relu, ..norm_op(ch, size) }
}

fn add_op(ch: usize, size: usize) -> PlannedOp {
    PlannedOp { kind: PlanOpKind::Add, ..norm_op(ch, size) }
}

/// Ops stage `stage` executes in one block (empty when it just passes
/// through a stride-1 block).
fn block_stage_ops(bs: &BlockStructure, stage: usize) -> Vec<PlannedOp> {
    let mut ops = Vec::new();
    let Some(j) = bs.active.iter().position(|a| a.stage == stage) else {
        if bs.stride > 1 {
            ops.push(PlannedOp {
                kind: PlanOpKind::AvgPool,
                in_ch: bs.ext_in,
                out_ch: bs.ext_in,
                kernel: bs.stride,
                stride: bs.stride,
                in_size: bs.in_size,
                out_size: pool_out_size(bs.in_size, bs.stride),
            });
        }
        return ops;
    };

    // Depthwise convolution runs for every active stage (later stages reuse
    // its features through the input-reuse expansion).
    ops.push(PlannedOp {
        kind: PlanOpKind::DwConv,
        in_ch: bs.ext_in,
        out_ch: bs.ext_in,
        kernel: bs.kernel,
        stride: bs.stride,
        in_size: bs.in_size,
        out_size: bs.out_size,
    });
    ops.push(norm_op(bs.ext_in, bs.out_size));
    ops.push(relu_op(bs.ext_in, bs.out_size));

    let width = bs.active[j].width();
    if width > 0 {
        // Expansion consumes the concatenation of every active source's
        // depthwise output (j + 1 sources, each ext_in channels wide).
        ops.push(PlannedOp {
            kind: PlanOpKind::Conv,
            in_ch: (j + 1) * bs.ext_in,
            out_ch: width,
            kernel: 1,
            stride: 1,
            in_size: bs.out_size,
            out_size: bs.out_size,
        });
        ops.push(norm_op(width, bs.out_size));
        ops.push(relu_op(width, bs.out_size));
        ops.push(PlannedOp {
            kind: PlanOpKind::Conv,
            in_ch: width,
            out_ch: bs.ext_out,
            kernel: 1,
            stride: 1,
            in_size: bs.out_size,
            out_size: bs.out_size,
        });
        if j > 0 {
            ops.push(add_op(bs.ext_out, bs.out_size)); // output-reuse chain
        }
    }
    ops.push(norm_op(bs.ext_out, bs.out_size));
    if bs.residual {
        ops.push(add_op(bs.ext_out, bs.out_size));
    }
    ops
}

fn head_ops(ns: &NetworkStructure, final_size: usize) -> Vec<PlannedOp> {
    vec![
        PlannedOp {
            kind: PlanOpKind::GlobalAvgPool,
            in_ch: ns.head_features,
            out_ch: ns.head_features,
            kernel: 0,
            stride: 1,
            in_size: final_size,
            out_size: 1,
        },
        PlannedOp {
            kind: PlanOpKind::Linear,
            in_ch: ns.head_features,
            out_ch: ns.num_classes,
            kernel: 0,
            stride: 1,
            in_size: 1,
            out_size: 1,
        },
    ]
}

/// Expand an architecture into the per-stage op sequence it executes.
pub fn plan_execution(arch: &MultiStageArch, config: &SearchSpaceConfig) -> Result<ExecutionPlan> {
    let ns = arch_structure(arch, config)?;
    let final_size = ns.blocks.last().map_or(ns.stem_out_size, |b| b.out_size);
    let mut stages = Vec::new();
    for stage in 1..=ns.stages {
        let mut ops = stem_ops(&ns);
        for bs in &ns.blocks {
            ops.extend(block_stage_ops(bs, stage));
        }
        ops.extend(head_ops(&ns, final_size));
        stages.push(ops);
    }
    Ok(ExecutionPlan { stages })
}

/// Exact cumulative MAC counts per exit stage.
pub fn count_macs(arch: &MultiStageArch, config: &SearchSpaceConfig) -> Result<CostProfile> {
    let plan = plan_execution(arch, config)?;
    let per_stage = plan.stage_macs();
    let mut cumulative = Vec::with_capacity(per_stage.len());
    let mut acc = 0u64;
    for m in per_stage {
        acc += m;
        cumulative.push(acc as f64);
    }
    CostProfile::new(CostKind::Macs, cumulative)
}

// ---------------------------------------------------------------------------
// Latency tables
// ---------------------------------------------------------------------------

/// Measured per-operation latency on one device. Lookups are exact-match
/// only; unknown signatures are errors, never interpolated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyTable {
    pub device: String,
    pub repeats: usize,
    pub warmups: usize,
    entries: Vec<LatencyEntry>,
    #[serde(skip)]
    index: std::collections::BTreeMap<OpSignature, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LatencyEntry {
    #[serde(flatten)]
    signature: OpSignature,
    ms: f64,
}

impl LatencyTable {
    pub fn new(device: &str, repeats: usize, warmups: usize) -> Self {
        LatencyTable {
            device: device.to_string(),
            repeats,
            warmups,
            entries: Vec::new(),
            index: Default::default(),
        }
    }

    pub fn insert(&mut self, signature: OpSignature, ms: f64) -> Result<()> {
        if !(ms > 0.0) {
            return Err(Error::Config(format!("latency must be positive, got {ms}")));
        }
        if self.index.insert(signature, ms).is_none() {
            self.entries.push(LatencyEntry { signature, ms });
        } else {
            for e in &mut self.entries {
                if e.signature == signature {
                    e.ms = ms;
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, signature: &OpSignature) -> Result<f64> {
        self.index
            .get(signature)
            .copied()
            .ok_or_else(|| Error::MissingSignature(signature.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn signatures(&self) -> impl Iterator<Item = &OpSignature> {
        self.index.keys()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let mut t: LatencyTable = serde_json::from_str(json)?;
        t.index = t.entries.iter().map(|e| (e.signature, e.ms)).collect();
        for e in &t.entries {
            if !(e.ms > 0.0) {
                return Err(Error::Data(format!("non-positive latency for {}", e.signature)));
            }
        }
        Ok(t)
    }
}

/// Cumulative latency per exit stage: the exact sum of table lookups over
/// every op executed by stages 1..s.
pub fn profile_latency(
    arch: &MultiStageArch,
    config: &SearchSpaceConfig,
    table: &LatencyTable,
) -> Result<CostProfile> {
    let plan = plan_execution(arch, config)?;
    let mut cumulative = Vec::new();
    let mut acc = 0.0;
    for ops in &plan.stages {
        for op in ops {
            acc += table.get(&op.signature())?;
        }
        cumulative.push(acc);
    }
    CostProfile::new(CostKind::Latency, cumulative)
}

/// Every op signature any architecture of the search space can execute.
pub fn enumerate_signatures(config: &SearchSpaceConfig) -> Result<BTreeSet<OpSignature>> {
    config.validate()?;
    let mut out = BTreeSet::new();
    // Depth choices only matter through per-block active sets, and ratio
    // choices through rank ranges, so enumerate per-group tuples directly.
    let depth_tuples = nondecreasing_tuples(&config.depth_pool, config.stages);
    let ratio_tuples = nondecreasing_tuples(&config.cum_width_ratio_pool, config.stages);

    for &res in &config.resolution_pool {
        // A probe architecture carrying this resolution; per-block fields are
        // overwritten below.
        let mut arch = MultiStageArch::maximal(config);
        arch.resolution = res;
        let base = arch_structure(&arch, config)?;
        for op in stem_ops(&base) {
            out.insert(op.signature());
        }
        let final_size = base.blocks.last().map_or(base.stem_out_size, |b| b.out_size);
        for op in head_ops(&base, final_size) {
            out.insert(op.signature());
        }
        for (flat, base_bs) in base.blocks.iter().enumerate() {
            let g = base_bs.group;
            for depths in &depth_tuples {
                for ratios in &ratio_tuples {
                    for &kernel in &config.kernel_pool {
                        let mut arch2 = arch.clone();
                        arch2.depths[g] = depths.clone();
                        arch2.kernels[g][base_bs.block] = kernel;
                        arch2.cum_ratios[g][base_bs.block] = ratios.clone();
                        let ns = arch_structure(&arch2, config)?;
                        let bs = &ns.blocks[flat];
                        for stage in 1..=config.stages {
                            for op in block_stage_ops(bs, stage) {
                                out.insert(op.signature());
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn nondecreasing_tuples<T: Clone>(pool: &[T], slots: usize) -> Vec<Vec<T>> {
    fn rec<T: Clone>(
        pool: &[T],
        slots: usize,
        start: usize,
        cur: &mut Vec<T>,
        out: &mut Vec<Vec<T>>,
    ) {
        if cur.len() == slots {
            out.push(cur.clone());
            return;
        }
        for i in start..pool.len() {
            cur.push(pool[i].clone());
            rec(pool, slots, i, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(pool, slots, 0, &mut Vec::new(), &mut out);
    out
}

// ---------------------------------------------------------------------------
// Benchmarking
// ---------------------------------------------------------------------------

/// Executes a single op signature and reports wall time in milliseconds.
pub trait DeviceRunner {
    fn run(&mut self, signature: &OpSignature) -> std::result::Result<f64, String>;
}

/// Runs each op on this machine's CPU with synthetic data.
pub struct TensorOpRunner;

impl DeviceRunner for TensorOpRunner {
    fn run(&mut self, sig: &OpSignature) -> std::result::Result<f64, String> {
        use crate::nn::ops;
        let hw = sig.in_size;
        let x = Tensor::full(&[1, sig.in_ch, hw, hw], 0.5);
        let start = Instant::now();
        match sig.kind {
            PlanOpKind::Conv => {
                let w = Tensor::full(&[sig.out_ch, sig.in_ch, sig.kernel, sig.kernel], 0.01);
                ops::conv2d_fwd(&x, &w, sig.stride, sig.kernel / 2);
            }
            PlanOpKind::DwConv => {
                let w = Tensor::full(&[sig.in_ch, sig.kernel, sig.kernel], 0.01);
                ops::dwconv2d_fwd(&x, &w, sig.stride, sig.kernel / 2);
            }
            PlanOpKind::Linear => {
                let xf = Tensor::full(&[1, sig.in_ch], 0.5);
                let w = Tensor::full(&[sig.out_ch, sig.in_ch], 0.01);
                let b = Tensor::zeros(&[sig.out_ch]);
                ops::linear_fwd(&xf, &w, &b);
            }
            PlanOpKind::Norm => {
                let g = Tensor::full(&[sig.in_ch], 1.0);
                let b = Tensor::zeros(&[sig.in_ch]);
                ops::slice_norm_fwd(&x, &g, &b, 1e-5);
            }
            PlanOpKind::Relu => {
                ops::relu_fwd(&x);
            }
            PlanOpKind::Add => {
                ops::add_fwd(&x, &x);
            }
            PlanOpKind::AvgPool => {
                ops::avg_pool_fwd(&x, sig.stride);
            }
            PlanOpKind::GlobalAvgPool => {
                ops::global_avg_pool_fwd(&x);
            }
        }
        Ok(start.elapsed().as_secs_f64() * 1e3)
    }
}

/// Measure every signature: `warmups` runs discarded, mean of `repeats`
/// recorded. Failed signatures are omitted and reported alongside the table.
pub fn bench_latency(
    signatures: &BTreeSet<OpSignature>,
    runner: &mut dyn DeviceRunner,
    device: &str,
    repeats: usize,
    warmups: usize,
) -> (LatencyTable, Vec<(OpSignature, String)>) {
    let mut table = LatencyTable::new(device, repeats, warmups);
    let mut failures = Vec::new();
    'sig: for sig in signatures {
        for _ in 0..warmups {
            if let Err(e) = runner.run(sig) {
                failures.push((*sig, e));
                continue 'sig;
            }
        }
        let mut total = 0.0;
        for _ in 0..repeats {
            match runner.run(sig) {
                Ok(ms) => total += ms,
                Err(e) => {
                    failures.push((*sig, e));
                    continue 'sig;
                }
            }
        }
        let mean = (total / repeats as f64).max(1e-9);
        table.insert(*sig, mean).expect("positive mean");
    }
    (table, failures)
}
