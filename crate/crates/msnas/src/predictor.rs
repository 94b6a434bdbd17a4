//! Architecture-to-metric predictor: one-hot encoding of architecture
//! choices and a small multi-layer perceptron regressor trained to predict
//! the grid-searched metric R for a fixed metric configuration.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaldb::{grid_search_thresholds, EvalDatabase, MetricConfig};
use crate::dyninfer::CostKind;
use crate::nn::ops::{linear_fwd, relu_fwd};
use crate::nn::{randn, ParamKind, ParamStore, Tape};
use crate::supernet::{MultiStageArch, Ratio, SearchSpaceConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Positions of every one-hot block in the feature vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingLayout {
    pub blocks: Vec<LayoutBlock>,
    pub total: usize,
}

pub fn encoding_layout(config: &SearchSpaceConfig) -> EncodingLayout {
    let mut blocks = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, len: usize, offset: &mut usize| {
        blocks.push(LayoutBlock { name, offset: *offset, len });
        *offset += len;
    };
    push("resolution".into(), config.resolution_pool.len(), &mut offset);
    for g in 0..config.groups.len() {
        for s in 0..config.stages {
            push(format!("depth.g{g}.s{s}"), config.depth_pool.len(), &mut offset);
        }
    }
    for (g, group) in config.groups.iter().enumerate() {
        for b in 0..group.blocks {
            push(format!("kernel.g{g}.b{b}"), config.kernel_pool.len(), &mut offset);
        }
    }
    for (g, group) in config.groups.iter().enumerate() {
        for b in 0..group.blocks {
            for s in 0..config.stages {
                push(
                    format!("ratio.g{g}.b{b}.s{s}"),
                    config.cum_width_ratio_pool.len(),
                    &mut offset,
                );
            }
        }
    }
    EncodingLayout { blocks, total: offset }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchEncoding {
    pub bits: Vec<f64>,
}

fn hot<T: PartialEq + std::fmt::Debug>(pool: &[T], value: &T) -> Result<usize> {
    pool.iter()
        .position(|v| v == value)
        .ok_or_else(|| Error::Arch(format!("value {value:?} not in pool")))
}

/// Concatenated one-hot blocks for resolution, depths, kernels, and
/// cumulative width ratios; injective over the search space and decodable.
pub fn encode_arch(arch: &MultiStageArch, config: &SearchSpaceConfig) -> Result<ArchEncoding> {
    arch.validate(config)?;
    let layout = encoding_layout(config);
    let mut bits = vec![0.0; layout.total];
    let mut cursor = 0;
    let set = |bits: &mut Vec<f64>, cursor: &mut usize, len: usize, pos: usize| {
        bits[*cursor + pos] = 1.0;
        *cursor += len;
    };
    set(&mut bits, &mut cursor, config.resolution_pool.len(), hot(&config.resolution_pool, &arch.resolution)?);
    for g in 0..config.groups.len() {
        for s in 0..config.stages {
            let pos = hot(&config.depth_pool, &arch.depths[g][s])?;
            set(&mut bits, &mut cursor, config.depth_pool.len(), pos);
        }
    }
    for (g, group) in config.groups.iter().enumerate() {
        for b in 0..group.blocks {
            let pos = hot(&config.kernel_pool, &arch.kernels[g][b])?;
            set(&mut bits, &mut cursor, config.kernel_pool.len(), pos);
        }
    }
    for (g, group) in config.groups.iter().enumerate() {
        for b in 0..group.blocks {
            for s in 0..config.stages {
                let pos = hot(&config.cum_width_ratio_pool, &arch.cum_ratios[g][b][s])?;
                set(&mut bits, &mut cursor, config.cum_width_ratio_pool.len(), pos);
            }
        }
    }
    debug_assert_eq!(cursor, layout.total);
    Ok(ArchEncoding { bits })
}

/// Invert `encode_arch`; the encoding must be exactly one-hot per block.
pub fn decode_arch(encoding: &ArchEncoding, config: &SearchSpaceConfig) -> Result<MultiStageArch> {
    let layout = encoding_layout(config);
    if encoding.bits.len() != layout.total {
        return Err(Error::Arch(format!(
            "encoding length {} does not match layout {}",
            encoding.bits.len(),
            layout.total
        )));
    }
    let mut cursor = 0usize;
    let mut take = |len: usize| -> Result<usize> {
        let slice = &encoding.bits[cursor..cursor + len];
        let ones: Vec<usize> = slice
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect();
        cursor += len;
        match ones.as_slice() {
            [i] => Ok(*i),
            _ => Err(Error::Arch("encoding block is not one-hot".into())),
        }
    };
    let resolution = config.resolution_pool[take(config.resolution_pool.len())?];
    let mut depths = Vec::new();
    for _ in 0..config.groups.len() {
        let mut row = Vec::new();
        for _ in 0..config.stages {
            row.push(config.depth_pool[take(config.depth_pool.len())?]);
        }
        depths.push(row);
    }
    let mut kernels = Vec::new();
    for group in &config.groups {
        let mut row = Vec::new();
        for _ in 0..group.blocks {
            row.push(config.kernel_pool[take(config.kernel_pool.len())?]);
        }
        kernels.push(row);
    }
    let mut cum_ratios: Vec<Vec<Vec<Ratio>>> = Vec::new();
    for group in &config.groups {
        let mut rows = Vec::new();
        for _ in 0..group.blocks {
            let mut row = Vec::new();
            for _ in 0..config.stages {
                row.push(config.cum_width_ratio_pool[take(config.cum_width_ratio_pool.len())?]);
            }
            rows.push(row);
        }
        cum_ratios.push(rows);
    }
    let arch = MultiStageArch { resolution, depths, kernels, cum_ratios };
    arch.validate(config)?;
    Ok(arch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            hidden_layers: 3,
            hidden_units: 400,
            epochs: 30,
            lr: 1e-4,
            weight_decay: 1e-5,
            batch_size: 4,
            val_fraction: 0.1,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.hidden_units == 0 || self.epochs == 0 {
            return Err(Error::Config("predictor dimensions must be positive".into()));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("bad predictor optimizer settings".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("validation fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// MLP regressor from architecture encodings to the metric R, bound to the
/// metric configuration it was trained for.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub store: ParamStore,
    pub dims: Vec<usize>,
    pub layout: EncodingLayout,
    pub config: PredictorConfig,
    pub metric: MetricConfig,
}

impl Predictor {
    fn init(
        input: usize,
        layout: EncodingLayout,
        config: &PredictorConfig,
        metric: MetricConfig,
        label_mean: f64,
        seed: u64,
    ) -> Self {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat(config.hidden_units).take(config.hidden_layers));
        dims.push(1);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..dims.len() - 1 {
            let fan_in = dims[l];
            let last = l == dims.len() - 2;
            // The output layer starts at zero so predictions begin at the
            // label mean and Adam fits residuals.
            let w = if last {
                Tensor::zeros(&[dims[l + 1], dims[l]])
            } else {
                randn(&mut rng, &[dims[l + 1], dims[l]], (2.0 / fan_in as f64).sqrt())
            };
            store.add(&format!("mlp.l{l}.w"), w, ParamKind::Weight);
            let bias = if last {
                Tensor::full(&[dims[l + 1]], label_mean)
            } else {
                Tensor::zeros(&[dims[l + 1]])
            };
            store.add(&format!("mlp.l{l}.b"), bias, ParamKind::Bias);
        }
        Predictor { store, dims, layout, config: config.clone(), metric }
    }

    /// Refuse use under a different metric configuration than trained for.
    pub fn check_metric(&self, metric: &MetricConfig) -> Result<()> {
        if self.metric != *metric {
            return Err(Error::Config(format!(
                "predictor was trained for {:?}, requested {:?}",
                self.metric, metric
            )));
        }
        Ok(())
    }

    /// Single forward pass; pure function of (model, encoding).
    pub fn predict(&self, encoding: &ArchEncoding) -> Result<f64> {
        if encoding.bits.len() != self.dims[0] {
            return Err(Error::Shape(format!(
                "encoding length {} does not match model input {}",
                encoding.bits.len(),
                self.dims[0]
            )));
        }
        let mut x = Tensor::from_vec(&[1, self.dims[0]], encoding.bits.clone())?;
        for l in 0..self.dims.len() - 1 {
            let w = self.store.value(l * 2);
            let b = self.store.value(l * 2 + 1);
            x = linear_fwd(&x, w, b);
            if l + 1 < self.dims.len() - 1 {
                x = relu_fwd(&x);
            }
        }
        Ok(x.data()[0])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub rmse: f64,
    pub kendall_tau: f64,
    pub n_train: usize,
    pub n_val: usize,
    /// All labels identical; the model is still returned.
    pub degenerate_labels: bool,
}

/// Pair every database architecture's encoding with its grid-searched best R
/// under `metric`. Deterministic given the database and configuration.
pub fn build_training_set(
    db: &EvalDatabase,
    space: &SearchSpaceConfig,
    metric: &MetricConfig,
    grid: &[f64],
) -> Result<Vec<(ArchEncoding, f64)>> {
    metric.validate()?;
    let mut pairs = Vec::new();
    for (arch_id, records) in &db.records {
        let entry = db
            .registry
            .get(arch_id)
            .ok_or_else(|| Error::Data(format!("no registry entry for {arch_id}")))?;
        let costs = match metric.cost_kind {
            CostKind::Macs => &entry.cost_macs,
            CostKind::Latency => entry.cost_latency.as_ref().ok_or_else(|| {
                Error::Data(format!("no latency profile for {arch_id}; rebuild with a table"))
            })?,
        };
        let best = grid_search_thresholds(records, costs, metric, grid)?;
        pairs.push((encode_arch(&entry.arch, space)?, best.r));
    }
    Ok(pairs)
}

/// Train the MLP with Adam on RMSE loss; report held-out RMSE and Kendall
/// rank correlation. Deterministic under `seed`.
pub fn fit_predictor(
    pairs: &[(ArchEncoding, f64)],
    layout: &EncodingLayout,
    config: &PredictorConfig,
    metric: &MetricConfig,
    seed: u64,
) -> Result<(Predictor, ValidationReport)> {
    config.validate()?;
    if pairs.len() < 20 {
        return Err(Error::Data(format!("need at least 20 training pairs, got {}", pairs.len())));
    }
    let dim = layout.total;
    for (e, _) in pairs {
        if e.bits.len() != dim {
            return Err(Error::Shape("encoding length mismatch in training set".into()));
        }
    }
    let labels: Vec<f64> = pairs.iter().map(|(_, r)| *r).collect();
    let degenerate = labels.windows(2).all(|w| w[0] == w[1]);
    let label_mean = labels.iter().sum::<f64>() / labels.len() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for i in 0..order.len() {
        let j = rng.gen_range(i..order.len());
        order.swap(i, j);
    }
    let n_val = ((pairs.len() as f64 * config.val_fraction).round() as usize)
        .clamp(if config.val_fraction > 0.0 { 1 } else { 0 }, pairs.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);

    let mut predictor =
        Predictor::init(dim, layout.clone(), config, *metric, label_mean, seed ^ 0x9e37);
    let mut adam = crate::nn::optim::Adam::new(&predictor.store, config.lr, config.weight_decay);

    let mut train: Vec<usize> = train_idx.to_vec();
    for _ in 0..config.epochs {
        for i in 0..train.len() {
            let j = rng.gen_range(i..train.len());
            train.swap(i, j);
        }
        for chunk in train.chunks(config.batch_size) {
            let b = chunk.len();
            let mut xb = Vec::with_capacity(b * dim);
            let mut yb = Vec::with_capacity(b);
            for &i in chunk {
                xb.extend_from_slice(&pairs[i].0.bits);
                yb.push(pairs[i].1);
            }
            let mut tape = Tape::new(true);
            let mut x = tape.constant(Tensor::from_vec(&[b, dim], xb)?);
            for l in 0..predictor.dims.len() - 1 {
                let w = tape.param_leaf(l * 2, predictor.store.value(l * 2).clone());
                let bias = tape.param_leaf(l * 2 + 1, predictor.store.value(l * 2 + 1).clone());
                x = tape.linear(x, w, bias);
                if l + 1 < predictor.dims.len() - 1 {
                    x = tape.relu(x);
                }
            }
            let flat = tape.reshape(x, &[b]);
            let loss = tape.rmse(flat, &yb);
            let grads = tape.backward(loss);
            predictor.store.zero_grads();
            for (id, g) in grads {
                predictor.store.accumulate_grad(id, &g);
            }
            adam.step(&mut predictor.store);
        }
    }

    let mut preds = Vec::with_capacity(val_idx.len());
    let mut truth = Vec::with_capacity(val_idx.len());
    for &i in val_idx {
        preds.push(predictor.predict(&pairs[i].0)?);
        truth.push(pairs[i].1);
    }
    let rmse = if preds.is_empty() {
        0.0
    } else {
        (preds
            .iter()
            .zip(&truth)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / preds.len() as f64)
            .sqrt()
    };
    let report = ValidationReport {
        rmse,
        kendall_tau: kendall_tau(&preds, &truth),
        n_train: train_idx.len(),
        n_val: val_idx.len(),
        degenerate_labels: degenerate,
    };
    Ok((predictor, report))
}

/// Kendall rank correlation with tie correction (tau-b).
pub fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    let mut ties_a = 0i64;
    let mut ties_b = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let da = a[i] - a[j];
            let db = b[i] - b[j];
            if da == 0.0 && db == 0.0 {
                continue;
            } else if da == 0.0 {
                ties_a += 1;
            } else if db == 0.0 {
                ties_b += 1;
            } else if (da > 0.0) == (db > 0.0) {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let denom = (((n0 - ties_a) as f64) * ((n0 - ties_b) as f64)).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    (concordant - discordant) as f64 / denom
}

// ---------------------------------------------------------------------------
// Predictor checkpoint
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"MSNASPR1";

#[derive(Debug, Serialize, Deserialize)]
struct PredictorHeader {
    config: PredictorConfig,
    metric: MetricConfig,
    layout: EncodingLayout,
    dims: Vec<usize>,
}

pub fn save_predictor<P: AsRef<Path>>(path: P, predictor: &Predictor) -> Result<()> {
    let header = PredictorHeader {
        config: predictor.config.clone(),
        metric: predictor.metric,
        layout: predictor.layout.clone(),
        dims: predictor.dims.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in predictor.store.params() {
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_predictor<P: AsRef<Path>>(path: P) -> Result<Predictor> {
    let mut r = std::io::BufReader::new(
        std::fs::File::open(path.as_ref())
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.as_ref().display())))?,
    );
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data("not a predictor checkpoint".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: PredictorHeader = serde_json::from_slice(&json)?;

    let mut predictor = Predictor::init(
        header.dims[0],
        header.layout,
        &header.config,
        header.metric,
        0.0,
        0,
    );
    if predictor.dims != header.dims {
        return Err(Error::Data("predictor dimension mismatch".into()));
    }
    for id in 0..predictor.store.len() {
        let shape = predictor.store.value(id).shape().to_vec();
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        predictor.store.set_value(id, Tensor::from_vec(&shape, data)?);
    }
    Ok(predictor)
}
