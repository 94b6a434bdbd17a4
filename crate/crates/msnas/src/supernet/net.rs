//! The once-for-all network: maximal weights for every layer plus the
//! machinery that slices a multi-stage sub-network out of them without
//! copying storage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::space::{MultiStageArch, SearchSpaceConfig};
use super::structure::{arch_structure, NetworkStructure};
use crate::error::{Error, Result};
use crate::ms_ops::{
    ActiveStage, BlockWeights, DwStep, HeadLayer, MsBlock, MsNetwork, StemLayer, WeightSrc,
};
use crate::nn::ops::{crop_center_fwd, mat_transform_fwd};
use crate::nn::{randn, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Parameter ids of one block's stored weights.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub dw: Vec<usize>,
    pub dw_norm: Vec<(usize, usize)>,
    /// Kernel-transform matrices, largest target first: `(param, k)`.
    pub transforms: Vec<(usize, usize)>,
    /// `[hidden, stages * ext_in, 1, 1]`, input columns grouped by source stage.
    pub expand: usize,
    pub expand_norm: Vec<(usize, usize)>,
    /// `[ext_out, hidden, 1, 1]`.
    pub proj: usize,
    pub proj_norm: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct SupernetLayout {
    pub stem_w: Vec<usize>,
    pub stem_norm: Vec<(usize, usize)>,
    pub blocks: Vec<BlockParams>,
    pub heads: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct Supernet {
    pub config: SearchSpaceConfig,
    pub store: ParamStore,
    pub layout: SupernetLayout,
}

/// Build the once-for-all network: maximal depth and width everywhere, the
/// largest kernel in the pool for every depthwise layer, one stem, one
/// prediction head per stage. Initialization is deterministic under `seed`.
pub fn build_supernet(config: &SearchSpaceConfig, seed: u64) -> Result<Supernet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let s = config.stages;
    let kmax = config.max_kernel();

    let he = |rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize| {
        randn(rng, shape, (2.0 / fan_in as f64).sqrt())
    };
    let norm_pair = |store: &mut ParamStore, name: &str, c: usize| {
        let g = store.add(&format!("{name}.gamma"), Tensor::full(&[c], 1.0), ParamKind::Norm);
        let b = store.add(&format!("{name}.beta"), Tensor::zeros(&[c]), ParamKind::Norm);
        (g, b)
    };

    let stem_out = config.groups[0].width;
    let mut stem_w = Vec::new();
    let mut stem_norm = Vec::new();
    for st in 1..=s {
        let shape = [stem_out, config.image_channels, config.stem_kernel, config.stem_kernel];
        let fan = config.image_channels * config.stem_kernel * config.stem_kernel;
        stem_w.push(store.add(
            &format!("stem.s{st}.w"),
            he(&mut rng, &shape, fan),
            ParamKind::Weight,
        ));
        stem_norm.push(norm_pair(&mut store, &format!("stem.s{st}.norm"), stem_out));
    }

    let mut blocks = Vec::new();
    for (g, group) in config.groups.iter().enumerate() {
        for b in 0..group.blocks {
            let ext_in = if b == 0 { config.group_input_width(g) } else { group.width };
            let ext_out = group.width;
            let hidden = group.hidden;
            let prefix = format!("g{g}.b{b}");

            let mut dw = Vec::new();
            let mut dw_norm = Vec::new();
            for st in 1..=s {
                dw.push(store.add(
                    &format!("{prefix}.dw.s{st}.w"),
                    he(&mut rng, &[ext_in, kmax, kmax], kmax * kmax),
                    ParamKind::Weight,
                ));
                dw_norm.push(norm_pair(&mut store, &format!("{prefix}.dw.s{st}.norm"), ext_in));
            }

            // One transform matrix per kernel-size step below the maximum,
            // initialized to identity.
            let mut transforms = Vec::new();
            for &k in config.kernel_pool.iter().rev().skip(1) {
                transforms.push((
                    store.add(
                        &format!("{prefix}.kt{k}"),
                        crate::nn::params::identity(k * k),
                        ParamKind::Weight,
                    ),
                    k,
                ));
            }

            let expand = store.add(
                &format!("{prefix}.expand.w"),
                he(&mut rng, &[hidden, s * ext_in, 1, 1], s * ext_in),
                ParamKind::Weight,
            );
            let mut expand_norm = Vec::new();
            for st in 1..=s {
                expand_norm.push(norm_pair(
                    &mut store,
                    &format!("{prefix}.expand.s{st}.norm"),
                    hidden,
                ));
            }
            let proj = store.add(
                &format!("{prefix}.proj.w"),
                he(&mut rng, &[ext_out, hidden, 1, 1], hidden),
                ParamKind::Weight,
            );
            let mut proj_norm = Vec::new();
            for st in 1..=s {
                proj_norm.push(norm_pair(&mut store, &format!("{prefix}.proj.s{st}.norm"), ext_out));
            }

            blocks.push(BlockParams {
                dw,
                dw_norm,
                transforms,
                expand,
                expand_norm,
                proj,
                proj_norm,
            });
        }
    }

    let feat = config.groups.last().unwrap().width;
    let mut heads = Vec::new();
    for st in 1..=s {
        let w = store.add(
            &format!("head.s{st}.w"),
            randn(&mut rng, &[config.num_classes, feat], 0.01),
            ParamKind::Weight,
        );
        let bias = store.add(
            &format!("head.s{st}.b"),
            Tensor::zeros(&[config.num_classes]),
            ParamKind::Bias,
        );
        heads.push((w, bias));
    }

    Ok(Supernet {
        config: config.clone(),
        store,
        layout: SupernetLayout { stem_w, stem_norm, blocks, heads },
    })
}

/// Order output channels by descending L1 norm of each channel's filter
/// slice; ties break toward the lower original index.
pub fn sort_channels_by_l1(weight: &Tensor) -> Vec<usize> {
    let out = weight.shape()[0];
    let inner = weight.len() / out.max(1);
    let mut norms: Vec<(usize, f64)> = (0..out)
        .map(|c| {
            let slice = &weight.data()[c * inner..(c + 1) * inner];
            (c, slice.iter().map(|v| v.abs()).sum())
        })
        .collect();
    norms.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    norms.into_iter().map(|(c, _)| c).collect()
}

/// Per-layer kernel transformation chain: square matrices mapping the center
/// crop of the next-larger kernel to an effective smaller kernel.
#[derive(Debug, Clone)]
pub struct KernelTransform {
    /// `(matrix [k*k, k*k], k)` pairs ordered by descending k.
    pub steps: Vec<(Tensor, usize)>,
    pub max_kernel: usize,
}

impl KernelTransform {
    pub fn identity(kernel_pool: &[usize]) -> Self {
        let max_kernel = *kernel_pool.last().unwrap();
        let steps = kernel_pool
            .iter()
            .rev()
            .skip(1)
            .map(|&k| (crate::nn::params::identity(k * k), k))
            .collect();
        KernelTransform { steps, max_kernel }
    }
}

/// Shrink full-size depthwise kernels `[C, kmax, kmax]` to size `target`:
/// crop the center of the current kernel, flatten, multiply by the step's
/// transformation matrix, reshape. `target` must be a pool member.
pub fn transform_kernel(
    full: &Tensor,
    transform: &KernelTransform,
    target: usize,
    kernel_pool: &[usize],
) -> Result<Tensor> {
    if !kernel_pool.contains(&target) {
        return Err(Error::Config(format!("kernel {target} not in pool {kernel_pool:?}")));
    }
    if target == transform.max_kernel {
        return Ok(full.clone());
    }
    let channels = full.shape()[0];
    let mut cur = full.clone();
    for (m, k) in &transform.steps {
        if *k < target {
            break;
        }
        let cropped = crop_center_fwd(&cur, *k);
        let flat = cropped.reshaped(&[channels, k * k])?;
        let trans = mat_transform_fwd(&flat, m);
        cur = trans.reshaped(&[channels, *k, *k])?;
        if *k == target {
            break;
        }
    }
    Ok(cur)
}

impl Supernet {
    /// Slice a multi-stage sub-network view out of the supernet. The view
    /// shares storage: training it updates the supernet parameters.
    pub fn materialize(&self, arch: &MultiStageArch) -> Result<MsNetwork> {
        let ns = arch_structure(arch, &self.config)?;
        self.materialize_from_structure(&ns)
    }

    pub fn materialize_from_structure(&self, ns: &NetworkStructure) -> Result<MsNetwork> {
        let s = self.config.stages;
        let mut key = 0usize;
        let mut next_key = || {
            let k = key;
            key += 1;
            k
        };

        let stem = StemLayer {
            key: next_key(),
            kernel: ns.stem_kernel,
            stride: ns.stem_stride,
            in_ch: ns.stem_in,
            out_ch: ns.stem_out,
            w: self.layout.stem_w.iter().map(|&id| WeightSrc::Param(id)).collect(),
            norm: self
                .layout
                .stem_norm
                .iter()
                .map(|&(g, b)| (WeightSrc::Param(g), WeightSrc::Param(b)))
                .collect(),
        };

        let mut blocks = Vec::new();
        for (flat_idx, bs) in ns.blocks.iter().enumerate() {
            if bs.active.is_empty() {
                // Fully skipped block: identity for every stage (stride is 1
                // here because first blocks are always active).
                continue;
            }
            let params = &self.layout.blocks[flat_idx];
            // Fresh L1 ordering from current supernet weights.
            let perm = sort_channels_by_l1(self.store.value(params.expand));

            let mut active = Vec::new();
            let mut dw = Vec::new();
            let mut dw_norm = Vec::new();
            let mut expand = Vec::new();
            let mut expand_norm = Vec::new();
            let mut proj = Vec::new();
            let mut proj_norm = Vec::new();
            for (j, info) in bs.active.iter().enumerate() {
                let st = info.stage;
                let ids: Vec<usize> =
                    (info.rank_range.0..info.rank_range.1).map(|r| perm[r]).collect();

                dw.push(if bs.kernel == self.config.max_kernel() {
                    WeightSrc::Param(params.dw[st - 1])
                } else {
                    let steps = params
                        .transforms
                        .iter()
                        .take_while(|(_, k)| *k >= bs.kernel)
                        .map(|&(matrix, k)| DwStep { matrix, k })
                        .collect();
                    WeightSrc::DwChain { id: params.dw[st - 1], steps }
                });
                let (g, b) = params.dw_norm[st - 1];
                dw_norm.push((WeightSrc::Param(g), WeightSrc::Param(b)));

                // Input-reuse sources: one weight block per earlier active
                // stage, columns taken from that source stage's column group.
                let mut row = Vec::new();
                for src_info in &bs.active[..=j] {
                    let src = src_info.stage;
                    let cols: Vec<usize> =
                        ((src - 1) * bs.ext_in..src * bs.ext_in).collect();
                    row.push(WeightSrc::RowsCols {
                        id: params.expand,
                        rows: ids.clone(),
                        cols,
                    });
                }
                expand.push(row);
                let (g, b) = params.expand_norm[st - 1];
                expand_norm.push((
                    WeightSrc::Rows { id: g, rows: ids.clone() },
                    WeightSrc::Rows { id: b, rows: ids.clone() },
                ));

                proj.push(WeightSrc::Cols { id: params.proj, cols: ids.clone() });
                let (g, b) = params.proj_norm[st - 1];
                proj_norm.push((WeightSrc::Param(g), WeightSrc::Param(b)));

                active.push(ActiveStage { stage: st, hidden_ids: ids });
            }

            let block = MsBlock {
                stages_total: s,
                ext_in: bs.ext_in,
                ext_out: bs.ext_out,
                kernel: bs.kernel,
                stride: bs.stride,
                residual: bs.residual,
                active,
                keys: (next_key(), next_key(), next_key()),
                weights: BlockWeights {
                    dw,
                    dw_norm,
                    expand,
                    expand_norm,
                    proj,
                    proj_norm,
                },
            };
            block.validate()?;
            blocks.push(block);
        }

        let heads = self
            .layout
            .heads
            .iter()
            .map(|&(w, b)| HeadLayer {
                key: next_key(),
                w: WeightSrc::Param(w),
                b: WeightSrc::Param(b),
            })
            .collect();

        let net = MsNetwork {
            stages: s,
            num_classes: self.config.num_classes,
            resolution: ns.resolution,
            stem,
            blocks,
            heads,
        };
        net.validate()?;
        Ok(net)
    }
}
