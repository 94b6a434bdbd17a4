//! Structural expansion of an architecture point: which stages are active in
//! which block, which hidden-channel ranks they compute, and the spatial size
//! at every layer. Both sub-network materialization and cost accounting are
//! derived from this single walker.

use super::space::{incremental_channels, MultiStageArch, SearchSpaceConfig};
use crate::error::Result;
use crate::nn::ops::conv_out_size;

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveStageInfo {
    /// Original 1-based stage index.
    pub stage: usize,
    /// Half-open rank range into the block's L1-sorted channel permutation.
    /// The lowest-indexed active stage absorbs all lower slices, so its range
    /// always starts at 0.
    pub rank_range: (usize, usize),
}

impl ActiveStageInfo {
    pub fn width(&self) -> usize {
        self.rank_range.1 - self.rank_range.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockStructure {
    pub group: usize,
    /// 0-based index within the group.
    pub block: usize,
    pub ext_in: usize,
    pub ext_out: usize,
    pub hidden_max: usize,
    pub kernel: usize,
    pub stride: usize,
    pub residual: bool,
    pub in_size: usize,
    pub out_size: usize,
    /// Active stages ascending; empty when every stage skips this block.
    pub active: Vec<ActiveStageInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkStructure {
    pub stages: usize,
    pub num_classes: usize,
    pub resolution: usize,
    pub stem_in: usize,
    pub stem_out: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_out_size: usize,
    pub blocks: Vec<BlockStructure>,
    pub head_features: usize,
}

/// Expand an architecture into per-block structure under `config`.
pub fn arch_structure(
    arch: &MultiStageArch,
    config: &SearchSpaceConfig,
) -> Result<NetworkStructure> {
    arch.validate(config)?;
    let s = config.stages;
    let stem_out_size = conv_out_size(
        arch.resolution,
        config.stem_kernel,
        config.stem_stride,
        config.stem_kernel / 2,
    );

    let mut blocks = Vec::new();
    let mut size = stem_out_size;
    for (g, group) in config.groups.iter().enumerate() {
        for b in 0..group.blocks {
            let ext_in = if b == 0 { config.group_input_width(g) } else { group.width };
            let ext_out = group.width;
            let stride = if b == 0 { group.stride } else { 1 };
            let residual = stride == 1 && ext_in == ext_out && b != 0;
            let kernel = arch.kernels[g][b];
            let ratios = &arch.cum_ratios[g][b];
            let inc = incremental_channels(ratios, group.hidden);
            let mut cum = Vec::with_capacity(s);
            let mut acc = 0;
            for c in &inc {
                acc += c;
                cum.push(acc);
            }

            let active_stages: Vec<usize> =
                (1..=s).filter(|&st| b + 1 <= arch.depths[g][st - 1]).collect();
            let mut active = Vec::new();
            for (i, &st) in active_stages.iter().enumerate() {
                let start = if i == 0 { 0 } else { cum[st - 2] };
                let end = cum[st - 1];
                active.push(ActiveStageInfo { stage: st, rank_range: (start, end) });
            }

            let in_size = size;
            let out_size = conv_out_size(in_size, kernel, stride, kernel / 2);
            blocks.push(BlockStructure {
                group: g,
                block: b,
                ext_in,
                ext_out,
                hidden_max: group.hidden,
                kernel,
                stride,
                residual,
                in_size,
                out_size,
                active,
            });
            size = out_size;
        }
    }

    Ok(NetworkStructure {
        stages: s,
        num_classes: config.num_classes,
        resolution: arch.resolution,
        stem_in: config.image_channels,
        stem_out: config.groups[0].width,
        stem_kernel: config.stem_kernel,
        stem_stride: config.stem_stride,
        stem_out_size,
        blocks,
        head_features: config.groups.last().unwrap().width,
    })
}
