//! Shared test support: an independent network evaluator built on the naive
//! reference kernels. It walks a materialized network's structure directly,
//! implements input reuse by channel concatenation (one dense convolution)
//! instead of summed per-source convolutions, and counts every multiply the
//! padded-buffer kernels perform.
#![allow(dead_code)] // each test target uses a different subset

use msnas::ms_ops::{MsBlock, MsNetwork, NORM_EPS};
use msnas::naive;
use msnas::nn::ParamStore;
use msnas::tensor::Tensor;

pub struct NaiveOutcome {
    /// Per-stage logits, `[B, classes]`.
    pub logits: Vec<Tensor>,
    /// Multiplies performed per stage, counted inside the naive kernels.
    pub macs_per_stage: Vec<u64>,
}

/// Run every stage of `net` jointly on `images`, without the incremental
/// cache machinery. Weight views are resolved through the same `WeightSrc`
/// descriptions the production path uses; all math is naive.
pub fn naive_forward_all_stages(
    net: &MsNetwork,
    store: Option<&ParamStore>,
    images: &Tensor,
) -> NaiveOutcome {
    let stages = net.stages;
    let mut macs_per_stage = vec![0u64; stages];

    let mut ext: Vec<Tensor> = (1..=stages)
        .map(|stage| {
            let sw = net.stem.w[stage - 1].resolve(store);
            let y = naive::conv2d(
                images,
                &sw,
                net.stem.stride,
                net.stem.kernel / 2,
                Some(&mut macs_per_stage[stage - 1]),
            );
            let (g, b) = &net.stem.norm[stage - 1];
            let y =
                naive::slice_norm(&y, g.resolve(store).data(), b.resolve(store).data(), NORM_EPS);
            naive::relu(&y)
        })
        .collect();

    for block in &net.blocks {
        ext = naive_block(block, store, &ext, &mut macs_per_stage);
    }

    let logits: Vec<Tensor> = (1..=stages)
        .map(|stage| {
            let pooled = naive::global_avg_pool(&ext[stage - 1]);
            let head = &net.heads[stage - 1];
            naive::linear(
                &pooled,
                &head.w.resolve(store),
                &head.b.resolve(store),
                Some(&mut macs_per_stage[stage - 1]),
            )
        })
        .collect();

    NaiveOutcome { logits, macs_per_stage }
}

fn naive_block(
    block: &MsBlock,
    store: Option<&ParamStore>,
    ext_in: &[Tensor],
    macs: &mut [u64],
) -> Vec<Tensor> {
    let stages = block.stages_total;
    let mut ext_out = Vec::with_capacity(stages);
    let mut dw_outs: Vec<Tensor> = Vec::new(); // post-activation, per active stage
    let mut chain: Option<Tensor> = None; // raw output-reuse accumulator

    for stage in 1..=stages {
        let x = &ext_in[stage - 1];
        let Some(j) = block.active_index(stage) else {
            ext_out.push(if block.stride == 1 {
                x.clone()
            } else {
                naive::avg_pool_ceil(x, block.stride)
            });
            continue;
        };
        let ji = j - 1;
        let counter = &mut macs[stage - 1];

        // Depthwise, independent type.
        let dw_w = block.weights.dw[ji].resolve(store);
        let t = naive::dwconv2d(x, &dw_w, block.stride, block.kernel / 2, Some(counter));
        let (g, b) = &block.weights.dw_norm[ji];
        let t = naive::slice_norm(&t, g.resolve(store).data(), b.resolve(store).data(), NORM_EPS);
        let t = naive::relu(&t);
        let (batch, sh, sw) = (t.shape()[0], t.shape()[2], t.shape()[3]);
        dw_outs.push(t);

        let width = block.active[ji].hidden_ids.len();
        let mut y = if width > 0 {
            // Input reuse via channel concatenation: concatenate every active
            // source's features and the per-source weights, then run one
            // dense convolution.
            let sources: Vec<&Tensor> = dw_outs.iter().take(j).collect();
            let xcat = naive::concat_channels(&sources);
            let ws: Vec<Tensor> =
                block.weights.expand[ji].iter().map(|w| w.resolve(store)).collect();
            let wcat = concat_weights_in(&ws);
            let h = naive::conv2d(&xcat, &wcat, 1, 0, Some(counter));
            let (g, b) = &block.weights.expand_norm[ji];
            let h =
                naive::slice_norm(&h, g.resolve(store).data(), b.resolve(store).data(), NORM_EPS);
            let h = naive::relu(&h);

            // Output reuse: own contribution plus the previous raw output.
            let pw = block.weights.proj[ji].resolve(store);
            let p = naive::conv2d(&h, &pw, 1, 0, Some(counter));
            match &chain {
                Some(prev) => naive::add(&p, prev),
                None => p,
            }
        } else {
            // No new hidden channels: the raw chain passes through (zeros
            // when no earlier active stage produced one).
            chain
                .clone()
                .unwrap_or_else(|| Tensor::zeros(&[batch, block.ext_out, sh, sw]))
        };
        chain = Some(y.clone());
        let (g, b) = &block.weights.proj_norm[ji];
        y = naive::slice_norm(&y, g.resolve(store).data(), b.resolve(store).data(), NORM_EPS);
        ext_out.push(if block.residual { naive::add(&y, x) } else { y });
    }
    ext_out
}

/// Concatenate `[out, c_k, 1, 1]` weights along the input-channel axis.
fn concat_weights_in(ws: &[Tensor]) -> Tensor {
    let out = ws[0].shape()[0];
    let (kh, kw) = (ws[0].shape()[2], ws[0].shape()[3]);
    assert!(ws.iter().all(|w| w.shape()[0] == out));
    let total: usize = ws.iter().map(|w| w.shape()[1]).sum();
    let mut cat = Tensor::zeros(&[out, total, kh, kw]);
    for oc in 0..out {
        let mut off = 0;
        for w in ws {
            let c = w.shape()[1];
            let src = oc * c * kh * kw;
            let dst = (oc * total + off) * kh * kw;
            cat.data_mut()[dst..dst + c * kh * kw]
                .copy_from_slice(&w.data()[src..src + c * kh * kw]);
            off += c;
        }
    }
    cat
}
