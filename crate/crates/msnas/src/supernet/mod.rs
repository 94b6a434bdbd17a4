//! The once-for-all supernet and the four sampling axes that slice a
//! multi-stage sub-network out of it: width (L1-sorted channel slices),
//! kernel size (center-crop transforms), depth (block activity with channel
//! absorption), and input resolution.

pub mod net;
pub mod space;
pub mod structure;

pub use net::{
    build_supernet, sort_channels_by_l1, transform_kernel, BlockParams, KernelTransform, Supernet,
    SupernetLayout,
};
pub use space::{
    enumerate_archs, incremental_channels, sample_arch, GroupSpec, MultiStageArch, Ratio,
    SearchSpaceConfig,
};
pub use structure::{arch_structure, ActiveStageInfo, BlockStructure, NetworkStructure};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ms_ops::ExecCtx;
    use crate::nn::randn;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_config() -> SearchSpaceConfig {
        SearchSpaceConfig {
            stages: 3,
            num_classes: 4,
            image_channels: 1,
            stem_kernel: 3,
            stem_stride: 1,
            resolution_pool: vec![8, 12],
            depth_pool: vec![1, 2],
            kernel_pool: vec![3, 5],
            cum_width_ratio_pool: vec![Ratio::new(1, 2).unwrap(), Ratio::one()],
            groups: vec![
                GroupSpec { blocks: 2, width: 4, hidden: 6, stride: 1 },
                GroupSpec { blocks: 2, width: 6, hidden: 8, stride: 2 },
            ],
        }
    }

    #[test]
    fn build_is_deterministic_under_seed() {
        let config = small_config();
        let a = build_supernet(&config, 42).unwrap();
        let b = build_supernet(&config, 42).unwrap();
        assert_eq!(a.store.len(), b.store.len());
        for id in 0..a.store.len() {
            assert_eq!(a.store.value(id).data(), b.store.value(id).data());
            assert_eq!(a.store.param(id).name, b.store.param(id).name);
        }
        let c = build_supernet(&config, 43).unwrap();
        assert_ne!(a.store.value(0).data(), c.store.value(0).data());
    }

    #[test]
    fn build_rejects_invalid_pools() {
        let mut config = small_config();
        config.cum_width_ratio_pool = vec![Ratio::new(1, 2).unwrap()];
        assert!(build_supernet(&config, 0).is_err());
    }

    #[test]
    fn degenerate_single_stage_space_is_a_plain_network() {
        let config = SearchSpaceConfig {
            stages: 1,
            num_classes: 3,
            image_channels: 1,
            stem_kernel: 3,
            stem_stride: 1,
            resolution_pool: vec![8],
            depth_pool: vec![2],
            kernel_pool: vec![3],
            cum_width_ratio_pool: vec![Ratio::one()],
            groups: vec![GroupSpec { blocks: 2, width: 4, hidden: 8, stride: 1 }],
        };
        let sn = build_supernet(&config, 1).unwrap();
        let net = sn.materialize(&MultiStageArch::maximal(&config)).unwrap();
        assert_eq!(net.stages, 1);
        assert_eq!(net.heads.len(), 1);
        assert_eq!(net.blocks.len(), 2);
        assert!(net.blocks[1].residual);
        for b in &net.blocks {
            assert_eq!(b.active.len(), 1);
            assert_eq!(b.active[0].hidden_ids.len(), 8);
        }

        let mut ctx = ExecCtx::new(false, Some(&sn.store));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let images = randn(&mut rng, &[2, 1, 8, 8], 1.0);
        let out = net.forward_stage(&mut ctx, 1, &images).unwrap();
        assert_eq!(ctx.tape.value(out.logits).shape(), &[2, 3]);
    }

    #[test]
    fn paper_scale_pools_accept_every_sampled_arch() {
        let config = SearchSpaceConfig {
            stages: 3,
            num_classes: 10,
            image_channels: 3,
            stem_kernel: 3,
            stem_stride: 2,
            resolution_pool: vec![128, 144, 160, 176, 192, 208, 224],
            depth_pool: vec![2, 3, 4],
            kernel_pool: vec![3, 5, 7],
            cum_width_ratio_pool: vec![
                Ratio::new(1, 2).unwrap(),
                Ratio::new(2, 3).unwrap(),
                Ratio::one(),
            ],
            groups: vec![
                GroupSpec { blocks: 4, width: 8, hidden: 16, stride: 1 },
                GroupSpec { blocks: 4, width: 12, hidden: 24, stride: 2 },
            ],
        };
        let sn = build_supernet(&config, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let arch = sample_arch(&config, &mut rng);
            arch.validate(&config).unwrap();
            let net = sn.materialize(&arch).unwrap();
            net.validate().unwrap();
        }
    }

    #[test]
    fn l1_sort_examples() {
        // Norms (0.2, 0.9, 0.5) -> permutation (1, 2, 0).
        let w = Tensor::from_vec(&[3, 1, 1, 1], vec![0.2, -0.9, 0.5]).unwrap();
        assert_eq!(sort_channels_by_l1(&w), vec![1, 2, 0]);
        // Already descending -> identity.
        let w = Tensor::from_vec(&[3, 1, 1, 1], vec![3.0, 2.0, 1.0]).unwrap();
        assert_eq!(sort_channels_by_l1(&w), vec![0, 1, 2]);
        // All equal -> identity (ties break to lower index).
        let w = Tensor::from_vec(&[4, 1, 1, 1], vec![1.0; 4]).unwrap();
        assert_eq!(sort_channels_by_l1(&w), vec![0, 1, 2, 3]);
    }

    #[test]
    fn transform_kernel_examples() {
        let pool = vec![3usize, 5, 7];
        let t = KernelTransform::identity(&pool);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let full = randn(&mut rng, &[2, 7, 7], 1.0);

        // K = 7: unchanged.
        let k7 = transform_kernel(&full, &t, 7, &pool).unwrap();
        assert_eq!(k7.data(), full.data());

        // Identity matrices: plain center crop.
        let k5 = transform_kernel(&full, &t, 5, &pool).unwrap();
        let want = crate::nn::ops::crop_center_fwd(&full, 5);
        assert!(k5.max_abs_diff(&want) < 1e-15);

        // All-ones 7x7 kernel with identity transforms -> all-ones 3x3.
        let ones = Tensor::full(&[1, 7, 7], 1.0);
        let k3 = transform_kernel(&ones, &t, 3, &pool).unwrap();
        assert_eq!(k3.shape(), &[1, 3, 3]);
        assert!(k3.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));

        // K not in pool.
        assert!(transform_kernel(&full, &t, 4, &pool).is_err());
    }

    #[test]
    fn materialization_is_deterministic() {
        let config = small_config();
        let sn = build_supernet(&config, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let arch = sample_arch(&config, &mut rng);
        let images = randn(&mut rng, &[2, 1, arch.resolution, arch.resolution], 1.0);

        let run = || {
            let net = sn.materialize(&arch).unwrap();
            let mut ctx = ExecCtx::new(false, Some(&sn.store));
            let mut outs = Vec::new();
            for s in 1..=config.stages {
                let o = net.forward_stage(&mut ctx, s, &images).unwrap();
                outs.push(ctx.tape.value(o.logits).data().to_vec());
            }
            outs
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn stage1_slices_nest_across_widths() {
        let config = small_config();
        let sn = build_supernet(&config, 9).unwrap();
        let r = |n, d| Ratio::new(n, d).unwrap();
        let narrow = MultiStageArch {
            resolution: 8,
            depths: vec![vec![2, 2, 2], vec![2, 2, 2]],
            kernels: vec![vec![3, 3], vec![3, 3]],
            cum_ratios: vec![vec![vec![r(1, 2), r(1, 2), r(1, 1)]; 2]; 2],
        };
        let wide = MultiStageArch {
            resolution: 8,
            depths: narrow.depths.clone(),
            kernels: narrow.kernels.clone(),
            cum_ratios: vec![vec![vec![r(1, 1), r(1, 1), r(1, 1)]; 2]; 2],
        };
        let n1 = sn.materialize(&narrow).unwrap();
        let n2 = sn.materialize(&wide).unwrap();
        for (b1, b2) in n1.blocks.iter().zip(&n2.blocks) {
            let set1 = &b1.active[0].hidden_ids;
            let set2 = &b2.active[0].hidden_ids;
            assert!(set1.len() < set2.len());
            assert_eq!(&set2[..set1.len()], &set1[..], "prefix of the same permutation");
        }
    }

    #[test]
    fn maximal_arch_uses_full_channel_ranges() {
        let config = small_config();
        let sn = build_supernet(&config, 10).unwrap();
        // Every cumulative ratio pinned to 1: stage 1 owns every channel and
        // later stages contribute no new ones.
        let mut arch = MultiStageArch::maximal(&config);
        for g in arch.cum_ratios.iter_mut() {
            for block in g.iter_mut() {
                for r in block.iter_mut() {
                    *r = Ratio::one();
                }
            }
        }
        let net = sn.materialize(&arch).unwrap();
        for block in &net.blocks {
            assert_eq!(block.active.len(), config.stages);
            let total: usize = block.active.iter().map(|a| a.hidden_ids.len()).sum();
            let mut all: Vec<usize> =
                block.active.iter().flat_map(|a| a.hidden_ids.clone()).collect();
            all.sort_unstable();
            assert_eq!(block.active[0].hidden_ids.len(), total);
            assert_eq!(all, (0..total).collect::<Vec<_>>());
        }

        // The default maximal arch spreads full width across the stages.
        let spread = MultiStageArch::maximal(&config);
        let net = sn.materialize(&spread).unwrap();
        for block in &net.blocks {
            let total: usize = block.active.iter().map(|a| a.hidden_ids.len()).sum();
            let mut all: Vec<usize> =
                block.active.iter().flat_map(|a| a.hidden_ids.clone()).collect();
            all.sort_unstable();
            assert_eq!(all, (0..total).collect::<Vec<_>>());
            assert!(block.active.iter().all(|a| a.stage >= 1));
        }
    }

    #[test]
    fn training_the_view_updates_shared_weights() {
        let config = small_config();
        let mut sn = build_supernet(&config, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let arch = sample_arch(&config, &mut rng);
        let images = randn(&mut rng, &[2, 1, arch.resolution, arch.resolution], 1.0);

        let max_arch = MultiStageArch::maximal(&config);
        let max_images = randn(&mut rng, &[1, 1, 12, 12], 1.0);
        let logits_before = {
            let net = sn.materialize(&max_arch).unwrap();
            let mut ctx = ExecCtx::new(false, Some(&sn.store));
            let o = net.forward_stage(&mut ctx, 1, &max_images).unwrap();
            ctx.tape.value(o.logits).data().to_vec()
        };

        // One gradient step on a sampled sub-network view.
        {
            let net = sn.materialize(&arch).unwrap();
            let mut ctx = ExecCtx::new(true, Some(&sn.store));
            let o = net.forward_stage(&mut ctx, 1, &images).unwrap();
            let n = ctx.tape.value(o.logits).len();
            let flat = ctx.tape.reshape(o.logits, &[n]);
            let loss = ctx.tape.rmse(flat, &vec![1.0; n]);
            let grads = ctx.tape.backward(loss);
            assert!(!grads.is_empty());
            for (id, g) in grads {
                sn.store.accumulate_grad(id, &g);
            }
            let mut sgd = crate::nn::optim::Sgd::new(&sn.store, 0.9, 0.0);
            sgd.step(&mut sn.store, 0.5);
        }

        let logits_after = {
            let net = sn.materialize(&max_arch).unwrap();
            let mut ctx = ExecCtx::new(false, Some(&sn.store));
            let o = net.forward_stage(&mut ctx, 1, &max_images).unwrap();
            ctx.tape.value(o.logits).data().to_vec()
        };
        assert_ne!(logits_before, logits_after);
    }

    #[test]
    fn fully_skipped_blocks_are_omitted() {
        let config = small_config(); // depth pool [1, 2], groups of 2 blocks
        let sn = build_supernet(&config, 13).unwrap();
        let r = Ratio::one();
        let arch = MultiStageArch {
            resolution: 8,
            depths: vec![vec![1, 1, 1], vec![2, 2, 2]],
            kernels: vec![vec![3, 3], vec![3, 3]],
            cum_ratios: vec![vec![vec![r; 3]; 2]; 2],
        };
        let net = sn.materialize(&arch).unwrap();
        // Group 1 keeps only its first block; group 2 keeps both.
        assert_eq!(net.blocks.len(), 3);
    }
}
