use msnas::checkpoint::save_checkpoint;
use msnas::data::synthetic_dataset;
use msnas::dyninfer::{count_macs, CostKind};
use msnas::evaldb::{build_eval_db, default_grid, grid_search_thresholds, EvalDatabase, MetricConfig};
use msnas::evo::{evolve_with_predictor, EvoConfig};
use msnas::predictor::{build_training_set, encoding_layout, fit_predictor, PredictorConfig};
use msnas::supernet::{build_supernet, sample_arch, MultiStageArch, GroupSpec, Ratio, SearchSpaceConfig};
use msnas::trainer::{train_supernet, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let space = SearchSpaceConfig {
        stages: 3, num_classes: 10, image_channels: 3, stem_kernel: 3, stem_stride: 1,
        resolution_pool: vec![24, 28, 32],
        depth_pool: vec![2, 3],
        kernel_pool: vec![3, 5, 7],
        cum_width_ratio_pool: vec![Ratio::new(1,2).unwrap(), Ratio::new(2,3).unwrap(), Ratio::one()],
        groups: vec![
            GroupSpec { blocks: 3, width: 8, hidden: 16, stride: 1 },
            GroupSpec { blocks: 3, width: 16, hidden: 32, stride: 2 },
        ],
    };
    let data = synthetic_dataset(10, 2000, 32, 3, 4001);
    let mut sn = build_supernet(&space, 4002).unwrap();
    let tc = TrainConfig { epochs: 36, batch_size: 32, initial_lr: 0.0075, seed: 4003, ..Default::default() };
    let t0 = Instant::now();
    let report = train_supernet(&mut sn, &data, &tc, None).unwrap();
    println!("train {:.0}s acc {:?}", t0.elapsed().as_secs_f64(),
        report.epoch_accuracy.iter().map(|v| (v*100.0) as i32).collect::<Vec<_>>());
    save_checkpoint("/tmp/desk.ckpt", &sn, &tc, &ChaCha8Rng::seed_from_u64(0)).unwrap();

    let mut arch_rng = ChaCha8Rng::seed_from_u64(4004);
    let archs: Vec<_> = (0..300).map(|i| (format!("a{i:04}"), sample_arch(&space, &mut arch_rng))).collect();
    let mut img_rng = ChaCha8Rng::seed_from_u64(4005);
    let indices = data.sample_indices(2000, &mut img_rng);
    let t0 = Instant::now();
    let outcome = build_eval_db(&sn, &archs, &data, &indices, 100, None).unwrap();
    println!("db {:.0}s skipped {}", t0.elapsed().as_secs_f64(), outcome.skipped.len());
    let db = outcome.db;
    db.save_dir("/tmp/desk_db").unwrap();

    // accuracy spread across archs (stage-3 full-exit accuracy)
    let mut accs: Vec<f64> = db.records.values().map(|rs| {
        rs.iter().filter(|r| r.correct[2]).count() as f64 / rs.len() as f64
    }).collect();
    accs.sort_by(|a,b| a.partial_cmp(b).unwrap());
    println!("stage3 acc across archs: min {:.3} med {:.3} max {:.3}", accs[0], accs[149], accs[299]);

    let grid = default_grid();
    for target in [1.0e6, 2.0e6] {
        let metric = MetricConfig { omega: 0.09, cost_target: target, cost_kind: CostKind::Macs };
        let pairs = build_training_set(&db, &space, &metric, &grid).unwrap();
        let rs: Vec<f64> = pairs.iter().map(|(_, r)| *r).collect();
        let (rmin, rmax) = (rs.iter().cloned().fold(f64::INFINITY, f64::min), rs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        let layout = encoding_layout(&space);
        let (pred, rep) = fit_predictor(&pairs, &layout, &PredictorConfig::default(), &metric, 4006).unwrap();
        println!("target {target:.0}: R [{rmin:.4},{rmax:.4}] rmse {:.4} tau {:.3}", rep.rmse, rep.kendall_tau);

        // winner-vs-50-random simulation (true re-scoring of top-10)
        let evo = EvoConfig { seed: 6001, ..Default::default() };
        let result = evolve_with_predictor(&pred, &metric, &space, &evo).unwrap();
        let named: Vec<(String, MultiStageArch)> = result.top.iter().enumerate().map(|(i,(a,_))| (format!("c{i:02}"), a.clone())).collect();
        let oc = build_eval_db(&sn, &named, &data, &indices, 100, None).unwrap();
        let mut best_true = f64::NEG_INFINITY; let mut best_cost = 0.0;
        for (id, arch) in &named {
            let costs = count_macs(arch, &space).unwrap();
            let gr = grid_search_thresholds(&oc.db.records[id], &costs, &metric, &grid).unwrap();
            if gr.r > best_true { best_true = gr.r; best_cost = gr.cost_avg; }
        }
        let mut pick = ChaCha8Rng::seed_from_u64(6003);
        let ids: Vec<&String> = db.records.keys().collect();
        let mut best_rand = f64::NEG_INFINITY;
        for _ in 0..50 {
            let id = ids[pick.gen_range(0..ids.len())];
            let gr = grid_search_thresholds(&db.records[id], &db.registry[id].cost_macs, &metric, &grid).unwrap();
            best_rand = best_rand.max(gr.r);
        }
        println!("  winner true R {best_true:.4} (cost {best_cost:.0}) vs best-of-50-random {best_rand:.4} -> {}", if best_true >= best_rand {"OK"} else {"FAIL"});
    }
}
