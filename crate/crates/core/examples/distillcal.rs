use slimdet_core::detectcore::{gen_dataset, DatasetConfig};
use slimdet_core::distill::{distill_train, DistillConfig};
use slimdet_core::groupprune::{apply_surgery, build_masks, equivalence_probes, finalize_masks, plan_thresholds, verify_equivalence, PruneMode};
use slimdet_core::netgraph::{assign_groups, parse_graph, WeightStore};
use slimdet_core::network::Network;
use slimdet_core::rng::stream;
use slimdet_core::sparsetrain::{train_sparse, SparseSchedule};
use slimdet_core::trainer::{fit, FitMode, TrainOpts};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let beta: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20.0);
    let beta_hi: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200.0);
    let temp: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3.0);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.006);

    let text = std::fs::read_to_string("fixtures/tiny-det.graph").unwrap();
    let mut graph = parse_graph(&text).unwrap();
    assign_groups(&mut graph).unwrap();
    let data = gen_dataset(&DatasetConfig {
        seed: 7, n_train: 64, n_val: 32, image_size: 96, n_classes: 3,
    }).unwrap();

    let store = WeightStore::init(&graph, &mut stream(7, "init")).unwrap();
    let mut base = Network::new(graph.clone(), store);
    let opts = TrainOpts::new(100, 8, 0.015, 7, "train");
    let res = fit(&mut base, &data, &opts, FitMode::Standard).unwrap();
    println!("teacher (base): val mAP {:.4}", res.val_map);

    let mut sparse = base.clone();
    let sched = SparseSchedule { s0: 0.3, ..SparseSchedule::default() };
    let sparse_opts = TrainOpts::new(40, 8, 0.005, 7, "train");
    let rs = train_sparse(&mut sparse, &data, &sched, &sparse_opts).unwrap();
    println!("sparse: val mAP {:.4}", rs.val_map);

    let plan = plan_thresholds(&sparse.graph, &sparse.store, 0.3, PruneMode::Proportional).unwrap();
    let pre = build_masks(&sparse.graph, &sparse.store, &plan).unwrap();
    let masks = finalize_masks(&sparse.graph, &sparse.store, &pre).unwrap();
    let (pg, ps) = apply_surgery(&sparse.graph, &sparse.store, &masks).unwrap();
    let pruned = Network::new(pg, ps);
    let dev = verify_equivalence(&sparse, &masks, &pruned, &equivalence_probes(7, 96, 4)).unwrap();
    println!("pruned: {} of {} channels removed, deviation {:.2e}", masks.pruned_total(), plan.total_channels, dev);

    let dcfg = DistillConfig {
        betas: vec![beta, beta, beta, beta_hi, beta_hi],
        temperature: temp,
        iou_thresh: 0.5,
        soft_cls_weight: 1.0,
        soft_box_weight: 1.0,
        tap_scales: None,
    };
    for seed in [7u64, 8, 9, 10] {
        let ropts = TrainOpts::new(30, 8, lr, seed, "recover");
        let mut ft = pruned.clone();
        let rf = fit(&mut ft, &data, &ropts, FitMode::Standard).unwrap();
        let mut dt = pruned.clone();
        let rd = distill_train(&mut dt, &base, &data, &dcfg, &ropts).unwrap();
        println!("seed {seed}: finetune mAP {:.4}  distill mAP {:.4}  delta {:+.4}",
            rf.val_map, rd.val_map, rd.val_map - rf.val_map);
    }
}
