use slimdet_core::detectcore::{gen_dataset, DatasetConfig};
use slimdet_core::netgraph::{assign_groups, parse_graph, WeightStore};
use slimdet_core::network::Network;
use slimdet_core::rng::stream;
use slimdet_core::sparsetrain::{mean_abs_gamma, train_sparse, SparseSchedule};
use slimdet_core::trainer::{fit, FitMode, TrainOpts};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let s0: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.005);

    let text = std::fs::read_to_string("fixtures/tiny-det.graph").unwrap();
    let mut graph = parse_graph(&text).unwrap();
    assign_groups(&mut graph).unwrap();
    let data = gen_dataset(&DatasetConfig {
        seed: 7, n_train: 64, n_val: 32, image_size: 96, n_classes: 3,
    }).unwrap();

    // base training once
    let store = WeightStore::init(&graph, &mut stream(7, "init")).unwrap();
    let mut base = Network::new(graph.clone(), store);
    let opts = TrainOpts::new(100, 8, 0.015, 7, "train");
    let res = fit(&mut base, &data, &opts, FitMode::Standard).unwrap();
    println!("base: val mAP {:.4}, val hard {:.4}, mean|g| {:.4}",
        res.val_map, res.val_hard, mean_abs_gamma(&base.store));

    let sparse_opts = TrainOpts::new(40, 8, lr, 7, "train");
    // baseline: s0 = 0
    let mut b0 = base.clone();
    let sched0 = SparseSchedule { s0: 0.0, ..SparseSchedule::default() };
    let r0 = train_sparse(&mut b0, &data, &sched0, &sparse_opts).unwrap();
    println!("s0=0   : val hard {:.4}, mean|g| {:.5}, val mAP {:.4}", r0.val_hard, mean_abs_gamma(&b0.store), r0.val_map);

    let mut b1 = base.clone();
    let sched1 = SparseSchedule { s0, ..SparseSchedule::default() };
    let r1 = train_sparse(&mut b1, &data, &sched1, &sparse_opts).unwrap();
    println!("s0={s0}: val hard {:.4}, mean|g| {:.5}, val mAP {:.4}", r1.val_hard, mean_abs_gamma(&b1.store), r1.val_map);
    println!("gamma ratio {:.3} (need < 0.5), hard ratio {:.3} (need <= 1.2)",
        mean_abs_gamma(&b1.store) / mean_abs_gamma(&b0.store), r1.val_hard / r0.val_hard);
}
