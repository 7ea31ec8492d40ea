use slimdet_core::detectcore::{decode_predictions, eval_map, gen_dataset, iou, DatasetConfig, EvalConfig, HardLossCfg};
use slimdet_core::tensor::Tensor;
use slimdet_core::netgraph::{assign_groups, parse_graph, WeightStore};
use slimdet_core::network::Network;
use slimdet_core::rng::stream;
use slimdet_core::trainer::{fit, validate_map, FitMode, TrainOpts};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let lr0: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let lobj: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(5.0);
    let lbox: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(5.0);

    let text = std::fs::read_to_string("fixtures/tiny-det.graph").unwrap();
    let mut graph = parse_graph(&text).unwrap();
    assign_groups(&mut graph).unwrap();
    let store = WeightStore::init(&graph, &mut stream(7, "init")).unwrap();
    let mut net = Network::new(graph, store);

    let n_train: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(64);
    let data = gen_dataset(&DatasetConfig {
        seed: 7, n_train, n_val: 32, image_size: 96, n_classes: 3,
    }).unwrap();

    let mut opts = TrainOpts::new(epochs, 8, lr0, 7, "train");
    opts.hard_cfg = HardLossCfg { lambda_obj: lobj, lambda_noobj: 0.5, lambda_cls: 1.5, lambda_box: lbox };
    opts.eval_map_every = 0;
    let res = fit(&mut net, &data, &opts, FitMode::Standard).unwrap();
    for e in res.history.iter().step_by(10) {
        println!("epoch {:3}  loss {:8.4}  hard {:8.4}", e.epoch, e.loss, e.hard);
    }
    println!("last loss {:.4}", res.history.last().unwrap().loss);
    for conf in [0.05, 0.1, 0.25] {
        println!("val mAP@0.5 (conf {conf}): {:.4}", validate_map(&net, &data, conf).unwrap());
    }
    // inspect a few val images
    for i in 0..4 {
        let img = &data.val_images[i];
        let mut shape = vec![1]; shape.extend_from_slice(&img.shape);
        let heads = net.predict(Tensor::new(shape, img.data.clone())).unwrap();
        let dets = decode_predictions(&heads, &data.anchors, 3, 0.05).unwrap().remove(0);
        println!("val[{i}] gt:");
        for g in &data.val_labels[i] {
            println!("   class {} at ({:.2},{:.2}) {:.2}x{:.2}", g.class_id, g.cx, g.cy, g.w, g.h);
        }
        for d in dets.iter().take(6) {
            let best = data.val_labels[i].iter().map(|g| iou(g, &d.as_box())).fold(0.0, f64::max);
            println!("   det class {} score {:.3} at ({:.2},{:.2}) {:.2}x{:.2} best-iou {:.2}", d.class_id, d.score, d.cx, d.cy, d.w, d.h, best);
        }
    }
    // loose-IoU mAP to separate localization from classification failure
    let mut all_dets = Vec::new();
    for img in &data.val_images {
        let mut shape = vec![1]; shape.extend_from_slice(&img.shape);
        let heads = net.predict(Tensor::new(shape, img.data.clone())).unwrap();
        all_dets.push(decode_predictions(&heads, &data.anchors, 3, 0.05).unwrap().remove(0));
    }
    for thr in [0.5, 0.25, 0.1] {
        let r = eval_map(&all_dets, &data.val_labels, &EvalConfig { iou_thresh: thr, interp: slimdet_core::detectcore::ApInterp::AllPoint });
        println!("val mAP@{thr}: {:.4}", r.map);
    }
    let mut train_as_val = data.clone();
    train_as_val.val_images = data.train_images.clone();
    train_as_val.val_labels = data.train_labels.clone();
    println!("train mAP@0.5 (conf 0.1): {:.4}", validate_map(&net, &train_as_val, 0.1).unwrap());
}
