//! Stage implementations behind the subcommands.

use std::path::Path;

use anyhow::{bail, Context, Result};

use slimdet_core::detectcore::{
    decode_predictions, eval_map, gen_dataset, load_dataset, save_dataset, ApInterp, Dataset,
    DatasetConfig, EvalConfig,
};
use slimdet_core::distill::{distill_train, DistillConfig};
use slimdet_core::groupprune::{
    apply_surgery, build_masks, equivalence_probes, finalize_masks, plan_thresholds,
    prune_report_csv, save_masks, verify_equivalence, PruneMode,
};
use slimdet_core::netgraph::{
    assign_groups, count_cost, load_weights, parse_graph, save_weights, CostReport, Graph,
    WeightStore,
};
use slimdet_core::network::Network;
use slimdet_core::rng::stream;
use slimdet_core::sparsetrain::{
    export_gamma_histogram, train_sparse, DecaySelection, SparseSchedule,
};
use slimdet_core::tensor::Tensor;
use slimdet_core::trainer::{fit, gamma_hist_csv, history_csv, FitMode, FitResult, TrainOpts};

use crate::config::{Overrides, PipelineConfig};
use crate::manifest::{require_artifact, Manifest};

pub fn load_graph(path: &str) -> Result<Graph> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading graph {path}"))?;
    let mut graph = parse_graph(&text)?;
    assign_groups(&mut graph)?;
    Ok(graph)
}

fn train_opts(cfg: &PipelineConfig, epochs: usize, lr0: f64, stream_name: &str) -> TrainOpts {
    let mut opts = TrainOpts::new(epochs, cfg.train.batch_size, lr0, cfg.run.seed, stream_name);
    opts.conf_thresh = cfg.eval.conf_thresh;
    opts
}

fn write_history(run_dir: &Path, stem: &str, result: &FitResult) -> Result<Vec<String>> {
    let hist_name = format!("{stem}_history.csv");
    std::fs::write(run_dir.join(&hist_name), history_csv(&result.history))?;
    let gh_name = format!("{stem}_gamma_hist.csv");
    std::fs::write(run_dir.join(&gh_name), gamma_hist_csv(&result.history))?;
    Ok(vec![hist_name, gh_name])
}

fn dataset_for(_cfg: &PipelineConfig, run_dir: &Path) -> Result<Dataset> {
    let dir = run_dir.join("dataset");
    if !dir.join("manifest.txt").exists() {
        bail!(
            "no dataset found under {}; run `gen-data` first",
            dir.display()
        );
    }
    Ok(load_dataset(&dir)?)
    // image size consistency is validated by the forward pass
}

pub fn cmd_gen_data(cfg: &PipelineConfig, run_dir: &Path, overrides: &Overrides) -> Result<()> {
    std::fs::create_dir_all(run_dir)?;
    let ds = gen_dataset(&DatasetConfig {
        seed: cfg.run.seed,
        n_train: cfg.data.n_train,
        n_val: cfg.data.n_val,
        image_size: cfg.data.image_size,
        n_classes: cfg.data.n_classes,
    })?;
    save_dataset(&ds, &run_dir.join("dataset"))?;
    let mut m = Manifest::new("gen-data", &cfg.hash(), cfg.run.seed);
    m.outputs.push("dataset/manifest.txt".to_string());
    m.overrides = overrides.applied();
    m.save(run_dir)?;
    log::info!(
        "dataset: {} train / {} val images at {}px, {} classes",
        ds.train_images.len(),
        ds.val_images.len(),
        ds.cfg.image_size,
        ds.cfg.n_classes
    );
    Ok(())
}

/// Plain training from seeded init (or from --weights when given).
pub fn cmd_train(
    cfg: &PipelineConfig,
    run_dir: &Path,
    weights: Option<&str>,
    overrides: &Overrides,
) -> Result<()> {
    std::fs::create_dir_all(run_dir)?;
    let graph = load_graph(&cfg.model.graph)?;
    let data = dataset_for(cfg, run_dir)?;
    let store = match weights {
        Some(w) => load_weights(&graph, Path::new(w))?,
        None => WeightStore::init(&graph, &mut stream(cfg.run.seed, "init"))?,
    };
    let mut net = Network::new(graph, store);
    let opts = train_opts(cfg, cfg.train.epochs, cfg.train.lr0, "train");
    let result = fit(&mut net, &data, &opts, FitMode::Standard)?;
    net.store.snap_f32();
    save_weights(&net.store, &run_dir.join("base.wts"))?;
    let mut outputs = vec!["base.wts".to_string()];
    outputs.extend(write_history(run_dir, "base", &result)?);
    let mut m = Manifest::new("train", &cfg.hash(), cfg.run.seed);
    m.inputs = weights.iter().map(|w| w.to_string()).collect();
    m.outputs = outputs;
    m.overrides = overrides.applied();
    m.save(run_dir)?;
    log::info!(
        "base training done: loss {:.4}, val mAP@0.5 {:.4}",
        result.history.last().map(|e| e.loss).unwrap_or(f64::NAN),
        result.val_map
    );
    Ok(())
}

fn selection_from(name: &str) -> Result<DecaySelection> {
    Ok(match name {
        "largest" => DecaySelection::LargestGamma,
        "smallest" => DecaySelection::SmallestGamma,
        other => bail!("unknown decay selection `{other}` (largest|smallest)"),
    })
}

/// Sparse training from base weights (default) or --weights.
pub fn cmd_sparse(
    cfg: &PipelineConfig,
    run_dir: &Path,
    weights: Option<&str>,
    overrides: &Overrides,
) -> Result<()> {
    std::fs::create_dir_all(run_dir)?;
    let graph = load_graph(&cfg.model.graph)?;
    let data = dataset_for(cfg, run_dir)?;
    let store = match weights {
        Some(w) => load_weights(&graph, Path::new(w))?,
        None => {
            if run_dir.join("base.wts").exists() {
                load_weights(&graph, &run_dir.join("base.wts"))?
            } else {
                WeightStore::init(&graph, &mut stream(cfg.run.seed, "init"))?
            }
        }
    };
    let mut net = Network::new(graph, store);
    export_gamma_histogram(
        &net.store,
        &run_dir.join("gamma_pre.csv"),
        &run_dir.join("gamma_pre.svg"),
    )?;
    let sched = SparseSchedule {
        s0: cfg.sparse.s0,
        switch_fraction: cfg.sparse.switch_fraction,
        keep_fraction: cfg.sparse.keep_fraction,
        decay_factor: cfg.sparse.decay_factor,
        selection: selection_from(&cfg.sparse.selection)?,
    };
    let opts = train_opts(cfg, cfg.sparse.epochs, cfg.sparse.lr0, "train");
    let result = train_sparse(&mut net, &data, &sched, &opts)?;
    net.store.snap_f32();
    save_weights(&net.store, &run_dir.join("sparse.wts"))?;
    export_gamma_histogram(
        &net.store,
        &run_dir.join("gamma_post.csv"),
        &run_dir.join("gamma_post.svg"),
    )?;
    let mut outputs = vec![
        "sparse.wts".to_string(),
        "gamma_pre.csv".to_string(),
        "gamma_post.csv".to_string(),
    ];
    outputs.extend(write_history(run_dir, "sparse", &result)?);
    let mut m = Manifest::new("sparse", &cfg.hash(), cfg.run.seed);
    m.inputs = vec![weights.unwrap_or("base.wts").to_string()];
    m.outputs = outputs;
    m.overrides = overrides.applied();
    m.save(run_dir)?;
    log::info!(
        "sparse training done: mean |gamma| {:.5}, val hard loss {:.4}",
        result.history.last().map(|e| e.mean_abs_gamma).unwrap_or(f64::NAN),
        result.val_hard
    );
    Ok(())
}

fn prune_mode_from(cfg: &PipelineConfig) -> Result<PruneMode> {
    Ok(match cfg.prune.mode.as_str() {
        "proportional" => PruneMode::Proportional,
        "redundancy_weighted" => PruneMode::RedundancyWeighted,
        "explicit" => {
            let Some(r) = cfg.prune.explicit_ratios.clone() else {
                bail!("prune mode `explicit` needs explicit_ratios in the config");
            };
            PruneMode::Explicit(r)
        }
        other => bail!("unknown prune mode `{other}`"),
    })
}

/// Prune sparse-trained weights: plan, vote, surgery, verify.
pub fn cmd_prune(
    cfg: &PipelineConfig,
    run_dir: &Path,
    weights: Option<&str>,
    overrides: &Overrides,
) -> Result<()> {
    std::fs::create_dir_all(run_dir)?;
    let graph = load_graph(&cfg.model.graph)?;
    let weights_name = weights.unwrap_or("sparse.wts");
    let weights_path = if Path::new(weights_name).exists() {
        Path::new(weights_name).to_path_buf()
    } else {
        require_artifact(run_dir, weights_name, "prune")?;
        run_dir.join(weights_name)
    };
    let store = load_weights(&graph, &weights_path)?;

    let mode = prune_mode_from(cfg)?;
    let plan = plan_thresholds(&graph, &store, cfg.prune.ratio, mode)?;
    let pre = build_masks(&graph, &store, &plan)?;
    let masks = finalize_masks(&graph, &store, &pre)?;
    let (pruned_graph, pruned_store) = apply_surgery(&graph, &store, &masks)?;

    let input_hw = (cfg.model.input_size, cfg.model.input_size);
    let base_cost = count_cost(&graph, input_hw)?;
    let pruned_cost = count_cost(&pruned_graph, input_hw)?;

    // equivalence against the masked dense network
    let original = Network::new(graph, store);
    let pruned = Network::new(pruned_graph, pruned_store);
    let probes = equivalence_probes(cfg.run.seed, cfg.model.input_size, 8);
    let deviation = verify_equivalence(&original, &masks, &pruned, &probes)?;

    std::fs::write(run_dir.join("pruned.graph"), pruned.graph.to_text())?;
    save_weights(&pruned.store, &run_dir.join("pruned.wts"))?;
    save_masks(&plan, &masks, &run_dir.join("masks.mask"))?;
    std::fs::write(
        run_dir.join("prune_report.csv"),
        prune_report_csv(&plan, &original.graph, &masks),
    )?;
    std::fs::write(
        run_dir.join("equivalence.txt"),
        format!("probes={}\nmax_abs_deviation={deviation}\n", probes.len()),
    )?;
    std::fs::write(run_dir.join("cost_report.csv"), cost_csv(&base_cost, Some(&pruned_cost)))?;

    let mut m = Manifest::new("prune", &cfg.hash(), cfg.run.seed);
    m.inputs = vec![weights_name.to_string()];
    m.outputs = vec![
        "pruned.graph".to_string(),
        "pruned.wts".to_string(),
        "masks.mask".to_string(),
        "prune_report.csv".to_string(),
        "equivalence.txt".to_string(),
        "cost_report.csv".to_string(),
    ];
    m.overrides = overrides.applied();
    m.save(run_dir)?;
    log::info!(
        "pruned {} of {} channels (P={}), equivalence deviation {deviation:.3e}",
        masks.pruned_total(),
        plan.total_channels,
        plan.total_ratio
    );
    Ok(())
}

fn teacher_weights_name(cfg: &PipelineConfig) -> Result<&'static str> {
    Ok(match cfg.distill.teacher.as_str() {
        "base" => "base.wts",
        "sparse" => "sparse.wts",
        other => bail!("unknown teacher `{other}` (base|sparse)"),
    })
}

fn load_student(cfg: &PipelineConfig, run_dir: &Path, needed_for: &str) -> Result<Network> {
    require_artifact(run_dir, "pruned.graph", needed_for)?;
    require_artifact(run_dir, "pruned.wts", needed_for)?;
    let text = std::fs::read_to_string(run_dir.join("pruned.graph"))?;
    let mut graph = parse_graph(&text)?;
    assign_groups(&mut graph)?;
    let store = load_weights(&graph, &run_dir.join("pruned.wts"))?;
    let _ = cfg;
    Ok(Network::new(graph, store))
}

/// Distill the pruned student against the frozen teacher.
pub fn cmd_distill(cfg: &PipelineConfig, run_dir: &Path, overrides: &Overrides) -> Result<f64> {
    let data = dataset_for(cfg, run_dir)?;
    let teacher_name = teacher_weights_name(cfg)?;
    require_artifact(run_dir, teacher_name, "distill")?;
    let teacher_graph = load_graph(&cfg.model.graph)?;
    let teacher_store = load_weights(&teacher_graph, &run_dir.join(teacher_name))?;
    let teacher = Network::new(teacher_graph, teacher_store);
    let mut student = load_student(cfg, run_dir, "distill")?;

    let dcfg = DistillConfig {
        betas: cfg.distill.betas.clone(),
        temperature: cfg.distill.temperature,
        iou_thresh: cfg.distill.iou_thresh,
        soft_cls_weight: cfg.distill.soft_cls_weight,
        soft_box_weight: cfg.distill.soft_box_weight,
        tap_scales: None,
    };
    let mut opts = train_opts(cfg, cfg.distill.epochs, cfg.distill.lr0, "recover");
    opts.eval_map_every = 1;
    let result = distill_train(&mut student, &teacher, &data, &dcfg, &opts)?;
    student.store.snap_f32();
    save_weights(&student.store, &run_dir.join("distilled.wts"))?;
    let mut outputs = vec!["distilled.wts".to_string()];
    outputs.extend(write_history(run_dir, "distill", &result)?);
    let mut m = Manifest::new("distill", &cfg.hash(), cfg.run.seed);
    m.inputs = vec![
        "pruned.graph".to_string(),
        "pruned.wts".to_string(),
        teacher_name.to_string(),
    ];
    m.outputs = outputs;
    m.overrides = overrides.applied();
    m.save(run_dir)?;
    log::info!("distillation done: val mAP@0.5 {:.4}", result.val_map);
    Ok(result.val_map)
}

/// Plain fine-tuning of the pruned student (hard loss only); the
/// comparison baseline for distillation.
pub fn cmd_finetune(cfg: &PipelineConfig, run_dir: &Path, overrides: &Overrides) -> Result<f64> {
    let data = dataset_for(cfg, run_dir)?;
    let mut student = load_student(cfg, run_dir, "finetune")?;
    let mut opts = train_opts(cfg, cfg.distill.epochs, cfg.distill.lr0, "recover");
    opts.eval_map_every = 1;
    let result = fit(&mut student, &data, &opts, FitMode::Standard)?;
    student.store.snap_f32();
    save_weights(&student.store, &run_dir.join("finetuned.wts"))?;
    let mut outputs = vec!["finetuned.wts".to_string()];
    outputs.extend(write_history(run_dir, "finetune", &result)?);
    let mut m = Manifest::new("finetune", &cfg.hash(), cfg.run.seed);
    m.inputs = vec!["pruned.graph".to_string(), "pruned.wts".to_string()];
    m.outputs = outputs;
    m.overrides = overrides.applied();
    m.save(run_dir)?;
    log::info!("fine-tuning done: val mAP@0.5 {:.4}", result.val_map);
    Ok(result.val_map)
}

/// Evaluate a weight file on the validation split.
pub fn cmd_eval(
    cfg: &PipelineConfig,
    run_dir: &Path,
    weights_name: &str,
    overrides: &Overrides,
) -> Result<f64> {
    let data = dataset_for(cfg, run_dir)?;
    // pruned artifacts pair with the pruned graph, everything else with the base graph
    let (graph, stem) = if weights_name.starts_with("distilled") || weights_name.starts_with("finetuned") || weights_name.starts_with("pruned") {
        require_artifact(run_dir, "pruned.graph", "eval")?;
        let text = std::fs::read_to_string(run_dir.join("pruned.graph"))?;
        let mut g = parse_graph(&text)?;
        assign_groups(&mut g)?;
        (g, weights_name.trim_end_matches(".wts"))
    } else {
        (load_graph(&cfg.model.graph)?, weights_name.trim_end_matches(".wts"))
    };
    require_artifact(run_dir, weights_name, "eval")?;
    let store = load_weights(&graph, &run_dir.join(weights_name))?;
    let net = Network::new(graph, store);

    let interp = match cfg.eval.interp.as_str() {
        "all" => ApInterp::AllPoint,
        "eleven" => ApInterp::ElevenPoint,
        other => bail!("unknown interpolation `{other}` (all|eleven)"),
    };
    let mut dets = Vec::new();
    for img in &data.val_images {
        let mut shape = vec![1];
        shape.extend_from_slice(&img.shape);
        let heads = net.predict(Tensor::new(shape, img.data.clone()))?;
        let mut d =
            decode_predictions(&heads, &data.anchors, data.cfg.n_classes, cfg.eval.conf_thresh)?;
        dets.push(d.remove(0));
    }
    let report = eval_map(
        &dets,
        &data.val_labels,
        &EvalConfig { iou_thresh: 0.5, interp },
    );
    let mut csv = String::from("class,name,ap,gt_count,det_count\n");
    for c in &report.per_class {
        let name = data.class_names.get(c.class_id).cloned().unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            c.class_id, name, c.ap, c.gt_count, c.det_count
        ));
    }
    csv.push_str(&format!("mAP@0.5,,{},,\n", report.map));
    let out_name = format!("eval_{stem}.csv");
    std::fs::write(run_dir.join(&out_name), csv)?;
    let mut m = Manifest::new(&format!("eval-{stem}"), &cfg.hash(), cfg.run.seed);
    m.inputs = vec![weights_name.to_string()];
    m.outputs = vec![out_name];
    m.overrides = overrides.applied();
    m.save(run_dir)?;
    log::info!("eval {weights_name}: mAP@0.5 {:.4}", report.map);
    Ok(report.map)
}

pub fn cost_csv(base: &CostReport, pruned: Option<&CostReport>) -> String {
    let mut s = String::from(
        "model,params,trainable_params,flops_mac,other_flops,model_size_bytes\n",
    );
    s.push_str(&format!(
        "base,{},{},{},{},{}\n",
        base.params, base.trainable_params, base.flops, base.other_flops, base.model_size_bytes
    ));
    if let Some(p) = pruned {
        s.push_str(&format!(
            "pruned,{},{},{},{},{}\n",
            p.params, p.trainable_params, p.flops, p.other_flops, p.model_size_bytes
        ));
    }
    s.push_str("# flops counted as multiply-accumulates (1 MAC = 1 FLOP), convolutions only\n");
    s
}

/// Static cost model of a graph at a given input size.
pub fn cmd_cost(graph_path: &str, input: usize, out: Option<&Path>) -> Result<CostReport> {
    let graph = load_graph(graph_path)?;
    let report = count_cost(&graph, (input, input))?;
    let text = format!(
        "graph: {}\ninput: {}x{}\nparams: {} ({:.3}M)\ntrainable params: {} ({:.3}M)\n\
         flops (MAC): {} ({:.3}G)\nother elementwise flops: {} ({:.3}G)\n\
         model size: {} bytes ({:.1} MB)\nlayers: {}\n\
         note: flops counted as multiply-accumulates over convolutions only\n",
        graph_path,
        input,
        input,
        report.params,
        report.params as f64 / 1e6,
        report.trainable_params,
        report.trainable_params as f64 / 1e6,
        report.flops,
        report.flops as f64 / 1e9,
        report.other_flops,
        report.other_flops as f64 / 1e9,
        report.model_size_bytes,
        report.model_size_bytes as f64 / 1e6,
        graph.layer_count(),
    );
    print!("{text}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("cost_report.txt"), &text)?;
        std::fs::write(dir.join("cost_report.csv"), cost_csv(&report, None))?;
    }
    Ok(report)
}

/// Gamma histogram export for a weight file.
pub fn cmd_hist(graph_path: &str, weights_path: &str, out_dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let graph = load_graph(graph_path)?;
    let store = load_weights(&graph, Path::new(weights_path))?;
    export_gamma_histogram(
        &store,
        &out_dir.join(format!("{stem}.csv")),
        &out_dir.join(format!("{stem}.svg")),
    )?;
    Ok(())
}

