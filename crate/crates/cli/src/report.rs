//! Consolidated run report: one markdown document with a table per stage,
//! every number traceable to a stage CSV.

use std::path::Path;

use anyhow::{Context, Result};

use crate::manifest::{check_consistent, load_all};

fn read_csv(run_dir: &Path, name: &str) -> Option<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(run_dir.join(name)).ok()?;
    Some(
        text.lines()
            .filter(|l| !l.starts_with('#') && !l.is_empty())
            .map(|l| l.split(',').map(|c| c.to_string()).collect())
            .collect(),
    )
}

fn last_row<'a>(rows: &'a [Vec<String>]) -> Option<&'a Vec<String>> {
    if rows.len() > 1 {
        rows.last()
    } else {
        None
    }
}

fn fmt_m(v: f64) -> String {
    format!("{:.3}M", v / 1e6)
}

fn fmt_g(v: f64) -> String {
    format!("{:.3}G", v / 1e9)
}

fn history_final_map(run_dir: &Path, stem: &str) -> Option<f64> {
    let rows = read_csv(run_dir, &format!("{stem}_history.csv"))?;
    let header = rows.first()?;
    let map_col = header.iter().position(|c| c == "val_map")?;
    rows.iter()
        .skip(1)
        .rev()
        .find_map(|r| r.get(map_col).and_then(|v| v.parse::<f64>().ok()))
}

/// Assemble `report.md` for a run directory. Missing stages get an
/// "absent" marker; mixed configuration hashes are an error.
pub fn cmd_report(run_dir: &Path) -> Result<String> {
    let manifests = load_all(run_dir)?;
    check_consistent(&manifests)?;

    let mut md = String::new();
    md.push_str("# Compression run report\n\n");
    if let Some(m) = manifests.first() {
        md.push_str(&format!("- config hash: `{}`\n- seed: {}\n", m.config_hash, m.seed));
    }
    let stages: Vec<&str> = manifests.iter().map(|m| m.stage.as_str()).collect();
    md.push_str(&format!("- stages present: {}\n\n", stages.join(", ")));

    // sparse section
    md.push_str("## Sparse training\n\n");
    if let Some(rows) = read_csv(run_dir, "sparse_history.csv") {
        if let Some(last) = last_row(&rows) {
            let first = &rows[1];
            md.push_str("| epoch | loss | penalty | mean abs gamma |\n|---|---|---|---|\n");
            for row in [first, last] {
                md.push_str(&format!(
                    "| {} | {} | {} | {} |\n",
                    row[0],
                    trim_num(&row[2]),
                    trim_num(&row[4]),
                    trim_num(&row[8])
                ));
            }
            md.push('\n');
        }
        if let (Some(pre), Some(post)) =
            (read_csv(run_dir, "gamma_pre.csv"), read_csv(run_dir, "gamma_post.csv"))
        {
            let mass = |rows: &[Vec<String>]| -> (usize, usize) {
                let mut below = 0usize;
                let mut total = 0usize;
                for r in rows.iter().skip(1) {
                    if let (Ok(hi), Ok(c)) = (r[1].parse::<f64>(), r[2].parse::<usize>()) {
                        total += c;
                        if hi <= 0.1 {
                            below += c;
                        }
                    }
                }
                (below, total)
            };
            let (b0, t0) = mass(&pre);
            let (b1, t1) = mass(&post);
            md.push_str(&format!(
                "gamma mass below 0.1: {b0}/{t0} before, {b1}/{t1} after\n\n"
            ));
        }
    } else {
        md.push_str("absent\n\n");
    }

    // prune section
    md.push_str("## Group pruning\n\n");
    if let Some(rows) = read_csv(run_dir, "prune_report.csv") {
        md.push_str("| group | channels | share | quota | threshold | pruned |\n|---|---|---|---|---|---|\n");
        for r in rows.iter().skip(1) {
            md.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                r[0],
                r[1],
                trim_num(&r[2]),
                r[3],
                trim_num(&r[4]),
                r[5]
            ));
        }
        md.push('\n');
        if let Some(cost) = read_csv(run_dir, "cost_report.csv") {
            md.push_str("| model | params | flops (MAC) | size |\n|---|---|---|---|\n");
            for r in cost.iter().skip(1) {
                if r.len() < 6 {
                    continue;
                }
                let params: f64 = r[1].parse().unwrap_or(0.0);
                let flops: f64 = r[3].parse().unwrap_or(0.0);
                let size: f64 = r[5].parse().unwrap_or(0.0);
                md.push_str(&format!(
                    "| {} | {} | {} | {:.1} MB |\n",
                    r[0],
                    fmt_m(params),
                    fmt_g(flops),
                    size / 1e6
                ));
            }
            // deltas when both rows exist
            if cost.len() >= 3 && cost[1].len() >= 6 && cost[2].len() >= 6 {
                let bp: f64 = cost[1][1].parse().unwrap_or(0.0);
                let pp: f64 = cost[2][1].parse().unwrap_or(0.0);
                let bf: f64 = cost[1][3].parse().unwrap_or(0.0);
                let pf: f64 = cost[2][3].parse().unwrap_or(0.0);
                if bp > 0.0 && bf > 0.0 {
                    md.push_str(&format!(
                        "\nparameters pruned: {:.1}%, computation pruned: {:.1}%\n",
                        100.0 * (1.0 - pp / bp),
                        100.0 * (1.0 - pf / bf)
                    ));
                }
            }
            md.push('\n');
        }
        if let Ok(eq) = std::fs::read_to_string(run_dir.join("equivalence.txt")) {
            md.push_str(&format!("equivalence check: {}\n", eq.trim().replace('\n', ", ")));
        }
        md.push('\n');
    } else {
        md.push_str("absent\n\n");
    }

    // recovery section
    md.push_str("## Accuracy recovery\n\n");
    let fine = history_final_map(run_dir, "finetune");
    let dist = history_final_map(run_dir, "distill");
    if fine.is_some() || dist.is_some() {
        md.push_str("| method | final mAP@0.5 |\n|---|---|\n");
        if let Some(v) = fine {
            md.push_str(&format!("| fine-tuning | {v:.4} |\n"));
        }
        if let Some(v) = dist {
            md.push_str(&format!("| attention distilling | {v:.4} |\n"));
        }
        md.push('\n');
    } else {
        md.push_str("absent\n\n");
    }

    // evaluation section
    md.push_str("## Evaluations\n\n");
    let mut found_eval = false;
    if let Ok(entries) = std::fs::read_dir(run_dir) {
        let mut names: Vec<String> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.starts_with("eval_") && n.ends_with(".csv"))
            .collect();
        names.sort();
        for name in names {
            if let Some(rows) = read_csv(run_dir, &name) {
                if let Some(map_row) = rows.iter().find(|r| r[0].starts_with("mAP")) {
                    md.push_str(&format!(
                        "- {}: mAP@0.5 = {}\n",
                        name.trim_start_matches("eval_").trim_end_matches(".csv"),
                        trim_num(&map_row[2])
                    ));
                    found_eval = true;
                }
            }
        }
    }
    if !found_eval {
        md.push_str("absent\n");
    }
    md.push('\n');

    md.push_str(
        "---\nFLOPs are counted as multiply-accumulates (1 MAC = 1 FLOP) over convolutions; \
         batch norm, activations and pooling are tallied separately.\n",
    );

    std::fs::write(run_dir.join("report.md"), &md)
        .with_context(|| format!("writing report into {}", run_dir.display()))?;
    Ok(md)
}

fn trim_num(v: &str) -> String {
    match v.parse::<f64>() {
        Ok(f) => {
            if f == 0.0 {
                "0".to_string()
            } else if f.abs() >= 0.001 {
                format!("{f:.4}")
            } else {
                format!("{f:.3e}")
            }
        }
        Err(_) => v.to_string(),
    }
}
