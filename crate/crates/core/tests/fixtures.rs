//! Checks on the bundled graph descriptors.

use slimdet_core::netgraph::{assign_groups, count_cost, parse_graph, NodeKind};

fn fixture(name: &str) -> String {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name);
    std::fs::read_to_string(path).expect("fixture readable")
}

#[test]
fn yolov4_layer_count_and_groups() {
    let mut g = parse_graph(&fixture("yolov4-voc.graph")).unwrap();
    assert_eq!(g.layer_count(), 162);
    assign_groups(&mut g).unwrap();
    assert_eq!(g.group_count(), 5);

    // group boundaries by framework-style layer index:
    // 0-55 / 56-85 / 86-116 / 117-136 / 137-161
    let (_, layer_of) = g.layer_map();
    for n in &g.nodes {
        if !matches!(n.kind, NodeKind::Conv { .. }) {
            continue;
        }
        let layer = layer_of[n.id].unwrap();
        let expect = match layer {
            0..=55 => 1,
            56..=85 => 2,
            86..=116 => 3,
            117..=136 => 4,
            _ => 5,
        };
        assert_eq!(n.group, Some(expect), "conv at layer {layer} (node {})", n.id);
    }
}

#[test]
fn yolov4_coupled_sets_match_csp_blocks() {
    let g = parse_graph(&fixture("yolov4-voc.graph")).unwrap();
    // one coupled set per CSP block: entry conv + one 3x3 conv per residual
    let mut sizes: Vec<usize> = g.coupled.iter().map(|s| s.conv_ids.len()).collect();
    sizes.sort_unstable();
    assert_eq!(sizes, vec![2, 3, 5, 9, 9]);
}

#[test]
fn yolov4_cost_matches_published_scale() {
    let g = parse_graph(&fixture("yolov4-voc.graph")).unwrap();
    let report = count_cost(&g, (416, 416)).unwrap();
    let params = report.params as f64;
    let flops = report.flops as f64;
    let params_ref = 64.1e6;
    let flops_ref = 29.9e9;
    assert!(
        (params - params_ref).abs() / params_ref < 0.02,
        "params {params:.3e} vs {params_ref:.3e}"
    );
    assert!((flops - flops_ref).abs() / flops_ref < 0.10, "flops {flops:.3e} vs {flops_ref:.3e}");
    // 64M f32 weights serialize to roughly a quarter gigabyte
    assert!(report.model_size_bytes > 200_000_000 && report.model_size_bytes < 300_000_000);
}

#[test]
fn tiny_det_structure() {
    let mut g = parse_graph(&fixture("tiny-det.graph")).unwrap();
    assert_eq!(g.layer_count(), 40);
    assign_groups(&mut g).unwrap();
    assert_eq!(g.group_count(), 5);
    for grp in 1..=5 {
        assert!(
            g.nodes.iter().any(|n| n.group == Some(grp)
                && matches!(n.kind, NodeKind::Conv { .. })),
            "group {grp} has no convs"
        );
    }
    // two residual chains of three coupled convs each
    let sizes: Vec<usize> = g.coupled.iter().map(|s| s.conv_ids.len()).collect();
    assert_eq!(sizes, vec![3, 3]);
    // three heads at strides 8/16/32 on a 96x96 input means 12/6/3 grids
    let report = count_cost(&g, (96, 96)).unwrap();
    assert!(report.params > 0 && report.flops > 0);
}
