use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::Path;

use quantkit::analyzer::{
    layer_rmse, profile_model, profile_table, read_metrics_csv, write_metrics_csv, LayerMetrics,
    ProfileOptions, WallDetectorConfig,
};
use quantkit::kernels::{matmul, reference_matmul_fp, MatmulOperands};
use quantkit::planner::{
    apply_plan, build_plan, sweep_group_size, PlanConfig, QuantPlan, Selection,
};
use quantkit::quantizer::{
    dequantize_exact, quantize_activation, quantize_weight, GroupingScheme, QuantParams,
};
use quantkit::store::{read_model, LayerId};
use quantkit::synth::{generate, wall_columns_for, SynthConfig};
use quantkit::{cli, FpModel, QuantizedModel, Tensor};

fn default_metrics() -> (FpModel, Vec<LayerMetrics>) {
    let model = generate(&SynthConfig::default()).unwrap();
    let metrics = profile_model(&model, &ProfileOptions::default()).unwrap();
    (model, metrics)
}

fn desk_plan(metrics: &[LayerMetrics]) -> QuantPlan {
    build_plan(
        metrics,
        &PlanConfig {
            selection: Selection::MaxAbsThreshold(2.0),
            group_size: 16,
            params: QuantParams::int8(),
        },
    )
    .unwrap()
}

#[test]
fn default_synth_has_fifteen_wall_layers() {
    let cfg = SynthConfig::default();
    let model = generate(&cfg).unwrap();
    assert_eq!(model.layers.len(), 560);
    let big: Vec<String> = model
        .layers
        .iter()
        .filter(|t| t.data.iter().any(|v| v.abs() >= 50.0))
        .map(|t| t.name.clone())
        .collect();
    assert_eq!(big.len(), 15);
    for b in [0, 1, 3] {
        for k in ["q", "k", "v", "up", "gate"] {
            assert!(big.contains(&format!("blocks.{b}.{k}")));
        }
    }

    // wall entries sit above every base entry
    let mut min_wall = f32::INFINITY;
    let mut max_base = 0.0f32;
    for (i, t) in model.layers.iter().enumerate() {
        let walls = wall_columns_for(&cfg, LayerId::from_index(i));
        for r in 0..t.rows {
            for c in 0..t.cols {
                let v = t.get(r, c).abs();
                if walls.contains(&c) {
                    min_wall = min_wall.min(v);
                } else {
                    max_base = max_base.max(v);
                }
            }
        }
    }
    assert!(min_wall >= 50.0 && max_base < 1.0, "{min_wall} {max_base}");
}

#[test]
fn clean_synth_stays_below_one() {
    let model = generate(&SynthConfig::default().clean()).unwrap();
    let metrics = profile_model(&model, &ProfileOptions::default()).unwrap();
    let top = metrics.iter().map(|m| m.max_abs).fold(0.0, f64::max);
    assert!(top < 1.0, "{top}");
    let plan = desk_plan(&metrics);
    assert_eq!(plan.per_group_layers().count(), 0);
    assert!(metrics.iter().all(|m| m.wall_columns.is_empty()));
}

#[test]
fn profile_ordering_and_counts() {
    let model = generate(&SynthConfig { blocks: 1, dim: 16, wall_blocks: vec![0], ..SynthConfig::default() }).unwrap();
    let metrics = profile_model(&model, &ProfileOptions::default()).unwrap();
    assert_eq!(metrics.len(), 7);
    let names: Vec<_> = metrics.iter().map(|m| m.name.as_str()).collect();
    assert_eq!(
        names,
        ["blocks.0.q", "blocks.0.k", "blocks.0.v", "blocks.0.o", "blocks.0.up", "blocks.0.gate", "blocks.0.down"]
    );
    assert!(metrics.iter().enumerate().all(|(i, m)| m.layer_index == i));
    assert_eq!(metrics, profile_model(&model, &ProfileOptions::default()).unwrap());
}

#[test]
fn wall_detector_finds_injected_columns_in_model() {
    let cfg = SynthConfig { blocks: 4, ..SynthConfig::default() };
    let model = generate(&cfg).unwrap();
    let metrics = profile_model(&model, &ProfileOptions::default()).unwrap();
    for m in &metrics {
        let id = LayerId::from_index(m.layer_index);
        assert_eq!(m.wall_columns, wall_columns_for(&cfg, id), "{}", m.name);
    }
}

#[test]
fn v_layer_max_abs_matches_injected_magnitude() {
    let cfg = SynthConfig {
        blocks: 1,
        wall_blocks: vec![0],
        wall_magnitude: [93.0, 93.0],
        ..SynthConfig::default()
    };
    let model = generate(&cfg).unwrap();
    let metrics = profile_model(&model, &ProfileOptions::default()).unwrap();
    assert_eq!(metrics[2].name, "blocks.0.v");
    assert_eq!(metrics[2].max_abs, 93.0);
}

#[test]
fn outlier_layers_dominate_rmse() {
    let (_, metrics) = default_metrics();
    let (wall, clean): (Vec<_>, Vec<_>) = metrics.iter().partition(|m| m.max_abs > 2.0);
    assert_eq!(wall.len(), 15);
    let mut clean_rmse: Vec<f64> = clean.iter().map(|m| m.rmse).collect();
    clean_rmse.sort_by(f64::total_cmp);
    let median = clean_rmse[clean_rmse.len() / 2];
    let weakest = wall.iter().map(|m| m.rmse).fold(f64::INFINITY, f64::min);
    assert!(weakest / median >= 10.0, "{weakest} / {median}");
}

#[test]
fn threshold_plan_selects_fifteen() {
    let (_, metrics) = default_metrics();
    let plan = desk_plan(&metrics);
    assert_eq!(plan.per_group_layers().count(), 15);
    assert_eq!(format!("{:.4}", plan.per_group_fraction), "0.0268");
    assert_eq!(plan.per_group_fraction, 15.0 / 560.0);
}

#[test]
fn mixed_plan_reduces_error_on_selected_layers() {
    let (model, metrics) = default_metrics();
    let plan = desk_plan(&metrics);
    let quantized = apply_plan(&model, &plan).unwrap();
    let selected: BTreeSet<&str> = plan.per_group_layers().collect();
    for (w, q) in model.layers.iter().zip(&quantized.layers) {
        let d = dequantize_exact(q);
        let sse: f64 = w.data.iter().zip(&d.data).map(|(x, y)| (*x as f64 - y).powi(2)).sum();
        let planned = (sse / w.data.len() as f64).sqrt();
        let pc = layer_rmse(w, GroupingScheme::PerChannel, QuantParams::int8()).unwrap();
        if selected.contains(w.name.as_str()) {
            assert!(planned < pc, "{}: {planned} !< {pc}", w.name);
        } else {
            assert_eq!(planned, pc);
        }
    }
}

#[test]
fn all_per_channel_plan_equals_uniform_quantization() {
    let model = generate(&SynthConfig { blocks: 4, ..SynthConfig::default() }).unwrap();
    let metrics = profile_model(&model, &ProfileOptions::default()).unwrap();
    let plan = build_plan(&metrics, &PlanConfig { selection: Selection::MaxAbsThreshold(1e9), ..PlanConfig::default() }).unwrap();
    let quantized = apply_plan(&model, &plan).unwrap();
    for (w, q) in model.layers.iter().zip(&quantized.layers) {
        assert_eq!(q, &quantize_weight(w, GroupingScheme::PerChannel, QuantParams::int8()).unwrap());
    }
}

#[test]
fn plan_serialization_round_trip_gives_identical_model() {
    let model = generate(&SynthConfig { blocks: 4, ..SynthConfig::default() }).unwrap();
    let metrics = profile_model(&model, &ProfileOptions::default()).unwrap();
    let plan = desk_plan(&metrics);
    let direct = apply_plan(&model, &plan).unwrap();
    let reparsed = QuantPlan::from_json(&plan.to_json().unwrap()).unwrap();
    assert_eq!(reparsed, plan);

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    direct.save(&a).unwrap();
    apply_plan(&model, &reparsed).unwrap().save(&b).unwrap();
    assert_eq!(read_bytes(&a, ".bin"), read_bytes(&b, ".bin"));
    assert_eq!(read_bytes(&a, ".manifest.json"), read_bytes(&b, ".manifest.json"));
}

#[test]
fn plan_model_mismatch_lists_difference() {
    let model = generate(&SynthConfig { blocks: 4, ..SynthConfig::default() }).unwrap();
    let metrics = profile_model(&model, &ProfileOptions::default()).unwrap();
    let mut plan = desk_plan(&metrics);
    let a = plan.assignments.remove("blocks.2.o").unwrap();
    plan.assignments.insert("blocks.9.o".into(), a);
    let err = apply_plan(&model, &plan).unwrap_err().to_string();
    assert!(err.contains("blocks.2.o") && err.contains("blocks.9.o"), "{err}");
}

#[test]
fn quantized_output_respects_plan_bound() {
    let model = generate(&SynthConfig { blocks: 4, ..SynthConfig::default() }).unwrap();
    let plan = desk_plan(&profile_model(&model, &ProfileOptions::default()).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q");
    apply_plan(&model, &plan).unwrap().save(&path).unwrap();
    let back = QuantizedModel::load(&path).unwrap();
    for (w, q) in model.layers.iter().zip(&back.layers) {
        assert_eq!(q.grouping, plan.assignments[&w.name].grouping);
        let d = dequantize_exact(q);
        for i in 0..w.rows {
            for j in 0..w.cols {
                let s = q.scale_at(i, j) as f64;
                assert!((w.get(i, j) as f64 - d.get(i, j)).abs() <= s / 2.0 + 1e-6 * s);
            }
        }
    }
}

#[test]
fn sweep_matches_direct_computation() {
    let cfg = SynthConfig { blocks: 2, dim: 1024, wall_blocks: vec![0, 1], seed: 11, ..SynthConfig::default() };
    let model = generate(&cfg).unwrap();
    let table = sweep_group_size(&model, &Selection::MaxAbsThreshold(2.0), &[256, 512, 1024, 512], QuantParams::int8()).unwrap();
    assert_eq!(table.rows.iter().map(|r| r.group_size).collect::<Vec<_>>(), vec![Some(256), Some(512), Some(1024)]);
    assert_eq!(table.layers.len(), 10);

    for row in &table.rows {
        let g = row.group_size.unwrap();
        for (name, r) in table.layers.iter().zip(&row.layer_rmse) {
            let w = model.layers.iter().find(|t| &t.name == name).unwrap();
            assert_eq!(*r, layer_rmse(w, GroupingScheme::PerGroup { group_size: g }, QuantParams::int8()).unwrap());
        }
    }
    // g = M reproduces the per-channel baseline
    assert_eq!(table.rows[2].layer_rmse, table.baseline.layer_rmse);
    // smaller groups never hurt on these wall layers
    let agg: Vec<f64> = table.rows.iter().map(|r| r.aggregate_rmse).collect();
    assert!(agg[0] <= agg[1] && agg[1] <= agg[2], "{agg:?}");
    for k in 0..table.layers.len() {
        assert!(table.rows[0].layer_rmse[k] <= table.rows[2].layer_rmse[k]);
    }
}

#[test]
fn per_group_kernel_tracks_fp_product_better_on_walls() {
    let cfg = SynthConfig { blocks: 1, dim: 128, wall_blocks: vec![0], seed: 2, ..SynthConfig::default() };
    let w = generate(&cfg).unwrap().layers[0].clone();
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    let n = Normal::new(0.0f32, 1.0).unwrap();
    let a = Tensor::from_fn("a", 128, 16, |_, _| n.sample(&mut rng));

    let exact = reference_matmul_fp(&w, &a).unwrap();
    let qa = quantize_activation(&a, QuantParams::int8()).unwrap();
    let deviation = |grouping| {
        let qw = quantize_weight(&w, grouping, QuantParams::int8()).unwrap();
        let out = matmul(&MatmulOperands::new(&qw, &qa).unwrap()).unwrap();
        out.data.iter().zip(&exact.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    };
    let pc = deviation(GroupingScheme::PerChannel);
    let pg = deviation(GroupingScheme::PerGroup { group_size: 16 });
    assert!(pg < pc, "per-group {pg} vs per-channel {pc}");
}

#[test]
fn metrics_csv_round_trip() {
    let model = generate(&SynthConfig { blocks: 4, ..SynthConfig::default() }).unwrap();
    let rows = profile_table(&model, QuantParams::int8(), WallDetectorConfig::default(), &[16, 32]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    write_metrics_csv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with(
        "layer_index,name,block,kind,max_abs,rmse_pc,rmse_g16,rmse_g32,wall_count,rows,cols,wall_columns\n"
    ));
    assert!(!text.contains('\r'));
    assert_eq!(read_metrics_csv(&path, QuantParams::int8()).unwrap(), rows);
}

fn read_bytes(prefix: &Path, suffix: &str) -> Vec<u8> {
    std::fs::read(format!("{}{suffix}", prefix.display())).unwrap()
}

fn run(args: &[&dyn AsRef<std::ffi::OsStr>]) -> i32 {
    let mut argv = vec![OsString::from("quantkit")];
    argv.extend(args.iter().map(|a| a.as_ref().to_os_string()));
    cli::run(argv)
}

#[test]
fn cli_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (m, r, p, q, j) = (d.join("m"), d.join("r.csv"), d.join("p.json"), d.join("q"), d.join("plot.json"));

    assert_eq!(run(&[&"synth", &"--blocks", &"80", &"--dim", &"64", &"--seed", &"7", &"--out", &m]), 0);
    assert_eq!(run(&[&"analyze", &m, &"--out", &r, &"--json", &j, &"--group-size", &"16"]), 0);
    let csv = std::fs::read_to_string(&r).unwrap();
    assert_eq!(csv.lines().count(), 561);

    let plot: serde_json::Value = serde_json::from_slice(&std::fs::read(&j).unwrap()).unwrap();
    assert_eq!(plot["x"].as_array().unwrap().len(), 560);
    assert_eq!(plot["series"]["rmse"].as_array().unwrap().len(), 560);
    assert_eq!(plot["series"]["max_abs"].as_array().unwrap().len(), 560);

    assert_eq!(run(&[&"plan", &r, &"--max-abs-threshold", &"2.0", &"--group-size", &"16", &"--out", &p]), 0);
    let plan: serde_json::Value = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
    assert_eq!(format!("{:.4}", plan["per_group_fraction"].as_f64().unwrap()), "0.0268");

    assert_eq!(run(&[&"quantize", &m, &"--plan", &p, &"--out", &q]), 0);
    let (manifest, _) = read_model(&q).unwrap();
    assert_eq!(manifest.records.len(), 1120);
    assert_eq!(manifest.record("blocks.0.q").unwrap().grouping, Some(GroupingScheme::PerGroup { group_size: 16 }));
    assert_eq!(manifest.record("blocks.2.q").unwrap().grouping, Some(GroupingScheme::PerChannel));

    let sweep = d.join("sweep.csv");
    assert_eq!(run(&[&"sweep", &m, &"--sizes", &"8,16,32,64", &"--out", &sweep]), 0);
    assert_eq!(std::fs::read_to_string(&sweep).unwrap().lines().count(), 6);

    let tasks = d.join("tasks.csv");
    std::fs::write(&tasks, "task,accuracy,questions\nA,0.9,10000\nB,0.5,500\n").unwrap();
    let summary = d.join("summary.json");
    assert_eq!(run(&[&"report", &tasks, &"--out", &summary]), 0);
    let s: serde_json::Value = serde_json::from_slice(&std::fs::read(&summary).unwrap()).unwrap();
    assert!((s["wt_avg"].as_f64().unwrap() - 0.8810).abs() < 5e-5);

    assert_eq!(run(&[&"check-matmul", &"--seed", &"3"]), 0);
}

#[test]
fn cli_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let m = d.join("m");
    assert_eq!(run(&[&"synth", &"--blocks", &"2", &"--wall-blocks", &"5", &"--out", &m]), 1);
    assert_eq!(run(&[&"synth", &"--wall-kinds", &"o", &"--out", &m]), 1);
    assert_eq!(run(&[&"synth", &"--bogus"]), 2);
    assert_eq!(run(&[&"analyze", &m]), 2);
    let tasks = d.join("tasks.csv");
    std::fs::write(&tasks, "task,accuracy,questions\nA,1.5,10\n").unwrap();
    assert_eq!(run(&[&"report", &tasks]), 1);
}
