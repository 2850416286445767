use std::path::Path;
use std::time::Instant;

use serde_json::{json, Value};

use patconv::admm::net::ConvLayer;
use patconv::admm::toy::ToyTask;
use patconv::admm::{check_feasible, parse_assignments, prune, Loss, PruneConfig, TinyNet};
use patconv::bench::{bench_dense, bench_models, pattern_sweep, BenchOptions, BenchReport};
use patconv::exec::ExecConfig;
use patconv::fkw::{CsrLayer, FkwModel};
use patconv::lr::lr_emit;
use patconv::pattern::{build_pattern_set, PatternSet};
use patconv::pipeline::{encode_net, manifest_for, run_layers};
use patconv::reorder::{reorder, SparseLayer};
use patconv::synth::{random_dense, random_input};
use patconv::tensor::{FeatureMap, LayerShape};
use patconv::tune::{feature_names, history_csv, median_time_ns, tune};
use patconv::{Error, Result};

use crate::files::{
    load_feature_map, load_fkw, load_manifest, load_net, load_patterns, read_bytes, read_text,
    write_out,
};
use crate::{Cli, Command};

pub fn dispatch(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Parameter("--threads must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::Parameter(format!("cannot start {} threads: {e}", cli.threads)))?;
    pool.install(|| run_command(cli))
}

fn print(v: &Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(v).expect("json values serialize")
    );
}

fn pretty<T: serde::Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s.into_bytes()
}

fn run_command(cli: &Cli) -> Result<()> {
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::GenPatterns {
            model,
            k,
            out: name,
        } => gen_patterns(cli, model.as_deref(), *k, name),
        Command::Prune {
            model,
            patterns,
            k,
            rate,
            first_layer_rate,
            iterations,
            epochs,
            finetune_epochs,
            lr,
            rho,
        } => {
            let task = ToyTask::pretrained(cli.seed)?;
            let net = match model {
                Some(p) => load_net(p)?,
                None => task.net.clone(),
            };
            let set = match patterns {
                Some(p) => load_patterns(p)?,
                None => {
                    let set = build_pattern_set(&conv_tensors(&net)?, *k)?;
                    write_out(out, "patterns.json", (set.to_json() + "\n").as_bytes())?;
                    set
                }
            };
            let cfg = PruneConfig {
                connectivity_rate: *rate,
                first_layer_rate: *first_layer_rate,
                admm_iterations: *iterations,
                epochs_per_iteration: *epochs,
                finetune_epochs: *finetune_epochs,
                learning_rate: *lr,
                rho: *rho,
                seed: cli.seed,
                ..PruneConfig::new(set.clone())
            };
            prune_cmd(out, &task, &net, &cfg)
        }
        Command::Reorder {
            model,
            patterns,
            out: name,
        } => {
            let net = load_net(model)?;
            let set = load_patterns(patterns)?;
            let plans = (0..net.convs.len())
                .map(|i| Ok(reorder(&SparseLayer::from_pruned(&net.conv_tensor(i)?, &set)?)?.1))
                .collect::<Result<Vec<_>>>()?;
            let path = write_out(out, name, &pretty(&json!({ "plans": plans })))?;
            print(&json!({ "reorder": path, "layers": plans.len() }));
            Ok(())
        }
        Command::Encode {
            model,
            patterns,
            manifest,
        } => {
            let net = load_net(model)?;
            let set = load_patterns(patterns)?;
            let models = encode_net(&net, &set)?;
            let m = manifest_for(&models, &set);
            let mut layers = Vec::new();
            for (rec, fkw) in m.layers.iter().zip(&models) {
                write_out(out, &rec.fkw_file, &fkw.to_bytes())?;
                write_out(out, &format!("{}.json", rec.fkw_file), &pretty(fkw))?;
                let csr = CsrLayer::from_dense(&fkw.to_dense()?);
                layers.push(json!({
                    "name": rec.name,
                    "kernels": fkw.total_kernels(),
                    "fkw_structure_bytes": fkw.structure_overhead(),
                    "csr_structure_bytes": csr.structure_overhead(),
                }));
            }
            let path = write_out(out, manifest, lr_emit(&m).as_bytes())?;
            print(&json!({ "manifest": path, "layers": layers }));
            Ok(())
        }
        Command::Decode {
            model,
            out: name,
            json,
        } => {
            let fkw = load_fkw(model)?;
            let dense = fkw.to_dense()?;
            let net = TinyNet {
                convs: vec![ConvLayer {
                    shape: dense.shape,
                    weights: dense.data.iter().map(|&v| v as f64).collect(),
                    bias: dense.bias.iter().map(|&v| v as f64).collect(),
                }],
                fc: None,
                loss: Loss::MeanSquared,
            };
            let path = write_out(out, name, &net.to_ptk_bytes())?;
            if let Some(j) = json {
                write_out(out, j, &pretty(&fkw))?;
            }
            print(&json!({ "dense": path, "nonzero_kernels": dense.nonzero_kernels() }));
            Ok(())
        }
        Command::Validate { path } => {
            let kind = validate(path)?;
            print(&json!({ "path": path, "kind": kind, "valid": true }));
            Ok(())
        }
        Command::Run {
            model,
            manifest,
            input,
            config,
            stats,
            out: name,
        } => run_cmd(
            cli,
            model.as_deref(),
            manifest.as_deref(),
            input.as_deref(),
            config.as_deref(),
            stats.as_deref(),
            name,
        ),
        Command::Tune {
            model,
            manifest,
            budget,
            out: name,
            history,
        } => tune_cmd(
            cli,
            model.as_deref(),
            manifest.as_deref(),
            *budget,
            name,
            history,
        ),
        Command::Bench {
            manifest,
            shape,
            k,
            rate,
            patterns,
            repeats,
            budget,
            out: name,
        } => {
            let [ic, oc, h, w] = shape[..] else {
                return Err(Error::Parameter("--shape takes in,out,height,width".into()));
            };
            let opts = BenchOptions {
                k: *k,
                rate: *rate,
                seed: cli.seed,
                repeats: *repeats,
                tune_budget: *budget,
                pattern_counts: patterns.clone(),
            };
            let dense = random_dense(LayerShape::conv3x3(ic, oc, h, w)?, cli.seed);
            let report = match manifest {
                None => bench_dense("synthetic", &dense, &opts)?,
                Some(p) => {
                    let (m, models) = load_manifest(p)?;
                    let named: Vec<_> = m
                        .layers
                        .iter()
                        .map(|l| l.name.clone())
                        .zip(models)
                        .collect();
                    let mut report = bench_models(&named, &opts)?;
                    let input = random_input(&dense.shape, cli.seed.wrapping_add(1));
                    report.pattern_sweep = pattern_sweep(&dense, &input, &opts)?;
                    report
                }
            };
            let json_path = write_out(out, &format!("{name}.json"), report.to_json().as_bytes())?;
            let md = report.to_markdown();
            write_out(out, &format!("{name}.md"), md.as_bytes())?;
            log::info!("bench report at {}", json_path.display());
            print!("{md}");
            Ok(())
        }
    }
}

fn conv_tensors(net: &TinyNet) -> Result<Vec<patconv::tensor::WeightTensor>> {
    (0..net.convs.len()).map(|i| net.conv_tensor(i)).collect()
}

fn gen_patterns(cli: &Cli, model: Option<&Path>, k: usize, name: &str) -> Result<()> {
    let out = cli.out_dir.as_path();
    let net = match model {
        Some(p) => load_net(p)?,
        None => {
            let net = ToyTask::pretrained(cli.seed)?.net;
            write_out(out, "toy.ptk", &net.to_ptk_bytes())?;
            net
        }
    };
    let set = build_pattern_set(&conv_tensors(&net)?, k)?;
    let mut text = set.to_json();
    text.push('\n');
    let path = write_out(out, name, text.as_bytes())?;
    print(&json!({ "patterns": path, "k": set.k() }));
    Ok(())
}

fn prune_cmd(out: &Path, task: &ToyTask, net: &TinyNet, cfg: &PruneConfig) -> Result<()> {
    let first = net
        .convs
        .first()
        .ok_or_else(|| Error::EmptyInput("network has no conv layers".into()))?;
    if (
        first.shape.in_channels,
        first.shape.input_h,
        first.shape.input_w,
    ) != (task.train.channels, task.train.height, task.train.width)
    {
        return Err(Error::Shape(
            "pruning trains on the 1x8x8 toy task; the model input differs".into(),
        ));
    }
    let result = prune(net, &task.train, cfg)?;
    check_feasible(&result.net, &result.layers, &cfg.pattern_set).map_err(Error::Precondition)?;
    write_out(out, "pruned.ptk", &result.net.to_ptk_bytes())?;
    write_out(
        out,
        "assignments.json",
        (result.assignments_json() + "\n").as_bytes(),
    )?;
    write_out(out, "trace.csv", result.trace_csv().as_bytes())?;
    let layers: Vec<Value> = result
        .layers
        .iter()
        .zip(&result.net.convs)
        .map(|(l, c)| {
            let nonzero = c.weights.chunks(c.shape.kernel_len()).filter(|k| k.iter().any(|&v| v != 0.0)).count();
            json!({ "alpha": l.mask.alpha, "nonzero_kernels": nonzero, "kernels": c.shape.kernel_count() })
        })
        .collect();
    print(&json!({
        "dense_test_accuracy": net.accuracy(&task.test),
        "pruned_test_accuracy": result.net.accuracy(&task.test),
        "layers": layers,
    }));
    Ok(())
}

fn run_cmd(
    cli: &Cli,
    model: Option<&Path>,
    manifest: Option<&Path>,
    input: Option<&Path>,
    config: Option<&Path>,
    stats_name: Option<&str>,
    name: &str,
) -> Result<()> {
    let out = cli.out_dir.as_path();
    let override_cfg = match config {
        Some(p) => Some(serde_json::from_str::<ExecConfig>(&read_text(p)?)?),
        None => None,
    };
    let (models, cfgs, relu) = match (model, manifest) {
        (Some(p), _) => {
            let m = load_fkw(p)?;
            let cfg = override_cfg.unwrap_or_else(|| ExecConfig::default_for(&m.shape));
            (vec![m], vec![cfg], false)
        }
        (None, Some(p)) => {
            let (man, models) = load_manifest(p)?;
            let cfgs = man
                .layers
                .iter()
                .map(|l| override_cfg.map_or_else(|| l.exec_config(), |c| c.clamped(&l.shape)))
                .collect();
            (models, cfgs, true)
        }
        (None, None) => return Err(Error::Parameter("run needs --model or --manifest".into())),
    };
    let first = &models[0].shape;
    let input = match input {
        Some(p) => load_feature_map(p)?,
        None => {
            let x = random_input(first, cli.seed);
            write_out(out, "input.ptk", &x.to_ptk_bytes())?;
            x
        }
    };
    let layers: Vec<(&FkwModel, ExecConfig)> = models.iter().zip(cfgs).collect();
    let start = Instant::now();
    let (output, stats) = run_layers(&input, &layers, relu, cli.threads > 1)?;
    let wall = start.elapsed().as_nanos() as u64;
    let path = write_out(out, name, &output.to_ptk_bytes())?;
    let stats_json = json!({
        "input_element_loads": stats.input_element_loads,
        "weight_loads": stats.weight_loads,
        "branch_events": stats.branch_events,
        "wall_time_ns": wall,
    });
    if let Some(s) = stats_name {
        write_out(out, s, &pretty(&stats_json))?;
    }
    print(&json!({ "output": path, "stats": stats_json }));
    Ok(())
}

fn tune_cmd(
    cli: &Cli,
    model: Option<&Path>,
    manifest: Option<&Path>,
    budget: usize,
    name: &str,
    history: &str,
) -> Result<()> {
    let out = cli.out_dir.as_path();
    let mut csv = feature_names().join(",") + ",time_ns\n";
    let mut tune_one = |m: &FkwModel| -> Result<(ExecConfig, Value)> {
        let input = random_input(&m.shape, cli.seed.wrapping_add(1));
        let (best, records) = tune(m, &input, budget, cli.seed)?;
        let rows = history_csv(&records);
        csv.push_str(rows.split_once('\n').map_or("", |(_, body)| body));
        let default = ExecConfig::default_for(&m.shape);
        let summary = json!({
            "best": best,
            "best_time_ns": median_time_ns(m, &input, &best, 5)?,
            "default_time_ns": median_time_ns(m, &input, &default, 5)?,
            "evaluations": records.len(),
        });
        Ok((best, summary))
    };
    let summary = match (model, manifest) {
        (Some(p), _) => {
            let (best, summary) = tune_one(&load_fkw(p)?)?;
            write_out(out, name, &pretty(&best))?;
            summary
        }
        (None, Some(p)) => {
            let (mut man, models) = load_manifest(p)?;
            let src_dir = p.parent().unwrap_or(Path::new("."));
            let same_dir = same_directory(src_dir, out);
            let mut layers = Vec::new();
            for (rec, m) in man.layers.iter_mut().zip(&models) {
                let (best, summary) = tune_one(m)?;
                rec.set_exec_config(&best);
                if !same_dir {
                    let abs = std::fs::canonicalize(src_dir.join(&rec.fkw_file))?;
                    rec.fkw_file = abs.to_string_lossy().into_owned();
                }
                layers.push(summary);
            }
            let name = if name == "best.json" {
                "tuned.lr.json"
            } else {
                name
            };
            write_out(out, name, lr_emit(&man).as_bytes())?;
            json!({ "layers": layers })
        }
        (None, None) => return Err(Error::Parameter("tune needs --model or --manifest".into())),
    };
    write_out(out, history, csv.as_bytes())?;
    print(&summary);
    Ok(())
}

fn same_directory(a: &Path, b: &Path) -> bool {
    let canon = |p: &Path| {
        std::fs::canonicalize(if p.as_os_str().is_empty() {
            Path::new(".")
        } else {
            p
        })
        .ok()
    };
    canon(a).is_some() && canon(a) == canon(b)
}

/// Recognizes the artifact at `path` from its content and checks it. Returns its kind.
fn validate(path: &Path) -> Result<&'static str> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(patconv::fkw::FKW_MAGIC) {
        FkwModel::from_bytes(&bytes)?.validate()?;
        return Ok("fkw");
    }
    if bytes.starts_with(patconv::tensor::PTK_MAGIC) {
        if TinyNet::from_ptk_bytes(&bytes).is_ok() {
            return Ok("network");
        }
        FeatureMap::from_ptk_bytes(&bytes)?;
        return Ok("feature_map");
    }
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Parameter("unrecognized binary file".into()))?;
    let Ok(value) = serde_json::from_str::<Value>(&text) else {
        return validate_csv(&text);
    };
    let has = |key: &str| value.get(key).is_some();
    if value.is_array() {
        PatternSet::from_json(&text)?;
        Ok("pattern_set")
    } else if has("options") {
        serde_json::from_value::<BenchReport>(value)?;
        Ok("bench_report")
    } else if has("version") {
        load_manifest(path)?;
        Ok("manifest")
    } else if has("offset") {
        serde_json::from_value::<FkwModel>(value)?.validate()?;
        Ok("fkw")
    } else if has("plans") {
        let plans: Vec<patconv::reorder::ReorderPlan> =
            serde_json::from_value(value["plans"].clone())?;
        plans.iter().try_for_each(|p| p.validate())?;
        Ok("reorder_plans")
    } else if has("layers") {
        parse_assignments(&text)?;
        Ok("assignments")
    } else if has("loop_permutation") {
        serde_json::from_value::<ExecConfig>(value)?;
        Ok("exec_config")
    } else if has("wall_time_ns") {
        Ok("run_stats")
    } else {
        Err(Error::Parameter("unrecognized JSON artifact".into()))
    }
}

fn validate_csv(text: &str) -> Result<&'static str> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let kind = match header.last() {
        Some(&"time_ns") => "tune_history",
        Some(&"residual_y") => "prune_trace",
        _ => return Err(Error::Parameter("unrecognized text artifact".into())),
    };
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() || cells.iter().any(|c| c.parse::<f64>().is_err()) {
            return Err(patconv::Error::Format {
                array: "csv".into(),
                position: i + 1,
                detail: format!("expected {} numeric cells", header.len()),
            });
        }
    }
    Ok(kind)
}
