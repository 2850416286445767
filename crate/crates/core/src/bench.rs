//! Ablation benchmark: dense oracle, CSR executor and the FKW executor with
//! optimizations switched on one at a time, plus storage and pattern-count
//! tables. Reports serialize to JSON and render to Markdown.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::model::lre_load_model;
use crate::exec::{conv_csr, ExecConfig, LoadStats};
use crate::fkw::{overhead_saving, CsrLayer, FkwModel};
use crate::synth::{prune_dense, random_input};
use crate::tensor::{conv_dense, FeatureMap, LayerShape, WeightTensor};
use crate::tune::{median_time_ns, tune};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub k: usize,
    pub rate: f64,
    pub seed: u64,
    /// Timed runs per variant; the median is reported.
    pub repeats: usize,
    /// Tuner evaluations for the `fkw_tuned` row.
    pub tune_budget: usize,
    /// Pattern-set sizes for the sweep table; empty skips the sweep.
    pub pattern_counts: Vec<usize>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            k: 8,
            rate: 3.6,
            seed: 0,
            repeats: 5,
            tune_budget: 64,
            pattern_counts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub name: String,
    pub time_ns: f64,
    /// Absent for the dense and CSR baselines, which are not instrumented.
    pub stats: Option<LoadStats>,
    pub config: Option<ExecConfig>,
    pub speedup_vs_dense: f64,
    pub speedup_vs_csr: f64,
    /// True when the row's config was chosen by timing and may differ between runs.
    pub timing_derived: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageRow {
    pub layer: String,
    pub kernels: usize,
    pub fkw_structure_bytes: usize,
    pub csr_structure_bytes: usize,
    pub saving_percent: f64,
}

impl StorageRow {
    pub fn of(layer: &str, model: &FkwModel) -> Result<Self> {
        let csr = CsrLayer::from_dense(&model.to_dense()?);
        Ok(Self {
            layer: layer.to_string(),
            kernels: model.total_kernels(),
            fkw_structure_bytes: model.structure_overhead(),
            csr_structure_bytes: csr.structure_overhead(),
            saving_percent: overhead_saving(model, &csr),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternRow {
    pub k: usize,
    pub kernels: usize,
    pub time_ns: f64,
    pub branch_events: u64,
    pub input_element_loads: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBench {
    pub name: String,
    pub shape: LayerShape,
    pub variants: Vec<VariantRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub options: BenchOptions,
    pub layers: Vec<LayerBench>,
    pub storage: Vec<StorageRow>,
    pub pattern_sweep: Vec<PatternRow>,
}

fn median_of<F: FnMut() -> Result<()>>(repeats: usize, mut f: F) -> Result<f64> {
    let mut times = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_nanos().max(1) as f64);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Benchmarks one encoded layer against its masked dense weights.
pub fn bench_layer(
    name: &str,
    model: &FkwModel,
    input: &FeatureMap,
    opts: &BenchOptions,
) -> Result<LayerBench> {
    let dense = model.to_dense()?;
    let csr = CsrLayer::from_dense(&dense);
    let dense_time = median_of(opts.repeats, || conv_dense(input, &dense).map(drop))?;
    let csr_time = median_of(opts.repeats, || conv_csr(input, &csr).map(drop))?;

    let shape = &model.shape;
    let reorder_only = ExecConfig {
        unroll_oc: 1,
        lre_enabled: false,
        ..ExecConfig::default_for(shape)
    };
    let (tuned, _) = tune(model, input, opts.tune_budget, opts.seed)?;
    let fkw_rows = [
        ("fkw_no_opt", ExecConfig::no_opt(shape), false),
        ("fkw_reorder", reorder_only, false),
        ("fkw_lre", ExecConfig::default_for(shape), false),
        ("fkw_tuned", tuned, true),
    ];

    let row = |name: &str, time: f64, stats, config, timing_derived| VariantRow {
        name: name.to_string(),
        time_ns: time,
        stats,
        config,
        speedup_vs_dense: dense_time / time,
        speedup_vs_csr: csr_time / time,
        timing_derived,
    };
    let mut variants = vec![
        row("dense", dense_time, None, None, false),
        row("csr", csr_time, None, None, false),
    ];
    for (label, cfg, derived) in fkw_rows {
        let time = median_time_ns(model, input, &cfg, opts.repeats)?;
        variants.push(row(
            label,
            time,
            Some(lre_load_model(model, &cfg)?),
            Some(cfg),
            derived,
        ));
    }
    Ok(LayerBench {
        name: name.to_string(),
        shape: *shape,
        variants,
    })
}

/// Pattern-count sweep: re-prunes `dense` for each `k` and times the default config.
pub fn pattern_sweep(
    dense: &WeightTensor,
    input: &FeatureMap,
    opts: &BenchOptions,
) -> Result<Vec<PatternRow>> {
    opts.pattern_counts
        .iter()
        .map(|&k| {
            let (model, _) = prune_dense(dense, k, opts.rate)?;
            let cfg = ExecConfig::default_for(&model.shape);
            let stats = lre_load_model(&model, &cfg)?;
            Ok(PatternRow {
                k,
                kernels: model.total_kernels(),
                time_ns: median_time_ns(&model, input, &cfg, opts.repeats)?,
                branch_events: stats.branch_events,
                input_element_loads: stats.input_element_loads,
            })
        })
        .collect()
}

/// Full report for one dense layer: prune at `opts.k`, run every variant, then sweep.
pub fn bench_dense(name: &str, dense: &WeightTensor, opts: &BenchOptions) -> Result<BenchReport> {
    let input = random_input(&dense.shape, opts.seed.wrapping_add(1));
    let (model, _) = prune_dense(dense, opts.k, opts.rate)?;
    Ok(BenchReport {
        options: opts.clone(),
        layers: vec![bench_layer(name, &model, &input, opts)?],
        storage: vec![StorageRow::of(name, &model)?],
        pattern_sweep: pattern_sweep(dense, &input, opts)?,
    })
}

/// Report over already-encoded layers (for example a model written by `encode`).
pub fn bench_models(layers: &[(String, FkwModel)], opts: &BenchOptions) -> Result<BenchReport> {
    if layers.is_empty() {
        return Err(Error::EmptyInput("no layers to benchmark".into()));
    }
    let mut report = BenchReport {
        options: opts.clone(),
        layers: Vec::new(),
        storage: Vec::new(),
        pattern_sweep: Vec::new(),
    };
    for (i, (name, model)) in layers.iter().enumerate() {
        let input = random_input(&model.shape, opts.seed.wrapping_add(1 + i as u64));
        report.layers.push(bench_layer(name, model, &input, opts)?);
        report.storage.push(StorageRow::of(name, model)?);
    }
    Ok(report)
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable") + "\n"
    }

    /// The report with every timing-dependent value removed: wall times,
    /// speedups, and config and stats of timing-derived rows.
    pub fn non_timing(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report is serializable");
        for layer in v["layers"].as_array_mut().into_iter().flatten() {
            for row in layer["variants"].as_array_mut().into_iter().flatten() {
                let obj = row.as_object_mut().expect("row is an object");
                for key in ["time_ns", "speedup_vs_dense", "speedup_vs_csr"] {
                    obj.remove(key);
                }
                if obj["timing_derived"] == serde_json::Value::Bool(true) {
                    obj.remove("config");
                    obj.remove("stats");
                }
            }
        }
        for row in v["pattern_sweep"].as_array_mut().into_iter().flatten() {
            row.as_object_mut()
                .expect("row is an object")
                .remove("time_ns");
        }
        v
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        for layer in &self.layers {
            let s = &layer.shape;
            let _ = writeln!(
                md,
                "## {} ({}x{}x{}x{}, input {}x{}, stride {})\n",
                layer.name,
                s.out_channels,
                s.in_channels,
                s.kernel_h,
                s.kernel_w,
                s.input_h,
                s.input_w,
                s.stride
            );
            md.push_str("| variant | time (us) | vs dense | vs CSR | input loads | weight loads | branches |\n");
            md.push_str("|---|---:|---:|---:|---:|---:|---:|\n");
            for r in &layer.variants {
                let (il, wl, br) = match &r.stats {
                    Some(st) => (
                        st.input_element_loads.to_string(),
                        st.weight_loads.to_string(),
                        st.branch_events.to_string(),
                    ),
                    None => ("-".into(), "-".into(), "-".into()),
                };
                let _ = writeln!(
                    md,
                    "| {} | {:.1} | {:.2}x | {:.2}x | {il} | {wl} | {br} |",
                    r.name,
                    r.time_ns / 1e3,
                    r.speedup_vs_dense,
                    r.speedup_vs_csr
                );
            }
            md.push('\n');
        }
        if !self.storage.is_empty() {
            md.push_str("## Index storage\n\n| layer | kernels | FKW bytes | CSR bytes | saving |\n|---|---:|---:|---:|---:|\n");
            for r in &self.storage {
                let _ = writeln!(
                    md,
                    "| {} | {} | {} | {} | {:.1}% |",
                    r.layer,
                    r.kernels,
                    r.fkw_structure_bytes,
                    r.csr_structure_bytes,
                    r.saving_percent
                );
            }
            md.push('\n');
        }
        if !self.pattern_sweep.is_empty() {
            md.push_str("## Pattern count\n\n| k | kernels | time (us) | branches | input loads |\n|---:|---:|---:|---:|---:|\n");
            for r in &self.pattern_sweep {
                let _ = writeln!(
                    md,
                    "| {} | {} | {:.1} | {} | {} |",
                    r.k,
                    r.kernels,
                    r.time_ns / 1e3,
                    r.branch_events,
                    r.input_element_loads
                );
            }
        }
        md
    }
}
