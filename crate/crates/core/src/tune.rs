//! Genetic-algorithm search over execution configurations, and a least-squares
//! estimator of execution time trained on the search history.

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{conv_fkw, ExecConfig, LoopPermutation};
use crate::fkw::FkwModel;
use crate::tensor::{FeatureMap, LayerShape};

pub const GENES: usize = 7;

/// Gene `i` indexes into the `i`-th option list of a [`SearchSpace`]:
/// permutation, tile h/w/oc/ic (powers of two), unroll oc/iw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Chromosome {
    pub genes: [usize; GENES],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub permutations: Vec<LoopPermutation>,
    pub tile_h: Vec<usize>,
    pub tile_w: Vec<usize>,
    pub tile_oc: Vec<usize>,
    pub tile_ic: Vec<usize>,
    pub unroll_oc: Vec<usize>,
    pub unroll_iw: Vec<usize>,
    pub lre_enabled: bool,
    pub reorder_enabled: bool,
}

fn powers_up_to(n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..).map(|e| 1usize << e).take_while(|&p| p < n).collect();
    v.push(n);
    v
}

impl SearchSpace {
    /// Powers of two up to each layer extent (the extent itself included),
    /// unroll factors 1, 2 and 4, all supported permutations.
    pub fn for_shape(shape: &LayerShape) -> Self {
        Self {
            permutations: LoopPermutation::ALL.to_vec(),
            tile_h: powers_up_to(shape.output_h()),
            tile_w: powers_up_to(shape.output_w()),
            tile_oc: powers_up_to(shape.out_channels),
            tile_ic: powers_up_to(shape.in_channels),
            unroll_oc: vec![1, 2, 4],
            unroll_iw: vec![1, 2, 4],
            lre_enabled: true,
            reorder_enabled: true,
        }
    }

    /// A space holding exactly one configuration.
    pub fn single(cfg: &ExecConfig) -> Self {
        Self {
            permutations: vec![cfg.loop_permutation],
            tile_h: vec![cfg.tile_h],
            tile_w: vec![cfg.tile_w],
            tile_oc: vec![cfg.tile_oc],
            tile_ic: vec![cfg.tile_ic],
            unroll_oc: vec![cfg.unroll_oc],
            unroll_iw: vec![cfg.unroll_iw],
            lre_enabled: cfg.lre_enabled,
            reorder_enabled: cfg.reorder_enabled,
        }
    }

    pub fn bounds(&self) -> [usize; GENES] {
        [
            self.permutations.len(),
            self.tile_h.len(),
            self.tile_w.len(),
            self.tile_oc.len(),
            self.tile_ic.len(),
            self.unroll_oc.len(),
            self.unroll_iw.len(),
        ]
    }

    pub fn size(&self) -> usize {
        self.bounds().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bounds().contains(&0) {
            return Err(Error::Config("every gene needs at least one option".into()));
        }
        Ok(())
    }

    /// Total decoding: out-of-range genes saturate and the result is clamped to the layer.
    pub fn decode(&self, c: &Chromosome, shape: &LayerShape) -> ExecConfig {
        let pick = |opts: &[usize], g: usize| opts[g.min(opts.len() - 1)];
        ExecConfig {
            loop_permutation: self.permutations[c.genes[0].min(self.permutations.len() - 1)],
            tile_h: pick(&self.tile_h, c.genes[1]),
            tile_w: pick(&self.tile_w, c.genes[2]),
            tile_oc: pick(&self.tile_oc, c.genes[3]),
            tile_ic: pick(&self.tile_ic, c.genes[4]),
            unroll_oc: pick(&self.unroll_oc, c.genes[5]),
            unroll_iw: pick(&self.unroll_iw, c.genes[6]),
            lre_enabled: self.lre_enabled,
            reorder_enabled: self.reorder_enabled,
        }
        .clamped(shape)
    }

    /// Nearest chromosome for a configuration (closest option per gene).
    pub fn encode(&self, cfg: &ExecConfig) -> Chromosome {
        let near = |opts: &[usize], v: usize| {
            (0..opts.len())
                .min_by_key(|&i| opts[i].abs_diff(v))
                .expect("validated options")
        };
        Chromosome {
            genes: [
                self.permutations
                    .iter()
                    .position(|&p| p == cfg.loop_permutation)
                    .unwrap_or(0),
                near(&self.tile_h, cfg.tile_h),
                near(&self.tile_w, cfg.tile_w),
                near(&self.tile_oc, cfg.tile_oc),
                near(&self.tile_ic, cfg.tile_ic),
                near(&self.unroll_oc, cfg.unroll_oc),
                near(&self.unroll_iw, cfg.unroll_iw),
            ],
        }
    }

    fn random(&self, rng: &mut ChaCha8Rng) -> Chromosome {
        let b = self.bounds();
        Chromosome {
            genes: std::array::from_fn(|i| rng.random_range(0..b[i])),
        }
    }
}

/// Scores a configuration; lower is better.
pub trait Fitness {
    fn evaluate(&mut self, cfg: &ExecConfig) -> Result<f64>;
}

impl<F: FnMut(&ExecConfig) -> Result<f64>> Fitness for F {
    fn evaluate(&mut self, cfg: &ExecConfig) -> Result<f64> {
        self(cfg)
    }
}

/// Median wall time in nanoseconds of `repeats` single-threaded runs.
pub fn median_time_ns(
    model: &FkwModel,
    input: &FeatureMap,
    cfg: &ExecConfig,
    repeats: usize,
) -> Result<f64> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        std::hint::black_box(conv_fkw(input, model, cfg)?);
        times.push(start.elapsed().as_nanos().max(1) as f64);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

pub struct TimingFitness<'a> {
    pub model: &'a FkwModel,
    pub input: &'a FeatureMap,
    pub repeats: usize,
}

impl Fitness for TimingFitness<'_> {
    fn evaluate(&mut self, cfg: &ExecConfig) -> Result<f64> {
        median_time_ns(self.model, self.input, cfg, self.repeats)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaParams {
    pub population: usize,
    pub tournament: usize,
    pub mutation_rate: f64,
    pub elitism: usize,
}

impl Default for GaParams {
    fn default() -> Self {
        Self {
            population: 16,
            tournament: 3,
            mutation_rate: 0.1,
            elitism: 2,
        }
    }
}

pub const DEFAULT_BUDGET: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRecord {
    pub features: Vec<f64>,
    /// Nanoseconds (or the mock fitness unit); always positive.
    pub measured_time: f64,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub best: ExecConfig,
    pub best_time: f64,
    /// One record per distinct configuration measured, in measurement order.
    pub history: Vec<TuneRecord>,
    /// Every evaluation in order, repeated configurations included; length = budget.
    pub trajectory: Vec<ExecConfig>,
}

/// Layer descriptor used as the last four features and the record fingerprint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub shape: LayerShape,
    pub kernels: usize,
    pub patterns: usize,
}

impl LayerInfo {
    pub fn of(model: &FkwModel) -> Self {
        Self {
            shape: model.shape,
            kernels: model.total_kernels(),
            patterns: model.pattern_set.k(),
        }
    }

    pub fn fingerprint(&self) -> String {
        let s = &self.shape;
        format!(
            "{}x{}x{}x{}/s{}/k{}/n{}",
            s.in_channels,
            s.out_channels,
            s.input_h,
            s.input_w,
            s.stride,
            self.patterns,
            self.kernels
        )
    }
}

pub const FEATURES: usize = 16;

pub fn feature_names() -> [&'static str; FEATURES] {
    [
        "perm_cohwci_b",
        "perm_hwcico_b",
        "perm_wcicoh_b",
        "perm_cicohw_b",
        "log2_tile_h",
        "log2_tile_w",
        "log2_tile_oc",
        "log2_tile_ic",
        "log2_unroll_oc",
        "log2_unroll_iw",
        "lre",
        "reorder",
        "log2_in_channels",
        "log2_out_channels",
        "log2_out_h",
        "log2_out_w",
    ]
}

/// Permutation one-hot, log2 tiles and unrolls, flags, log2 layer extents.
pub fn config_features(cfg: &ExecConfig, layer: &LayerInfo) -> Vec<f64> {
    let l = |v: usize| (v as f64).log2();
    let mut f: Vec<f64> = LoopPermutation::ALL
        .iter()
        .map(|&p| f64::from(u8::from(p == cfg.loop_permutation)))
        .collect();
    f.extend([
        l(cfg.tile_h),
        l(cfg.tile_w),
        l(cfg.tile_oc),
        l(cfg.tile_ic),
        l(cfg.unroll_oc),
        l(cfg.unroll_iw),
        f64::from(u8::from(cfg.lre_enabled)),
        f64::from(u8::from(cfg.reorder_enabled)),
        l(layer.shape.in_channels),
        l(layer.shape.out_channels),
        l(layer.shape.output_h()),
        l(layer.shape.output_w()),
    ]);
    f
}

fn tournament(pop: &[(Chromosome, f64)], size: usize, rng: &mut ChaCha8Rng) -> Chromosome {
    let mut best = rng.random_range(0..pop.len());
    for _ in 1..size {
        let i = rng.random_range(0..pop.len());
        if pop[i].1 < pop[best].1 {
            best = i;
        }
    }
    pop[best].0
}

/// Runs the GA for exactly `budget` evaluations. Configurations seen before are
/// served from a cache and not re-measured; `seeds` enter the first population.
#[allow(clippy::too_many_arguments)]
pub fn tune_with(
    space: &SearchSpace,
    layer: &LayerInfo,
    fitness: &mut dyn Fitness,
    budget: usize,
    seed: u64,
    params: &GaParams,
    seeds: &[ExecConfig],
) -> Result<TuneOutcome> {
    space.validate()?;
    if params.population < 2 || params.tournament == 0 || params.elitism >= params.population {
        return Err(Error::Config(
            "population must exceed elitism and hold at least 2".into(),
        ));
    }
    if budget < params.population {
        return Err(Error::Parameter(format!(
            "budget {budget} is smaller than the population ({})",
            params.population
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache: HashMap<ExecConfig, f64> = HashMap::new();
    let mut history = Vec::new();
    let mut trajectory = Vec::with_capacity(budget);
    let mut best: Option<(ExecConfig, f64)> = None;

    let mut eval = |c: &Chromosome, trajectory: &mut Vec<ExecConfig>| -> Result<f64> {
        let cfg = space.decode(c, &layer.shape);
        trajectory.push(cfg);
        if let Some(&t) = cache.get(&cfg) {
            return Ok(t);
        }
        let t = fitness.evaluate(&cfg)?;
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::NonFinite(format!("fitness {t} for {cfg:?}")));
        }
        cache.insert(cfg, t);
        history.push(TuneRecord {
            features: config_features(&cfg, layer),
            measured_time: t,
            fingerprint: layer.fingerprint(),
        });
        if best.is_none_or(|(_, b)| t < b) {
            best = Some((cfg, t));
        }
        Ok(t)
    };

    let mut pop: Vec<(Chromosome, f64)> = Vec::with_capacity(params.population);
    let initial: Vec<Chromosome> = seeds
        .iter()
        .take(params.population)
        .map(|c| space.encode(c))
        .chain(std::iter::repeat_with(|| space.random(&mut rng)))
        .take(params.population)
        .collect();
    for c in initial {
        let t = eval(&c, &mut trajectory)?;
        pop.push((c, t));
    }

    let bounds = space.bounds();
    while trajectory.len() < budget {
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| pop[a].1.total_cmp(&pop[b].1).then(a.cmp(&b)));
        let mut next: Vec<(Chromosome, f64)> =
            order[..params.elitism].iter().map(|&i| pop[i]).collect();
        while next.len() < params.population && trajectory.len() < budget {
            let a = tournament(&pop, params.tournament, &mut rng);
            let b = tournament(&pop, params.tournament, &mut rng);
            let mut child = Chromosome {
                genes: std::array::from_fn(|i| {
                    if rng.random_bool(0.5) {
                        a.genes[i]
                    } else {
                        b.genes[i]
                    }
                }),
            };
            for (g, &bound) in child.genes.iter_mut().zip(&bounds) {
                if rng.random_bool(params.mutation_rate) {
                    *g = rng.random_range(0..bound);
                }
            }
            let t = eval(&child, &mut trajectory)?;
            next.push((child, t));
        }
        pop = next;
    }
    let (best, best_time) = best.expect("at least one evaluation");
    Ok(TuneOutcome {
        best,
        best_time,
        history,
        trajectory,
    })
}

/// Tunes one FKW layer by timing the executor (median of 3 runs per configuration),
/// starting from the documented default configuration.
pub fn tune(
    model: &FkwModel,
    input: &FeatureMap,
    budget: usize,
    seed: u64,
) -> Result<(ExecConfig, Vec<TuneRecord>)> {
    let space = SearchSpace::for_shape(&model.shape);
    let mut fitness = TimingFitness {
        model,
        input,
        repeats: 3,
    };
    let out = tune_with(
        &space,
        &LayerInfo::of(model),
        &mut fitness,
        budget,
        seed,
        &GaParams::default(),
        &[ExecConfig::default_for(&model.shape)],
    )?;
    Ok((out.best, out.history))
}

/// History as CSV: one column per feature, then `time_ns`.
pub fn history_csv(history: &[TuneRecord]) -> String {
    let mut out = feature_names().join(",");
    out.push_str(",time_ns\n");
    for r in history {
        let row: Vec<String> = r.features.iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(","));
        out.push_str(&format!(",{}\n", r.measured_time));
    }
    out
}

pub const MIN_RECORDS: usize = 10;
const RIDGE: f64 = 1e-6;

/// Linear model of `log(time)` over the features, with an intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimator {
    /// Intercept first, then one coefficient per feature.
    pub coefficients: Vec<f64>,
    pub training_rmse: f64,
    pub regularized: bool,
}

impl Estimator {
    pub fn dimension(&self) -> usize {
        self.coefficients.len() - 1
    }

    /// Predicted `log(time)`.
    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.dimension() {
            return Err(Error::Shape(format!(
                "estimator expects {} features, got {}",
                self.dimension(),
                features.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("candidate feature".into()));
        }
        Ok(self.coefficients[0]
            + self.coefficients[1..]
                .iter()
                .zip(features)
                .map(|(c, f)| c * f)
                .sum::<f64>())
    }
}

/// Least squares on `log(time)`. A rank-deficient design falls back to ridge
/// regression with a warning.
pub fn fit_estimator(history: &[TuneRecord]) -> Result<Estimator> {
    if history.len() < MIN_RECORDS {
        return Err(Error::Precondition(format!(
            "estimator needs at least {MIN_RECORDS} records, got {}",
            history.len()
        )));
    }
    let d = history[0].features.len();
    if history.iter().any(|r| r.features.len() != d) {
        return Err(Error::Shape("records have differing feature counts".into()));
    }
    if history
        .iter()
        .any(|r| !(r.measured_time > 0.0) || r.features.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite(
            "records need finite features and positive times".into(),
        ));
    }
    let n = history.len();
    let x = DMatrix::from_fn(n, d + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            history[i].features[j - 1]
        }
    });
    let y = DVector::from_iterator(n, history.iter().map(|r| r.measured_time.ln()));
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &y;
    let rank = x.clone().svd(false, false).rank(1e-9 * (n as f64).sqrt());
    let (beta, regularized) = match (rank == d + 1).then(|| xtx.clone().cholesky()).flatten() {
        Some(chol) => (chol.solve(&xty), false),
        None => {
            log::warn!(
                "estimator design matrix has rank {rank} < {}; using ridge fallback",
                d + 1
            );
            let ridge = xtx + DMatrix::identity(d + 1, d + 1) * RIDGE;
            let chol = ridge
                .cholesky()
                .ok_or_else(|| Error::NonFinite("ridge system is not positive definite".into()))?;
            (chol.solve(&xty), true)
        }
    };
    let resid = &x * &beta - &y;
    Ok(Estimator {
        coefficients: beta.iter().copied().collect(),
        training_rmse: (resid.norm_squared() / n as f64).sqrt(),
        regularized,
    })
}

/// Candidate indices sorted by predicted time, ascending; ties keep input order.
pub fn predict_best(est: &Estimator, candidates: &[Vec<f64>]) -> Result<Vec<usize>> {
    let preds = candidates
        .iter()
        .map(|c| est.predict(c))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| preds[a].total_cmp(&preds[b]));
    Ok(order)
}

/// Kendall rank correlation between two score lists (tau-a).
pub fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 1.0;
    }
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let x = (a[i] - a[j]).signum() * (b[i] - b[j]).signum();
            s += x as i64;
        }
    }
    s as f64 / (n * (n - 1) / 2) as f64
}

/// Synthetic search problem with one planted best configuration: full tiles,
/// a chosen permutation and the largest unroll factors. Cost grows
/// geometrically with the distance of every gene from the planted one, so
/// degenerate small tiles are heavily penalized.
pub mod planted {
    use super::*;

    pub fn layer() -> LayerInfo {
        LayerInfo {
            shape: LayerShape::conv3x3(64, 64, 58, 58).expect("static shape"),
            kernels: 1138,
            patterns: 8,
        }
    }

    pub fn space() -> SearchSpace {
        SearchSpace::for_shape(&layer().shape)
    }

    pub fn optimum() -> ExecConfig {
        let s = space();
        let c = Chromosome {
            genes: [
                0,
                s.tile_h.len() - 1,
                s.tile_w.len() - 1,
                s.tile_oc.len() - 1,
                s.tile_ic.len() - 1,
                2,
                2,
            ],
        };
        s.decode(&c, &layer().shape)
    }

    /// Deterministic cost in arbitrary time units.
    pub fn cost(cfg: &ExecConfig) -> f64 {
        let s = space();
        let c = s.encode(cfg);
        let b = s.bounds();
        let perm = if c.genes[0] == 0 { 0.0 } else { 0.6 };
        let tiles: f64 = (1..5).map(|i| 0.5 * (b[i] - 1 - c.genes[i]) as f64).sum();
        let unroll: f64 = (5..7).map(|i| 0.3 * (b[i] - 1 - c.genes[i]) as f64).sum();
        1000.0 * (perm + tiles + unroll).exp()
    }
}
