//! Tiled execution of FKW layers with pattern-specialized routines and
//! load-redundancy elimination, instrumented with abstract load counts.

pub mod csr;
pub mod model;
mod routines;

use std::collections::HashMap;
use std::fmt;
use std::ops::{Add, AddAssign, Range};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fkw::FkwModel;
use crate::tensor::{FeatureMap, LayerShape};
use routines::{generic_routine, routine_for, Routine, TileGeom};

pub use csr::conv_csr;
pub use model::lre_load_model;

/// Order of the four tile loops (output channel, row, column, input channel).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LoopPermutation {
    #[serde(rename = "cohwci_b")]
    CoHWCi,
    #[serde(rename = "hwcico_b")]
    HWCiCo,
    #[serde(rename = "wcicoh_b")]
    WCiCoH,
    #[serde(rename = "cicohw_b")]
    CiCoHW,
}

impl LoopPermutation {
    pub const ALL: [Self; 4] = [Self::CoHWCi, Self::HWCiCo, Self::WCiCoH, Self::CiCoHW];

    pub fn name(self) -> &'static str {
        match self {
            Self::CoHWCi => "cohwci_b",
            Self::HWCiCo => "hwcico_b",
            Self::WCiCoH => "wcicoh_b",
            Self::CiCoHW => "cicohw_b",
        }
    }

    /// Loop nest from outermost to innermost, as indices into `[co, h, w, ci]`.
    fn order(self) -> [usize; 4] {
        match self {
            Self::CoHWCi => [0, 1, 2, 3],
            Self::HWCiCo => [1, 2, 3, 0],
            Self::WCiCoH => [2, 3, 0, 1],
            Self::CiCoHW => [3, 0, 1, 2],
        }
    }
}

impl fmt::Display for LoopPermutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LoopPermutation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unsupported loop permutation `{s}`; expected one of cohwci_b, hwcico_b, wcicoh_b, cicohw_b"
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExecConfig {
    pub loop_permutation: LoopPermutation,
    pub tile_h: usize,
    pub tile_w: usize,
    pub tile_oc: usize,
    pub tile_ic: usize,
    pub unroll_oc: usize,
    pub unroll_iw: usize,
    pub lre_enabled: bool,
    pub reorder_enabled: bool,
}

impl ExecConfig {
    /// The documented default: 8x8 spatial tiles, 8 output and 16 input
    /// channels per tile, unroll 2 x 4, all optimizations on (clamped to the layer).
    pub fn default_for(shape: &LayerShape) -> Self {
        Self {
            loop_permutation: LoopPermutation::CoHWCi,
            tile_h: 8,
            tile_w: 8,
            tile_oc: 8,
            tile_ic: 16,
            unroll_oc: 2,
            unroll_iw: 4,
            lre_enabled: true,
            reorder_enabled: true,
        }
        .clamped(shape)
    }

    /// One tile covering the whole layer.
    pub fn whole_layer(shape: &LayerShape) -> Self {
        Self {
            tile_h: shape.output_h(),
            tile_w: shape.output_w(),
            tile_oc: shape.out_channels,
            tile_ic: shape.in_channels,
            ..Self::default_for(shape)
        }
    }

    /// Everything off: generic per-kernel dispatch, no load reuse.
    pub fn no_opt(shape: &LayerShape) -> Self {
        Self {
            unroll_oc: 1,
            lre_enabled: false,
            reorder_enabled: false,
            ..Self::default_for(shape)
        }
    }

    pub fn validate(&self, shape: &LayerShape) -> Result<()> {
        let dims = [
            ("tile_h", self.tile_h, shape.output_h()),
            ("tile_w", self.tile_w, shape.output_w()),
            ("tile_oc", self.tile_oc, shape.out_channels),
            ("tile_ic", self.tile_ic, shape.in_channels),
        ];
        for (name, v, max) in dims {
            if v == 0 || v > max {
                return Err(Error::Config(format!("{name} = {v} must be in 1..={max}")));
            }
        }
        if self.unroll_oc == 0 || self.unroll_iw == 0 {
            return Err(Error::Config("unroll factors must be at least 1".into()));
        }
        Ok(())
    }

    /// Clamps tiles into `1..=dim` and unroll factors into `1..=tile`.
    pub fn clamped(mut self, shape: &LayerShape) -> Self {
        self.tile_h = self.tile_h.clamp(1, shape.output_h());
        self.tile_w = self.tile_w.clamp(1, shape.output_w());
        self.tile_oc = self.tile_oc.clamp(1, shape.out_channels);
        self.tile_ic = self.tile_ic.clamp(1, shape.in_channels);
        self.unroll_oc = self.unroll_oc.clamp(1, self.tile_oc);
        self.unroll_iw = self.unroll_iw.clamp(1, self.tile_w);
        self
    }

    pub(crate) fn effective_unroll_oc(&self) -> usize {
        self.unroll_oc.min(self.tile_oc)
    }

    /// Whether kernels sharing an input (and pattern) across an unroll group load it once.
    pub(crate) fn filter_sharing(&self) -> bool {
        self.lre_enabled && self.effective_unroll_oc() >= 2
    }
}

/// Abstract load counts of one execution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadStats {
    pub input_element_loads: u64,
    pub weight_loads: u64,
    pub branch_events: u64,
}

impl Add for LoadStats {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            input_element_loads: self.input_element_loads + o.input_element_loads,
            weight_loads: self.weight_loads + o.weight_loads,
            branch_events: self.branch_events + o.branch_events,
        }
    }
}

impl AddAssign for LoadStats {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for LoadStats {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

pub(crate) fn tile_ranges(n: usize, t: usize) -> Vec<Range<usize>> {
    (0..n).step_by(t).map(|s| s..(s + t).min(n)).collect()
}

/// Tile decomposition shared by the executor and the load model.
pub(crate) struct Tiling {
    pub blocks: Vec<Range<usize>>,
    pub rows: Vec<Range<usize>>,
    pub cols: Vec<Range<usize>>,
    pub chans: Vec<Range<usize>>,
    pub unroll_oc: usize,
}

impl Tiling {
    pub fn new(shape: &LayerShape, cfg: &ExecConfig) -> Self {
        Self {
            blocks: tile_ranges(shape.out_channels, cfg.tile_oc),
            rows: tile_ranges(shape.output_h(), cfg.tile_h),
            cols: tile_ranges(shape.output_w(), cfg.tile_w),
            chans: tile_ranges(shape.in_channels, cfg.tile_ic),
            unroll_oc: cfg.effective_unroll_oc(),
        }
    }

    pub fn groups(&self, block: &Range<usize>) -> impl Iterator<Item = Range<usize>> + '_ {
        let end = block.end;
        block
            .clone()
            .step_by(self.unroll_oc)
            .map(move |s| s..(s + self.unroll_oc).min(end))
    }

    /// Visits `(block, row tile, col tile, chan tile)` indices in loop-nest order.
    pub fn visit(
        &self,
        perm: LoopPermutation,
        blocks: Range<usize>,
        mut f: impl FnMut([usize; 4]),
    ) {
        let order = perm.order();
        let extent = |d: usize| match d {
            0 => blocks.clone(),
            1 => 0..self.rows.len(),
            2 => 0..self.cols.len(),
            _ => 0..self.chans.len(),
        };
        let mut idx = [0usize; 4];
        for i0 in extent(order[0]) {
            idx[order[0]] = i0;
            for i1 in extent(order[1]) {
                idx[order[1]] = i1;
                for i2 in extent(order[2]) {
                    idx[order[2]] = i2;
                    for i3 in extent(order[3]) {
                        idx[order[3]] = i3;
                        f(idx);
                    }
                }
            }
        }
    }
}

const FULL_WINDOW: [usize; 9] = [0, 1, 2, 3, 4, 5, 6, 7, 8];

struct Executor<'a> {
    model: &'a FkwModel,
    input: &'a FeatureMap,
    cfg: ExecConfig,
    tiling: Tiling,
    plane: usize,
    out_w: usize,
    taps: Vec<[usize; 4]>,
    routines: Vec<Routine>,
}

/// Per-worker scratch: the tile buffer plus, per (tap set, tile shape), the
/// buffer positions to load paired with their offsets in the input plane.
#[derive(Default)]
struct Scratch {
    buf: Vec<f32>,
    plans: HashMap<(usize, usize, usize), Vec<(u32, u32)>>,
}

struct TileRef<'t> {
    rows: &'t Range<usize>,
    cols: &'t Range<usize>,
    chans: &'t Range<usize>,
}

impl<'a> Executor<'a> {
    fn new(model: &'a FkwModel, input: &'a FeatureMap, cfg: ExecConfig) -> Self {
        let s = model.shape;
        let taps: Vec<[usize; 4]> = model
            .pattern_set
            .patterns()
            .iter()
            .map(|p| p.flat_indices())
            .collect();
        Self {
            model,
            input,
            cfg,
            tiling: Tiling::new(&s, &cfg),
            plane: s.output_h() * s.output_w(),
            out_w: s.output_w(),
            routines: taps.iter().map(|&t| routine_for(t)).collect(),
            taps,
        }
    }

    fn geom(&self, t: &TileRef, buffered: bool) -> TileGeom {
        let s = self.model.shape.stride;
        let (th, tw) = (t.rows.len(), t.cols.len());
        let (src_origin, src_pitch) = if buffered {
            (0, (tw - 1) * s + 3)
        } else {
            (
                t.rows.start * s * self.input.width + t.cols.start * s,
                self.input.width,
            )
        };
        TileGeom {
            th,
            tw,
            uw: self.cfg.unroll_iw.min(tw),
            stride: s,
            src_origin,
            src_pitch,
            acc_origin: t.rows.start * self.out_w + t.cols.start,
            acc_pitch: self.out_w,
        }
    }

    /// Loads every input element touched by tap set `key` (a pattern index,
    /// or `k` for the full window) over the tile into the buffer.
    fn fill(&self, key: usize, ic: usize, t: &TileRef, sc: &mut Scratch) -> u64 {
        let s = self.model.shape.stride;
        let (th, tw) = (t.rows.len(), t.cols.len());
        let (bh, bw) = ((th - 1) * s + 3, (tw - 1) * s + 3);
        let width = self.input.width;
        let plan = sc.plans.entry((key, th, tw)).or_insert_with(|| {
            let taps: &[usize] = self.taps.get(key).map_or(&FULL_WINDOW, |t| t);
            let mut mark = vec![false; bh * bw];
            for &tap in taps {
                for y in 0..th {
                    let row = (y * s + tap / 3) * bw + tap % 3;
                    for x in 0..tw {
                        mark[row + x * s] = true;
                    }
                }
            }
            (0..bh * bw)
                .filter(|&i| mark[i])
                .map(|i| (i as u32, ((i / bw) * width + i % bw) as u32))
                .collect()
        });
        sc.buf.resize(bh * bw, 0.0);
        let src = &self.input.channel(ic)[t.rows.start * s * width + t.cols.start * s..];
        for &(b, o) in plan.iter() {
            sc.buf[b as usize] = src[o as usize];
        }
        plan.len() as u64
    }

    fn dense9(&self, kernel: usize, pattern_id: u8) -> [f32; 9] {
        let mut w = [0.0; 9];
        for (n, &tap) in self.taps[pattern_id as usize - 1].iter().enumerate() {
            w[tap] = self.model.weights[kernel * 4 + n];
        }
        w
    }

    /// Kernels of stored filter `f` inside the channel tile, as `(kernel, pattern_id)`.
    fn kernels_in(&self, f: usize, chans: &Range<usize>) -> Vec<(usize, u8)> {
        self.model
            .runs(f)
            .flat_map(|(id, r)| r.map(move |i| (i, id)))
            .filter(|&(i, _)| chans.contains(&(self.model.index[i] as usize)))
            .collect()
    }

    /// Runs one output-channel block over one (row, col, chan) tile.
    fn tile(
        &self,
        acc: &mut [f64],
        block: &Range<usize>,
        t: &TileRef,
        sc: &mut Scratch,
        stats: &mut LoadStats,
    ) {
        let plane = self.plane;
        let direct = self.geom(t, false);
        let buffered = self.geom(t, true);
        let sharing = self.cfg.filter_sharing();
        for group in self.tiling.groups(block) {
            if self.cfg.reorder_enabled && sharing {
                for pid in 1..=self.model.pattern_set.k() as u8 {
                    let mut items: Vec<(u32, usize, usize)> = Vec::new();
                    for f in group.clone() {
                        let base = self.model.offset[f] as usize;
                        let st = &self.model.stride[f];
                        for i in
                            base + st[pid as usize - 1] as usize..base + st[pid as usize] as usize
                        {
                            let ic = self.model.index[i];
                            if t.chans.contains(&(ic as usize)) {
                                items.push((ic, f, i));
                            }
                        }
                    }
                    if items.is_empty() {
                        continue;
                    }
                    stats.branch_events += 1;
                    let routine = self.routines[pid as usize - 1];
                    items.sort_unstable();
                    for chunk in items.chunk_by(|a, b| a.0 == b.0) {
                        stats.input_element_loads +=
                            self.fill(pid as usize - 1, chunk[0].0 as usize, t, sc);
                        for &(_, f, i) in chunk {
                            stats.weight_loads += 4;
                            let a =
                                &mut acc[(f - block.start) * plane..(f - block.start + 1) * plane];
                            routine(&buffered, a, &sc.buf, self.model.kernel_weights(i));
                        }
                    }
                }
            } else if self.cfg.reorder_enabled {
                for f in group.clone() {
                    let a = &mut acc[(f - block.start) * plane..(f - block.start + 1) * plane];
                    for (pid, run) in self.model.runs(f) {
                        let mut dispatched = false;
                        let routine = self.routines[pid as usize - 1];
                        for i in run {
                            let ic = self.model.index[i] as usize;
                            if !t.chans.contains(&ic) {
                                continue;
                            }
                            if !dispatched {
                                stats.branch_events += 1;
                                dispatched = true;
                            }
                            stats.weight_loads += 4;
                            let w = self.model.kernel_weights(i);
                            if self.cfg.lre_enabled {
                                stats.input_element_loads += self.fill(pid as usize - 1, ic, t, sc);
                                routine(&buffered, a, &sc.buf, w);
                            } else {
                                stats.input_element_loads +=
                                    routine(&direct, a, self.input.channel(ic), w);
                            }
                        }
                    }
                }
            } else if sharing {
                let mut items: Vec<(u32, usize, usize, u8)> = Vec::new();
                for f in group.clone() {
                    for (i, pid) in self.kernels_in(f, t.chans) {
                        items.push((self.model.index[i], f, i, pid));
                    }
                }
                items.sort_unstable();
                for chunk in items.chunk_by(|a, b| a.0 == b.0) {
                    stats.input_element_loads +=
                        self.fill(self.taps.len(), chunk[0].0 as usize, t, sc);
                    for &(_, f, i, pid) in chunk {
                        stats.branch_events += 1;
                        stats.weight_loads += 9;
                        let a = &mut acc[(f - block.start) * plane..(f - block.start + 1) * plane];
                        generic_routine(&buffered, a, &sc.buf, &self.dense9(i, pid));
                    }
                }
            } else {
                for f in group.clone() {
                    let a = &mut acc[(f - block.start) * plane..(f - block.start + 1) * plane];
                    for (i, pid) in self.kernels_in(f, t.chans) {
                        let ic = self.model.index[i] as usize;
                        stats.branch_events += 1;
                        stats.weight_loads += 9;
                        let w = self.dense9(i, pid);
                        if self.cfg.lre_enabled {
                            stats.input_element_loads += self.fill(self.taps.len(), ic, t, sc);
                            generic_routine(&buffered, a, &sc.buf, &w);
                        } else {
                            stats.input_element_loads +=
                                generic_routine(&direct, a, self.input.channel(ic), &w);
                        }
                    }
                }
            }
        }
    }

    fn run_block(&self, acc: &mut [f64], b: usize, sc: &mut Scratch) -> LoadStats {
        let mut stats = LoadStats::default();
        let block = &self.tiling.blocks[b];
        self.tiling
            .visit(self.cfg.loop_permutation, b..b + 1, |[_, h, w, c]| {
                let t = TileRef {
                    rows: &self.tiling.rows[h],
                    cols: &self.tiling.cols[w],
                    chans: &self.tiling.chans[c],
                };
                self.tile(acc, block, &t, sc, &mut stats);
            });
        stats
    }

    fn finish(&self, acc: Vec<f64>) -> Result<FeatureMap> {
        let s = self.model.shape;
        let mut data = vec![0.0f32; acc.len()];
        for (f, &orig) in self.model.reorder.iter().enumerate() {
            let orig = orig as usize;
            let bias = self.model.bias[orig] as f64;
            for (o, a) in data[orig * self.plane..(orig + 1) * self.plane]
                .iter_mut()
                .zip(&acc[f * self.plane..(f + 1) * self.plane])
            {
                *o = (a + bias) as f32;
            }
        }
        FeatureMap::new(s.out_channels, s.output_h(), s.output_w(), data)
    }
}

fn check(input: &FeatureMap, model: &FkwModel, cfg: &ExecConfig) -> Result<()> {
    model.validate()?;
    cfg.validate(&model.shape)?;
    let s = &model.shape;
    if (input.channels, input.height, input.width) != (s.in_channels, s.input_h, s.input_w) {
        return Err(Error::Shape(format!(
            "input is {}x{}x{}, layer expects {}x{}x{}",
            input.channels, input.height, input.width, s.in_channels, s.input_h, s.input_w
        )));
    }
    Ok(())
}

/// Single-threaded execution; the output is in original channel order.
pub fn conv_fkw(
    input: &FeatureMap,
    model: &FkwModel,
    cfg: &ExecConfig,
) -> Result<(FeatureMap, LoadStats)> {
    check(input, model, cfg)?;
    let ex = Executor::new(model, input, *cfg);
    let mut acc = vec![0.0f64; model.filters() * ex.plane];
    let mut sc = Scratch::default();
    let mut stats = LoadStats::default();
    ex.tiling.visit(
        cfg.loop_permutation,
        0..ex.tiling.blocks.len(),
        |[b, h, w, c]| {
            let block = &ex.tiling.blocks[b];
            let t = TileRef {
                rows: &ex.tiling.rows[h],
                cols: &ex.tiling.cols[w],
                chans: &ex.tiling.chans[c],
            };
            let slice = &mut acc[block.start * ex.plane..block.end * ex.plane];
            ex.tile(slice, block, &t, &mut sc, &mut stats);
        },
    );
    Ok((ex.finish(acc)?, stats))
}

/// Output-channel blocks run on the current rayon pool; each worker owns its
/// block of the accumulator, so results are bit-identical to [`conv_fkw`].
pub fn conv_fkw_par(
    input: &FeatureMap,
    model: &FkwModel,
    cfg: &ExecConfig,
) -> Result<(FeatureMap, LoadStats)> {
    check(input, model, cfg)?;
    let ex = Executor::new(model, input, *cfg);
    let mut acc = vec![0.0f64; model.filters() * ex.plane];
    let stats: LoadStats = acc
        .par_chunks_mut(cfg.tile_oc * ex.plane)
        .enumerate()
        .map(|(b, chunk)| ex.run_block(chunk, b, &mut Scratch::default()))
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    Ok((ex.finish(acc)?, stats))
}
