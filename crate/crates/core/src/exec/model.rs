//! Closed-form load counts for a model and configuration, computed without
//! running the executor.

use std::collections::HashMap;

use super::{ExecConfig, LoadStats, Tiling};
use crate::error::Result;
use crate::fkw::FkwModel;

/// Number of distinct input elements a set of taps touches over a `th x tw`
/// output tile: element `(i, j)` of the window is touched when some tap
/// `(r, c)` has `i - r` and `j - c` landing on output positions.
pub fn touched_elements(taps: &[usize], th: usize, tw: usize, stride: usize) -> u64 {
    let hits = |v: usize, off: usize, n: usize| {
        v >= off && (v - off) % stride == 0 && (v - off) / stride < n
    };
    let (bh, bw) = ((th - 1) * stride + 3, (tw - 1) * stride + 3);
    let mut count = 0;
    for i in 0..bh {
        for j in 0..bw {
            if taps
                .iter()
                .any(|&t| hits(i, t / 3, th) && hits(j, t % 3, tw))
            {
                count += 1;
            }
        }
    }
    count
}

/// Predicted [`LoadStats`] of executing `model` under `cfg`.
///
/// Without LRE every kernel reads each of its taps once per output position
/// (four taps with pattern-specialized routines, nine with the generic one).
/// Kernel-level LRE reads each touched element once per kernel and tile;
/// filter-level LRE (unroll_oc >= 2) reads it once per unroll group for all
/// kernels sharing pattern and input channel (input channel only when
/// reorder is off).
pub fn lre_load_model(model: &FkwModel, cfg: &ExecConfig) -> Result<LoadStats> {
    model.validate()?;
    cfg.validate(&model.shape)?;
    let stride = model.shape.stride;
    let tiling = Tiling::new(&model.shape, cfg);
    let taps: Vec<[usize; 4]> = model
        .pattern_set
        .patterns()
        .iter()
        .map(|p| p.flat_indices())
        .collect();
    let full: Vec<usize> = (0..9).collect();
    let mut cache: HashMap<(usize, usize, usize), u64> = HashMap::new();
    let mut union = |key: usize, th: usize, tw: usize| {
        *cache.entry((key, th, tw)).or_insert_with(|| {
            if key == 0 {
                touched_elements(&full, th, tw, stride)
            } else {
                touched_elements(&taps[key - 1], th, tw, stride)
            }
        })
    };
    let taps_per_kernel = if cfg.reorder_enabled { 4 } else { 9 };
    let sharing = cfg.filter_sharing();

    let mut stats = LoadStats::default();
    for block in &tiling.blocks {
        for group in tiling.groups(block) {
            for chans in &tiling.chans {
                // (pattern id, input channel) of every kernel of the group in this channel tile,
                // plus the number of distinct pattern runs per filter
                let mut keys: Vec<(usize, u32)> = Vec::new();
                let mut runs = 0u64;
                for f in group.clone() {
                    for (pid, r) in model.runs(f) {
                        let before = keys.len();
                        keys.extend(
                            r.map(|i| model.index[i])
                                .filter(|&ic| chans.contains(&(ic as usize)))
                                .map(|ic| (pid as usize, ic)),
                        );
                        runs += u64::from(keys.len() > before);
                    }
                }
                let kernels = keys.len() as u64;
                let branches = match (cfg.reorder_enabled, sharing) {
                    (true, true) => {
                        let mut p: Vec<usize> = keys.iter().map(|k| k.0).collect();
                        p.sort_unstable();
                        p.dedup();
                        p.len() as u64
                    }
                    (true, false) => runs,
                    (false, _) => kernels,
                };
                let mut shared = keys.clone();
                if !cfg.reorder_enabled {
                    shared.iter_mut().for_each(|k| k.0 = 0);
                }
                shared.sort_unstable();
                shared.dedup();
                for rows in &tiling.rows {
                    for cols in &tiling.cols {
                        let (th, tw) = (rows.len(), cols.len());
                        stats.branch_events += branches;
                        stats.weight_loads += kernels * taps_per_kernel;
                        stats.input_element_loads += if !cfg.lre_enabled {
                            kernels * taps_per_kernel * (th * tw) as u64
                        } else if sharing {
                            shared.iter().map(|k| union(k.0, th, tw)).sum::<u64>()
                        } else {
                            keys.iter()
                                .map(|k| union(if cfg.reorder_enabled { k.0 } else { 0 }, th, tw))
                                .sum::<u64>()
                        };
                    }
                }
            }
        }
    }
    Ok(stats)
}
