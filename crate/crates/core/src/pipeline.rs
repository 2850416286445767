//! Glue between the stages: encoding a pruned network layer by layer,
//! describing it with a manifest, and running a chain of encoded layers.

use crate::admm::TinyNet;
use crate::error::{Error, Result, Violation};
use crate::exec::{conv_fkw, conv_fkw_par, ExecConfig, LoadStats};
use crate::fkw::{fkw_encode, FkwModel};
use crate::lr::{LayerRecord, ModelManifest, Tile, Unroll, LR_VERSION};
use crate::pattern::PatternSet;
use crate::reorder::{reorder, SparseLayer};
use crate::tensor::FeatureMap;

/// Encodes every conv layer of a pruned network. Each kernel takes the
/// lowest-id pattern of `set` covering its support.
pub fn encode_net(net: &TinyNet, set: &PatternSet) -> Result<Vec<FkwModel>> {
    (0..net.convs.len())
        .map(|k| {
            let layer = SparseLayer::from_pruned(&net.conv_tensor(k)?, set)?;
            let (layer, plan) = reorder(&layer)?;
            fkw_encode(&layer, &plan)
        })
        .collect()
}

/// Manifest for encoded layers named `conv{i}` and stored as `conv{i}.fkw`,
/// each with the default execution config.
pub fn manifest_for(models: &[FkwModel], set: &PatternSet) -> ModelManifest {
    let layers = models
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mut patterns: Vec<u8> = (0..m.filters())
                .flat_map(|f| m.runs(f).map(|(p, _)| p))
                .collect();
            patterns.sort_unstable();
            patterns.dedup();
            let cfg = ExecConfig::default_for(&m.shape);
            LayerRecord {
                name: format!("conv{i}"),
                device: "cpu".into(),
                shape: m.shape,
                patterns,
                fkw_file: format!("conv{i}.fkw"),
                loop_permutation: cfg.loop_permutation,
                tile: Tile {
                    h: cfg.tile_h,
                    w: cfg.tile_w,
                    oc: cfg.tile_oc,
                    ic: cfg.tile_ic,
                },
                unroll: Unroll {
                    oc: cfg.unroll_oc,
                    iw: cfg.unroll_iw,
                },
            }
        })
        .collect();
    ModelManifest {
        version: LR_VERSION,
        pattern_set: set.clone(),
        layers,
    }
}

/// Checks that loaded FKW files agree with the manifest that names them.
pub fn check_manifest_models(manifest: &ModelManifest, models: &[FkwModel]) -> Result<()> {
    let mut violations = Vec::new();
    for (i, (rec, m)) in manifest.layers.iter().zip(models).enumerate() {
        if m.shape != rec.shape {
            violations.push(Violation::new(
                format!("$.layers[{i}].shape"),
                "does not match the FKW file",
            ));
        }
        if m.pattern_set != manifest.pattern_set {
            violations.push(Violation::new(
                format!("$.layers[{i}].fkw_file"),
                "FKW pattern set differs from the manifest's",
            ));
        }
        let used = (0..m.filters()).flat_map(|f| m.runs(f).map(|(p, _)| p));
        if let Some(p) = used.into_iter().find(|p| !rec.patterns.contains(p)) {
            violations.push(Violation::new(
                format!("$.layers[{i}].patterns"),
                format!("FKW file uses pattern {p}, which is not listed"),
            ));
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(violations))
    }
}

/// Runs `layers` in sequence. With `relu`, every layer's output is rectified,
/// matching the conv stack of [`TinyNet`].
pub fn run_layers(
    input: &FeatureMap,
    layers: &[(&FkwModel, ExecConfig)],
    relu: bool,
    parallel: bool,
) -> Result<(FeatureMap, LoadStats)> {
    let mut act = input.clone();
    let mut total = LoadStats::default();
    for (model, cfg) in layers {
        let (out, stats) = if parallel {
            conv_fkw_par(&act, model, cfg)?
        } else {
            conv_fkw(&act, model, cfg)?
        };
        total += stats;
        act = if relu { out.relu() } else { out };
    }
    Ok((act, total))
}
