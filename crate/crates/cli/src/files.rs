use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use patconv::admm::TinyNet;
use patconv::fkw::FkwModel;
use patconv::io::write_atomic;
use patconv::lr::{lr_parse, ModelManifest};
use patconv::pattern::PatternSet;
use patconv::pipeline::check_manifest_models;
use patconv::tensor::FeatureMap;
use patconv::{Error, Result};

fn with_path(path: &Path, e: io::Error) -> Error {
    Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| with_path(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| with_path(path, e))
}

/// Writes `bytes` to `name` inside `dir` (created when missing) and returns the path.
pub fn write_out(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| with_path(dir, e))?;
    let path = dir.join(name);
    write_atomic(&path, bytes).map_err(|e| match e {
        Error::Io(io) => with_path(&path, io),
        other => other,
    })?;
    log::info!("wrote {}", path.display());
    Ok(path)
}

pub fn load_net(path: &Path) -> Result<TinyNet> {
    TinyNet::from_ptk_bytes(&read_bytes(path)?)
}

pub fn load_patterns(path: &Path) -> Result<PatternSet> {
    PatternSet::from_json(&read_text(path)?)
}

pub fn load_feature_map(path: &Path) -> Result<FeatureMap> {
    FeatureMap::from_ptk_bytes(&read_bytes(path)?)
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "json")
}

/// Binary FKW, or its JSON dump when the file name ends in `.json`.
pub fn load_fkw(path: &Path) -> Result<FkwModel> {
    let model = if is_json(path) {
        serde_json::from_str::<FkwModel>(&read_text(path)?)?
    } else {
        FkwModel::from_bytes(&read_bytes(path)?)?
    };
    model.validate()?;
    Ok(model)
}

/// Parses a manifest and loads the FKW files it names, relative to its directory.
pub fn load_manifest(path: &Path) -> Result<(ModelManifest, Vec<FkwModel>)> {
    let manifest = lr_parse(&read_text(path)?)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let models = manifest
        .layers
        .iter()
        .map(|l| load_fkw(&dir.join(&l.fkw_file)))
        .collect::<Result<Vec<_>>>()?;
    check_manifest_models(&manifest, &models)?;
    Ok((manifest, models))
}
