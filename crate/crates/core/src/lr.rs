//! Layerwise representation: a JSON manifest tying each layer's pattern
//! inventory, FKW file and tuned execution parameters together.
//!
//! Canonical form: two-space indent, object keys sorted, one member per line,
//! arrays of scalars on one line, arrays of arrays one element per line, a
//! trailing newline. Manifests hold no floats.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result, Violation};
use crate::exec::{ExecConfig, LoopPermutation};
use crate::pattern::PatternSet;
use crate::tensor::LayerShape;

pub const LR_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub ic: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unroll {
    pub oc: usize,
    pub iw: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    pub device: String,
    pub shape: LayerShape,
    pub patterns: Vec<u8>,
    pub fkw_file: String,
    pub loop_permutation: LoopPermutation,
    pub tile: Tile,
    pub unroll: Unroll,
}

impl LayerRecord {
    /// Execution settings of this layer, with reorder and LRE enabled.
    pub fn exec_config(&self) -> ExecConfig {
        ExecConfig {
            loop_permutation: self.loop_permutation,
            tile_h: self.tile.h,
            tile_w: self.tile.w,
            tile_oc: self.tile.oc,
            tile_ic: self.tile.ic,
            unroll_oc: self.unroll.oc,
            unroll_iw: self.unroll.iw,
            lre_enabled: true,
            reorder_enabled: true,
        }
    }

    pub fn set_exec_config(&mut self, cfg: &ExecConfig) {
        self.loop_permutation = cfg.loop_permutation;
        self.tile = Tile {
            h: cfg.tile_h,
            w: cfg.tile_w,
            oc: cfg.tile_oc,
            ic: cfg.tile_ic,
        };
        self.unroll = Unroll {
            oc: cfg.unroll_oc,
            iw: cfg.unroll_iw,
        };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub version: u64,
    pub pattern_set: PatternSet,
    pub layers: Vec<LayerRecord>,
}

struct Checker {
    violations: Vec<Violation>,
}

impl Checker {
    fn push(&mut self, path: &str, msg: impl Into<String>) {
        self.violations.push(Violation::new(path, msg));
    }

    fn object<'v>(
        &mut self,
        v: &'v Value,
        path: &str,
        keys: &[&str],
    ) -> Option<&'v Map<String, Value>> {
        let Some(obj) = v.as_object() else {
            self.push(path, "expected an object");
            return None;
        };
        for key in keys {
            if !obj.contains_key(*key) {
                self.push(&format!("{path}.{key}"), "missing field");
            }
        }
        for key in obj.keys() {
            if !keys.contains(&key.as_str()) {
                self.push(&format!("{path}.{key}"), "unknown field");
            }
        }
        Some(obj)
    }

    fn count(&mut self, obj: &Map<String, Value>, path: &str, key: &str) -> Option<usize> {
        let v = obj.get(key)?;
        match v.as_u64() {
            Some(n) if n >= 1 => Some(n as usize),
            _ => {
                self.push(&format!("{path}.{key}"), "expected an integer >= 1");
                None
            }
        }
    }

    fn string(&mut self, obj: &Map<String, Value>, path: &str, key: &str) -> Option<String> {
        let v = obj.get(key)?;
        match v.as_str() {
            Some(s) if !s.is_empty() => Some(s.to_string()),
            _ => {
                self.push(&format!("{path}.{key}"), "expected a non-empty string");
                None
            }
        }
    }

    fn shape(&mut self, v: &Value, path: &str) -> Option<LayerShape> {
        const KEYS: [&str; 7] = [
            "kernel_h",
            "kernel_w",
            "in_channels",
            "out_channels",
            "stride",
            "input_h",
            "input_w",
        ];
        let obj = self.object(v, path, &KEYS)?;
        let vals: Vec<Option<usize>> = KEYS.iter().map(|k| self.count(obj, path, k)).collect();
        let [kh, kw, ci, co, s, h, w] = <[Option<usize>; 7]>::try_from(vals)
            .ok()?
            .map(|v| v.unwrap_or(0));
        if [kh, kw, ci, co, s, h, w].contains(&0) {
            return None;
        }
        match LayerShape::new(kh, kw, ci, co, s, h, w) {
            Ok(shape) if shape.is_3x3() => Some(shape),
            Ok(_) => {
                self.push(path, "only 3x3 layers are supported");
                None
            }
            Err(e) => {
                self.push(path, e.to_string());
                None
            }
        }
    }

    fn layer(&mut self, v: &Value, path: &str, set: Option<&PatternSet>) -> Option<LayerRecord> {
        const KEYS: [&str; 8] = [
            "name",
            "device",
            "shape",
            "patterns",
            "fkw_file",
            "loop_permutation",
            "tile",
            "unroll",
        ];
        let obj = self.object(v, path, &KEYS)?;
        let name = self.string(obj, path, "name");
        let device = self.string(obj, path, "device");
        let fkw_file = self.string(obj, path, "fkw_file");
        let shape = obj
            .get("shape")
            .and_then(|s| self.shape(s, &format!("{path}.shape")));

        let mut patterns = Some(Vec::new());
        match obj.get("patterns").map(|p| (p, p.as_array())) {
            Some((_, Some(items))) => {
                for (j, item) in items.iter().enumerate() {
                    let p = format!("{path}.patterns[{j}]");
                    match item.as_u64() {
                        Some(id) if set.is_none_or(|s| (1..=s.k() as u64).contains(&id)) => {
                            if let Some(list) = patterns.as_mut() {
                                if list.contains(&(id as u8)) {
                                    self.push(&p, "duplicate pattern id");
                                }
                                list.push(id as u8);
                            }
                        }
                        Some(id) => {
                            self.push(&p, format!("pattern id {id} is not in the pattern set"));
                            patterns = None;
                        }
                        None => {
                            self.push(&p, "expected a pattern id");
                            patterns = None;
                        }
                    }
                }
            }
            Some((_, None)) => {
                self.push(&format!("{path}.patterns"), "expected an array");
                patterns = None;
            }
            None => patterns = None,
        }

        let perm = obj.get("loop_permutation").and_then(|p| {
            let parsed = p.as_str().map(str::parse::<LoopPermutation>);
            match parsed {
                Some(Ok(perm)) => Some(perm),
                Some(Err(e)) => {
                    self.push(&format!("{path}.loop_permutation"), e.to_string());
                    None
                }
                None => {
                    self.push(&format!("{path}.loop_permutation"), "expected a string");
                    None
                }
            }
        });

        let tile_path = format!("{path}.tile");
        let tile = obj.get("tile").and_then(|t| {
            let o = self.object(t, &tile_path, &["h", "w", "oc", "ic"])?;
            let vals = ["h", "w", "oc", "ic"].map(|k| self.count(o, &tile_path, k));
            Some(Tile {
                h: vals[0]?,
                w: vals[1]?,
                oc: vals[2]?,
                ic: vals[3]?,
            })
        });
        let unroll_path = format!("{path}.unroll");
        let unroll = obj.get("unroll").and_then(|u| {
            let o = self.object(u, &unroll_path, &["oc", "iw"])?;
            let vals = ["oc", "iw"].map(|k| self.count(o, &unroll_path, k));
            Some(Unroll {
                oc: vals[0]?,
                iw: vals[1]?,
            })
        });
        if let (Some(t), Some(s)) = (tile, shape) {
            let limits = [
                ("h", t.h, s.output_h()),
                ("w", t.w, s.output_w()),
                ("oc", t.oc, s.out_channels),
                ("ic", t.ic, s.in_channels),
            ];
            for (k, v, max) in limits {
                if v > max {
                    self.push(
                        &format!("{tile_path}.{k}"),
                        format!("tile {v} exceeds layer extent {max}"),
                    );
                }
            }
        }
        Some(LayerRecord {
            name: name?,
            device: device?,
            shape: shape?,
            patterns: patterns?,
            fkw_file: fkw_file?,
            loop_permutation: perm?,
            tile: tile?,
            unroll: unroll?,
        })
    }
}

/// Parses and validates a manifest, reporting every violation found.
pub fn lr_parse(text: &str) -> Result<ModelManifest> {
    let root: Value = serde_json::from_str(text)?;
    let mut c = Checker {
        violations: Vec::new(),
    };
    let obj = c.object(&root, "$", &["version", "pattern_set", "layers"]);
    let Some(obj) = obj else {
        return Err(Error::Validation(c.violations));
    };
    let version = obj.get("version").and_then(|v| {
        if v.as_u64() == Some(LR_VERSION) {
            Some(LR_VERSION)
        } else {
            c.push(
                "$.version",
                format!("unsupported version, expected {LR_VERSION}"),
            );
            None
        }
    });
    let pattern_set =
        obj.get("pattern_set")
            .and_then(|v| match PatternSet::from_json(&v.to_string()) {
                Ok(s) => Some(s),
                Err(e) => {
                    c.push("$.pattern_set", e.to_string());
                    None
                }
            });
    let mut layers = Vec::new();
    let mut layers_ok = true;
    match obj.get("layers").map(|l| l.as_array()) {
        Some(Some(items)) if items.is_empty() => {
            c.push("$.layers", "at least one layer is required");
            layers_ok = false;
        }
        Some(Some(items)) => {
            for (i, item) in items.iter().enumerate() {
                match c.layer(item, &format!("$.layers[{i}]"), pattern_set.as_ref()) {
                    Some(l) => layers.push(Some(l)),
                    None => {
                        layers.push(None);
                        layers_ok = false;
                    }
                }
            }
        }
        Some(None) => {
            c.push("$.layers", "expected an array");
            layers_ok = false;
        }
        None => layers_ok = false,
    }
    for i in 1..layers.len() {
        if let (Some(a), Some(b)) = (&layers[i - 1], &layers[i]) {
            let (p, q) = (&a.shape, &b.shape);
            if p.out_channels != q.in_channels {
                c.push(
                    &format!("$.layers[{i}].shape.in_channels"),
                    format!(
                        "expected {} to chain from the previous layer",
                        p.out_channels
                    ),
                );
            }
            if (p.output_h(), p.output_w()) != (q.input_h, q.input_w) {
                c.push(
                    &format!("$.layers[{i}].shape"),
                    format!(
                        "input must be {}x{} to chain from the previous layer",
                        p.output_h(),
                        p.output_w()
                    ),
                );
            }
        }
    }
    if !c.violations.is_empty() || !layers_ok {
        return Err(Error::Validation(c.violations));
    }
    Ok(ModelManifest {
        version: version.expect("checked"),
        pattern_set: pattern_set.expect("checked"),
        layers: layers.into_iter().map(|l| l.expect("checked")).collect(),
    })
}

/// Canonical text of a manifest.
pub fn lr_emit(manifest: &ModelManifest) -> String {
    let value = serde_json::to_value(manifest).expect("manifest always serializes");
    let mut out = String::new();
    write_value(&value, 0, &mut out);
    out.push('\n');
    out
}

fn inline(v: &Value) -> String {
    match v {
        Value::Array(items) => format!(
            "[{}]",
            items.iter().map(inline).collect::<Vec<_>>().join(", ")
        ),
        other => other.to_string(),
    }
}

fn write_value(v: &Value, depth: usize, out: &mut String) {
    let pad = |d: usize| "  ".repeat(d);
    match v {
        Value::Object(map) if !map.is_empty() => {
            out.push_str("{\n");
            for (i, (k, val)) in map.iter().enumerate() {
                out.push_str(&pad(depth + 1));
                out.push_str(&Value::from(k.as_str()).to_string());
                out.push_str(": ");
                write_value(val, depth + 1, out);
                out.push_str(if i + 1 < map.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(depth));
            out.push('}');
        }
        Value::Array(items) if items.iter().any(|x| x.is_object() || x.is_array()) => {
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                out.push_str(&pad(depth + 1));
                if item.is_object() {
                    write_value(item, depth + 1, out);
                } else {
                    out.push_str(&inline(item));
                }
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(depth));
            out.push(']');
        }
        other => out.push_str(&inline(other)),
    }
}
