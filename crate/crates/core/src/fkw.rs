//! FKW compressed storage: five arrays (offset, reorder, index, stride, weight)
//! describing one reordered pattern-pruned layer, plus a CSR baseline for
//! overhead comparisons.
//!
//! The stride array holds, per stored filter, `k + 1` cumulative kernel counts:
//! entry `p` is the offset (within the filter) of the first kernel using
//! pattern id `p + 1`, so the pattern id of every kernel is implicit.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{format_err, Error, Result};
use crate::pattern::{Pattern, PatternSet, PATTERN_ENTRIES};
use crate::reorder::{ReorderPlan, SparseKernel, SparseLayer};
use crate::tensor::{LayerShape, WeightTensor};

pub const FKW_MAGIC: &[u8; 4] = b"FKW1";
pub const FKW_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FkwModel {
    pub shape: LayerShape,
    pub pattern_set: PatternSet,
    /// Cumulative kernel counts per stored filter, length `C_out + 1`.
    pub offset: Vec<u32>,
    /// Original output channel of each stored filter.
    pub reorder: Vec<u32>,
    /// Input channel of each stored kernel.
    pub index: Vec<u32>,
    /// Per stored filter, `k + 1` kernel offsets delimiting the pattern runs.
    pub stride: Vec<Vec<u32>>,
    /// Four retained weights per kernel.
    pub weights: Vec<f32>,
    /// Bias per original output channel. Not part of the structure overhead.
    pub bias: Vec<f32>,
}

impl FkwModel {
    pub fn filters(&self) -> usize {
        self.reorder.len()
    }

    pub fn total_kernels(&self) -> usize {
        self.index.len()
    }

    /// Absolute kernel range of stored filter `f`.
    pub fn filter_range(&self, f: usize) -> Range<usize> {
        self.offset[f] as usize..self.offset[f + 1] as usize
    }

    /// Non-empty pattern runs of stored filter `f` as `(pattern_id, absolute kernel range)`.
    pub fn runs(&self, f: usize) -> impl Iterator<Item = (u8, Range<usize>)> + '_ {
        let base = self.offset[f] as usize;
        self.stride[f]
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[1] > w[0])
            .map(move |(p, w)| ((p + 1) as u8, base + w[0] as usize..base + w[1] as usize))
    }

    pub fn kernel_weights(&self, kernel: usize) -> &[f32] {
        &self.weights[kernel * PATTERN_ENTRIES..(kernel + 1) * PATTERN_ENTRIES]
    }

    /// Checks every structural invariant, reporting the first offending array and position.
    pub fn validate(&self) -> Result<()> {
        let s = &self.shape;
        s.validate()?;
        if !s.is_3x3() {
            return Err(Error::UnsupportedKernel {
                rows: s.kernel_h,
                cols: s.kernel_w,
            });
        }
        let n = s.out_channels;
        let k = self.pattern_set.k();
        if self.offset.len() != n + 1 {
            return Err(format_err(
                "offset",
                self.offset.len(),
                format!("expected {} entries", n + 1),
            ));
        }
        if self.offset[0] != 0 {
            return Err(format_err("offset", 0, "must start at 0"));
        }
        if let Some(i) = (1..=n).find(|&i| self.offset[i] < self.offset[i - 1]) {
            return Err(format_err("offset", i, "must be non-decreasing"));
        }
        if self.offset[n] as usize != self.index.len() {
            return Err(format_err(
                "offset",
                n,
                "last entry must equal the kernel count",
            ));
        }
        if self.reorder.len() != n {
            return Err(format_err(
                "reorder",
                self.reorder.len(),
                format!("expected {n} entries"),
            ));
        }
        let mut seen = vec![false; n];
        for (i, &r) in self.reorder.iter().enumerate() {
            if r as usize >= n || std::mem::replace(&mut seen[r as usize], true) {
                return Err(format_err("reorder", i, "not a permutation"));
            }
        }
        if let Some(i) = self.index.iter().position(|&c| c as usize >= s.in_channels) {
            return Err(format_err("index", i, "input channel out of range"));
        }
        if self.stride.len() != n {
            return Err(format_err(
                "stride",
                self.stride.len(),
                format!("expected {n} filters"),
            ));
        }
        for f in 0..n {
            let st = &self.stride[f];
            let len = self.offset[f + 1] - self.offset[f];
            if st.len() != k + 1 {
                return Err(format_err(
                    "stride",
                    f,
                    format!("filter needs {} entries", k + 1),
                ));
            }
            if st[0] != 0 || st[k] != len {
                return Err(format_err(
                    "stride",
                    f,
                    "must start at 0 and end at the filter length",
                ));
            }
            if st.windows(2).any(|w| w[1] < w[0]) {
                return Err(format_err("stride", f, "must be non-decreasing"));
            }
            let base = self.offset[f] as usize;
            for w in st.windows(2) {
                let run = &self.index[base + w[0] as usize..base + w[1] as usize];
                if let Some(j) = run.windows(2).position(|p| p[1] <= p[0]) {
                    return Err(format_err(
                        "index",
                        base + w[0] as usize + j + 1,
                        "input channels must increase within a pattern run",
                    ));
                }
            }
            // the same input channel may not appear in two runs of one filter
            let mut seen = vec![false; s.in_channels];
            for i in self.filter_range(f) {
                if std::mem::replace(&mut seen[self.index[i] as usize], true) {
                    return Err(format_err(
                        "index",
                        i,
                        "input channel repeated within a filter",
                    ));
                }
            }
        }
        if self.weights.len() != PATTERN_ENTRIES * self.index.len() {
            return Err(format_err(
                "weights",
                self.weights.len(),
                format!("expected {} values", PATTERN_ENTRIES * self.index.len()),
            ));
        }
        if let Some(i) = self.weights.iter().position(|w| !w.is_finite()) {
            return Err(format_err("weights", i, "non-finite value"));
        }
        if self.bias.len() != n {
            return Err(format_err(
                "bias",
                self.bias.len(),
                format!("expected {n} entries"),
            ));
        }
        if let Some(i) = self.bias.iter().position(|w| !w.is_finite()) {
            return Err(format_err("bias", i, "non-finite value"));
        }
        Ok(())
    }

    /// Bytes of all non-weight arrays: offset, reorder, index and stride.
    pub fn structure_overhead(&self) -> usize {
        4 * (self.offset.len()
            + self.reorder.len()
            + self.index.len()
            + self.stride.iter().map(Vec::len).sum::<usize>())
    }

    /// Dense weights in original output-channel order.
    pub fn to_dense(&self) -> Result<WeightTensor> {
        let (layer, plan) = fkw_decode(self)?;
        let stored = layer.to_dense();
        let mut w = WeightTensor::zeros(self.shape);
        let len = self.shape.in_channels * self.shape.kernel_len();
        for (f, &orig) in plan.filter_permutation.iter().enumerate() {
            w.data[orig * len..(orig + 1) * len]
                .copy_from_slice(&stored.data[f * len..(f + 1) * len]);
        }
        w.bias = self.bias.clone();
        Ok(w)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.shape;
        let mut out = Vec::new();
        out.extend_from_slice(FKW_MAGIC);
        out.extend_from_slice(&FKW_VERSION.to_le_bytes());
        for d in [
            s.kernel_h,
            s.kernel_w,
            s.in_channels,
            s.out_channels,
            s.stride,
            s.input_h,
            s.input_w,
        ] {
            put_u32(&mut out, d as u32);
        }
        put_u32(&mut out, self.pattern_set.k() as u32);
        for p in self.pattern_set.patterns() {
            out.extend(p.flat_indices().map(|i| i as u8));
        }
        for arr in [&self.offset, &self.reorder, &self.index] {
            put_u32(&mut out, arr.len() as u32);
            arr.iter().for_each(|&v| put_u32(&mut out, v));
        }
        put_u32(&mut out, self.stride.len() as u32);
        put_u32(&mut out, self.pattern_set.k() as u32 + 1);
        self.stride
            .iter()
            .flatten()
            .for_each(|&v| put_u32(&mut out, v));
        for arr in [&self.weights, &self.bias] {
            put_u32(&mut out, arr.len() as u32);
            arr.iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take("header", 4)? != FKW_MAGIC {
            return Err(format_err("header", 0, "expected magic FKW1"));
        }
        let version = u16::from_le_bytes(r.take("header", 2)?.try_into().expect("two bytes"));
        if version != FKW_VERSION {
            return Err(format_err(
                "header",
                4,
                format!("unsupported version {version}"),
            ));
        }
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = r.u32("shape")? as usize;
        }
        let shape = LayerShape::new(
            dims[0], dims[1], dims[2], dims[3], dims[4], dims[5], dims[6],
        )?;
        let k = r.u32("patterns")? as usize;
        let mut patterns = Vec::with_capacity(k.min(64));
        for i in 0..k {
            let raw = r.take("patterns", PATTERN_ENTRIES)?;
            let flat: [usize; PATTERN_ENTRIES] = std::array::from_fn(|j| raw[j] as usize);
            patterns.push(
                Pattern::from_flat(flat).map_err(|e| format_err("patterns", i, e.to_string()))?,
            );
        }
        let pattern_set =
            PatternSet::new(patterns).map_err(|e| format_err("patterns", 0, e.to_string()))?;
        let offset = r.u32_array("offset")?;
        let reorder = r.u32_array("reorder")?;
        let index = r.u32_array("index")?;
        let filters = r.u32("stride")? as usize;
        let per_filter = r.u32("stride")? as usize;
        let total = filters
            .checked_mul(per_filter)
            .filter(|&t| t <= r.remaining() / 4)
            .ok_or_else(|| format_err("stride", 0, "length exceeds file"))?;
        let flat = (0..total)
            .map(|_| r.u32("stride"))
            .collect::<Result<Vec<_>>>()?;
        let stride = if per_filter == 0 {
            vec![Vec::new(); filters]
        } else {
            flat.chunks(per_filter).map(<[u32]>::to_vec).collect()
        };
        let weights = r.f32_array("weights")?;
        let bias = r.f32_array("bias")?;
        if r.remaining() != 0 {
            return Err(format_err("trailer", r.pos, "unexpected trailing bytes"));
        }
        let model = Self {
            shape,
            pattern_set,
            offset,
            reorder,
            index,
            stride,
            weights,
            bias,
        };
        model.validate()?;
        Ok(model)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, array: &str, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(format_err(array, self.pos, "file truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, array: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(array, 4)?.try_into().expect("four bytes"),
        ))
    }

    fn len_prefix(&mut self, array: &str) -> Result<usize> {
        let n = self.u32(array)? as usize;
        if n > self.remaining() / 4 {
            return Err(format_err(array, 0, "length exceeds file"));
        }
        Ok(n)
    }

    fn u32_array(&mut self, array: &str) -> Result<Vec<u32>> {
        let n = self.len_prefix(array)?;
        (0..n).map(|_| self.u32(array)).collect()
    }

    fn f32_array(&mut self, array: &str) -> Result<Vec<f32>> {
        let n = self.len_prefix(array)?;
        (0..n)
            .map(|_| self.u32(array).map(f32::from_bits))
            .collect()
    }
}

/// Encodes an already reordered layer. Filters whose kernels are not sorted by
/// `(pattern_id, in_channel)` are rejected rather than silently reordered.
pub fn fkw_encode(layer: &SparseLayer, plan: &ReorderPlan) -> Result<FkwModel> {
    layer.validate()?;
    plan.validate()?;
    if plan.len() != layer.filters.len() {
        return Err(Error::Shape(format!(
            "plan covers {} filters, layer has {}",
            plan.len(),
            layer.filters.len()
        )));
    }
    if let Some(f) = layer.filters.iter().position(|f| {
        f.windows(2)
            .any(|w| (w[0].pattern_id, w[0].in_channel) >= (w[1].pattern_id, w[1].in_channel))
    }) {
        return Err(Error::Precondition(format!(
            "filter {f} is not sorted by (pattern_id, in_channel); run reorder first"
        )));
    }
    let k = layer.pattern_set.k();
    let mut offset = vec![0u32];
    let mut index = Vec::with_capacity(layer.total_kernels());
    let mut stride = Vec::with_capacity(layer.filters.len());
    let mut weights = Vec::with_capacity(PATTERN_ENTRIES * layer.total_kernels());
    for filter in &layer.filters {
        let mut st = vec![0u32; k + 1];
        for kern in filter {
            st[kern.pattern_id as usize] += 1;
            index.push(kern.in_channel);
            weights.extend_from_slice(&kern.weights);
        }
        for p in 1..=k {
            st[p] += st[p - 1];
        }
        stride.push(st);
        offset.push(index.len() as u32);
    }
    let mut bias = vec![0.0; layer.bias.len()];
    for (f, &orig) in plan.filter_permutation.iter().enumerate() {
        bias[orig] = layer.bias[f];
    }
    let model = FkwModel {
        shape: layer.shape,
        pattern_set: layer.pattern_set.clone(),
        offset,
        reorder: plan.filter_permutation.iter().map(|&p| p as u32).collect(),
        index,
        stride,
        weights,
        bias,
    };
    debug_assert!(model.validate().is_ok());
    Ok(model)
}

/// Exact inverse of [`fkw_encode`].
pub fn fkw_decode(model: &FkwModel) -> Result<(SparseLayer, ReorderPlan)> {
    model.validate()?;
    let filters = (0..model.filters())
        .map(|f| {
            model
                .runs(f)
                .flat_map(|(id, range)| {
                    range.map(move |i| SparseKernel {
                        in_channel: model.index[i],
                        pattern_id: id,
                        weights: model.kernel_weights(i).try_into().expect("four weights"),
                    })
                })
                .collect()
        })
        .collect();
    let layer = SparseLayer {
        shape: model.shape,
        pattern_set: model.pattern_set.clone(),
        filters,
        bias: model
            .reorder
            .iter()
            .map(|&o| model.bias[o as usize])
            .collect(),
    };
    let plan =
        ReorderPlan::from_permutation(model.reorder.iter().map(|&r| r as usize).collect(), &layer);
    Ok((layer, plan))
}

/// CSR view of the flattened `C_out x (C_in * P * Q)` weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsrLayer {
    pub shape: LayerShape,
    pub row_ptr: Vec<u32>,
    pub col_idx: Vec<u32>,
    pub values: Vec<f32>,
    pub bias: Vec<f32>,
}

impl CsrLayer {
    pub fn from_dense(weights: &WeightTensor) -> Self {
        let cols = weights.shape.in_channels * weights.shape.kernel_len();
        let mut row_ptr = vec![0u32];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for row in weights.data.chunks(cols) {
            for (c, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(c as u32);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len() as u32);
        }
        Self {
            shape: weights.shape,
            row_ptr,
            col_idx,
            values,
            bias: weights.bias.clone(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn validate(&self) -> Result<()> {
        let rows = self.shape.out_channels;
        let cols = self.shape.in_channels * self.shape.kernel_len();
        if self.row_ptr.len() != rows + 1 || self.row_ptr[0] != 0 {
            return Err(format_err(
                "row_ptr",
                0,
                format!("expected {} entries starting at 0", rows + 1),
            ));
        }
        if let Some(i) = self.row_ptr.windows(2).position(|w| w[1] < w[0]) {
            return Err(format_err("row_ptr", i + 1, "must be non-decreasing"));
        }
        if self.row_ptr[rows] as usize != self.values.len()
            || self.col_idx.len() != self.values.len()
        {
            return Err(format_err(
                "col_idx",
                self.col_idx.len(),
                "length mismatch with values",
            ));
        }
        for r in 0..rows {
            let seg = &self.col_idx[self.row_ptr[r] as usize..self.row_ptr[r + 1] as usize];
            if let Some(j) = seg.iter().position(|&c| c as usize >= cols) {
                return Err(format_err(
                    "col_idx",
                    self.row_ptr[r] as usize + j,
                    "column out of range",
                ));
            }
            if let Some(j) = seg.windows(2).position(|w| w[1] <= w[0]) {
                return Err(format_err(
                    "col_idx",
                    self.row_ptr[r] as usize + j + 1,
                    "columns must increase",
                ));
            }
        }
        Ok(())
    }

    /// Bytes of `row_ptr` and `col_idx`.
    pub fn structure_overhead(&self) -> usize {
        4 * (self.row_ptr.len() + self.col_idx.len())
    }

    pub fn to_dense(&self) -> WeightTensor {
        let cols = self.shape.in_channels * self.shape.kernel_len();
        let mut w = WeightTensor::zeros(self.shape);
        for r in 0..self.shape.out_channels {
            for i in self.row_ptr[r] as usize..self.row_ptr[r + 1] as usize {
                w.data[r * cols + self.col_idx[i] as usize] = self.values[i];
            }
        }
        w.bias = self.bias.clone();
        w
    }
}

/// Percentage of CSR structure bytes saved by FKW.
pub fn overhead_saving(fkw: &FkwModel, csr: &CsrLayer) -> f64 {
    100.0 * (1.0 - fkw.structure_overhead() as f64 / csr.structure_overhead() as f64)
}

/// Small hand-built layer in stored (already reordered) form: four filters
/// holding 2, 2, 2 and 3 kernels, with original filters 2 and 3 swapped.
pub fn worked_example() -> (SparseLayer, ReorderPlan) {
    let set = PatternSet::new(vec![
        Pattern::new([(0, 1), (1, 0), (1, 1), (1, 2)]).expect("valid pattern"),
        Pattern::new([(1, 1), (1, 2), (2, 1), (2, 2)]).expect("valid pattern"),
    ])
    .expect("distinct patterns");
    let kern = |in_channel: u32, pattern_id: u8, base: f32| SparseKernel {
        in_channel,
        pattern_id,
        weights: [base, base + 0.25, base + 0.5, base + 0.75],
    };
    let filters = vec![
        vec![kern(3, 1, 1.0), kern(1, 2, 2.0)],
        vec![kern(0, 1, -1.0), kern(2, 1, 0.5)],
        vec![kern(1, 1, 3.0), kern(3, 2, -2.0)],
        vec![kern(0, 1, 1.5), kern(2, 2, -1.5), kern(3, 2, 4.0)],
    ];
    let layer = SparseLayer {
        shape: LayerShape::conv3x3(4, 4, 6, 6).expect("static shape"),
        pattern_set: set,
        filters,
        bias: vec![0.5, -0.25, 0.125, 1.0],
    };
    let plan = ReorderPlan::from_permutation(vec![0, 1, 3, 2], &layer);
    (layer, plan)
}
