//! Dense tensors, layer geometry and the reference convolution.
//!
//! Layout is channel-major and row-major within a channel. Weights are indexed
//! `[out_channel][in_channel][row][col]`. No padding or dilation is supported.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magic prefix of a serialized tensor record.
pub const PTK_MAGIC: &[u8; 4] = b"PTK0";

/// Geometry of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerShape {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub input_h: usize,
    pub input_w: usize,
}

impl LayerShape {
    pub fn new(
        kernel_h: usize,
        kernel_w: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        input_h: usize,
        input_w: usize,
    ) -> Result<Self> {
        let shape = Self {
            kernel_h,
            kernel_w,
            in_channels,
            out_channels,
            stride,
            input_h,
            input_w,
        };
        shape.validate()?;
        Ok(shape)
    }

    /// 3x3, stride 1 layer.
    pub fn conv3x3(
        in_channels: usize,
        out_channels: usize,
        input_h: usize,
        input_w: usize,
    ) -> Result<Self> {
        Self::new(3, 3, in_channels, out_channels, 1, input_h, input_w)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("kernel_h", self.kernel_h),
            ("kernel_w", self.kernel_w),
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("stride", self.stride),
            ("input_h", self.input_h),
            ("input_w", self.input_w),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Shape(format!("{name} must be >= 1")));
            }
        }
        if self.kernel_h > self.input_h || self.kernel_w > self.input_w {
            return Err(Error::Shape(format!(
                "kernel {}x{} larger than input {}x{}",
                self.kernel_h, self.kernel_w, self.input_h, self.input_w
            )));
        }
        Ok(())
    }

    pub fn output_h(&self) -> usize {
        (self.input_h - self.kernel_h) / self.stride + 1
    }

    pub fn output_w(&self) -> usize {
        (self.input_w - self.kernel_w) / self.stride + 1
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    pub fn kernel_count(&self) -> usize {
        self.in_channels * self.out_channels
    }

    pub fn weight_len(&self) -> usize {
        self.kernel_len() * self.kernel_count()
    }

    pub fn is_3x3(&self) -> bool {
        self.kernel_h == 3 && self.kernel_w == 3
    }
}

/// Convolution weights plus per-output-channel bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTensor {
    pub shape: LayerShape,
    pub data: Vec<f32>,
    pub bias: Vec<f32>,
}

impl WeightTensor {
    pub fn new(shape: LayerShape, data: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.weight_len() {
            return Err(Error::Shape(format!(
                "weight data has {} values, expected {}",
                data.len(),
                shape.weight_len()
            )));
        }
        if bias.len() != shape.out_channels {
            return Err(Error::Shape(format!(
                "bias has {} values, expected {}",
                bias.len(),
                shape.out_channels
            )));
        }
        if let Some(pos) = data.iter().chain(bias.iter()).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "weight tensor value at flat index {pos}"
            )));
        }
        Ok(Self { shape, data, bias })
    }

    pub fn zeros(shape: LayerShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.weight_len()],
            bias: vec![0.0; shape.out_channels],
        }
    }

    #[inline]
    pub fn index(&self, out_c: usize, in_c: usize, row: usize, col: usize) -> usize {
        let s = &self.shape;
        ((out_c * s.in_channels + in_c) * s.kernel_h + row) * s.kernel_w + col
    }

    #[inline]
    pub fn get(&self, out_c: usize, in_c: usize, row: usize, col: usize) -> f32 {
        self.data[self.index(out_c, in_c, row, col)]
    }

    /// The kernel connecting `in_c` to `out_c`, row-major.
    pub fn kernel(&self, out_c: usize, in_c: usize) -> &[f32] {
        let len = self.shape.kernel_len();
        let start = (out_c * self.shape.in_channels + in_c) * len;
        &self.data[start..start + len]
    }

    pub fn kernel_mut(&mut self, out_c: usize, in_c: usize) -> &mut [f32] {
        let len = self.shape.kernel_len();
        let start = (out_c * self.shape.in_channels + in_c) * len;
        &mut self.data[start..start + len]
    }

    /// Number of kernels with at least one nonzero weight.
    pub fn nonzero_kernels(&self) -> usize {
        self.data
            .chunks(self.shape.kernel_len())
            .filter(|k| k.iter().any(|&v| v != 0.0))
            .count()
    }

    pub fn to_ptk_bytes(&self) -> Vec<u8> {
        let s = &self.shape;
        let mut out = Vec::with_capacity(8 + 4 * (6 + self.data.len() + self.bias.len()));
        let dims = [s.out_channels, s.in_channels, s.kernel_h, s.kernel_w].map(|d| d as u32);
        write_ptk(&mut out, &dims, &self.data).expect("writing to a Vec cannot fail");
        write_ptk(&mut out, &[s.out_channels as u32], &self.bias)
            .expect("writing to a Vec cannot fail");
        out
    }

    /// Reads a weights record followed by a bias record. Stride and input
    /// extent are not part of the tensor file and must be supplied.
    pub fn from_ptk_bytes(
        bytes: &[u8],
        stride: usize,
        input_h: usize,
        input_w: usize,
    ) -> Result<Self> {
        let mut cursor = bytes;
        let (dims, data) = read_ptk(&mut cursor)?;
        if dims.len() != 4 {
            return Err(Error::Shape(format!(
                "weight record has rank {}, expected 4",
                dims.len()
            )));
        }
        let (bias_dims, bias) = read_ptk(&mut cursor)?;
        if bias_dims != [dims[0]] {
            return Err(Error::Shape(
                "bias record does not match out_channels".into(),
            ));
        }
        let shape = LayerShape::new(dims[2], dims[3], dims[1], dims[0], stride, input_h, input_w)?;
        Self::new(shape, data, bias)
    }
}

/// A `channels x height x width` activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape("feature map dimensions must be >= 1".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "feature map data has {} values, expected {}",
                data.len(),
                channels * height * width
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "feature map value at flat index {pos}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn relu(mut self) -> Self {
        for v in &mut self.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self
    }

    pub fn to_ptk_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.data.len());
        let dims = [self.channels as u32, self.height as u32, self.width as u32];
        write_ptk(&mut out, &dims, &self.data).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_ptk_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let (dims, data) = read_ptk(&mut cursor)?;
        if dims.len() != 3 {
            return Err(Error::Shape(format!(
                "feature map record has rank {}, expected 3",
                dims.len()
            )));
        }
        Self::new(dims[0], dims[1], dims[2], data)
    }
}

/// Writes one `PTK0` record: magic, u32 rank, u32 dims, f32 data (all little-endian).
pub fn write_ptk<W: Write>(w: &mut W, dims: &[u32], data: &[f32]) -> std::io::Result<()> {
    w.write_all(PTK_MAGIC)?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one `PTK0` record, advancing the reader past it.
pub fn read_ptk<R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PTK_MAGIC {
        return Err(crate::error::format_err("magic", 0, "expected PTK0"));
    }
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(crate::error::format_err(
            "dims",
            0,
            format!("implausible rank {rank}"),
        ));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(r)? as usize);
    }
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| crate::error::format_err("dims", 0, "element count overflows"))?;
    let mut raw = vec![0u8; len * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dims, data))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn check_conv_shapes(input: &FeatureMap, shape: &LayerShape) -> Result<()> {
    if input.channels != shape.in_channels {
        return Err(Error::Shape(format!(
            "input has {} channels, layer expects {}",
            input.channels, shape.in_channels
        )));
    }
    if input.height != shape.input_h || input.width != shape.input_w {
        return Err(Error::Shape(format!(
            "input is {}x{}, layer expects {}x{}",
            input.height, input.width, shape.input_h, shape.input_w
        )));
    }
    Ok(())
}

pub(crate) fn check_input(input: &FeatureMap, shape: &LayerShape) -> Result<()> {
    shape.validate()?;
    check_conv_shapes(input, shape)
}

/// Reference dense cross-correlation with per-channel bias.
///
/// Accumulates in `f64` in `(in_channel, row, col)` order and rounds once to `f32`.
pub fn conv_dense(input: &FeatureMap, weights: &WeightTensor) -> Result<FeatureMap> {
    let s = weights.shape;
    check_input(input, &s)?;
    let (oh, ow) = (s.output_h(), s.output_w());
    let mut out = FeatureMap::zeros(s.out_channels, oh, ow);
    for oc in 0..s.out_channels {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = weights.bias[oc] as f64;
                for ic in 0..s.in_channels {
                    let k = weights.kernel(oc, ic);
                    for r in 0..s.kernel_h {
                        let row = &input.data[input.index(ic, y * s.stride + r, x * s.stride)..];
                        for c in 0..s.kernel_w {
                            acc += k[r * s.kernel_w + c] as f64 * row[c] as f64;
                        }
                    }
                }
                out.data[(oc * oh + y) * ow + x] = acc as f32;
            }
        }
    }
    Ok(out)
}

/// Central-difference gradient of `loss_fn` with respect to every weight.
///
/// The returned vector is laid out exactly like `weights.data`. Because weights are
/// stored as `f32`, the divisor is the actually representable perturbation width.
pub fn finite_diff_grad<F>(loss_fn: F, weights: &WeightTensor, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&WeightTensor) -> f64,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    let mut probe = weights.clone();
    let mut grad = Vec::with_capacity(weights.data.len());
    for i in 0..weights.data.len() {
        let w = weights.data[i];
        let hi = (w as f64 + eps) as f32;
        let lo = (w as f64 - eps) as f32;
        probe.data[i] = hi;
        let f_hi = loss_fn(&probe);
        probe.data[i] = lo;
        let f_lo = loss_fn(&probe);
        probe.data[i] = w;
        if !f_hi.is_finite() || !f_lo.is_finite() {
            return Err(Error::NonFinite(format!("loss at weight index {i}")));
        }
        grad.push((f_hi - f_lo) / (hi as f64 - lo as f64));
    }
    Ok(grad)
}

/// Central-difference gradient over a flat `f64` parameter vector.
pub fn finite_diff_grad_slice<F>(mut loss_fn: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    let mut probe = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let w = params[i];
        probe[i] = w + eps;
        let f_hi = loss_fn(&probe);
        probe[i] = w - eps;
        let f_lo = loss_fn(&probe);
        probe[i] = w;
        if !f_hi.is_finite() || !f_lo.is_finite() {
            return Err(Error::NonFinite(format!("loss at parameter index {i}")));
        }
        grad.push((f_hi - f_lo) / (2.0 * eps));
    }
    Ok(grad)
}
