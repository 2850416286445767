use crate::error::{Error, Result};
use crate::fkw::CsrLayer;
use crate::tensor::FeatureMap;

/// Direct convolution driven by a CSR weight matrix, one row per output channel.
pub fn conv_csr(input: &FeatureMap, layer: &CsrLayer) -> Result<FeatureMap> {
    layer.validate()?;
    let s = &layer.shape;
    if (input.channels, input.height, input.width) != (s.in_channels, s.input_h, s.input_w) {
        return Err(Error::Shape("input does not match the layer".into()));
    }
    let (oh, ow, klen) = (s.output_h(), s.output_w(), s.kernel_len());
    let mut acc = vec![0.0f64; oh * ow];
    let mut data = Vec::with_capacity(s.out_channels * oh * ow);
    for oc in 0..s.out_channels {
        acc.fill(0.0);
        for i in layer.row_ptr[oc] as usize..layer.row_ptr[oc + 1] as usize {
            let col = layer.col_idx[i] as usize;
            let (ic, r, c) = (col / klen, col % klen / s.kernel_w, col % s.kernel_w);
            let v = layer.values[i] as f64;
            let plane = input.channel(ic);
            for y in 0..oh {
                let src = &plane[(y * s.stride + r) * input.width + c..];
                for (x, a) in acc[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                    *a += v * src[x * s.stride] as f64;
                }
            }
        }
        let bias = layer.bias[oc] as f64;
        data.extend(acc.iter().map(|a| (a + bias) as f32));
    }
    FeatureMap::new(s.out_channels, oh, ow, data)
}
