//! Seeded synthetic pruned layers for benchmarks and overhead studies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::admm::alpha_for_rate;
use crate::error::Result;
use crate::fkw::{fkw_encode, FkwModel};
use crate::pattern::{build_pattern_set, connectivity_from_norms, project_pattern};
use crate::reorder::{reorder, SparseLayer};
use crate::tensor::{FeatureMap, LayerShape, WeightTensor};

/// Gaussian dense weights for `shape`.
pub fn random_dense(shape: LayerShape, seed: u64) -> WeightTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0f32, 1.0).expect("valid sigma");
    let data = (0..shape.weight_len())
        .map(|_| n.sample(&mut rng))
        .collect();
    let bias = (0..shape.out_channels)
        .map(|_| 0.1 * n.sample(&mut rng))
        .collect();
    WeightTensor::new(shape, data, bias).expect("finite weights")
}

pub fn random_input(shape: &LayerShape, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0f32, 1.0).expect("valid sigma");
    let len = shape.in_channels * shape.input_h * shape.input_w;
    FeatureMap::new(
        shape.in_channels,
        shape.input_h,
        shape.input_w,
        (0..len).map(|_| n.sample(&mut rng)).collect(),
    )
    .expect("finite input")
}

/// Projects `dense` onto its own top-`k` natural patterns, keeps the
/// `ceil(kernels / rate)` kernels retaining the most energy, then reorders
/// and encodes. Returns the model and the masked dense weights.
pub fn prune_dense(dense: &WeightTensor, k: usize, rate: f64) -> Result<(FkwModel, WeightTensor)> {
    let s = dense.shape;
    let set = build_pattern_set(std::slice::from_ref(dense), k)?;
    let mut ids = Vec::with_capacity(s.kernel_count());
    let mut energy = Vec::with_capacity(s.kernel_count());
    let mut masked = dense.clone();
    for kernel in masked.data.chunks_exact_mut(9) {
        let k64: [f64; 9] = std::array::from_fn(|j| kernel[j] as f64);
        let (id, projected) = project_pattern(&k64, &set);
        ids.push(id);
        energy.push(projected.iter().map(|v| v * v).sum::<f64>());
        for (w, p) in kernel.iter_mut().zip(projected) {
            *w = p as f32;
        }
    }
    let alpha = alpha_for_rate(s.kernel_count(), rate);
    let mask = connectivity_from_norms(&energy, s.out_channels, s.in_channels, alpha)?;
    let mut assignments = Vec::with_capacity(ids.len());
    for (i, kernel) in masked.data.chunks_exact_mut(9).enumerate() {
        if mask.kept[i] {
            assignments.push(Some(ids[i]));
        } else {
            kernel.fill(0.0);
            assignments.push(None);
        }
    }
    let layer = SparseLayer::from_dense(&masked, &assignments, &set)?;
    let (layer, plan) = reorder(&layer)?;
    Ok((fkw_encode(&layer, &plan)?, masked))
}

/// A random layer pruned to `k` patterns and connectivity `rate`.
pub fn pruned_layer(
    shape: LayerShape,
    k: usize,
    rate: f64,
    seed: u64,
) -> Result<(FkwModel, WeightTensor)> {
    prune_dense(&random_dense(shape, seed), k, rate)
}

/// Desk-scale VGG-style layer used by benches: 32 -> 32 channels on a 16x16 input.
pub fn vgg_like_shape() -> LayerShape {
    LayerShape::conv3x3(32, 32, 16, 16).expect("static shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::{conv_fkw, ExecConfig};
    use crate::tensor::conv_dense;

    #[test]
    fn pruned_layer_is_feasible_and_executes() {
        let shape = LayerShape::conv3x3(6, 5, 7, 7).unwrap();
        let (m, masked) = pruned_layer(shape, 4, 3.6, 1).unwrap();
        assert_eq!(m.total_kernels(), alpha_for_rate(30, 3.6));
        assert_eq!(m.to_dense().unwrap(), masked);
        let input = random_input(&shape, 2);
        let (out, _) = conv_fkw(&input, &m, &ExecConfig::default_for(&shape)).unwrap();
        let want = conv_dense(&input, &masked).unwrap();
        for (a, b) in out.data.iter().zip(&want.data) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }
}
