//! Property tests over randomly generated layers, configurations and manifests.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use patconv::exec::{conv_fkw, lre_load_model, ExecConfig, LoopPermutation};
use patconv::fkw::{fkw_decode, fkw_encode, CsrLayer, FkwModel};
use patconv::lr::{lr_emit, lr_parse};
use patconv::pattern::{all_patterns, PatternSet};
use patconv::pipeline::{manifest_for, run_layers};
use patconv::reorder::{apply_inverse_reorder, reorder, SparseKernel, SparseLayer};
use patconv::synth::{prune_dense, random_dense, random_input};
use patconv::tensor::{conv_dense, FeatureMap, LayerShape, WeightTensor};
use patconv::tune::{Chromosome, SearchSpace, GENES};

fn random_layer(seed: u64) -> SparseLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cin = rng.random_range(1..=6);
    let cout = rng.random_range(1..=8);
    let k = rng.random_range(1..=8);
    let mut all = all_patterns();
    all.shuffle(&mut rng);
    let set = PatternSet::new(all[..k].to_vec()).unwrap();
    let density = rng.random_range(0.0..1.0);
    let mut filters = Vec::new();
    for _ in 0..cout {
        let mut f = Vec::new();
        for ic in 0..cin as u32 {
            if rng.random_bool(density) {
                f.push(SparseKernel {
                    in_channel: ic,
                    pattern_id: rng.random_range(1..=k as u8),
                    weights: std::array::from_fn(|_| rng.random_range(-2.0..2.0)),
                });
            }
        }
        f.shuffle(&mut rng);
        filters.push(f);
    }
    SparseLayer {
        shape: LayerShape::conv3x3(cin, cout, rng.random_range(3..=7), rng.random_range(3..=7))
            .unwrap(),
        pattern_set: set,
        filters,
        bias: (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

fn model(seed: u64, stride: usize) -> (FkwModel, WeightTensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = LayerShape::new(
        3,
        3,
        rng.random_range(1..=6),
        rng.random_range(1..=8),
        stride,
        rng.random_range(3..=9),
        rng.random_range(3..=9),
    )
    .unwrap();
    let k = rng.random_range(1..=8);
    let rate = rng.random_range(1.0..5.0);
    prune_dense(&random_dense(shape, seed), k, rate).unwrap()
}

fn arb_config() -> impl Strategy<Value = (usize, [usize; 4], [usize; 2], bool, bool)> {
    (
        0..4usize,
        [1..10usize, 1..10usize, 1..10usize, 1..10usize],
        [1..5usize, 1..5usize],
        any::<bool>(),
        any::<bool>(),
    )
}

fn config(
    shape: &LayerShape,
    (perm, t, u, lre, reorder): (usize, [usize; 4], [usize; 2], bool, bool),
) -> ExecConfig {
    ExecConfig {
        loop_permutation: LoopPermutation::ALL[perm],
        tile_h: t[0],
        tile_w: t[1],
        tile_oc: t[2],
        tile_ic: t[3],
        unroll_oc: u[0],
        unroll_iw: u[1],
        lre_enabled: lre,
        reorder_enabled: reorder,
    }
    .clamped(shape)
}

fn close(a: &[f32], b: &[f32], rel: f32) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= rel * y.abs().max(1e-6))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear_without_bias(seed in any::<u64>(), a in -4.0f32..4.0) {
        let mut w = random_dense(LayerShape::conv3x3(3, 4, 6, 5).unwrap(), seed);
        w.bias.fill(0.0);
        let x = random_input(&w.shape, seed ^ 1);
        let scaled = FeatureMap::new(x.channels, x.height, x.width, x.data.iter().map(|v| a * v).collect()).unwrap();
        let y = conv_dense(&x, &w).unwrap();
        let ya = conv_dense(&scaled, &w).unwrap();
        // error scale is the sum of |w||x| under each output, not the output itself
        let mut wa = w.clone();
        wa.data.iter_mut().for_each(|v| *v = v.abs());
        let xa = FeatureMap::new(x.channels, x.height, x.width, x.data.iter().map(|v| v.abs()).collect()).unwrap();
        let scale = conv_dense(&xa, &wa).unwrap();
        for ((got, base), s) in ya.data.iter().zip(&y.data).zip(&scale.data) {
            prop_assert!((got - a * base).abs() <= 1e-6 * a.abs() * s.max(1e-6));
        }
    }

    #[test]
    fn reorder_sorts_groups_and_keeps_lengths(seed in any::<u64>()) {
        let layer = random_layer(seed);
        let (stored, plan) = reorder(&layer).unwrap();
        prop_assert!(stored.kernels_sorted());
        for f in &stored.filters {
            prop_assert!(f.windows(2).all(|w| w[0].pattern_id <= w[1].pattern_id));
        }
        let lens: Vec<usize> = plan.group_boundaries.iter().map(|g| g.filter_length).collect();
        prop_assert!(lens.windows(2).all(|w| w[0] > w[1]));
        for g in &plan.group_boundaries {
            prop_assert!(stored.filters[g.start..g.end].iter().all(|f| f.len() == g.filter_length));
        }
        let mut before: Vec<usize> = layer.filters.iter().map(Vec::len).collect();
        let mut after: Vec<usize> = stored.filters.iter().map(Vec::len).collect();
        before.sort_unstable();
        after.sort_unstable();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn reorder_preserves_convolution(seed in any::<u64>()) {
        let layer = random_layer(seed);
        let (stored, plan) = reorder(&layer).unwrap();
        let x = random_input(&layer.shape, seed ^ 2);
        let want = conv_dense(&x, &layer.to_dense()).unwrap();
        let got = apply_inverse_reorder(&conv_dense(&x, &stored.to_dense()).unwrap(), &plan).unwrap();
        prop_assert!(close(&got.data, &want.data, 1e-6));
    }

    #[test]
    fn fkw_round_trips_and_beats_csr_on_dense_enough_layers(seed in any::<u64>()) {
        let (stored, plan) = reorder(&random_layer(seed)).unwrap();
        let m = fkw_encode(&stored, &plan).unwrap();
        prop_assert!(m.validate().is_ok());
        prop_assert_eq!(fkw_decode(&m).unwrap(), (stored, plan));
        prop_assert_eq!(FkwModel::from_bytes(&m.to_bytes()).unwrap(), m.clone());
        let csr = CsrLayer::from_dense(&m.to_dense().unwrap());
        // per filter FKW pays k + 2 words of structure, CSR three extra words per kernel
        if 3 * m.total_kernels() > (m.pattern_set.k() + 2) * m.filters() {
            prop_assert!(m.structure_overhead() < csr.structure_overhead());
        }
    }

    #[test]
    fn truncated_fkw_is_rejected(seed in any::<u64>(), cut in 1usize..64) {
        let (m, _) = model(seed, 1);
        let bytes = m.to_bytes();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(FkwModel::from_bytes(&bytes[..keep]).is_err());
    }

    #[test]
    fn executor_is_config_invariant_and_accounted(
        seed in any::<u64>(),
        stride in 1usize..=2,
        a in arb_config(),
        b in arb_config(),
    ) {
        let (m, masked) = model(seed, stride);
        let x = random_input(&m.shape, seed ^ 3);
        let want = conv_dense(&x, &masked).unwrap();
        for c in [config(&m.shape, a), config(&m.shape, b)] {
            let (out, stats) = conv_fkw(&x, &m, &c).unwrap();
            prop_assert!(close(&out.data, &want.data, 1e-5));
            prop_assert_eq!(stats, lre_load_model(&m, &c).unwrap());
        }
    }

    #[test]
    fn lre_never_adds_loads(seed in any::<u64>(), a in arb_config()) {
        let (m, _) = model(seed, 1);
        let on = ExecConfig { lre_enabled: true, ..config(&m.shape, a) };
        let off = ExecConfig { lre_enabled: false, ..on };
        let l_on = lre_load_model(&m, &on).unwrap().input_element_loads;
        let l_off = lre_load_model(&m, &off).unwrap().input_element_loads;
        prop_assert!(l_on <= l_off);
    }

    #[test]
    fn any_chromosome_decodes_to_a_valid_config(
        seed in any::<u64>(),
        genes in prop::array::uniform7(0usize..64),
    ) {
        let (m, _) = model(seed, 1);
        let space = SearchSpace::for_shape(&m.shape);
        let cfg = space.decode(&Chromosome { genes }, &m.shape);
        prop_assert!(cfg.validate(&m.shape).is_ok());
        prop_assert_eq!(genes.len(), GENES);
    }

    #[test]
    fn manifest_text_round_trips_and_drives_the_same_run(seed in any::<u64>(), a in arb_config()) {
        let (m, _) = model(seed, 1);
        let mut manifest = manifest_for(std::slice::from_ref(&m), &m.pattern_set);
        // manifests always run with reorder and LRE on
        let cfg = ExecConfig { lre_enabled: true, reorder_enabled: true, ..config(&m.shape, a) };
        manifest.layers[0].set_exec_config(&cfg);
        let text = lr_emit(&manifest);
        let parsed = lr_parse(&text).unwrap();
        prop_assert_eq!(&parsed, &manifest);
        prop_assert_eq!(lr_emit(&parsed), text);
        let x = random_input(&m.shape, seed ^ 4);
        let direct = conv_fkw(&x, &m, &cfg).unwrap();
        let driven = run_layers(&x, &[(&m, parsed.layers[0].exec_config())], false, false).unwrap();
        prop_assert_eq!(direct, driven);
    }
}
