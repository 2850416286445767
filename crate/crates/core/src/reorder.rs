//! Filter kernel reorder.
//!
//! Filters are grouped by length (number of surviving kernels), groups ordered
//! by decreasing length, and within a group filters are chained greedily by
//! similarity. Kernels inside each filter are sorted by `(pattern_id, in_channel)`
//! so every pattern forms one contiguous run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pattern::{PatternSet, PATTERN_ENTRIES};
use crate::tensor::{FeatureMap, LayerShape, WeightTensor};

/// One surviving kernel: its input channel, pattern and the four retained weights
/// in canonical position order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseKernel {
    pub in_channel: u32,
    pub pattern_id: u8,
    pub weights: [f32; PATTERN_ENTRIES],
}

/// A pattern-pruned 3x3 layer stored filter by filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseLayer {
    pub shape: LayerShape,
    pub pattern_set: PatternSet,
    pub filters: Vec<Vec<SparseKernel>>,
    /// Bias of each stored filter.
    pub bias: Vec<f32>,
}

impl SparseLayer {
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if !self.shape.is_3x3() {
            return Err(Error::UnsupportedKernel {
                rows: self.shape.kernel_h,
                cols: self.shape.kernel_w,
            });
        }
        if self.filters.len() != self.shape.out_channels
            || self.bias.len() != self.shape.out_channels
        {
            return Err(Error::Shape(format!(
                "{} filters / {} biases for {} output channels",
                self.filters.len(),
                self.bias.len(),
                self.shape.out_channels
            )));
        }
        for (f, filter) in self.filters.iter().enumerate() {
            let mut seen = vec![false; self.shape.in_channels];
            for k in filter {
                let ic = k.in_channel as usize;
                if ic >= self.shape.in_channels {
                    return Err(Error::Shape(format!(
                        "filter {f}: in_channel {ic} out of range"
                    )));
                }
                if std::mem::replace(&mut seen[ic], true) {
                    return Err(Error::Shape(format!(
                        "filter {f}: in_channel {ic} repeated"
                    )));
                }
                if self.pattern_set.get(k.pattern_id).is_none() {
                    return Err(Error::Shape(format!(
                        "filter {f}: unknown pattern id {}",
                        k.pattern_id
                    )));
                }
                if k.weights.iter().any(|w| !w.is_finite()) {
                    return Err(Error::NonFinite(format!("filter {f}, in_channel {ic}")));
                }
            }
        }
        Ok(())
    }

    /// Builds a sparse layer from dense weights and per-kernel pattern ids
    /// (`[out][in]`, `None` = pruned). Nonzero weights outside the assigned
    /// pattern, or in a pruned kernel, are rejected.
    pub fn from_dense(
        weights: &WeightTensor,
        assignments: &[Option<u8>],
        set: &PatternSet,
    ) -> Result<Self> {
        let s = weights.shape;
        if !s.is_3x3() {
            return Err(Error::UnsupportedKernel {
                rows: s.kernel_h,
                cols: s.kernel_w,
            });
        }
        if assignments.len() != s.kernel_count() {
            return Err(Error::Shape(format!(
                "{} assignments for {} kernels",
                assignments.len(),
                s.kernel_count()
            )));
        }
        let mut filters = Vec::with_capacity(s.out_channels);
        for oc in 0..s.out_channels {
            let mut filter = Vec::new();
            for ic in 0..s.in_channels {
                let kernel = weights.kernel(oc, ic);
                match assignments[oc * s.in_channels + ic] {
                    Some(id) => {
                        let p = set
                            .get(id)
                            .ok_or_else(|| Error::Parameter(format!("unknown pattern id {id}")))?;
                        if (0..9).any(|i| kernel[i] != 0.0 && !p.contains(i / 3, i % 3)) {
                            return Err(Error::Precondition(format!(
                                "kernel ({oc}, {ic}) has weights outside pattern {id}"
                            )));
                        }
                        filter.push(SparseKernel {
                            in_channel: ic as u32,
                            pattern_id: id,
                            weights: p.gather(kernel),
                        });
                    }
                    None if kernel.iter().any(|&v| v != 0.0) => {
                        return Err(Error::Precondition(format!(
                            "pruned kernel ({oc}, {ic}) has nonzero weights"
                        )));
                    }
                    None => {}
                }
            }
            filters.push(filter);
        }
        let layer = Self {
            shape: s,
            pattern_set: set.clone(),
            filters,
            bias: weights.bias.clone(),
        };
        layer.validate()?;
        Ok(layer)
    }

    /// Infers assignments from the support of each kernel: all-zero kernels are
    /// pruned, others take the lowest-id pattern covering their support.
    pub fn from_pruned(weights: &WeightTensor, set: &PatternSet) -> Result<Self> {
        let s = weights.shape;
        if !s.is_3x3() {
            return Err(Error::UnsupportedKernel {
                rows: s.kernel_h,
                cols: s.kernel_w,
            });
        }
        let mut assignments = Vec::with_capacity(s.kernel_count());
        for k in weights.data.chunks_exact(9) {
            if k.iter().all(|&v| v == 0.0) {
                assignments.push(None);
                continue;
            }
            let id = set
                .iter_ids()
                .find(|(_, p)| (0..9).all(|i| k[i] == 0.0 || p.contains(i / 3, i % 3)))
                .map(|(id, _)| id)
                .ok_or_else(|| {
                    Error::Precondition("kernel support fits no pattern in the set".into())
                })?;
            assignments.push(Some(id));
        }
        Self::from_dense(weights, &assignments, set)
    }

    /// Dense weights with output channel `i` taken from stored filter `i`.
    pub fn to_dense(&self) -> WeightTensor {
        let mut w = WeightTensor::zeros(self.shape);
        w.bias = self.bias.clone();
        for (oc, filter) in self.filters.iter().enumerate() {
            for k in filter {
                let p = self
                    .pattern_set
                    .get(k.pattern_id)
                    .expect("validated pattern id");
                let kernel = w.kernel_mut(oc, k.in_channel as usize);
                for (n, i) in p.flat_indices().into_iter().enumerate() {
                    kernel[i] = k.weights[n];
                }
            }
        }
        w
    }

    pub fn total_kernels(&self) -> usize {
        self.filters.iter().map(Vec::len).sum()
    }

    /// Whether every filter's kernels are sorted by `(pattern_id, in_channel)`.
    pub fn kernels_sorted(&self) -> bool {
        self.filters.iter().all(|f| {
            f.windows(2)
                .all(|w| (w[0].pattern_id, w[0].in_channel) < (w[1].pattern_id, w[1].in_channel))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterGroup {
    pub start: usize,
    pub end: usize,
    pub filter_length: usize,
}

/// Output-channel permutation produced by [`reorder`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReorderPlan {
    /// `filter_permutation[new] = original output channel`.
    pub filter_permutation: Vec<usize>,
    pub group_boundaries: Vec<FilterGroup>,
}

impl ReorderPlan {
    pub fn identity(layer: &SparseLayer) -> Self {
        Self::from_permutation((0..layer.filters.len()).collect(), layer)
    }

    /// Plan for an already-stored filter order; groups are maximal runs of equal length.
    pub fn from_permutation(filter_permutation: Vec<usize>, stored: &SparseLayer) -> Self {
        let lengths: Vec<usize> = stored.filters.iter().map(Vec::len).collect();
        Self {
            filter_permutation,
            group_boundaries: groups_of(&lengths),
        }
    }

    pub fn len(&self) -> usize {
        self.filter_permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filter_permutation.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.filter_permutation.len();
        let mut seen = vec![false; n];
        for &p in &self.filter_permutation {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Shape(format!(
                    "filter permutation is not a permutation of 0..{n}"
                )));
            }
        }
        let mut at = 0;
        for g in &self.group_boundaries {
            if g.start != at || g.end <= g.start {
                return Err(Error::Shape(
                    "filter groups must partition the filters".into(),
                ));
            }
            at = g.end;
        }
        if at != n {
            return Err(Error::Shape("filter groups must cover every filter".into()));
        }
        Ok(())
    }

    /// Stored position of original output channel `original`.
    pub fn position_of(&self, original: usize) -> usize {
        self.filter_permutation
            .iter()
            .position(|&p| p == original)
            .expect("channel inside permutation")
    }

    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.filter_permutation.len()];
        for (new, &orig) in self.filter_permutation.iter().enumerate() {
            inv[orig] = new;
        }
        inv
    }
}

fn groups_of(lengths: &[usize]) -> Vec<FilterGroup> {
    let mut groups: Vec<FilterGroup> = Vec::new();
    for (i, &len) in lengths.iter().enumerate() {
        match groups.last_mut() {
            Some(g) if g.filter_length == len => g.end = i + 1,
            _ => groups.push(FilterGroup {
                start: i,
                end: i + 1,
                filter_length: len,
            }),
        }
    }
    groups
}

/// Number of positions at which two equal-length sorted filters carry the same pattern id.
pub fn filter_similarity(a: &[SparseKernel], b: &[SparseKernel]) -> usize {
    a.iter()
        .zip(b)
        .filter(|(x, y)| x.pattern_id == y.pattern_id)
        .count()
}

fn signature(filter: &[SparseKernel]) -> Vec<u8> {
    filter.iter().map(|k| k.pattern_id).collect()
}

/// Reorders filters and kernels; returns the reordered layer and the plan
/// mapping stored filters back to output channels.
pub fn reorder(layer: &SparseLayer) -> Result<(SparseLayer, ReorderPlan)> {
    layer.validate()?;
    let sorted: Vec<Vec<SparseKernel>> = layer
        .filters
        .iter()
        .map(|f| {
            let mut f = f.clone();
            f.sort_by_key(|k| (k.pattern_id, k.in_channel));
            f
        })
        .collect();

    let mut lengths: Vec<usize> = sorted.iter().map(Vec::len).collect();
    lengths.sort_unstable_by(|a, b| b.cmp(a));
    lengths.dedup();

    let mut order = Vec::with_capacity(sorted.len());
    for len in lengths {
        let mut remaining: Vec<usize> = (0..sorted.len())
            .filter(|&f| sorted[f].len() == len)
            .collect();
        let seed = *remaining
            .iter()
            .min_by(|&&a, &&b| {
                signature(&sorted[a])
                    .cmp(&signature(&sorted[b]))
                    .then(a.cmp(&b))
            })
            .expect("group is nonempty");
        remaining.retain(|&f| f != seed);
        order.push(seed);
        let mut last = seed;
        while !remaining.is_empty() {
            // remaining stays in ascending original order, so the first max wins ties
            let (pos, _) = remaining
                .iter()
                .enumerate()
                .fold((0, None), |best, (i, &f)| {
                    let sim = filter_similarity(&sorted[last], &sorted[f]);
                    match best.1 {
                        Some(b) if sim <= b => best,
                        _ => (i, Some(sim)),
                    }
                });
            last = remaining.remove(pos);
            order.push(last);
        }
    }

    let reordered = SparseLayer {
        shape: layer.shape,
        pattern_set: layer.pattern_set.clone(),
        filters: order.iter().map(|&f| sorted[f].clone()).collect(),
        bias: order.iter().map(|&f| layer.bias[f]).collect(),
    };
    let plan = ReorderPlan::from_permutation(order, &reordered);
    Ok((reordered, plan))
}

/// Routes stored-filter output channels back to original output channels.
pub fn apply_inverse_reorder(output: &FeatureMap, plan: &ReorderPlan) -> Result<FeatureMap> {
    if output.channels != plan.len() {
        return Err(Error::Shape(format!(
            "output has {} channels, plan covers {}",
            output.channels,
            plan.len()
        )));
    }
    plan.validate()?;
    let plane = output.height * output.width;
    let mut data = vec![0.0; output.data.len()];
    for (stored, &orig) in plan.filter_permutation.iter().enumerate() {
        data[orig * plane..(orig + 1) * plane].copy_from_slice(output.channel(stored));
    }
    FeatureMap::new(output.channels, output.height, output.width, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pattern::all_patterns;
    use crate::tensor::conv_dense;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(k: usize) -> PatternSet {
        PatternSet::new(all_patterns()[..k].to_vec()).unwrap()
    }

    fn kernel(ic: u32, id: u8) -> SparseKernel {
        SparseKernel {
            in_channel: ic,
            pattern_id: id,
            weights: [1.0 + ic as f32, 0.5, -0.25, id as f32],
        }
    }

    pub(crate) fn random_layer(
        rng: &mut ChaCha8Rng,
        cout: usize,
        cin: usize,
        k: usize,
    ) -> SparseLayer {
        let shape = LayerShape::conv3x3(cin, cout, 6, 5).unwrap();
        let filters = (0..cout)
            .map(|_| {
                let mut filter = Vec::new();
                for ic in 0..cin as u32 {
                    if rng.random_bool(0.6) {
                        filter.push(SparseKernel {
                            in_channel: ic,
                            pattern_id: rng.random_range(1..=k as u8),
                            weights: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                        });
                    }
                }
                filter
            })
            .collect();
        SparseLayer {
            shape,
            pattern_set: set(k),
            filters,
            bias: (0..cout).map(|_| rng.random_range(-0.5..0.5)).collect(),
        }
    }

    #[test]
    fn ordered_layer_is_unchanged() {
        let layer = SparseLayer {
            shape: LayerShape::conv3x3(3, 3, 5, 5).unwrap(),
            pattern_set: set(3),
            filters: vec![
                vec![kernel(0, 1), kernel(2, 2)],
                vec![kernel(1, 1), kernel(0, 2)],
                vec![kernel(1, 3)],
            ],
            bias: vec![0.1, 0.2, 0.3],
        };
        let (out, plan) = reorder(&layer).unwrap();
        assert_eq!(plan.filter_permutation, vec![0, 1, 2]);
        assert_eq!(out, layer);
    }

    #[test]
    fn mixed_length_grouping() {
        // filter lengths {3,1,3,2,3,2}
        let lens = [3, 1, 3, 2, 3, 2];
        let ids = [
            [2, 1, 1],
            [3, 0, 0],
            [1, 2, 2],
            [1, 1, 0],
            [1, 1, 2],
            [2, 1, 0],
        ];
        let filters = lens
            .iter()
            .zip(ids)
            .map(|(&len, id)| (0..len).map(|i| kernel(i as u32, id[i])).collect())
            .collect();
        let layer = SparseLayer {
            shape: LayerShape::conv3x3(3, 6, 5, 5).unwrap(),
            pattern_set: set(3),
            filters,
            bias: vec![0.0; 6],
        };
        let (out, plan) = reorder(&layer).unwrap();
        let lengths: Vec<usize> = out.filters.iter().map(Vec::len).collect();
        assert_eq!(lengths, vec![3, 3, 3, 2, 2, 1]);
        assert_eq!(
            plan.group_boundaries,
            vec![
                FilterGroup {
                    start: 0,
                    end: 3,
                    filter_length: 3
                },
                FilterGroup {
                    start: 3,
                    end: 5,
                    filter_length: 2
                },
                FilterGroup {
                    start: 5,
                    end: 6,
                    filter_length: 1
                },
            ]
        );
        for (new, &orig) in plan.filter_permutation.iter().enumerate() {
            assert_eq!(out.filters[new].len(), lens[orig]);
            assert_eq!(out.bias[new], layer.bias[orig]);
        }
        assert!(out.kernels_sorted());
        plan.validate().unwrap();
    }

    #[test]
    fn empty_filters_form_last_group() {
        let layer = SparseLayer {
            shape: LayerShape::conv3x3(2, 3, 5, 5).unwrap(),
            pattern_set: set(2),
            filters: vec![vec![], vec![kernel(1, 2)], vec![]],
            bias: vec![0.0; 3],
        };
        let (_, plan) = reorder(&layer).unwrap();
        assert_eq!(plan.filter_permutation, vec![1, 0, 2]);
        assert_eq!(plan.group_boundaries.last().unwrap().filter_length, 0);
    }

    /// Independent greedy chain: seed by smallest signature, then most similar to the previous.
    fn greedy_oracle(filters: &[Vec<u8>], members: &[usize]) -> Vec<usize> {
        let mut left: Vec<usize> = members.to_vec();
        left.sort_by(|&a, &b| filters[a].cmp(&filters[b]).then(a.cmp(&b)));
        let mut chain = vec![left.remove(0)];
        left.sort();
        while !left.is_empty() {
            let prev = &filters[*chain.last().unwrap()];
            let score = |f: usize| prev.iter().zip(&filters[f]).filter(|(a, b)| a == b).count();
            let best = left.iter().map(|&f| score(f)).max().unwrap();
            let pick = left.iter().position(|&f| score(f) == best).unwrap();
            chain.push(left.remove(pick));
        }
        chain
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn matches_exhaustive_grouping_and_greedy_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..60 {
            let cout = rng.random_range(1..=6);
            let layer = random_layer(&mut rng, cout, 4, 3);
            let (out, plan) = reorder(&layer).unwrap();
            let lens: Vec<usize> = layer.filters.iter().map(Vec::len).collect();
            // brute force: the orders that place every length group contiguously in
            // decreasing length all share one length sequence
            let ours: Vec<usize> = plan.filter_permutation.iter().map(|&f| lens[f]).collect();
            let best = permutations(cout)
                .into_iter()
                .map(|p| p.iter().map(|&f| lens[f]).collect::<Vec<_>>())
                .filter(|seq| seq.windows(2).all(|w| w[0] >= w[1]))
                .next()
                .unwrap();
            assert_eq!(ours, best);

            let sigs: Vec<Vec<u8>> = layer
                .filters
                .iter()
                .map(|f| {
                    let mut ks = f.clone();
                    ks.sort_by_key(|k| (k.pattern_id, k.in_channel));
                    ks.iter().map(|k| k.pattern_id).collect()
                })
                .collect();
            for g in &plan.group_boundaries {
                let members = &plan.filter_permutation[g.start..g.end];
                assert_eq!(members, greedy_oracle(&sigs, members).as_slice());
            }
            assert!(out.kernels_sorted());
        }
    }

    #[test]
    fn reorder_preserves_semantics() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..40 {
            let cout = rng.random_range(1..=7);
            let layer = random_layer(&mut rng, cout, 3, 4);
            let (out, plan) = reorder(&layer).unwrap();
            let input = FeatureMap::new(
                3,
                6,
                5,
                (0..90).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let want = conv_dense(&input, &layer.to_dense()).unwrap();
            let got = apply_inverse_reorder(&conv_dense(&input, &out.to_dense()).unwrap(), &plan)
                .unwrap();
            assert_eq!(want, got);

            let mut before: Vec<usize> = layer.filters.iter().map(Vec::len).collect();
            let after: Vec<usize> = out.filters.iter().map(Vec::len).collect();
            assert!(plan
                .group_boundaries
                .windows(2)
                .all(|w| w[0].filter_length > w[1].filter_length));
            before.sort_unstable_by(|a, b| b.cmp(a));
            assert_eq!(before, after);
        }
    }

    #[test]
    fn inverse_reorder_edges() {
        let fm = FeatureMap::new(3, 1, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let id = ReorderPlan {
            filter_permutation: vec![0, 1, 2],
            group_boundaries: vec![FilterGroup {
                start: 0,
                end: 3,
                filter_length: 1,
            }],
        };
        assert_eq!(apply_inverse_reorder(&fm, &id).unwrap(), fm);
        let swap = ReorderPlan {
            filter_permutation: vec![2, 0, 1],
            ..id.clone()
        };
        assert_eq!(
            apply_inverse_reorder(&fm, &swap).unwrap().data,
            vec![2.0, 3.0, 1.0]
        );
        assert_eq!(swap.position_of(2), 0);
        assert_eq!(swap.inverse(), vec![1, 2, 0]);
        let short = FeatureMap::new(2, 1, 1, vec![1.0, 2.0]).unwrap();
        assert!(apply_inverse_reorder(&short, &id).is_err());
    }

    #[test]
    fn dense_round_trip_and_rejections() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = random_layer(&mut rng, 4, 3, 5);
        let dense = layer.to_dense();
        let back = SparseLayer::from_pruned(&dense, &layer.pattern_set).unwrap();
        assert_eq!(back.to_dense(), dense);
        let mut bad = dense.clone();
        bad.data.iter_mut().for_each(|v| *v = 1.0);
        assert!(SparseLayer::from_pruned(&bad, &layer.pattern_set).is_err());
        let mut dup = layer.clone();
        dup.filters[0] = vec![kernel(0, 1), kernel(0, 2)];
        assert!(dup.validate().is_err());
    }
}
