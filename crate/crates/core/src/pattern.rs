//! Kernel patterns for 3x3 kernels, pattern-set construction and the two
//! Euclidean projections (pattern and connectivity) used during pruning.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::WeightTensor;

/// Entries kept by every pattern.
pub const PATTERN_ENTRIES: usize = 4;
/// Number of distinct center-containing 4-entry patterns in a 3x3 grid.
pub const PATTERN_SPACE: usize = 56;
pub const CENTER: usize = 4;

/// `(row, col)` inside a 3x3 kernel.
pub type Position = (u8, u8);

/// Four retained positions of a 3x3 kernel, one of them the center.
///
/// Positions are kept sorted, so the derived ordering is the canonical
/// lexicographic order over position lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pattern {
    positions: [Position; PATTERN_ENTRIES],
}

impl Pattern {
    pub fn new(positions: [Position; PATTERN_ENTRIES]) -> Result<Self> {
        let mut positions = positions;
        positions.sort_unstable();
        if positions.iter().any(|&(r, c)| r > 2 || c > 2) {
            return Err(Error::Parameter(format!(
                "pattern position out of 3x3 bounds: {positions:?}"
            )));
        }
        if positions.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Parameter(format!(
                "pattern positions not distinct: {positions:?}"
            )));
        }
        if !positions.contains(&(1, 1)) {
            return Err(Error::Parameter(format!(
                "pattern must keep the center: {positions:?}"
            )));
        }
        Ok(Self { positions })
    }

    /// Builds a pattern from row-major flat indices (0..9).
    pub fn from_flat(indices: [usize; PATTERN_ENTRIES]) -> Result<Self> {
        if indices.iter().any(|&i| i >= 9) {
            return Err(Error::Parameter(format!(
                "flat index out of range: {indices:?}"
            )));
        }
        Self::new(indices.map(|i| ((i / 3) as u8, (i % 3) as u8)))
    }

    pub fn positions(&self) -> &[Position; PATTERN_ENTRIES] {
        &self.positions
    }

    /// Row-major flat indices in canonical order.
    pub fn flat_indices(&self) -> [usize; PATTERN_ENTRIES] {
        self.positions.map(|(r, c)| r as usize * 3 + c as usize)
    }

    /// 9-bit occupancy mask, bit `r*3+c`.
    pub fn mask(&self) -> u16 {
        self.flat_indices().iter().fold(0u16, |m, &i| m | (1 << i))
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.positions.contains(&(row as u8, col as u8))
    }

    /// Sum of squares of the entries this pattern keeps.
    pub fn retained_energy(&self, kernel: &[f64; 9]) -> f64 {
        self.flat_indices()
            .iter()
            .map(|&i| kernel[i] * kernel[i])
            .sum()
    }

    /// Zeroes every entry outside the pattern.
    pub fn apply(&self, kernel: &[f64; 9]) -> [f64; 9] {
        let mut out = [0.0; 9];
        for i in self.flat_indices() {
            out[i] = kernel[i];
        }
        out
    }

    /// The four retained values, in canonical position order.
    pub fn gather<T: Copy>(&self, kernel: &[T]) -> [T; PATTERN_ENTRIES] {
        self.flat_indices().map(|i| kernel[i])
    }
}

/// Every valid pattern, in canonical order.
pub fn all_patterns() -> Vec<Pattern> {
    let others: Vec<usize> = (0..9).filter(|&i| i != CENTER).collect();
    let mut out = Vec::with_capacity(PATTERN_SPACE);
    for a in 0..others.len() {
        for b in a + 1..others.len() {
            for c in b + 1..others.len() {
                out.push(
                    Pattern::from_flat([others[a], others[b], others[c], CENTER])
                        .expect("valid by construction"),
                );
            }
        }
    }
    out.sort();
    out
}

/// An ordered candidate set; pattern ids are `1..=k` in list order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PatternSet {
    patterns: Vec<Pattern>,
}

impl PatternSet {
    pub fn new(patterns: Vec<Pattern>) -> Result<Self> {
        if patterns.is_empty() || patterns.len() > PATTERN_SPACE {
            return Err(Error::Parameter(format!(
                "pattern set size must be in 1..={PATTERN_SPACE}, got {}",
                patterns.len()
            )));
        }
        for (i, p) in patterns.iter().enumerate() {
            if patterns[..i].contains(p) {
                return Err(Error::Parameter(format!("duplicate pattern at index {i}")));
            }
        }
        Ok(Self { patterns })
    }

    /// All 56 patterns in canonical order.
    pub fn full() -> Self {
        Self {
            patterns: all_patterns(),
        }
    }

    pub fn k(&self) -> usize {
        self.patterns.len()
    }

    pub fn patterns(&self) -> &[Pattern] {
        &self.patterns
    }

    /// Pattern with the given 1-based id.
    pub fn get(&self, id: u8) -> Option<&Pattern> {
        (id as usize)
            .checked_sub(1)
            .and_then(|i| self.patterns.get(i))
    }

    pub fn id_of(&self, pattern: &Pattern) -> Option<u8> {
        self.patterns
            .iter()
            .position(|p| p == pattern)
            .map(|i| (i + 1) as u8)
    }

    pub fn iter_ids(&self) -> impl Iterator<Item = (u8, &Pattern)> {
        self.patterns
            .iter()
            .enumerate()
            .map(|(i, p)| ((i + 1) as u8, p))
    }

    /// Canonical JSON: `[[[r,c],[r,c],[r,c],[r,c]],...]` without whitespace.
    pub fn to_json(&self) -> String {
        let raw: Vec<[[u8; 2]; PATTERN_ENTRIES]> = self
            .patterns
            .iter()
            .map(|p| p.positions.map(|(r, c)| [r, c]))
            .collect();
        serde_json::to_string(&raw).expect("plain arrays always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Vec<Vec<[u8; 2]>> = serde_json::from_str(text)?;
        let mut patterns = Vec::with_capacity(raw.len());
        for (i, entry) in raw.iter().enumerate() {
            let positions: [Position; PATTERN_ENTRIES] = entry
                .iter()
                .map(|&[r, c]| (r, c))
                .collect::<Vec<_>>()
                .try_into()
                .map_err(|_| {
                    Error::Parameter(format!("pattern {i} must have exactly 4 positions"))
                })?;
            patterns.push(Pattern::new(positions)?);
        }
        Self::new(patterns)
    }
}

impl Serialize for PatternSet {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let raw: Vec<[[u8; 2]; PATTERN_ENTRIES]> = self
            .patterns
            .iter()
            .map(|p| p.positions.map(|(r, c)| [r, c]))
            .collect();
        raw.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PatternSet {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let value = serde_json::Value::deserialize(deserializer)?;
        PatternSet::from_json(&value.to_string()).map_err(serde::de::Error::custom)
    }
}

/// Which kernels of a layer survive connectivity pruning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectivityMask {
    pub out_channels: usize,
    pub in_channels: usize,
    pub alpha: usize,
    /// Row-major `[out_channel][in_channel]`.
    pub kept: Vec<bool>,
}

impl ConnectivityMask {
    pub fn all(out_channels: usize, in_channels: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            alpha: out_channels * in_channels,
            kept: vec![true; out_channels * in_channels],
        }
    }

    pub fn is_kept(&self, out_c: usize, in_c: usize) -> bool {
        self.kept[out_c * self.in_channels + in_c]
    }

    pub fn kept_count(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }
}

#[inline]
fn to_f64_kernel(k: &[f32]) -> [f64; 9] {
    std::array::from_fn(|i| k[i] as f64)
}

fn by_magnitude_then_position(kernel: &[f64; 9]) -> impl FnMut(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| kernel[b].abs().total_cmp(&kernel[a].abs()).then(a.cmp(&b))
}

/// Center plus the three largest-magnitude non-center entries.
/// Magnitude ties go to the lexicographically smaller `(row, col)`.
pub fn natural_pattern(kernel: &[f64; 9]) -> Pattern {
    let mut others: Vec<usize> = (0..9).filter(|&i| i != CENTER).collect();
    others.sort_by(by_magnitude_then_position(kernel));
    Pattern::from_flat([others[0], others[1], others[2], CENTER])
        .expect("distinct indices with center")
}

/// Natural pattern of one kernel of a weight tensor; rejects non-3x3 layers.
pub fn natural_pattern_of(weights: &WeightTensor, out_c: usize, in_c: usize) -> Result<Pattern> {
    let s = &weights.shape;
    if !s.is_3x3() {
        return Err(Error::UnsupportedKernel {
            rows: s.kernel_h,
            cols: s.kernel_w,
        });
    }
    Ok(natural_pattern(&to_f64_kernel(weights.kernel(out_c, in_c))))
}

/// The `k` most frequent natural patterns over every 3x3 kernel of `model`.
///
/// Kernels are counted uniformly. All-zero kernels have no meaningful natural
/// pattern and are skipped. Frequency ties fall back to canonical order.
pub fn build_pattern_set(model: &[WeightTensor], k: usize) -> Result<PatternSet> {
    if k == 0 || k > PATTERN_SPACE {
        return Err(Error::Parameter(format!(
            "k must be in 1..={PATTERN_SPACE}, got {k}"
        )));
    }
    let layers: Vec<&WeightTensor> = model.iter().filter(|w| w.shape.is_3x3()).collect();
    if layers.is_empty() {
        return Err(Error::EmptyInput(
            "model has no 3x3 convolution layers".into(),
        ));
    }
    let mut counts: HashMap<Pattern, usize> = HashMap::new();
    for w in layers {
        for kernel in w.data.chunks_exact(9) {
            if kernel.iter().all(|&v| v == 0.0) {
                continue;
            }
            *counts
                .entry(natural_pattern(&to_f64_kernel(kernel)))
                .or_default() += 1;
        }
    }
    let mut ranked: Vec<(Pattern, usize)> = all_patterns()
        .into_iter()
        .map(|p| (p, counts.get(&p).copied().unwrap_or(0)))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    PatternSet::new(ranked.into_iter().take(k).map(|(p, _)| p).collect())
}

/// Euclidean projection of a kernel onto the union of the set's patterns.
///
/// Picks the pattern retaining the most energy (lowest id on ties) and zeroes
/// everything else. Returns the 1-based pattern id and the projected kernel.
pub fn project_pattern(kernel: &[f64; 9], set: &PatternSet) -> (u8, [f64; 9]) {
    let mut best_id = 1u8;
    let mut best = f64::NEG_INFINITY;
    for (id, p) in set.iter_ids() {
        let e = p.retained_energy(kernel);
        if e > best {
            best = e;
            best_id = id;
        }
    }
    let pattern = set.get(best_id).expect("id from this set");
    (best_id, pattern.apply(kernel))
}

/// Keeps exactly the `alpha` kernels of largest L2 norm.
/// Norm ties resolve by `(out_channel, in_channel)` ascending.
pub fn project_connectivity(weights: &WeightTensor, alpha: usize) -> Result<ConnectivityMask> {
    let s = &weights.shape;
    let norms: Vec<f64> = weights
        .data
        .chunks_exact(s.kernel_len())
        .map(|k| k.iter().map(|&v| (v as f64) * (v as f64)).sum())
        .collect();
    connectivity_from_norms(&norms, s.out_channels, s.in_channels, alpha)
}

/// Connectivity projection given per-kernel squared norms laid out `[out][in]`.
pub fn connectivity_from_norms(
    sq_norms: &[f64],
    out_channels: usize,
    in_channels: usize,
    alpha: usize,
) -> Result<ConnectivityMask> {
    let total = out_channels * in_channels;
    if sq_norms.len() != total {
        return Err(Error::Shape(format!(
            "{} kernel norms for {total} kernels",
            sq_norms.len()
        )));
    }
    if alpha == 0 || alpha > total {
        return Err(Error::Parameter(format!(
            "alpha must be in 1..={total}, got {alpha}"
        )));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| sq_norms[b].total_cmp(&sq_norms[a]).then(a.cmp(&b)));
    let mut kept = vec![false; total];
    for &i in &order[..alpha] {
        kept[i] = true;
    }
    Ok(ConnectivityMask {
        out_channels,
        in_channels,
        alpha,
        kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::LayerShape;
    use proptest::prelude::*;

    fn kernel_from(v: [f64; 9]) -> [f64; 9] {
        v
    }

    #[test]
    fn space_has_56_patterns_all_with_center() {
        let all = all_patterns();
        assert_eq!(all.len(), PATTERN_SPACE);
        assert!(all.iter().all(|p| p.contains(1, 1)));
        let mut dedup = all.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 56);
    }

    #[test]
    fn pattern_validation() {
        assert!(Pattern::new([(0, 0), (0, 1), (0, 2), (2, 2)]).is_err());
        assert!(Pattern::new([(0, 0), (0, 0), (1, 1), (2, 2)]).is_err());
        assert!(Pattern::new([(0, 0), (3, 0), (1, 1), (2, 2)]).is_err());
        let p = Pattern::new([(2, 2), (1, 1), (0, 0), (0, 1)]).unwrap();
        assert_eq!(p.positions(), &[(0, 0), (0, 1), (1, 1), (2, 2)]);
        assert_eq!(p.mask(), 0b1_0001_0011);
    }

    #[test]
    fn natural_pattern_forced_by_magnitude() {
        let k = kernel_from([8.0, -7.0, 6.0, 1.0, 0.5, -1.0, 0.2, 0.0, 1.0]);
        let p = natural_pattern(&k);
        assert_eq!(p.positions(), &[(0, 0), (0, 1), (0, 2), (1, 1)]);
    }

    #[test]
    fn natural_pattern_ties_are_lexicographic() {
        let p = natural_pattern(&[1.0; 9]);
        assert_eq!(p.positions(), &[(0, 0), (0, 1), (0, 2), (1, 1)]);
    }

    #[test]
    fn natural_pattern_rejects_non_3x3() {
        let shape = LayerShape::new(1, 1, 1, 1, 1, 3, 3).unwrap();
        let w = WeightTensor::zeros(shape);
        assert!(matches!(
            natural_pattern_of(&w, 0, 0),
            Err(Error::UnsupportedKernel { rows: 1, cols: 1 })
        ));
    }

    #[test]
    fn zero_kernel_projects_to_first_pattern() {
        let set = PatternSet::new(all_patterns()[10..18].to_vec()).unwrap();
        let (id, proj) = project_pattern(&[0.0; 9], &set);
        assert_eq!(id, 1);
        assert_eq!(proj, [0.0; 9]);
    }

    #[test]
    fn feasible_kernel_is_fixed_point() {
        let set = PatternSet::new(all_patterns()[..8].to_vec()).unwrap();
        let p = set.get(5).unwrap();
        let mut k = [0.0; 9];
        for (n, i) in p.flat_indices().into_iter().enumerate() {
            k[i] = 1.0 + n as f64;
        }
        let (id, proj) = project_pattern(&k, &set);
        assert_eq!(id, 5);
        assert_eq!(proj, k);
    }

    #[test]
    fn connectivity_edge_cases() {
        let shape = LayerShape::conv3x3(2, 3, 3, 3).unwrap();
        let mut w = WeightTensor::zeros(shape);
        let all = project_connectivity(&w, 6).unwrap();
        assert_eq!(all.kept_count(), 6);
        w.kernel_mut(2, 1)[4] = 0.5;
        let one = project_connectivity(&w, 1).unwrap();
        assert_eq!(one.kept_count(), 1);
        assert!(one.is_kept(2, 1));
        assert!(project_connectivity(&w, 0).is_err());
        assert!(project_connectivity(&w, 7).is_err());
    }

    #[test]
    fn build_set_errors() {
        let shape = LayerShape::new(1, 1, 2, 2, 1, 4, 4).unwrap();
        let w = WeightTensor::zeros(shape);
        assert!(matches!(
            build_pattern_set(&[w.clone()], 4),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            build_pattern_set(&[w.clone()], 0),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            build_pattern_set(&[w], 57),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn build_set_single_shared_pattern() {
        let shape = LayerShape::conv3x3(3, 2, 5, 5).unwrap();
        let mut w = WeightTensor::zeros(shape);
        for k in w.data.chunks_exact_mut(9) {
            k.copy_from_slice(&[0.1, 0.0, 0.0, 0.0, 1.0, 0.0, 0.3, 0.2, 0.4]);
        }
        let set = build_pattern_set(&[w.clone()], 1).unwrap();
        assert_eq!(
            set.patterns(),
            &[natural_pattern(&[
                0.1, 0.0, 0.0, 0.0, 1.0, 0.0, 0.3, 0.2, 0.4
            ])]
        );
        let full = build_pattern_set(&[w], 56).unwrap();
        assert_eq!(full.k(), 56);
        assert_eq!(full.patterns()[0], set.patterns()[0]);
        // remaining patterns have frequency 0 and follow canonical order
        let rest: Vec<_> = full.patterns()[1..].to_vec();
        let mut sorted = rest.clone();
        sorted.sort();
        assert_eq!(rest, sorted);
    }

    #[test]
    fn json_is_canonical() {
        let set = PatternSet::new(vec![
            Pattern::new([(2, 2), (1, 1), (0, 1), (0, 0)]).unwrap(),
            Pattern::new([(1, 0), (1, 1), (1, 2), (2, 1)]).unwrap(),
        ])
        .unwrap();
        let json = set.to_json();
        assert_eq!(
            json,
            "[[[0,0],[0,1],[1,1],[2,2]],[[1,0],[1,1],[1,2],[2,1]]]"
        );
        assert_eq!(PatternSet::from_json(&json).unwrap(), set);
        assert_eq!(serde_json::to_string(&set).unwrap(), json);
        assert!(PatternSet::from_json("[[[0,0],[1,1]]]").is_err());
        assert!(PatternSet::from_json("[]").is_err());
    }

    fn arb_kernel() -> impl Strategy<Value = [f64; 9]> {
        prop::array::uniform9(-5.0f64..5.0)
    }

    fn arb_set() -> impl Strategy<Value = PatternSet> {
        prop::sample::subsequence(all_patterns(), 1..=12)
            .prop_shuffle()
            .prop_map(|ps| PatternSet::new(ps).unwrap())
    }

    fn dist2(a: &[f64; 9], b: &[f64; 9]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    proptest! {
        #[test]
        fn projection_is_optimal(k in arb_kernel(), set in arb_set()) {
            let (_, proj) = project_pattern(&k, &set);
            let d = dist2(&k, &proj);
            for p in set.patterns() {
                prop_assert!(d <= dist2(&k, &p.apply(&k)) + 1e-12);
            }
        }

        #[test]
        fn projection_is_idempotent(k in arb_kernel(), set in arb_set()) {
            let (id1, once) = project_pattern(&k, &set);
            let (id2, twice) = project_pattern(&once, &set);
            prop_assert_eq!(once, twice);
            // a zero projection may legitimately move to id 1
            if once.iter().any(|&v| v != 0.0) { prop_assert_eq!(id1, id2); }
        }

        #[test]
        fn natural_pattern_keeps_center(k in arb_kernel()) {
            prop_assert!(natural_pattern(&k).contains(1, 1));
        }

        #[test]
        fn connectivity_respects_alpha(norms in prop::collection::vec(0.0f64..4.0, 12), alpha in 1usize..=12) {
            let m = connectivity_from_norms(&norms, 3, 4, alpha).unwrap();
            prop_assert!(m.kept_count() <= alpha);
        }
    }
}
