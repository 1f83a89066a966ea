//! Image-to-point guidance: saliency-driven token masking and the 2D semantic
//! targets that visible tokens regress.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng as _;

use crate::autograd::softmax_along;
use crate::cloud::Point;
use crate::error::{input_err, Error, Result};
use crate::projection::{back_project, GridMap};
use crate::rng::seeded;

/// How per-view values are combined into one score per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SaliencyAgg {
    #[default]
    Ave,
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetAgg {
    #[default]
    Concat,
    Ave,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskPolicy {
    #[default]
    Important,
    Random,
    Unimportant,
}

macro_rules! named_enum {
    ($ty:ty, $what:literal, $($variant:ident => $name:literal),+) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self {
                    $(Self::$variant => $name,)+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok(Self::$variant),)+
                    _ => Err(input_err!(concat!("unknown ", $what, " '{}'"), s)),
                }
            }
        }
    };
}

named_enum!(SaliencyAgg, "saliency aggregation", Ave => "ave", Max => "max", Min => "min");
named_enum!(TargetAgg, "target aggregation", Concat => "concat", Ave => "ave");
named_enum!(MaskPolicy, "mask policy", Important => "important", Random => "random", Unimportant => "unimportant");

/// Softmax-normalized importance of each token.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyCloud {
    pub scores: Vec<f64>,
    pub source_views: usize,
}

impl SaliencyCloud {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPartition {
    /// Ascending.
    pub visible_idx: Vec<usize>,
    /// Ascending.
    pub masked_idx: Vec<usize>,
    pub ratio: f64,
}

impl MaskPartition {
    pub fn total(&self) -> usize {
        self.visible_idx.len() + self.masked_idx.len()
    }

    /// Token membership as a bitmap, `true` for visible.
    pub fn visibility(&self) -> Vec<bool> {
        let mut v = vec![false; self.total()];
        for &i in &self.visible_idx {
            v[i] = true;
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTarget {
    /// Row-major `rows x width`.
    pub values: Vec<f64>,
    pub rows: usize,
    pub width: usize,
    pub aggregation: TargetAgg,
}

/// Number of visible tokens for ratio `r`.
pub fn visible_count(tokens: usize, ratio: f64) -> usize {
    libm::floor((1.0 - ratio) * tokens as f64) as usize
}

/// Back-projects saliency from every view onto the token centers, combines the
/// views and normalizes with a softmax over tokens.
pub fn build_saliency_cloud(
    sal_maps: &[GridMap],
    centers: &[Point],
    aggregation: SaliencyAgg,
) -> Result<SaliencyCloud> {
    if sal_maps.is_empty() {
        return Err(input_err!("saliency cloud needs at least one view"));
    }
    if centers.is_empty() {
        return Err(input_err!("saliency cloud needs at least one token"));
    }
    let mut raw: Vec<f64> = match aggregation {
        SaliencyAgg::Ave => vec![0.0; centers.len()],
        SaliencyAgg::Max => vec![f64::NEG_INFINITY; centers.len()],
        SaliencyAgg::Min => vec![f64::INFINITY; centers.len()],
    };
    for map in sal_maps {
        if map.channels != 1 {
            return Err(Error::dim("build_saliency_cloud", &[map.channels], &[1]));
        }
        let v = back_project(map, centers)?;
        for (acc, x) in raw.iter_mut().zip(v) {
            *acc = match aggregation {
                SaliencyAgg::Ave => *acc + x,
                SaliencyAgg::Max => acc.max(x),
                SaliencyAgg::Min => acc.min(x),
            };
        }
    }
    if aggregation == SaliencyAgg::Ave {
        let n = sal_maps.len() as f64;
        raw.iter_mut().for_each(|x| *x /= n);
    }
    Ok(SaliencyCloud {
        scores: softmax_scores(&raw)?,
        source_views: sal_maps.len(),
    })
}

/// Softmax over a flat score vector.
pub fn softmax_scores(raw: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = raw.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numeric(alloc::format!(
            "non-finite raw saliency {bad}"
        )));
    }
    Ok(softmax_along(raw, &[raw.len()], 0))
}

/// Weights handed to the sampler: each token inherits the score of the token
/// at the mirrored position of the descending score ranking.
pub fn mirrored_weights(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut w = vec![0.0; scores.len()];
    for (rank, &token) in order.iter().enumerate() {
        w[token] = scores[order[scores.len() - 1 - rank]];
    }
    w
}

/// Draws the visible set without replacement, then returns both halves sorted.
pub fn sample_mask(
    sal: &SaliencyCloud,
    ratio: f64,
    policy: MaskPolicy,
    seed: u64,
) -> Result<MaskPartition> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(input_err!("mask ratio must lie in [0, 1), got {ratio}"));
    }
    let m = sal.scores.len();
    let n_vis = visible_count(m, ratio);
    let mut weights = match policy {
        MaskPolicy::Important => sal.scores.clone(),
        MaskPolicy::Random => vec![1.0; m],
        MaskPolicy::Unimportant => mirrored_weights(&sal.scores),
    };
    let mut rng = seeded(seed);
    let mut visible = Vec::with_capacity(n_vis);
    let mut taken = vec![false; m];
    for _ in 0..n_vis {
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = None;
            for (i, w) in weights.iter().enumerate() {
                if *w <= 0.0 {
                    continue;
                }
                chosen = Some(i);
                if u < *w {
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            None
        };
        // Fallback for exhausted or underflowed weights: uniform over the rest.
        let pick = pick.unwrap_or_else(|| {
            let rest: Vec<usize> = (0..m).filter(|&i| !taken[i]).collect();
            rest[rng.random_range(0..rest.len())]
        });
        taken[pick] = true;
        weights[pick] = 0.0;
        visible.push(pick);
    }
    visible.sort_unstable();
    let masked = (0..m).filter(|&i| !taken[i]).collect();
    Ok(MaskPartition {
        visible_idx: visible,
        masked_idx: masked,
        ratio,
    })
}

/// Per visible token, the features of every view at its projected cell.
pub fn build_semantic_targets(
    feat_maps: &[GridMap],
    visible_centers: &[Point],
    aggregation: TargetAgg,
) -> Result<SemanticTarget> {
    let Some(first) = feat_maps.first() else {
        return Err(input_err!("semantic targets need at least one view"));
    };
    let c = first.channels;
    for map in feat_maps {
        if map.channels != c {
            return Err(Error::dim("build_semantic_targets", &[c], &[map.channels]));
        }
    }
    let rows = visible_centers.len();
    let per_view: Vec<Vec<f64>> = feat_maps
        .iter()
        .map(|m| back_project(m, visible_centers))
        .collect::<Result<_>>()?;
    let (width, values) = match aggregation {
        TargetAgg::Concat => {
            let width = c * feat_maps.len();
            let mut values = Vec::with_capacity(rows * width);
            for r in 0..rows {
                for v in &per_view {
                    values.extend_from_slice(&v[r * c..(r + 1) * c]);
                }
            }
            (width, values)
        }
        TargetAgg::Ave => {
            let mut values = vec![0.0; rows * c];
            for v in &per_view {
                values.iter_mut().zip(v).for_each(|(a, x)| *a += x);
            }
            let n = feat_maps.len() as f64;
            values.iter_mut().for_each(|a| *a /= n);
            (c, values)
        }
    };
    Ok(SemanticTarget {
        values,
        rows,
        width,
        aggregation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::Axis;
    use crate::rng::derive;
    use proptest::prelude::*;

    fn constant(axis: Axis, value: f64, channels: usize) -> GridMap {
        GridMap::new(axis, 4, 4, channels, vec![value; 16 * channels]).unwrap()
    }

    fn random_centers(n: usize, seed: u64) -> Vec<Point> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect()
    }

    /// Average ranks (ties share the mean rank).
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
                j += 1;
            }
            for &o in &order[i..=j] {
                r[o] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }

    fn spearman(a: &[f64], b: &[f64]) -> f64 {
        let (ra, rb) = (ranks(a), ranks(b));
        let n = a.len() as f64;
        let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
        cov / libm::sqrt(va * vb)
    }

    #[test]
    fn constant_views_give_uniform_scores() {
        let maps: Vec<GridMap> = Axis::ORDER.iter().map(|&a| constant(a, 3.0, 1)).collect();
        let centers = random_centers(10, 1);
        for agg in [SaliencyAgg::Ave, SaliencyAgg::Max, SaliencyAgg::Min] {
            let s = build_saliency_cloud(&maps, &centers, agg).unwrap();
            assert_eq!(s.source_views, 3);
            for p in &s.scores {
                assert!((p - 0.1).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_token_closed_form() {
        let s = softmax_scores(&[0.0, libm::log(3.0)]).unwrap();
        assert!((s[0] - 0.25).abs() < 1e-15);
        assert!((s[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn aggregation_modes_differ_per_view() {
        // X view: top row 2, bottom row 0. Y view: flat 3.
        let x = GridMap::new(Axis::X, 2, 2, 1, vec![2.0, 2.0, 0.0, 0.0]).unwrap();
        let y = GridMap::new(Axis::Y, 2, 2, 1, vec![3.0; 4]).unwrap();
        let centers = [[0.5, 0.2, 0.5], [0.5, 1.0, 0.5]];
        let log_ratio = |agg| {
            let s = build_saliency_cloud(&[x.clone(), y.clone()], &centers, agg).unwrap();
            libm::log(s.scores[0] / s.scores[1])
        };
        assert!((log_ratio(SaliencyAgg::Ave) - 1.0).abs() < 1e-12);
        assert!(log_ratio(SaliencyAgg::Max).abs() < 1e-12);
        assert!((log_ratio(SaliencyAgg::Min) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_views_rejected() {
        assert!(build_saliency_cloud(&[], &[[0.5; 3]], SaliencyAgg::Ave).is_err());
        assert!(build_semantic_targets(&[], &[[0.5; 3]], TargetAgg::Concat).is_err());
    }

    #[test]
    fn ratio_bounds() {
        let s = SaliencyCloud {
            scores: vec![0.25; 4],
            source_views: 1,
        };
        assert!(sample_mask(&s, 1.0, MaskPolicy::Random, 0).is_err());
        assert!(sample_mask(&s, -0.1, MaskPolicy::Random, 0).is_err());
        let p = sample_mask(&s, 0.0, MaskPolicy::Important, 0).unwrap();
        assert_eq!(p.visible_idx, vec![0, 1, 2, 3]);
        assert!(p.masked_idx.is_empty());
    }

    #[test]
    fn paper_scale_counts() {
        let s = SaliencyCloud {
            scores: vec![1.0 / 512.0; 512],
            source_views: 3,
        };
        let p = sample_mask(&s, 0.8, MaskPolicy::Important, 5).unwrap();
        assert_eq!((p.visible_idx.len(), p.masked_idx.len()), (102, 410));
        assert_eq!(p, sample_mask(&s, 0.8, MaskPolicy::Important, 5).unwrap());
    }

    #[test]
    fn categorical_first_draw_frequency() {
        let s = SaliencyCloud {
            scores: vec![0.9, 0.05, 0.05],
            source_views: 1,
        };
        let ratio = 0.6; // floor(0.4 * 3) = 1
        let hits = (0..10_000)
            .filter(|&i| {
                sample_mask(&s, ratio, MaskPolicy::Important, derive(11, i))
                    .unwrap()
                    .visible_idx
                    == [0]
            })
            .count();
        let f = hits as f64 / 10_000.0;
        assert!((f - 0.9).abs() < 0.02, "{f}");
    }

    #[test]
    fn mirrored_weights_reverse_ranking() {
        assert_eq!(mirrored_weights(&[0.5, 0.2, 0.3]), vec![0.2, 0.5, 0.3]);
        assert_eq!(mirrored_weights(&[0.1, 0.9]), vec![0.9, 0.1]);
    }

    #[test]
    fn important_inclusion_tracks_scores() {
        let mut rng = seeded(3);
        let raw: Vec<f64> = (0..32).map(|_| 3.0 * rng.random::<f64>()).collect();
        let sal = SaliencyCloud {
            scores: softmax_scores(&raw).unwrap(),
            source_views: 3,
        };
        let mut imp = vec![0.0; 32];
        let mut unimp = vec![0.0; 32];
        for i in 0..10_000 {
            for t in sample_mask(&sal, 0.8, MaskPolicy::Important, derive(1, i))
                .unwrap()
                .visible_idx
            {
                imp[t] += 1.0;
            }
            for t in sample_mask(&sal, 0.8, MaskPolicy::Unimportant, derive(2, i))
                .unwrap()
                .visible_idx
            {
                unimp[t] += 1.0;
            }
        }
        assert!(spearman(&imp, &sal.scores) > 0.95);
        assert!(spearman(&unimp, &sal.scores) < -0.95);
    }

    #[test]
    fn random_inclusion_is_binomial() {
        let sal = SaliencyCloud {
            scores: softmax_scores(
                &random_centers(32, 9)
                    .iter()
                    .map(|p| p[0])
                    .collect::<Vec<_>>(),
            )
            .unwrap(),
            source_views: 1,
        };
        let draws = 10_000.0;
        let p = 6.0 / 32.0;
        let sigma = libm::sqrt(draws * p * (1.0 - p));
        let mut counts = vec![0.0; 32];
        for i in 0..10_000 {
            for t in sample_mask(&sal, 0.8, MaskPolicy::Random, derive(4, i))
                .unwrap()
                .visible_idx
            {
                counts[t] += 1.0;
            }
        }
        for c in counts {
            assert!((c - draws * p).abs() <= 3.0 * sigma, "{c}");
        }
    }

    #[test]
    fn semantic_target_examples() {
        let maps = [
            constant(Axis::X, 1.0, 1),
            constant(Axis::Y, 2.0, 1),
            constant(Axis::Z, 3.0, 1),
        ];
        let centers = random_centers(5, 2);
        let t = build_semantic_targets(&maps, &centers, TargetAgg::Concat).unwrap();
        assert_eq!((t.rows, t.width), (5, 3));
        for r in t.values.chunks(3) {
            assert_eq!(r, [1.0, 2.0, 3.0]);
        }

        let a = GridMap::new(Axis::X, 1, 1, 2, vec![1.0, 3.0]).unwrap();
        let b = GridMap::new(Axis::Y, 1, 1, 2, vec![3.0, 5.0]).unwrap();
        let t =
            build_semantic_targets(&[a.clone(), b], &[[0.3, 0.3, 0.3]], TargetAgg::Ave).unwrap();
        assert_eq!(t.values, vec![2.0, 4.0]);

        let wide: Vec<GridMap> = Axis::ORDER.iter().map(|&a| constant(a, 0.5, 384)).collect();
        let t = build_semantic_targets(&wide, &centers, TargetAgg::Concat).unwrap();
        assert_eq!(t.width, 1152);

        let c = GridMap::new(Axis::Y, 1, 1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(
            build_semantic_targets(&[a, c], &centers, TargetAgg::Ave),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn names_round_trip() {
        for p in [
            MaskPolicy::Important,
            MaskPolicy::Random,
            MaskPolicy::Unimportant,
        ] {
            assert_eq!(p.name().parse::<MaskPolicy>().unwrap(), p);
        }
        assert_eq!("max".parse::<SaliencyAgg>().unwrap(), SaliencyAgg::Max);
        assert_eq!("concat".parse::<TargetAgg>().unwrap(), TargetAgg::Concat);
        assert!("sum".parse::<TargetAgg>().is_err());
    }

    proptest! {
        #[test]
        fn scores_are_a_distribution(raw in prop::collection::vec(-10.0f64..10.0, 1..64)) {
            let s = softmax_scores(&raw).unwrap();
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            if raw.len() > 1 {
                prop_assert!(s.iter().all(|p| *p > 0.0 && *p < 1.0));
            }
        }

        #[test]
        fn positive_scaling_keeps_order(raw in prop::collection::vec(0.0f64..5.0, 2..40)) {
            let order = |v: &[f64]| {
                let mut o: Vec<usize> = (0..v.len()).collect();
                o.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
                o
            };
            let base = order(&softmax_scores(&raw).unwrap());
            for alpha in [0.5, 2.0, 10.0] {
                let scaled: Vec<f64> = raw.iter().map(|x| alpha * x).collect();
                prop_assert_eq!(order(&softmax_scores(&scaled).unwrap()), base.clone());
            }
        }

        #[test]
        fn partition_is_exact(m in 1usize..80, ratio in 0.0f64..0.99, seed in any::<u64>(), policy in 0usize..3) {
            let raw: Vec<f64> = (0..m).map(|i| (i * 7 % 11) as f64).collect();
            let sal = SaliencyCloud { scores: softmax_scores(&raw).unwrap(), source_views: 1 };
            let policy = [MaskPolicy::Important, MaskPolicy::Random, MaskPolicy::Unimportant][policy];
            let p = sample_mask(&sal, ratio, policy, seed).unwrap();
            prop_assert_eq!(p.visible_idx.len(), visible_count(m, ratio));
            let mut all: Vec<usize> = p.visible_idx.iter().chain(&p.masked_idx).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..m).collect::<Vec<_>>());
        }
    }
}
