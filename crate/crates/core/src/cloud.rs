//! Point clouds: normalization, furthest point sampling, exact k-NN grouping
//! and a small synthetic shape generator.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{input_err, Error, Result};
use crate::rng::{seeded, Rng};

pub type Point = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub label: Option<usize>,
    pub source_id: String,
}

pub fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        Self::labeled(points, None, String::new())
    }

    pub fn labeled(
        points: Vec<Point>,
        label: Option<usize>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(input_err!("point cloud is empty"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(input_err!("point {i} has a non-finite coordinate"));
        }
        Ok(PointCloud {
            points,
            label,
            source_id: source_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// A seeded subset of `n` points in their original order; the whole cloud
    /// when it has `n` points or fewer.
    pub fn subsample(&self, n: usize, seed: u64) -> PointCloud {
        if self.len() <= n {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.partial_shuffle(&mut seeded(seed), n);
        let mut keep = idx[..n].to_vec();
        keep.sort_unstable();
        PointCloud {
            points: keep.iter().map(|&i| self.points[i]).collect(),
            label: self.label,
            source_id: self.source_id.clone(),
        }
    }

    /// Maps the cloud into `[0, 1]^3`: the min corner goes to the origin and the
    /// longest bounding-box edge to length 1, preserving aspect ratio. Axes with
    /// zero extent collapse to 0.5.
    pub fn normalize(&self) -> Result<PointCloud> {
        if self.points.is_empty() {
            return Err(input_err!("cannot normalize an empty cloud"));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        let longest = extent[0].max(extent[1]).max(extent[2]);
        let points = self
            .points
            .iter()
            .map(|p| {
                let mut q = [0.5; 3];
                for a in 0..3 {
                    if extent[a] > 0.0 {
                        q[a] = ((p[a] - lo[a]) / longest).clamp(0.0, 1.0);
                    }
                }
                q
            })
            .collect();
        Ok(PointCloud {
            points,
            label: self.label,
            source_id: self.source_id.clone(),
        })
    }
}

/// Sampled token centers and, once grouped, their `k` nearest neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenCenters {
    /// Index of each center in the parent cloud.
    pub center_index: Vec<usize>,
    pub centers: Vec<Point>,
    /// Row-major `M x k` neighbor indices into the parent cloud.
    pub neighbor_index: Vec<usize>,
    pub k: usize,
}

impl TokenCenters {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn neighbors(&self, token: usize) -> &[usize] {
        &self.neighbor_index[token * self.k..(token + 1) * self.k]
    }

    /// Neighbor coordinates of `token`, expressed relative to its center.
    pub fn recentered_group(&self, cloud: &[Point], token: usize) -> Vec<Point> {
        let c = self.centers[token];
        self.neighbors(token)
            .iter()
            .map(|&i| {
                let p = cloud[i];
                [p[0] - c[0], p[1] - c[1], p[2] - c[2]]
            })
            .collect()
    }
}

/// Greedy max-min selection of `m` indices starting from `start`; ties go to
/// the lowest index.
pub fn furthest_point_indices(points: &[Point], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(input_err!("cannot sample {m} of {n} points"));
    }
    if start >= n {
        return Err(input_err!(
            "start index {start} out of range for {n} points"
        ));
    }
    let mut selected = Vec::with_capacity(m);
    let mut taken = alloc::vec![false; n];
    let mut min_d = alloc::vec![f64::INFINITY; n];
    let mut current = start;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == m {
            break;
        }
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            let d = sq_dist(&points[i], &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

/// Furthest point sampling with a seeded random first point.
pub fn furthest_point_sample(cloud: &PointCloud, m: usize, seed: u64) -> Result<TokenCenters> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(input_err!("cannot sample {m} tokens from {n} points"));
    }
    let start = seeded(seed).random_range(0..n);
    let center_index = furthest_point_indices(&cloud.points, m, start)?;
    Ok(TokenCenters {
        centers: center_index.iter().map(|&i| cloud.points[i]).collect(),
        center_index,
        neighbor_index: Vec::new(),
        k: 0,
    })
}

/// The `k` nearest points of `query`, by ascending distance then ascending index.
pub fn nearest(points: &[Point], query: &Point, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (sq_dist(p, query), i))
        .collect();
    let by = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < d.len() {
        d.select_nth_unstable_by(k, by);
        d.truncate(k);
    }
    d.sort_unstable_by(by);
    d.into_iter().map(|(_, i)| i).collect()
}

/// Fills the exact `k` nearest neighbors of every center.
pub fn knn_group(cloud: &PointCloud, centers: &TokenCenters, k: usize) -> Result<TokenCenters> {
    if k == 0 || k > cloud.len() {
        return Err(input_err!(
            "k = {k} neighbors requested from {} points",
            cloud.len()
        ));
    }
    let mut neighbor_index = Vec::with_capacity(centers.len() * k);
    for c in &centers.centers {
        neighbor_index.extend(nearest(&cloud.points, c, k));
    }
    Ok(TokenCenters {
        center_index: centers.center_index.clone(),
        centers: centers.centers.clone(),
        neighbor_index,
        k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Sphere,
    Cube,
    Plane,
    Cylinder,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [
        ShapeClass::Sphere,
        ShapeClass::Cube,
        ShapeClass::Plane,
        ShapeClass::Cylinder,
    ];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Plane => "plane",
            ShapeClass::Cylinder => "cylinder",
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ShapeClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| input_err!("unknown shape class {s:?}"))
    }
}

fn gauss(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn surface_point(class: ShapeClass, rng: &mut Rng) -> Point {
    match class {
        ShapeClass::Sphere => loop {
            let v = [gauss(rng), gauss(rng), gauss(rng)];
            let r = libm::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
            if r > 1e-12 {
                break [v[0] / r, v[1] / r, v[2] / r];
            }
        },
        ShapeClass::Cube => {
            let face = rng.random_range(0..6usize);
            let a = rng.random_range(-1.0..=1.0);
            let b = rng.random_range(-1.0..=1.0);
            let s = if face % 2 == 0 { 1.0 } else { -1.0 };
            match face / 2 {
                0 => [s, a, b],
                1 => [a, s, b],
                _ => [a, b, s],
            }
        }
        ShapeClass::Plane => [
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            0.0,
        ],
        ShapeClass::Cylinder => {
            // unit radius, height 2: lateral area 4*pi, caps 2*pi
            let theta = rng.random_range(0.0..core::f64::consts::TAU);
            if rng.random_range(0.0..1.0) < 2.0 / 3.0 {
                [
                    libm::cos(theta),
                    libm::sin(theta),
                    rng.random_range(-1.0..=1.0),
                ]
            } else {
                let r = libm::sqrt(rng.random_range(0.0..=1.0));
                let z = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                [r * libm::cos(theta), r * libm::sin(theta), z]
            }
        }
    }
}

/// Uniformly random rotation from a normalized Gaussian quaternion.
fn random_rotation(rng: &mut Rng) -> [[f64; 3]; 3] {
    let (w, x, y, z) = loop {
        let q = [gauss(rng), gauss(rng), gauss(rng), gauss(rng)];
        let n = libm::sqrt(q.iter().map(|v| v * v).sum());
        if n > 1e-12 {
            break (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        }
    };
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Parameters of one synthetic sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    pub class: ShapeClass,
    pub n_points: usize,
    pub seed: u64,
    /// Standard deviation of the Gaussian jitter added before normalization.
    pub jitter: f64,
    /// Apply a seeded uniformly random rotation before jittering.
    pub random_pose: bool,
}

/// Samples points uniformly on a unit-scale surface, jitters and normalizes them.
/// Deterministic in `spec`.
pub fn generate_shape(spec: &ShapeSpec) -> Result<PointCloud> {
    if spec.n_points < 8 {
        return Err(input_err!("need at least 8 points, got {}", spec.n_points));
    }
    if !(spec.jitter >= 0.0 && spec.jitter.is_finite()) {
        return Err(input_err!("jitter must be finite and non-negative"));
    }
    let mut rng = seeded(spec.seed);
    let rot = spec.random_pose.then(|| random_rotation(&mut rng));
    let mut points = Vec::with_capacity(spec.n_points);
    for _ in 0..spec.n_points {
        let mut p = surface_point(spec.class, &mut rng);
        if let Some(r) = &rot {
            p = [
                r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
                r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
                r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
            ];
        }
        if spec.jitter > 0.0 {
            for v in &mut p {
                *v += spec.jitter * gauss(&mut rng);
            }
        }
        points.push(p);
    }
    let id = alloc::format!("{}-{}", spec.class, spec.seed);
    PointCloud::labeled(points, Some(spec.class.label()), id)?.normalize()
}

/// Convenience wrapper: axis-aligned shape.
pub fn generate_shapes(
    class: ShapeClass,
    n_points: usize,
    seed: u64,
    jitter: f64,
) -> Result<PointCloud> {
    generate_shape(&ShapeSpec {
        class,
        n_points,
        seed,
        jitter,
        random_pose: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    /// Exhaustive max-min oracle: at each step scan all candidates.
    fn fps_oracle(points: &[Point], m: usize, start: usize) -> Vec<usize> {
        let mut sel = vec![start];
        while sel.len() < m {
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for i in 0..points.len() {
                if sel.contains(&i) {
                    continue;
                }
                let d = sel
                    .iter()
                    .map(|&s| sq_dist(&points[i], &points[s]))
                    .fold(f64::INFINITY, f64::min);
                if d > best.0 {
                    best = (d, i);
                }
            }
            sel.push(best.1);
        }
        sel
    }

    #[test]
    fn normalize_examples() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.5, 0.2, 0.9]]).unwrap();
        assert_eq!(c.normalize().unwrap().points, c.points);

        let c = PointCloud::new(vec![[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(c.normalize().unwrap().points, vec![[0.0; 3], [1.0; 3]]);

        let c = PointCloud::new(vec![[3.0, -2.0, 7.0]; 5]).unwrap();
        assert!(c.normalize().unwrap().points.iter().all(|p| *p == [0.5; 3]));

        assert!(PointCloud::new(vec![]).is_err());
    }

    #[test]
    fn normalize_preserves_aspect() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [4.0, 2.0, 0.0]]).unwrap();
        let n = c.normalize().unwrap();
        assert_eq!(n.points[1], [1.0, 0.5, 0.5]);
    }

    #[test]
    fn fps_examples() {
        let line: Vec<Point> = (0..4).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert_eq!(furthest_point_indices(&line, 2, 0).unwrap(), vec![0, 3]);
        let mut all = furthest_point_indices(&line, 4, 1).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(furthest_point_indices(&line, 5, 0).is_err());
    }

    #[test]
    fn fps_handles_duplicates_without_reselecting() {
        let pts = vec![[0.0; 3]; 5];
        let sel = furthest_point_indices(&pts, 5, 2).unwrap();
        assert_eq!(sel, vec![2, 0, 1, 3, 4]);
    }

    #[test]
    fn knn_examples() {
        let square = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ])
        .unwrap();
        let centers = TokenCenters {
            center_index: vec![0],
            centers: vec![[0.0, 0.0, 0.0]],
            neighbor_index: vec![],
            k: 0,
        };
        let g = knn_group(&square, &centers, 2).unwrap();
        // corners 1 and 2 are equidistant; the lower index wins
        assert_eq!(g.neighbors(0), &[0, 1]);
        let g = knn_group(&square, &centers, 1).unwrap();
        assert_eq!(g.neighbors(0), &[0]);
        assert!(knn_group(&square, &centers, 5).is_err());
    }

    #[test]
    fn paper_scale_token_counts() {
        let c = generate_shapes(ShapeClass::Sphere, 2048, 3, 0.0).unwrap();
        let t = furthest_point_sample(&c, 512, 9).unwrap();
        let t = knn_group(&c, &t, 16).unwrap();
        assert_eq!(t.len(), 512);
        assert_eq!(t.neighbor_index.len(), 512 * 16);
    }

    #[test]
    fn generated_sphere_is_a_sphere() {
        let c = generate_shapes(ShapeClass::Sphere, 500, 11, 0.0).unwrap();
        // normalization is isotropic, so the points stay on a common sphere;
        // recover its center from four points and check every radius
        let p = &c.points;
        let row = |i: usize| {
            let a = [
                2.0 * (p[i][0] - p[0][0]),
                2.0 * (p[i][1] - p[0][1]),
                2.0 * (p[i][2] - p[0][2]),
            ];
            let b = (p[i][0].powi(2) + p[i][1].powi(2) + p[i][2].powi(2))
                - (p[0][0].powi(2) + p[0][1].powi(2) + p[0][2].powi(2));
            (a, b)
        };
        let (a1, b1) = row(1);
        let (a2, b2) = row(2);
        let (a3, b3) = row(3);
        let det = |m: [[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let m = [a1, a2, a3];
        let d = det(m);
        let mut center = [0.0; 3];
        for (k, c) in center.iter_mut().enumerate() {
            let mut mk = m;
            mk[0][k] = b1;
            mk[1][k] = b2;
            mk[2][k] = b3;
            *c = det(mk) / d;
        }
        let r0 = libm::sqrt(sq_dist(&p[0], &center));
        for q in p {
            assert!((libm::sqrt(sq_dist(q, &center)) - r0).abs() < 1e-9);
        }
    }

    #[test]
    fn generation_is_deterministic_and_normalized() {
        for class in ShapeClass::ALL {
            let spec = ShapeSpec {
                class,
                n_points: 256,
                seed: 5,
                jitter: 0.02,
                random_pose: true,
            };
            let a = generate_shape(&spec).unwrap();
            let b = generate_shape(&spec).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.label, Some(class.label()));
            assert!(a.points.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!("torus".parse::<ShapeClass>().is_err());
        assert_eq!("cube".parse::<ShapeClass>().unwrap(), ShapeClass::Cube);
        assert!(generate_shapes(ShapeClass::Cube, 7, 0, 0.0).is_err());
    }

    fn cloud_strategy(max: usize) -> impl Strategy<Value = Vec<Point>> {
        prop::collection::vec(prop::array::uniform3(0.0f64..1.0), 2..max)
    }

    #[test]
    fn subsample_keeps_order_and_size() {
        let c = generate_shapes(ShapeClass::Plane, 100, 3, 0.0).unwrap();
        let s = c.subsample(40, 9);
        assert_eq!(s.len(), 40);
        assert_eq!(s, c.subsample(40, 9));
        let pos: Vec<usize> = s
            .points
            .iter()
            .map(|p| c.points.iter().position(|q| q == p).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(c.subsample(100, 1), c);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn fps_matches_exhaustive_oracle(points in cloud_strategy(80), frac in 0.05f64..1.0, s in 0usize..1000) {
            let m = ((points.len() as f64 * frac) as usize).max(1);
            let start = s % points.len();
            prop_assert_eq!(furthest_point_indices(&points, m, start).unwrap(), fps_oracle(&points, m, start));
        }

        #[test]
        fn fps_ignores_copies_of_unselected_points(points in cloud_strategy(60), s in 0usize..1000, pick in 0usize..1000) {
            let m = (points.len() / 3).max(1);
            let start = s % points.len();
            let sel = furthest_point_indices(&points, m, start).unwrap();
            let unselected: Vec<usize> = (0..points.len()).filter(|i| !sel.contains(i)).collect();
            prop_assume!(!unselected.is_empty());
            let mut more = points.clone();
            more.push(points[unselected[pick % unselected.len()]]);
            prop_assert_eq!(furthest_point_indices(&more, m, start).unwrap(), sel);
        }

        #[test]
        fn knn_matches_sorted_distances(points in cloud_strategy(100), k in 1usize..12, q in prop::array::uniform3(0.0f64..1.0)) {
            let k = k.min(points.len());
            let got = nearest(&points, &q, k);
            let mut all: Vec<usize> = (0..points.len()).collect();
            all.sort_by(|&a, &b| sq_dist(&points[a], &q).total_cmp(&sq_dist(&points[b], &q)).then(a.cmp(&b)));
            prop_assert_eq!(got, all[..k].to_vec());
        }
    }
}
