//! Orthogonal depth projection along the coordinate axes and the inverse
//! image-to-point lookup.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::cloud::Point;
use crate::error::{contract_err, input_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ORDER: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }

    /// The two kept coordinates, as (row, column) sources.
    pub fn kept(self) -> (usize, usize) {
        match self {
            Axis::X => (1, 2),
            Axis::Y => (0, 2),
            Axis::Z => (0, 1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            _ => Err(input_err!("unknown axis {s:?}")),
        }
    }
}

/// Single-channel depth image. Occupied pixels hold `(d + 1) / 2` for the
/// dropped coordinate `d`, so background stays exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub axis: Axis,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    /// Exported as three identical channels.
    pub channel_replicated: bool,
}

impl DepthMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn occupied(&self) -> usize {
        self.pixels.iter().filter(|v| **v > 0.0).count()
    }
}

/// `H x W x C` grid of per-cell vectors computed from an `H_img x W_img` view.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    pub axis: Axis,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
    /// Resolution of the image the grid was derived from; a multiple of the grid.
    pub image_height: usize,
    pub image_width: usize,
}

impl GridMap {
    pub fn new(
        axis: Axis,
        height: usize,
        width: usize,
        channels: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        Self::with_image(axis, height, width, channels, values, (height, width))
    }

    pub fn with_image(
        axis: Axis,
        height: usize,
        width: usize,
        channels: usize,
        values: Vec<f64>,
        (image_height, image_width): (usize, usize),
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(input_err!("grid map extents must be positive"));
        }
        if values.len() != height * width * channels {
            return Err(Error::dim(
                "grid_map",
                &[height, width, channels],
                &[values.len()],
            ));
        }
        if image_height % height != 0 || image_width % width != 0 {
            return Err(input_err!(
                "image {image_height}x{image_width} is not a multiple of grid {height}x{width}"
            ));
        }
        Ok(GridMap {
            axis,
            height,
            width,
            channels,
            values,
            image_height,
            image_width,
        })
    }

    /// A depth map viewed as a one-channel grid at full resolution.
    pub fn from_depth(map: &DepthMap) -> Self {
        GridMap {
            axis: map.axis,
            height: map.height,
            width: map.width,
            channels: 1,
            values: map.pixels.clone(),
            image_height: map.height,
            image_width: map.width,
        }
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let at = (row * self.width + col) * self.channels;
        &self.values[at..at + self.channels]
    }

    /// Grid cell holding the pixel a normalized point projects to.
    pub fn cell_of(&self, p: &Point) -> Result<(usize, usize)> {
        let (r, c) = self.axis.kept();
        let (u, v) = (p[r], p[c]);
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return Err(contract_err!("query {p:?} is outside the unit cube"));
        }
        let (pr, pc) = pixel_of(u, v, self.image_height, self.image_width);
        Ok((
            pr / (self.image_height / self.height),
            pc / (self.image_width / self.width),
        ))
    }
}

fn pixel_of(u: f64, v: f64, height: usize, width: usize) -> (usize, usize) {
    let r = libm::floor(u * (height - 1) as f64) as usize;
    let c = libm::floor(v * (width - 1) as f64) as usize;
    (r.min(height - 1), c.min(width - 1))
}

/// Projects a normalized cloud along `axis`; colliding points keep the largest depth.
pub fn render_depth(
    points: &[Point],
    axis: Axis,
    (height, width): (usize, usize),
) -> Result<DepthMap> {
    if height == 0 || width == 0 {
        return Err(input_err!("resolution must be positive"));
    }
    let mut pixels = vec![0.0; height * width];
    let (r, c) = axis.kept();
    let d = axis.index();
    for p in points {
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(contract_err!("point {p:?} is outside the unit cube"));
        }
        let (pr, pc) = pixel_of(p[r], p[c], height, width);
        let value = (p[d] + 1.0) / 2.0;
        let px = &mut pixels[pr * width + pc];
        if value > *px {
            *px = value;
        }
    }
    Ok(DepthMap {
        axis,
        height,
        width,
        pixels,
        channel_replicated: true,
    })
}

/// Depth maps for the first `view_count` axes of x, y, z.
pub fn render_views(
    points: &[Point],
    view_count: usize,
    resolution: (usize, usize),
) -> Result<Vec<DepthMap>> {
    if !(1..=3).contains(&view_count) {
        return Err(input_err!("view count must be 1, 2 or 3, got {view_count}"));
    }
    Axis::ORDER[..view_count]
        .iter()
        .map(|&a| render_depth(points, a, resolution))
        .collect()
}

/// Looks up each query's cell vector: row-major `queries.len() x channels`.
pub fn back_project(map: &GridMap, queries: &[Point]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(queries.len() * map.channels);
    for q in queries {
        let (r, c) = map.cell_of(q)?;
        out.extend_from_slice(map.cell(r, c));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{generate_shapes, ShapeClass};
    use proptest::prelude::*;

    #[test]
    fn lower_corner_point() {
        let m = render_depth(&[[0.0, 0.0, 0.0]], Axis::Z, (224, 224)).unwrap();
        assert_eq!(m.get(0, 0), 0.5);
        assert_eq!(m.occupied(), 1);
    }

    #[test]
    fn collisions_keep_max_depth() {
        let pts = [[0.3, 0.3, 0.2], [0.3, 0.3, 0.8]];
        let m = render_depth(&pts, Axis::Z, (224, 224)).unwrap();
        let (r, c) = pixel_of(0.3, 0.3, 224, 224);
        assert!((m.get(r, c) - 0.9).abs() < 1e-15);
        assert_eq!(m.occupied(), 1);
    }

    #[test]
    fn out_of_range_is_rejected() {
        assert!(render_depth(&[[1.2, 0.0, 0.0]], Axis::X, (4, 4)).is_err());
    }

    #[test]
    fn view_prefix_rule() {
        let pts = [[0.1, 0.2, 0.3]];
        let v = render_views(&pts, 3, (8, 8)).unwrap();
        assert_eq!(
            v.iter().map(|m| m.axis).collect::<Vec<_>>(),
            vec![Axis::X, Axis::Y, Axis::Z]
        );
        let v = render_views(&pts, 1, (8, 8)).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].axis, Axis::X);
        assert!(render_views(&pts, 0, (8, 8)).is_err());
        assert!(render_views(&pts, 4, (8, 8)).is_err());
    }

    #[test]
    fn sphere_views_are_balanced() {
        let c = generate_shapes(ShapeClass::Sphere, 2048, 1, 0.0).unwrap();
        let counts: Vec<usize> = render_views(&c.points, 3, (224, 224))
            .unwrap()
            .iter()
            .map(DepthMap::occupied)
            .collect();
        let max = *counts.iter().max().unwrap() as f64;
        let min = *counts.iter().min().unwrap() as f64;
        assert!((max - min) / max < 0.1, "{counts:?}");
    }

    #[test]
    fn back_project_lookups() {
        let m = GridMap::new(Axis::Y, 14, 14, 2, [0.25, -1.0].repeat(196)).unwrap();
        let out = back_project(&m, &[[0.0, 0.3, 1.0], [0.7, 0.7, 0.7]]).unwrap();
        assert_eq!(out, vec![0.25, -1.0, 0.25, -1.0]);

        // 2x2 grid: (H - 1) scaling puts every coordinate below 1.0 in row/col 0
        let m = GridMap::new(Axis::Z, 2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(back_project(&m, &[[0.9, 0.1, 0.5]]).unwrap(), vec![1.0]);
        assert_eq!(back_project(&m, &[[1.0, 0.1, 0.5]]).unwrap(), vec![3.0]);
        assert_eq!(back_project(&m, &[[1.0, 1.0, 0.0]]).unwrap(), vec![4.0]);
    }

    #[test]
    fn patch_grid_matches_pixel_patches() {
        let m = GridMap::with_image(
            Axis::Z,
            14,
            14,
            1,
            (0..196).map(f64::from).collect(),
            (224, 224),
        )
        .unwrap();
        let p = [0.6, 0.99, 0.0];
        let (pr, pc) = pixel_of(0.6, 0.99, 224, 224);
        assert_eq!(m.cell_of(&p).unwrap(), (pr / 16, pc / 16));
        assert!(GridMap::with_image(Axis::Z, 14, 14, 1, vec![0.0; 196], (200, 224)).is_err());
    }

    proptest! {
        #[test]
        fn projection_round_trip(axis in 0usize..3, n in 1usize..40, seed in any::<u64>()) {
            // points on distinct pixel centers so no two collide
            let axis = Axis::ORDER[axis];
            let res = 64usize;
            let mut rng = crate::rng::seeded(seed);
            let mut used = alloc::collections::BTreeSet::new();
            let mut pts = Vec::new();
            use rand::Rng as _;
            while pts.len() < n {
                let (r, c) = (rng.random_range(0..res), rng.random_range(0..res));
                if used.insert((r, c)) {
                    let mut p = [0.0; 3];
                    let (kr, kc) = axis.kept();
                    p[kr] = r as f64 / (res - 1) as f64;
                    p[kc] = c as f64 / (res - 1) as f64;
                    p[axis.index()] = rng.random_range(0.0..=1.0);
                    pts.push(p);
                }
            }
            let depth = render_depth(&pts, axis, (res, res)).unwrap();
            let back = back_project(&GridMap::from_depth(&depth), &pts).unwrap();
            for (p, b) in pts.iter().zip(back) {
                prop_assert_eq!(b, (p[axis.index()] + 1.0) / 2.0);
            }
        }

        #[test]
        fn render_is_order_invariant_and_monotone(seed in any::<u64>(), bump in 0.0f64..0.5) {
            use rand::seq::SliceRandom;
            let c = crate::cloud::generate_shapes(ShapeClass::Cube, 64, seed, 0.01).unwrap();
            let a = render_depth(&c.points, Axis::X, (32, 32)).unwrap();
            let mut shuffled = c.points.clone();
            shuffled.shuffle(&mut crate::rng::seeded(seed ^ 1));
            prop_assert_eq!(&a, &render_depth(&shuffled, Axis::X, (32, 32)).unwrap());

            let mut raised = c.points.clone();
            raised[0][0] = (raised[0][0] + bump).min(1.0);
            let b = render_depth(&raised, Axis::X, (32, 32)).unwrap();
            let (pr, pc) = pixel_of(c.points[0][1], c.points[0][2], 32, 32);
            prop_assert!(b.get(pr, pc) >= a.get(pr, pc));
        }
    }
}
