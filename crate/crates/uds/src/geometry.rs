//! Points, wedges, and the metrics used throughout the tube construction.
//!
//! A *wedge* is an ordered triple of points `(t1, t2, t3)` standing for the
//! union of the closed segments `[t1, t2]` and `[t2, t3]`.  Two different
//! distances appear side by side and must not be confused:
//!
//! * [`wedge_distance`] — the parameter-space metric `max_i ||a_i - b_i||`
//!   over the three vertices.  This is the metric the tube construction is
//!   indexed by.
//! * [`hausdorff_distance`] — the set distance between the two polylines,
//!   which is always bounded above by the wedge distance.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UdsError};

/// A point of the ambient space, held as a coordinate vector.
///
/// The toolkit is dimension-generic; everything defaults to the plane but
/// nothing below assumes `dim == 2`.
#[derive(Clone, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Point(pub Vec<f64>);

impl Point {
    pub fn new(coords: Vec<f64>) -> Self {
        Point(coords)
    }

    pub fn zeros(dim: usize) -> Self {
        Point(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn dist(&self, other: &Point) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn add(&self, other: &Point) -> Point {
        Point(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Point) -> Point {
        Point(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, s: f64) -> Point {
        Point(self.0.iter().map(|a| a * s).collect())
    }

    /// `self + t * dir`.
    pub fn offset(&self, dir: &Point, t: f64) -> Point {
        Point(
            self.0
                .iter()
                .zip(&dir.0)
                .map(|(a, d)| a + t * d)
                .collect(),
        )
    }

    pub fn dot(&self, other: &Point) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    /// Unit vector in the same direction, or `None` for the zero vector.
    pub fn normalized(&self) -> Option<Point> {
        let n = self.norm();
        if n == 0.0 {
            None
        } else {
            Some(self.scale(1.0 / n))
        }
    }

    /// Linear interpolation `(1 - t) * self + t * other`.
    pub fn lerp(&self, other: &Point, t: f64) -> Point {
        Point(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + t * (b - a))
                .collect(),
        )
    }
}

/// Ordered vertex triple `(t1, t2, t3)`; the carried set is
/// `[t1, t2] ∪ [t2, t3]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wedge {
    pub t1: Point,
    pub t2: Point,
    pub t3: Point,
}

impl Wedge {
    pub fn new(t1: Point, t2: Point, t3: Point) -> Self {
        Wedge { t1, t2, t3 }
    }

    pub fn dim(&self) -> usize {
        self.t1.dim()
    }

    pub fn vertices(&self) -> [&Point; 3] {
        [&self.t1, &self.t2, &self.t3]
    }

    /// A wedge is degenerate when consecutive vertices coincide.  Degenerate
    /// wedges are legal inputs everywhere; they simply carry a shorter set.
    pub fn is_degenerate(&self) -> bool {
        self.t1 == self.t2 || self.t2 == self.t3
    }

    /// Total arc length `|t1 - t2| + |t2 - t3|`.
    pub fn len(&self) -> f64 {
        self.t1.dist(&self.t2) + self.t2.dist(&self.t3)
    }

    /// Largest pairwise vertex distance; an upper bound for the set diameter.
    pub fn diameter(&self) -> f64 {
        self.t1
            .dist(&self.t2)
            .max(self.t2.dist(&self.t3))
            .max(self.t1.dist(&self.t3))
    }

    /// Unit directions of the two segments (None for a collapsed segment).
    pub fn segment_directions(&self) -> [Option<Point>; 2] {
        [
            self.t2.sub(&self.t1).normalized(),
            self.t3.sub(&self.t2).normalized(),
        ]
    }

    /// Points on the carried set at arc-length spacing at most `step`,
    /// always including the three vertices.
    pub fn sample(&self, step: f64) -> Vec<Point> {
        assert!(step > 0.0, "sample step must be positive");
        let mut out = Vec::new();
        for (a, b) in [(&self.t1, &self.t2), (&self.t2, &self.t3)] {
            let len = a.dist(b);
            let n = (len / step).ceil().max(1.0) as usize;
            for i in 0..=n {
                out.push(a.lerp(b, i as f64 / n as f64));
            }
        }
        out
    }

    /// Axis-aligned bounding box of the vertex set.
    pub fn bbox(&self) -> (Point, Point) {
        let dim = self.dim();
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for v in self.vertices() {
            for (k, c) in v.0.iter().enumerate() {
                lo[k] = lo[k].min(*c);
                hi[k] = hi[k].max(*c);
            }
        }
        (Point(lo), Point(hi))
    }
}

/// Vertex-wise metric `max_{1<=i<=3} ||a_i - b_i||` between two wedges.
///
/// This dominates the Hausdorff distance between the carried sets, because
/// moving every vertex by at most `r` moves every point of the polyline by
/// at most `r`.
pub fn wedge_distance(a: &Wedge, b: &Wedge) -> f64 {
    a.t1.dist(&b.t1).max(a.t2.dist(&b.t2)).max(a.t3.dist(&b.t3))
}

/// Distance from `p` to the closed segment `[a, b]` (clamped projection).
pub fn point_segment_distance(p: &Point, a: &Point, b: &Point) -> f64 {
    let ab = b.sub(a);
    let denom = ab.dot(&ab);
    if denom == 0.0 {
        return p.dist(a);
    }
    let t = (p.sub(a).dot(&ab) / denom).clamp(0.0, 1.0);
    p.dist(&a.offset(&ab, t))
}

/// Distance from `p` to the carried set of `w` — the minimum over the two
/// segments.  Exact, and 1-Lipschitz in `p`.
pub fn point_wedge_distance(p: &Point, w: &Wedge) -> f64 {
    point_segment_distance(p, &w.t1, &w.t2).min(point_segment_distance(p, &w.t2, &w.t3))
}

/// Hausdorff distance between the carried sets of `a` and `b`, computed by
/// sampling each polyline at arc-length step `2 * tol` and measuring exact
/// point-to-wedge distances.  Because the distance field of a wedge is
/// 1-Lipschitz, the returned value is within `tol` of the true Hausdorff
/// distance.
pub fn hausdorff_distance(a: &Wedge, b: &Wedge, tol: f64) -> f64 {
    assert!(tol > 0.0, "tolerance must be positive");
    let step = 2.0 * tol;
    let sup_a = a
        .sample(step)
        .iter()
        .map(|p| point_wedge_distance(p, b))
        .fold(0.0_f64, f64::max);
    let sup_b = b
        .sample(step)
        .iter()
        .map(|p| point_wedge_distance(p, a))
        .fold(0.0_f64, f64::max);
    sup_a.max(sup_b)
}

/// Default sampling tolerance for the Hausdorff estimator.
pub const DEFAULT_HAUSDORFF_TOL: f64 = 1e-9;

/// Whether the carried set of `w` lies inside the closed ball `B̄_r(c)`.
/// Exact: balls are convex, so checking the three vertices suffices.
pub fn wedge_in_ball(w: &Wedge, c: &Point, r: f64) -> bool {
    w.vertices().iter().all(|v| v.dist(c) <= r)
}

/// Certified check that the carried set of `inner` lies inside the closed
/// `r`-neighbourhood of the carried set of `outer`.
///
/// The set of `inner` is sampled at arc-length step `step`; since the
/// distance field of `outer` is 1-Lipschitz, the true supremum exceeds the
/// sampled supremum by at most `step / 2`.  The check is therefore
/// conservative: `true` certifies containment, `false` may also occur for
/// sets that fit with less than `step / 2` of slack.
pub fn wedge_in_neighborhood(inner: &Wedge, outer: &Wedge, r: f64, step: f64) -> bool {
    let sup = inner
        .sample(step)
        .iter()
        .map(|p| point_wedge_distance(p, outer))
        .fold(0.0_f64, f64::max);
    sup + 0.5 * step <= r
}

/// Grid cell of `p` at mesh size `h` (coordinate-wise floor).
pub fn grid_cell(p: &Point, h: f64) -> Vec<i64> {
    p.0.iter().map(|c| (c / h).floor() as i64).collect()
}

/// Result of a box-counting dimension fit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DimensionEstimate {
    /// Least-squares slope of `ln N(h)` against `ln (1/h)`.
    pub slope: f64,
    /// `(h, N(h))` pairs actually used, sorted by decreasing `h`.
    pub counts: Vec<(f64, usize)>,
}

/// Box-counting dimension estimate of a finite point cloud over the given
/// mesh sizes.  Cells are the half-open cubes of an axis-aligned grid of
/// mesh `h` anchored at the origin.
///
/// Errors when fewer than two distinct positive scales are supplied.  A
/// cloud that occupies a single cell at every scale fits to slope `0`.
pub fn box_dimension_estimate(points: &[Point], scales: &[f64]) -> Result<DimensionEstimate> {
    let mut hs: Vec<f64> = scales.iter().copied().filter(|h| *h > 0.0).collect();
    hs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    hs.dedup();
    if hs.len() < 2 {
        return Err(UdsError::invalid_input(
            "box dimension fit needs at least two distinct positive scales",
        ));
    }
    if points.is_empty() {
        return Err(UdsError::invalid_input(
            "box dimension fit needs a nonempty point cloud",
        ));
    }
    let mut counts = Vec::with_capacity(hs.len());
    for &h in &hs {
        let mut cells: std::collections::BTreeSet<Vec<i64>> = std::collections::BTreeSet::new();
        for p in points {
            cells.insert(grid_cell(p, h));
        }
        counts.push((h, cells.len()));
    }
    // Least squares of y = ln N over x = ln(1/h).
    let n = counts.len() as f64;
    let xs: Vec<f64> = counts.iter().map(|(h, _)| (1.0 / h).ln()).collect();
    let ys: Vec<f64> = counts.iter().map(|(_, c)| (*c as f64).ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum();
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    Ok(DimensionEstimate { slope, counts })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: f64, y: f64) -> Point {
        Point(vec![x, y])
    }

    #[test]
    fn wedge_distance_translation() {
        // Translating one vertex pair by (0.3, 0.4) and leaving a residual on
        // the middle vertex: the max is attained at the moved vertices.
        let a = Wedge::new(pt(0.0, 0.0), pt(1.0, 0.0), pt(1.0, 1.0));
        let b = Wedge::new(pt(0.3, 0.4), pt(1.0, 0.0), pt(1.3, 1.4));
        assert!((wedge_distance(&a, &b) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn wedge_distance_is_a_metric_on_vertex_triples() {
        let a = Wedge::new(pt(0.0, 0.0), pt(1.0, 0.0), pt(1.0, 1.0));
        let b = Wedge::new(pt(0.5, 0.25), pt(0.75, -0.5), pt(0.0, 1.0));
        let c = Wedge::new(pt(-0.25, 0.125), pt(1.5, 0.5), pt(0.5, 0.5));
        assert_eq!(wedge_distance(&a, &a), 0.0);
        assert_eq!(wedge_distance(&a, &b), wedge_distance(&b, &a));
        assert!(wedge_distance(&a, &c) <= wedge_distance(&a, &b) + wedge_distance(&b, &c) + 1e-15);
    }

    #[test]
    fn point_wedge_distance_examples() {
        // Distance from (2, 1) to the wedge through (-1,0), (0,0), (1,0):
        // the whole set is the segment [-1,1] x {0}; nearest point (1, 0).
        let w = Wedge::new(pt(-1.0, 0.0), pt(0.0, 0.0), pt(1.0, 0.0));
        let d = point_wedge_distance(&pt(2.0, 1.0), &w);
        assert!((d - 2.0_f64.sqrt()).abs() < 1e-15);
        // A point on the set has distance zero.
        assert_eq!(point_wedge_distance(&pt(0.5, 0.0), &w), 0.0);
    }

    #[test]
    fn hausdorff_bounded_by_wedge_distance() {
        let a = Wedge::new(pt(0.0, 0.0), pt(0.5, 0.5), pt(1.0, 0.0));
        let b = Wedge::new(pt(0.05, -0.025), pt(0.45, 0.5), pt(1.0, 0.1));
        let h = hausdorff_distance(&a, &b, 1e-6);
        assert!(h <= wedge_distance(&a, &b) + 2e-6);
    }

    #[test]
    fn hausdorff_identical_wedges_is_near_zero() {
        // Sampled points hit the projection formula at rounding level, so
        // the self-distance is zero only up to machine precision.
        let a = Wedge::new(pt(0.0, 0.0), pt(0.5, 0.5), pt(1.0, 0.0));
        assert!(hausdorff_distance(&a, &a, 1e-6) < 1e-12);
    }

    #[test]
    fn hausdorff_parallel_segments() {
        // Two horizontal segments at height 0 and 0.25 (degenerate wedges):
        // the Hausdorff distance is exactly 0.25.
        let a = Wedge::new(pt(0.0, 0.0), pt(0.5, 0.0), pt(1.0, 0.0));
        let b = Wedge::new(pt(0.0, 0.25), pt(0.5, 0.25), pt(1.0, 0.25));
        let h = hausdorff_distance(&a, &b, 1e-7);
        assert!((h - 0.25).abs() < 2e-7);
    }

    #[test]
    fn wedge_in_ball_examples() {
        let w = Wedge::new(pt(0.0, 0.0), pt(0.0, 0.0), pt(0.0, 0.0));
        assert!(wedge_in_ball(&w, &pt(0.0, 0.0), 0.0));
        let w2 = Wedge::new(pt(0.0, 0.0), pt(1.0, 0.0), pt(0.0, 1.0));
        assert!(wedge_in_ball(&w2, &pt(0.0, 0.0), 1.0));
        assert!(!wedge_in_ball(&w2, &pt(0.0, 0.0), 0.999));
    }

    #[test]
    fn degenerate_wedge_is_flagged_not_rejected() {
        let w = Wedge::new(pt(0.0, 0.0), pt(0.0, 0.0), pt(1.0, 0.0));
        assert!(w.is_degenerate());
        assert!((w.len() - 1.0).abs() < 1e-15);
        assert_eq!(point_wedge_distance(&pt(0.5, 0.5), &w), 0.5);
    }

    #[test]
    fn box_dimension_of_a_segment_is_about_one() {
        let points: Vec<Point> = (0..=4096).map(|i| pt(i as f64 / 4096.0, 0.25)).collect();
        let scales = [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0];
        let est = box_dimension_estimate(&points, &scales).unwrap();
        assert!((est.slope - 1.0).abs() < 0.05, "slope = {}", est.slope);
    }

    #[test]
    fn box_dimension_of_a_point_is_zero() {
        let points = vec![pt(0.3, 0.7)];
        let scales = [0.5, 0.25, 0.125, 0.0625];
        let est = box_dimension_estimate(&points, &scales).unwrap();
        assert!(est.slope.abs() <= 0.05);
    }

    #[test]
    fn box_dimension_rejects_single_scale() {
        let points = vec![pt(0.0, 0.0)];
        assert!(box_dimension_estimate(&points, &[0.5, 0.5]).is_err());
    }
}
