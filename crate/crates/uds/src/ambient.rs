//! The ambient scaffolding the tube construction lives in: countable wedge
//! families with dyadic vertices, the nested sequence of open sets that
//! receives the tubes, and fat Cantor sets for the final intersection
//! probes.
//!
//! A family member is a wedge whose vertices lie on a dyadic grid and whose
//! consecutive vertices are separated by the reference functional `phi`
//! (so no segment is parallel to `ker phi`).  Families come in two modes:
//!
//! * a *complete enumeration* at one fixed pitch, in lexicographic order —
//!   used for the small, exhaustively testable cases; and
//! * an *incremental* family in discovery order, fed by [`WedgeFamily::net_index`],
//!   which realises arbitrarily fine nets by grid quantization without ever
//!   materialising them.

use std::collections::BTreeMap;

use num::rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UdsError};
use crate::geometry::{wedge_distance, Point, Wedge};

/// A linear functional `y -> <v, y>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFunctional(pub Point);

impl LinearFunctional {
    /// The first coordinate functional, the default separator.
    pub fn first_coordinate(dim: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[0] = 1.0;
        LinearFunctional(Point(v))
    }

    pub fn apply(&self, p: &Point) -> f64 {
        self.0.dot(p)
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

/// Identifies a dyadic wedge exactly: grid exponent `pitch_exp` (the pitch is
/// `2^pitch_exp`) and the nine (in the plane: six) integer vertex
/// coordinates in grid units.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WedgeKey {
    pub pitch_exp: i32,
    pub coords: Vec<i64>,
}

impl WedgeKey {
    pub fn wedge(&self, dim: usize) -> Wedge {
        let pitch = (self.pitch_exp as f64).exp2();
        let v = |k: usize| -> Point {
            Point(
                self.coords[k * dim..(k + 1) * dim]
                    .iter()
                    .map(|c| *c as f64 * pitch)
                    .collect(),
            )
        };
        Wedge::new(v(0), v(1), v(2))
    }

    pub fn from_wedge(w: &Wedge, pitch_exp: i32) -> Self {
        let pitch = (pitch_exp as f64).exp2();
        let mut coords = Vec::with_capacity(3 * w.dim());
        for v in w.vertices() {
            for c in &v.0 {
                coords.push((c / pitch).round() as i64);
            }
        }
        WedgeKey { pitch_exp, coords }
    }
}

/// A member of a wedge family together with its exact grid identity.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FamilyWedge {
    pub wedge: Wedge,
    pub key: WedgeKey,
}

/// Countable family of separated dyadic wedges.  The `wedges` vector *is*
/// the enumeration; the index of a wedge in it is the index `i` used by the
/// radius schedule [`WedgeFamily::eta`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WedgeFamily {
    pub bbox: (Point, Point),
    pub phi: LinearFunctional,
    pub wedges: Vec<FamilyWedge>,
    #[serde(skip)]
    index: BTreeMap<WedgeKey, usize>,
}

/// Largest power of two `<= eps / (2 * sqrt(dim))`.
///
/// Rounding a vertex to this grid moves it by at most `pitch * sqrt(dim) / 2
/// <= eps / 4`, and one separating nudge adds at most one further pitch, so
/// a quantized wedge always stays within wedge distance `eps` of its source
/// (with room to spare).
pub fn pitch_exp_for(eps: f64, dim: usize) -> i32 {
    assert!(eps > 0.0 && eps.is_finite());
    (eps / (2.0 * (dim as f64).sqrt())).log2().floor() as i32
}

/// Finest supported grid: below this pitch, coordinates of order one would
/// overflow the `i64` grid keys, so quantization refuses the scale.
pub const MIN_PITCH_EXP: i32 = -60;

impl WedgeFamily {
    /// Empty family in discovery order.
    pub fn incremental(bbox: (Point, Point), phi: LinearFunctional) -> Self {
        WedgeFamily {
            bbox,
            phi,
            wedges: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Complete lexicographic enumeration of the separated wedges with
    /// vertices on the pitch-`2^-j` grid inside `bbox`.  Errors when the
    /// grid is large enough that the triple count would be unreasonable to
    /// materialise (the incremental mode exists for that regime).
    pub fn enumerate(bbox: (Point, Point), j: u32, phi: LinearFunctional) -> Result<Self> {
        let dim = bbox.0.dim();
        let pitch_exp = -(j as i32);
        let pitch = (pitch_exp as f64).exp2();
        // Grid points of bbox in lexicographic coordinate order.
        let mut axes: Vec<Vec<i64>> = Vec::with_capacity(dim);
        for k in 0..dim {
            let lo = (bbox.0 .0[k] / pitch).ceil() as i64;
            let hi = (bbox.1 .0[k] / pitch).floor() as i64;
            if lo > hi {
                return Err(UdsError::invalid_input("empty bounding box"));
            }
            axes.push((lo..=hi).collect());
        }
        let mut points: Vec<Vec<i64>> = vec![vec![]];
        for axis in &axes {
            let mut next = Vec::with_capacity(points.len() * axis.len());
            for p in &points {
                for &c in axis {
                    let mut q = p.clone();
                    q.push(c);
                    next.push(q);
                }
            }
            points = next;
        }
        let n = points.len();
        if n.saturating_pow(3) > 2_000_000 {
            return Err(UdsError::invalid_input(format!(
                "family enumeration at pitch 2^-{j} would hold {} triples; use the incremental mode",
                n.pow(3)
            )));
        }
        let phi_vals: Vec<f64> = points
            .iter()
            .map(|p| {
                p.iter()
                    .zip(&phi.0 .0)
                    .map(|(c, v)| *c as f64 * pitch * v)
                    .sum()
            })
            .collect();
        let mut family = WedgeFamily::incremental(bbox, phi);
        for i1 in 0..n {
            for i2 in 0..n {
                if phi_vals[i1] == phi_vals[i2] {
                    continue;
                }
                for i3 in 0..n {
                    if phi_vals[i2] == phi_vals[i3] {
                        continue;
                    }
                    let mut coords = Vec::with_capacity(3 * dim);
                    coords.extend_from_slice(&points[i1]);
                    coords.extend_from_slice(&points[i2]);
                    coords.extend_from_slice(&points[i3]);
                    let key = WedgeKey { pitch_exp, coords };
                    let wedge = key.wedge(dim);
                    family.index.insert(key.clone(), family.wedges.len());
                    family.wedges.push(FamilyWedge { wedge, key });
                }
            }
        }
        Ok(family)
    }

    pub fn len(&self) -> usize {
        self.wedges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wedges.is_empty()
    }

    /// Rebuild the lookup index after deserialisation.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .wedges
            .iter()
            .enumerate()
            .map(|(i, fw)| (fw.key.clone(), i))
            .collect();
    }

    /// Nearest separated grid wedge to `s` at the pitch matched to `eps`.
    /// Pure function of `(s, eps)`; does not touch the enumeration.
    ///
    /// Vertices are rounded to the grid; when rounding collapses the
    /// separation of consecutive vertices under `phi`, the later vertex is
    /// nudged by one pitch along the dominant coordinate of `phi`.  The
    /// result is always within wedge distance `eps` of `s`.
    ///
    /// Errors when the matched pitch drops below [`MIN_PITCH_EXP`], where
    /// unit-box coordinates would no longer fit the integer grid keys.
    pub fn quantize(&self, s: &Wedge, eps: f64) -> Result<(Wedge, WedgeKey)> {
        let dim = s.dim();
        let pitch_exp = pitch_exp_for(eps, dim);
        if pitch_exp < MIN_PITCH_EXP {
            return Err(UdsError::invalid_input(format!(
                "net scale {eps:e} is below the grid resolution floor 2^{MIN_PITCH_EXP}"
            )));
        }
        let pitch = (pitch_exp as f64).exp2();
        let round = |p: &Point| -> Vec<i64> {
            p.0.iter().map(|c| (c / pitch).round() as i64).collect()
        };
        let mut vs = [round(&s.t1), round(&s.t2), round(&s.t3)];
        // Dominant coordinate of phi, used for separation nudges.
        let bump_axis = self
            .phi
            .0
             .0
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(k, _)| k)
            .unwrap_or(0);
        let phi_of = |v: &[i64]| -> f64 {
            v.iter()
                .zip(&self.phi.0 .0)
                .map(|(c, w)| *c as f64 * pitch * w)
                .sum()
        };
        for k in [1, 2] {
            if phi_of(&vs[k]) == phi_of(&vs[k - 1]) {
                vs[k][bump_axis] += 1;
            }
        }
        let mut coords = Vec::with_capacity(3 * dim);
        for v in &vs {
            coords.extend_from_slice(v);
        }
        let key = WedgeKey { pitch_exp, coords };
        Ok((key.wedge(dim), key))
    }

    /// Index of the quantized wedge in the family, interning it in discovery
    /// order when new.  Returns the index and the wedge distance from `s`.
    pub fn net_index(&mut self, s: &Wedge, eps: f64) -> Result<(usize, f64)> {
        let (wedge, key) = self.quantize(s, eps)?;
        let d = wedge_distance(&wedge, s);
        let i = self.intern(wedge, key);
        Ok((i, d))
    }

    /// Intern a wedge with a precomputed key.
    pub fn intern(&mut self, wedge: Wedge, key: WedgeKey) -> usize {
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        let i = self.wedges.len();
        self.index.insert(key.clone(), i);
        self.wedges.push(FamilyWedge { wedge, key });
        i
    }

    pub fn lookup(&self, key: &WedgeKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    /// Number of net members at the pitch matched to `eps` whose vertices
    /// all lie in the closed ball of diameter `rho * eps` around `center`.
    /// Finite by construction; small by the pitch/radius ratio.
    pub fn local_net_count(&self, center: &Point, eps: f64, rho: f64) -> usize {
        let dim = center.dim();
        let pitch = (pitch_exp_for(eps, dim) as f64).exp2();
        let radius = 0.5 * rho * eps;
        // Enumerate grid points inside the ball.
        let mut axes: Vec<Vec<i64>> = Vec::with_capacity(dim);
        for k in 0..dim {
            let lo = ((center.0[k] - radius) / pitch).ceil() as i64;
            let hi = ((center.0[k] + radius) / pitch).floor() as i64;
            axes.push((lo..=hi).collect());
        }
        let mut candidates: Vec<Vec<i64>> = vec![vec![]];
        for axis in &axes {
            let mut next = Vec::new();
            for p in &candidates {
                for &c in axis {
                    let mut q = p.clone();
                    q.push(c);
                    next.push(q);
                }
            }
            candidates = next;
        }
        let inside: Vec<Vec<i64>> = candidates
            .into_iter()
            .filter(|p| {
                let q = Point(p.iter().map(|c| *c as f64 * pitch).collect());
                q.dist(center) <= radius
            })
            .collect();
        let phi_of = |v: &[i64]| -> f64 {
            v.iter()
                .zip(&self.phi.0 .0)
                .map(|(c, w)| *c as f64 * pitch * w)
                .sum()
        };
        let mut count = 0;
        for a in &inside {
            for b in &inside {
                if phi_of(a) == phi_of(b) {
                    continue;
                }
                for c in &inside {
                    if phi_of(b) == phi_of(c) {
                        continue;
                    }
                    count += 1;
                }
            }
        }
        count
    }

    /// Radius schedule of the nested open sets: the level-`n` open set is
    /// the union over the enumeration of the open `eta(i, n)`-neighbourhoods
    /// of the member wedges.
    ///
    /// Two caps are combined.  The geometric cap `2^-(i+n) * min(1, 1/len)`
    /// keeps the scaffold one-dimensional in the limit; the slice cap keeps
    /// every component of a hyperplane slice `{phi = c}` of the level-`n`
    /// set shorter than `1/n` (each ball contributes slice diameter below
    /// `1 / (n * 2^i)`, and those bounds sum to `2/n` over the enumeration,
    /// with the extra factor of two recovered by halving the cap).
    pub fn eta(&self, i: usize, n: u32) -> f64 {
        assert!(n >= 1, "scaffold levels are indexed from 1");
        let fw = &self.wedges[i];
        let len = fw.wedge.len();
        let cap_geom = (-(i as f64) - n as f64).exp2() * (1.0_f64).min(1.0 / len);
        // Slice cap: diameter of B(W, a) ∩ {phi = c} is at most
        // 2a * (1 + |phi| / min |phi(e)|) over the unit segment directions.
        let mut min_phi_dir = f64::INFINITY;
        for dir in fw.wedge.segment_directions().into_iter().flatten() {
            let v = self.phi.apply(&dir).abs();
            if v > 0.0 {
                min_phi_dir = min_phi_dir.min(v);
            }
        }
        if !min_phi_dir.is_finite() {
            // Fully degenerate member (cannot occur for separated wedges);
            // fall back to the geometric cap alone.
            return cap_geom;
        }
        let cap_slice =
            1.0 / (n as f64 * (i as f64 + 1.0).exp2() * (1.0 + self.phi.norm() / min_phi_dir));
        cap_geom.min(0.5 * cap_slice)
    }

    /// Whether the closed `v`-neighbourhood of member `i` sits inside the
    /// level-`n` open set: by construction this holds exactly when
    /// `0 < v <= eta(i, n)`.
    pub fn g_contains_tube(&self, i: usize, v: f64, n: u32) -> bool {
        v > 0.0 && v <= self.eta(i, n)
    }

    /// Intervals of `x2` in `window` where the level-`n` open set meets the
    /// line `{x1 = phi_value}` (plane only), merged into connected
    /// components.  Used to verify the slice-diameter bound.
    pub fn slice_components(
        &self,
        n: u32,
        phi_value: f64,
        window: (f64, f64),
    ) -> Result<Vec<(f64, f64)>> {
        let dim = self.bbox.0.dim();
        if dim != 2 {
            return Err(UdsError::invalid_input(
                "slice components are only implemented in the plane",
            ));
        }
        let mut intervals: Vec<(f64, f64)> = Vec::new();
        for (i, fw) in self.wedges.iter().enumerate() {
            let a = self.eta(i, n);
            for (p, q) in [(&fw.wedge.t1, &fw.wedge.t2), (&fw.wedge.t2, &fw.wedge.t3)] {
                if let Some(iv) = segment_slice_interval(p, q, phi_value, a, window) {
                    intervals.push(iv);
                }
            }
        }
        intervals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut merged: Vec<(f64, f64)> = Vec::new();
        for iv in intervals {
            match merged.last_mut() {
                Some(last) if iv.0 <= last.1 => last.1 = last.1.max(iv.1),
                _ => merged.push(iv),
            }
        }
        Ok(merged)
    }
}

/// Open interval of heights `y` in `window` with
/// `dist((c, y), [p, q]) < a`, or `None` when the slice misses the ball.
/// The distance is convex in `y`, so the interval is found by bisection
/// around the minimiser.
fn segment_slice_interval(
    p: &Point,
    q: &Point,
    c: f64,
    a: f64,
    window: (f64, f64),
) -> Option<(f64, f64)> {
    let d = |y: f64| {
        crate::geometry::point_segment_distance(&Point(vec![c, y]), p, q)
    };
    // Minimise the convex function by ternary search over a generous range.
    let (mut lo, mut hi) = (
        window.0.min(p.0[1].min(q.0[1]) - a),
        window.1.max(p.0[1].max(q.0[1]) + a),
    );
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if d(m1) <= d(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let ymin = 0.5 * (lo + hi);
    if d(ymin) >= a {
        return None;
    }
    // Bisection for the two crossings of d(y) = a.
    let cross = |mut inside: f64, mut outside: f64| -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (inside + outside);
            if d(mid) < a {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        0.5 * (inside + outside)
    };
    let span = (p.0[1] - q.0[1]).abs() + 2.0 * a + 1.0;
    let left = cross(ymin, ymin - span);
    let right = cross(ymin, ymin + span);
    let lo = left.max(window.0);
    let hi = right.min(window.1);
    if lo < hi {
        Some((lo, hi))
    } else {
        None
    }
}

/// Symmetric fat Cantor set in `[0, 1]`: step `n` removes an open middle
/// interval of length `4^-n` from each retained interval.  All endpoints
/// are exact rationals with denominator `2 * 4^depth`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FatCantor {
    pub depth: u32,
    /// Retained intervals as numerators over `denominator`, sorted.
    pub intervals: Vec<(i64, i64)>,
    pub denominator: i64,
}

impl FatCantor {
    pub fn new(depth: u32) -> Self {
        assert!(depth <= 25, "denominator must fit in i64");
        // Work over the final common denominator from the start.
        let den: i64 = 2 * 4_i64.pow(depth.max(1));
        let mut intervals: Vec<(i64, i64)> = vec![(0, den)];
        for n in 1..=depth {
            let gap = den / 4_i64.pow(n); // 4^-n in units of 1/den
            let mut next = Vec::with_capacity(intervals.len() * 2);
            for (a, b) in intervals {
                // Midpoint is exactly representable: a+b and gap share parity
                // with den's factor of two.
                let left_end = (a + b - gap) / 2;
                let right_start = (a + b + gap) / 2;
                debug_assert_eq!((a + b - gap) % 2, 0);
                next.push((a, left_end));
                next.push((right_start, b));
            }
            intervals = next;
        }
        FatCantor {
            depth,
            intervals,
            denominator: den,
        }
    }

    /// Exact retained measure `1 - sum_{n<=depth} 2^(n-1) * 4^-n`.
    pub fn measure(&self) -> Ratio<i128> {
        let mut m = Ratio::new(1i128, 1i128);
        for n in 1..=self.depth {
            m -= Ratio::new(2i128.pow(n - 1), 4i128.pow(n));
        }
        m
    }

    /// Retained measure recomputed from the stored intervals (used as an
    /// independent cross-check of [`FatCantor::measure`]).
    pub fn measure_from_intervals(&self) -> Ratio<i128> {
        let total: i128 = self
            .intervals
            .iter()
            .map(|(a, b)| (*b - *a) as i128)
            .sum();
        Ratio::new(total, self.denominator as i128)
    }

    pub fn contains(&self, x: f64) -> bool {
        let xs = x * self.denominator as f64;
        let idx = self
            .intervals
            .partition_point(|(_, b)| (*b as f64) < xs);
        idx < self.intervals.len() && self.intervals[idx].0 as f64 <= xs
    }

    /// Distance from `x` to the retained set, with the derivative of the
    /// distance function where it exists (`None` at the kinks: retained
    /// interval endpoints and gap midpoints).
    pub fn distance_and_slope(&self, x: f64) -> (f64, Option<f64>) {
        let den = self.denominator as f64;
        let xs = x * den;
        let idx = self.intervals.partition_point(|(_, b)| (*b as f64) < xs);
        if idx < self.intervals.len() && self.intervals[idx].0 as f64 <= xs {
            let (a, b) = self.intervals[idx];
            let slope = if xs > a as f64 && xs < b as f64 {
                Some(0.0)
            } else {
                None
            };
            return (0.0, slope);
        }
        let right = self.intervals.get(idx).map(|(a, _)| *a as f64 - xs);
        let left = idx.checked_sub(1).map(|i| xs - self.intervals[i].1 as f64);
        match (left, right) {
            (Some(l), Some(r)) => {
                let slope = if l < r {
                    Some(1.0)
                } else if r < l {
                    Some(-1.0)
                } else {
                    None
                };
                (l.min(r) / den, slope)
            }
            (Some(l), None) => (l / den, Some(1.0)),
            (None, Some(r)) => (r / den, Some(-1.0)),
            (None, None) => (f64::INFINITY, None),
        }
    }

    /// Whether `[lo, hi]` meets a retained interval.
    pub fn overlaps(&self, lo: f64, hi: f64) -> bool {
        if hi < lo {
            return false;
        }
        let lo_s = lo * self.denominator as f64;
        let hi_s = hi * self.denominator as f64;
        let idx = self
            .intervals
            .partition_point(|(_, b)| (*b as f64) < lo_s);
        idx < self.intervals.len() && self.intervals[idx].0 as f64 <= hi_s
    }
}

/// A fat Cantor set translated so that a designated point lands in it;
/// used as the base of the fibre probes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CantorFiber {
    pub cantor: FatCantor,
    /// The fibre set is `cantor + shift`.
    pub shift: f64,
}

impl CantorFiber {
    /// Shift the set so that `anchor` becomes its left endpoint (which is
    /// always retained).
    pub fn anchored_at(cantor: FatCantor, anchor: f64) -> Self {
        CantorFiber {
            cantor,
            shift: anchor,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.cantor.contains(x - self.shift)
    }

    pub fn overlaps(&self, lo: f64, hi: f64) -> bool {
        self.cantor.overlaps(lo - self.shift, hi - self.shift)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane_bbox() -> (Point, Point) {
        (Point(vec![-1.0, -1.0]), Point(vec![1.0, 1.0]))
    }

    fn small_family() -> WedgeFamily {
        WedgeFamily::enumerate(
            (Point(vec![0.0, 0.0]), Point(vec![1.0, 1.0])),
            1,
            LinearFunctional::first_coordinate(2),
        )
        .unwrap()
    }

    #[test]
    fn enumeration_count_matches_brute_oracle() {
        // Independent oracle: 9 grid points at pitch 1/2 in [0,1]^2, grouped
        // into 3 columns of equal phi value.  Ordered triples with
        // phi(t1) != phi(t2) and phi(t2) != phi(t3): for each t2 column (3
        // points each), t1 and t3 each range over the 6 points of the other
        // two columns: 9 * 6 * 6 = 324.
        let fam = small_family();
        assert_eq!(fam.len(), 324);
        for fw in &fam.wedges {
            let phi = &fam.phi;
            assert_ne!(phi.apply(&fw.wedge.t1), phi.apply(&fw.wedge.t2));
            assert_ne!(phi.apply(&fw.wedge.t2), phi.apply(&fw.wedge.t3));
        }
    }

    #[test]
    fn quantize_member_is_fixed_point() {
        let mut fam = WedgeFamily::incremental(plane_bbox(), LinearFunctional::first_coordinate(2));
        let s = Wedge::new(
            Point(vec![-0.25, 0.0]),
            Point(vec![0.0, 0.0]),
            Point(vec![0.25, 0.25]),
        );
        // 0.25-dyadic vertices are fixed by quantization at any finer pitch.
        let (i, d) = fam.net_index(&s, 0.1).unwrap();
        assert_eq!(d, 0.0);
        let (i2, d2) = fam.net_index(&s, 0.1).unwrap();
        assert_eq!((i, 0.0), (i2, d2));
        assert_eq!(fam.len(), 1);
    }

    #[test]
    fn quantize_density_bound() {
        let mut fam = WedgeFamily::incremental(plane_bbox(), LinearFunctional::first_coordinate(2));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let eps = 0.1;
        for _ in 0..1000 {
            let mut v = || Point(vec![rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)]);
            let s = Wedge::new(v(), v(), v());
            let (_, d) = fam.net_index(&s, eps).unwrap();
            assert!(d < eps, "quantization drifted {d} >= {eps}");
        }
    }

    #[test]
    fn quantize_separates_flat_wedges() {
        let fam = WedgeFamily::incremental(plane_bbox(), LinearFunctional::first_coordinate(2));
        // All three vertices round to the same grid point.
        let s = Wedge::new(
            Point(vec![0.301, 0.299]),
            Point(vec![0.3, 0.3]),
            Point(vec![0.299, 0.301]),
        );
        let (w, _) = fam.quantize(&s, 0.05).unwrap();
        assert_ne!(fam.phi.apply(&w.t1), fam.phi.apply(&w.t2));
        assert_ne!(fam.phi.apply(&w.t2), fam.phi.apply(&w.t3));
        assert!(wedge_distance(&w, &s) < 0.05);
    }

    #[test]
    fn local_finiteness_bound() {
        // Balls of diameter rho * eps at the pitch matched to eps contain
        // few members: exhaustive count stays at or below 81 in the plane.
        let fam = WedgeFamily::incremental(plane_bbox(), LinearFunctional::first_coordinate(2));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let center = Point(vec![rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)]);
            let eps = rng.gen_range(0.01..1.0);
            let count = fam.local_net_count(&center, eps, 0.25);
            assert!(count <= 81, "local count {count} > 81");
        }
    }

    #[test]
    fn eta_is_positive_and_strictly_decreasing_in_level() {
        let fam = small_family();
        for i in [0usize, 1, 17, 100] {
            let mut prev = f64::INFINITY;
            for n in 1..=8 {
                let e = fam.eta(i, n);
                assert!(e > 0.0);
                assert!(e < prev, "eta not strictly decreasing at i={i}, n={n}");
                prev = e;
            }
        }
    }

    #[test]
    fn eta_respects_caps() {
        let fam = small_family();
        for i in 0..fam.len().min(50) {
            for n in 1..=4 {
                let e = fam.eta(i, n);
                let len = fam.wedges[i].wedge.len();
                let cap_geom = (-(i as f64) - n as f64).exp2() * 1.0_f64.min(1.0 / len);
                assert!(e <= cap_geom + 1e-18);
            }
        }
    }

    #[test]
    fn g_contains_tube_is_the_eta_threshold() {
        let fam = small_family();
        let e = fam.eta(3, 2);
        assert!(fam.g_contains_tube(3, e, 2));
        assert!(fam.g_contains_tube(3, 0.5 * e, 2));
        assert!(!fam.g_contains_tube(3, e * 1.0000001, 2));
        assert!(!fam.g_contains_tube(3, 0.0, 2));
    }

    #[test]
    fn slice_components_stay_short() {
        let fam = small_family();
        for n in [1u32, 2, 3, 5] {
            let comps = fam.slice_components(n, 0.5, (-2.0, 2.0)).unwrap();
            for (lo, hi) in comps {
                assert!(
                    hi - lo < 1.0 / n as f64,
                    "slice component [{lo}, {hi}] too long at level {n}"
                );
            }
        }
    }

    #[test]
    fn fat_cantor_exact_measure() {
        // Depth 1 removes 1/4: measure 3/4.  Depth 3:
        // 1 - 1/4 - 2/16 - 4/64 = 9/16.
        assert_eq!(FatCantor::new(1).measure(), Ratio::new(3, 4));
        assert_eq!(FatCantor::new(3).measure(), Ratio::new(9, 16));
        for depth in 1..=12 {
            let c = FatCantor::new(depth);
            assert_eq!(c.measure(), c.measure_from_intervals());
            assert!(c.measure() > Ratio::new(1, 2));
        }
    }

    #[test]
    fn fat_cantor_measure_tends_to_half() {
        let c = FatCantor::new(20);
        let m = c.measure();
        let half = Ratio::new(1i128, 2i128);
        assert!(m > half);
        assert!(m - half < Ratio::new(1i128, 1_000_000i128));
    }

    #[test]
    fn fat_cantor_membership() {
        let c = FatCantor::new(4);
        assert!(c.contains(0.0));
        assert!(c.contains(1.0));
        // Center of the first removed gap.
        assert!(!c.contains(0.5));
        // First removed gap is the middle quarter [3/8, 5/8].
        assert!(c.overlaps(0.3, 0.4)); // reaches into [.., 3/8]
        assert!(c.overlaps(0.35, 0.65)); // straddles the whole gap
        assert!(!c.overlaps(0.3751, 0.6249)); // strictly inside the gap
    }

    #[test]
    fn cantor_fiber_shift() {
        let f = CantorFiber::anchored_at(FatCantor::new(4), -0.125);
        assert!(f.contains(-0.125));
        assert!(!f.contains(-0.125 + 0.5));
    }
}
