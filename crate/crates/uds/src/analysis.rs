//! Lipschitz functions, directional derivatives, and the growth moduli the
//! maximization loop is built on.
//!
//! Derivative existence is undecidable from point evaluations alone, so
//! every corpus function ships an exact directional-derivative oracle that
//! returns `None` at its own kinks; the finite-difference estimator is a
//! fallback whose trust signal (the spread of one-sided slopes across the
//! last scales) is reported rather than hidden.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::ambient::CantorFiber;
use crate::error::{Result, UdsError};
use crate::geometry::{point_wedge_distance, Point, Wedge};

type EvalFn = Arc<dyn Fn(&Point) -> f64 + Send + Sync>;
type DerivFn = Arc<dyn Fn(&Point, &Point) -> Option<f64> + Send + Sync>;

/// A real-valued Lipschitz function with a declared constant and an
/// optional exact directional-derivative oracle.  Evaluators must be pure
/// and safe for concurrent calls.
#[derive(Clone)]
pub struct LipschitzFunction {
    pub name: String,
    /// Declared Lipschitz constant (an upper bound for the true one).
    pub lip: f64,
    eval_fn: EvalFn,
    deriv_fn: Option<DerivFn>,
}

impl std::fmt::Debug for LipschitzFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LipschitzFunction")
            .field("name", &self.name)
            .field("lip", &self.lip)
            .field("oracle", &self.deriv_fn.is_some())
            .finish()
    }
}

/// Relative spread below which a finite-difference derivative estimate is
/// treated as trustworthy (scaled by the Lipschitz constant).
pub const DERIVATIVE_SPREAD_TOL: f64 = 1e-4;

/// Default finite-difference scales: five geometric steps.
pub fn default_scales() -> Vec<f64> {
    (0..5).map(|j| 1e-3 * 0.25f64.powi(j)).collect()
}

/// Outcome of a directional-derivative query.
#[derive(Clone, Debug, Serialize)]
pub struct DirDerivative {
    pub value: f64,
    /// Central-difference value per scale (empty when the oracle answered).
    pub per_scale: Vec<f64>,
    /// Max minus min over the one-sided slopes at the last three scales;
    /// zero for oracle answers.
    pub spread: f64,
    pub exact: bool,
    /// Whether the estimate should be believed: exact, or spread below
    /// [`DERIVATIVE_SPREAD_TOL`] times the Lipschitz constant.
    pub trusted: bool,
}

impl LipschitzFunction {
    pub fn new(
        name: impl Into<String>,
        lip: f64,
        eval_fn: EvalFn,
        deriv_fn: Option<DerivFn>,
    ) -> Self {
        LipschitzFunction {
            name: name.into(),
            lip,
            eval_fn,
            deriv_fn,
        }
    }

    pub fn eval(&self, y: &Point) -> f64 {
        (self.eval_fn)(y)
    }

    /// Exact directional derivative when the oracle has one at `(y, e)`.
    pub fn exact_derivative(&self, y: &Point, e: &Point) -> Option<f64> {
        self.deriv_fn.as_ref().and_then(|d| d(y, e))
    }

    pub fn has_oracle(&self) -> bool {
        self.deriv_fn.is_some()
    }

    /// Directional derivative with an explicit trust signal.  Oracle
    /// answers are exact; otherwise one-sided differences over `scales`
    /// provide the estimate, and their disagreement the diagnostic.
    pub fn dir_derivative(&self, y: &Point, e: &Point, scales: &[f64]) -> DirDerivative {
        assert!(e.norm() > 0.0, "direction must be non-zero");
        if let Some(v) = self.exact_derivative(y, e) {
            return DirDerivative {
                value: v,
                per_scale: vec![],
                spread: 0.0,
                exact: true,
                trusted: true,
            };
        }
        let fy = self.eval(y);
        let mut per_scale = Vec::with_capacity(scales.len());
        let mut one_sided: Vec<f64> = Vec::with_capacity(2 * scales.len());
        for &h in scales {
            let fwd = (self.eval(&y.offset(e, h)) - fy) / h;
            let bwd = (fy - self.eval(&y.offset(e, -h))) / h;
            per_scale.push(0.5 * (fwd + bwd));
            one_sided.push(fwd);
            one_sided.push(bwd);
        }
        // Kinks show up as a persistent forward/backward disagreement, so
        // the diagnostic looks at the one-sided slopes of the finest scales
        // (central differences alone are blind to symmetric kinks).
        let tail = &one_sided[one_sided.len().saturating_sub(6)..];
        let spread = tail.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b))
            - tail.iter().fold(f64::INFINITY, |a, b| a.min(*b));
        let value = *per_scale.last().unwrap();
        DirDerivative {
            value,
            per_scale,
            spread,
            exact: false,
            trusted: spread < DERIVATIVE_SPREAD_TOL * self.lip.max(f64::MIN_POSITIVE),
        }
    }

    /// Sampled Lipschitz-constant audit: the first violating pair, if any.
    pub fn check_lipschitz(
        &self,
        bbox: &(Point, Point),
        trials: usize,
        seed: u64,
    ) -> Option<(Point, Point, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = bbox.0.dim();
        let sample = |rng: &mut ChaCha8Rng| {
            Point(
                (0..dim)
                    .map(|k| rng.gen_range(bbox.0 .0[k]..bbox.1 .0[k]))
                    .collect(),
            )
        };
        for _ in 0..trials {
            let a = sample(&mut rng);
            let b = sample(&mut rng);
            let d = a.dist(&b);
            if d == 0.0 {
                continue;
            }
            let ratio = (self.eval(&a) - self.eval(&b)).abs() / d;
            if ratio > self.lip * (1.0 + 1e-9) {
                return Some((a, b, ratio));
            }
        }
        None
    }
}

// ---------------------------------------------------------------------
// Corpus constructors.  Every member carries an exact oracle.
// ---------------------------------------------------------------------

/// `f(y) = <a, y>`.
pub fn linear(name: impl Into<String>, a: Point) -> LipschitzFunction {
    let lip = a.norm();
    let a2 = a.clone();
    LipschitzFunction::new(
        name,
        lip,
        Arc::new(move |y| a.dot(y)),
        Some(Arc::new(move |_, e| Some(a2.dot(e)))),
    )
}

/// `f(y) = sum |y_i|`; kinks on the coordinate hyperplanes.
pub fn l1_norm(dim: usize) -> LipschitzFunction {
    LipschitzFunction::new(
        "l1",
        (dim as f64).sqrt(),
        Arc::new(|y: &Point| y.0.iter().map(|c| c.abs()).sum()),
        Some(Arc::new(|y: &Point, e: &Point| {
            let mut v = 0.0;
            for (c, d) in y.0.iter().zip(&e.0) {
                if *c == 0.0 {
                    if *d != 0.0 {
                        return None;
                    }
                } else {
                    v += c.signum() * d;
                }
            }
            Some(v)
        })),
    )
}

/// `f(y) = |y_axis|`; a single-kink variant of the above.
pub fn abs_coordinate(axis: usize) -> LipschitzFunction {
    LipschitzFunction::new(
        format!("abs-coordinate-{axis}"),
        1.0,
        Arc::new(move |y: &Point| y.0[axis].abs()),
        Some(Arc::new(move |y: &Point, e: &Point| {
            if y.0[axis] == 0.0 {
                if e.0[axis] != 0.0 {
                    return None;
                }
                return Some(0.0);
            }
            Some(y.0[axis].signum() * e.0[axis])
        })),
    )
}

/// `f(y) = dist(y, W)` for a fixed wedge; the oracle answers away from the
/// wedge itself and from the points equidistant to both segments.
pub fn distance_to_wedge(w: Wedge) -> LipschitzFunction {
    let w2 = w.clone();
    let nearest = move |y: &Point| -> (f64, Point) {
        let mut best = (f64::INFINITY, y.clone());
        for (a, b) in [(&w2.t1, &w2.t2), (&w2.t2, &w2.t3)] {
            let ab = b.sub(a);
            let denom = ab.dot(&ab);
            let t = if denom == 0.0 {
                0.0
            } else {
                (y.sub(a).dot(&ab) / denom).clamp(0.0, 1.0)
            };
            let p = a.lerp(b, t);
            let d = y.dist(&p);
            if d < best.0 {
                best = (d, p);
            }
        }
        best
    };
    let nearest2 = nearest.clone();
    let w3 = w.clone();
    LipschitzFunction::new(
        "dist-to-wedge",
        1.0,
        Arc::new(move |y: &Point| point_wedge_distance(y, &w)),
        Some(Arc::new(move |y: &Point, e: &Point| {
            let (d, p) = nearest2(y);
            if d < 1e-12 {
                return None;
            }
            // Ambiguous nearest point (both segments almost tie) means the
            // derivative may fail to exist; refuse.
            let d1 = {
                let ab = w3.t2.sub(&w3.t1);
                let t = (y.sub(&w3.t1).dot(&ab) / ab.dot(&ab).max(f64::MIN_POSITIVE))
                    .clamp(0.0, 1.0);
                y.dist(&w3.t1.lerp(&w3.t2, t))
            };
            let d2 = {
                let ab = w3.t3.sub(&w3.t2);
                let t = (y.sub(&w3.t2).dot(&ab) / ab.dot(&ab).max(f64::MIN_POSITIVE))
                    .clamp(0.0, 1.0);
                y.dist(&w3.t2.lerp(&w3.t3, t))
            };
            if (d1 - d2).abs() < 1e-9 * (1.0 + d) {
                return None;
            }
            Some(y.sub(&p).scale(1.0 / d).dot(e))
        })),
    )
}

/// `f(y) = dist(y_axis, C + shift)` for a fat Cantor fibre.
pub fn distance_to_cantor_fiber(fiber: CantorFiber, axis: usize) -> LipschitzFunction {
    let f2 = fiber.clone();
    LipschitzFunction::new(
        "dist-to-cantor-fiber",
        1.0,
        Arc::new(move |y: &Point| fiber.cantor.distance_and_slope(y.0[axis] - fiber.shift).0),
        Some(Arc::new(move |y: &Point, e: &Point| {
            let (_, slope) = f2.cantor.distance_and_slope(y.0[axis] - f2.shift);
            match slope {
                Some(s) => Some(s * e.0[axis]),
                // Kink of the 1-d distance: directional derivative exists
                // only when the direction does not cross it.
                None => {
                    if e.0[axis] == 0.0 {
                        Some(0.0)
                    } else {
                        None
                    }
                }
            }
        })),
    )
}

/// Seeded max-affine function `f(y) = max_j (<a_j, y> + b_j)`; kinks on the
/// cell boundaries, detected by argmax ties.
pub fn max_affine(dim: usize, pieces: usize, seed: u64) -> LipschitzFunction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planes: Vec<(Point, f64)> = Vec::with_capacity(pieces);
    for _ in 0..pieces {
        let a = Point(
            (0..dim)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect::<Vec<_>>(),
        );
        let a = a.normalized().unwrap_or_else(|| {
            Point(std::iter::once(1.0).chain(std::iter::repeat(0.0)).take(dim).collect())
        });
        let b = rng.gen_range(-0.25..0.25);
        planes.push((a, b));
    }
    let planes2 = planes.clone();
    LipschitzFunction::new(
        format!("max-affine-{pieces}-seed{seed}"),
        1.0,
        Arc::new(move |y: &Point| {
            planes
                .iter()
                .map(|(a, b)| a.dot(y) + b)
                .fold(f64::NEG_INFINITY, f64::max)
        }),
        Some(Arc::new(move |y: &Point, e: &Point| {
            let vals: Vec<f64> = planes2.iter().map(|(a, b)| a.dot(y) + b).collect();
            let top = vals.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let active: Vec<usize> = vals
                .iter()
                .enumerate()
                .filter(|(_, v)| top - **v < 1e-12 * (1.0 + top.abs()))
                .map(|(i, _)| i)
                .collect();
            // On a tie the one-sided derivative is max over active slopes;
            // the two-sided derivative exists only when they agree.
            let slopes: Vec<f64> = active.iter().map(|i| planes2[*i].0.dot(e)).collect();
            let hi = slopes.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let lo = slopes.iter().fold(f64::INFINITY, |m, v| m.min(*v));
            if hi - lo < 1e-12 {
                Some(hi)
            } else {
                None
            }
        })),
    )
}

/// `f(y) = min_i ||y - p_i||`: distance to a finite control set.
pub fn distance_to_points(name: impl Into<String>, points: Vec<Point>) -> LipschitzFunction {
    assert!(!points.is_empty());
    let pts2 = points.clone();
    LipschitzFunction::new(
        name,
        1.0,
        Arc::new(move |y: &Point| {
            points
                .iter()
                .map(|p| y.dist(p))
                .fold(f64::INFINITY, f64::min)
        }),
        Some(Arc::new(move |y: &Point, e: &Point| {
            let mut dists: Vec<f64> = pts2.iter().map(|p| y.dist(p)).collect();
            let mut order: Vec<usize> = (0..dists.len()).collect();
            order.sort_by(|a, b| dists[*a].partial_cmp(&dists[*b]).unwrap());
            let best = order[0];
            let d = dists[best];
            if d < 1e-12 {
                return None;
            }
            if order.len() > 1 {
                dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
                if dists[1] - dists[0] < 1e-9 * (1.0 + d) {
                    return None;
                }
            }
            Some(y.sub(&pts2[best]).scale(1.0 / d).dot(e))
        })),
    )
}

/// Scale a function by a positive constant (rescales the constant too).
pub fn scaled(g: &LipschitzFunction, c: f64) -> LipschitzFunction {
    assert!(c > 0.0);
    let g2 = g.clone();
    let g3 = g.clone();
    LipschitzFunction::new(
        format!("{}*{c}", g.name),
        g.lip * c,
        Arc::new(move |y| c * g2.eval(y)),
        Some(Arc::new(move |y, e| {
            g3.exact_derivative(y, e).map(|v| c * v)
        })),
    )
}

/// `f = g + c * <e0, ·>`: the linear tilt that forces every later iterate
/// to keep a definite component along `e0`.
pub fn add_linear(g: &LipschitzFunction, c: f64, e0: &Point) -> LipschitzFunction {
    let g2 = g.clone();
    let g3 = g.clone();
    let e0a = e0.clone();
    let e0b = e0.clone();
    LipschitzFunction::new(
        format!("{}+{}*e0", g.name, c),
        g.lip + c.abs() * e0.norm(),
        Arc::new(move |y| g2.eval(y) + c * e0a.dot(y)),
        Some(Arc::new(move |y, e| {
            g3.exact_derivative(y, e).map(|v| v + c * e0b.dot(e))
        })),
    )
}

/// Five-member corpus used by the iteration suites, every `g` normalized
/// to Lipschitz constant 1/3.
pub fn corpus(dim: usize, seed: u64) -> Vec<LipschitzFunction> {
    let mut e1 = vec![0.0; dim];
    e1[0] = 0.6;
    e1[1 % dim] = 0.8;
    let wedge = Wedge::new(
        Point(std::iter::once(-0.5).chain(std::iter::repeat(0.4)).take(dim).collect()),
        Point(std::iter::once(0.0).chain(std::iter::repeat(0.5)).take(dim).collect()),
        Point(std::iter::once(0.5).chain(std::iter::repeat(0.4)).take(dim).collect()),
    );
    let control = vec![
        Point(std::iter::once(-0.5).chain(std::iter::repeat(0.75)).take(dim).collect()),
        Point(std::iter::once(0.3).chain(std::iter::repeat(-0.7)).take(dim).collect()),
        Point(std::iter::once(0.75).chain(std::iter::repeat(0.5)).take(dim).collect()),
    ];
    vec![
        scaled(&linear("linear", Point(e1)), 1.0 / 3.0),
        scaled(&l1_norm(dim), 1.0 / (3.0 * (dim as f64).sqrt())),
        scaled(&distance_to_wedge(wedge), 1.0 / 3.0),
        scaled(&max_affine(dim, 6, seed), 1.0 / 3.0),
        scaled(&distance_to_points("dist-to-control", control), 1.0 / 3.0),
    ]
}

// ---------------------------------------------------------------------
// The growth envelope.
// ---------------------------------------------------------------------

/// Tolerance on the `theta <= 2` bound of the envelope source.
pub const THETA_BOUND_TOL: f64 = 1e-12;

type ThetaFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Increasing majorant Ω(t) = 2β(t) + 2t of twice a growth modulus Θ.
///
/// β(t) is the running supremum of Θ over a fixed geometric grid up to `t`,
/// together with `t` itself — for a nondecreasing Θ this is exactly Θ(t).
/// Any nondecreasing β makes Ω(A) + 2B ≤ Ω(A+B) hold for A, B > 0, and
/// β ≥ Θ gives Ω ≥ 2Θ pointwise.  (A piecewise-affine β interpolated
/// between dyadic breakpoints would overshoot small arguments by enough to
/// break the Ω(10⁻⁸) < 10⁻² budget of the envelope suite.)
#[derive(Clone)]
pub struct OmegaEnvelope {
    theta: ThetaFn,
    /// Grid exponents (base 2, 64 steps per octave) with prefix maxima.
    grid_prefix_max: Vec<f64>,
    grid_min_exp: f64,
    grid_step: f64,
}

/// Canonical wedge-growth modulus: `Θ(s) = min(2, 25 sqrt(3 s))`.
pub fn canonical_theta(s: f64) -> f64 {
    (25.0 * (3.0 * s).sqrt()).min(2.0)
}

pub fn omega_envelope(theta: ThetaFn) -> Result<OmegaEnvelope> {
    let grid_min_exp = -60.0;
    let grid_step = 1.0 / 64.0;
    let n = ((8.0 - grid_min_exp) / grid_step) as usize + 1;
    let mut prefix = Vec::with_capacity(n);
    let mut running = f64::NEG_INFINITY;
    for i in 0..n {
        let t = (grid_min_exp + i as f64 * grid_step).exp2();
        let v = theta(t);
        if v > 2.0 + THETA_BOUND_TOL {
            return Err(UdsError::invalid_input(format!(
                "envelope source exceeds 2 at t = {t:e}: {v}"
            )));
        }
        running = running.max(v);
        prefix.push(running);
    }
    Ok(OmegaEnvelope {
        theta,
        grid_prefix_max: prefix,
        grid_min_exp,
        grid_step,
    })
}

impl OmegaEnvelope {
    pub fn canonical() -> OmegaEnvelope {
        omega_envelope(Arc::new(canonical_theta)).expect("canonical theta is bounded by 2")
    }

    pub fn theta(&self, t: f64) -> f64 {
        (self.theta)(t)
    }

    pub fn beta(&self, t: f64) -> f64 {
        assert!(t >= 0.0);
        if t == 0.0 {
            return 0.0;
        }
        let pos = (t.log2() - self.grid_min_exp) / self.grid_step;
        let grid_sup = if pos < 0.0 {
            0.0
        } else {
            let i = (pos.floor() as usize).min(self.grid_prefix_max.len() - 1);
            self.grid_prefix_max[i]
        };
        grid_sup.max(self.theta(t))
    }

    pub fn omega(&self, t: f64) -> f64 {
        2.0 * self.beta(t) + 2.0 * t
    }
}

// ---------------------------------------------------------------------
// The p_n norms.
// ---------------------------------------------------------------------

/// The norm state `(t_m, e_m)` for m = 0..n-1 defining
/// `p_n(y)^2 = ||y||^2 + sum t_m^2 dist(y, R e_m)^2`.
#[derive(Clone, Debug, Default)]
pub struct NormState {
    pub pairs: Vec<(f64, Point)>,
}

impl NormState {
    pub fn validate(&self) -> Result<()> {
        let mut prev = 0.5;
        for (m, (t, e)) in self.pairs.iter().enumerate() {
            if !(*t > 0.0 && *t < prev) {
                return Err(UdsError::invalid_input(format!(
                    "t_{m} = {t} breaks the halving chain below 1/2"
                )));
            }
            if (e.norm() - 1.0).abs() > 1e-12 {
                return Err(UdsError::invalid_input(format!("e_{m} is not unit")));
            }
            prev = *t / 2.0;
        }
        Ok(())
    }

    pub fn push(&mut self, t: f64, e: Point) {
        self.pairs.push((t, e));
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Distance from `y` to the line through the origin and `e`, in the
    /// base norm (closed-form projection).
    pub fn line_distance(y: &Point, e: &Point) -> f64 {
        let n = e.norm();
        debug_assert!(n > 0.0);
        let proj = y.dot(e) / n;
        (y.dot(y) - proj * proj).max(0.0).sqrt()
    }

    pub fn p(&self, y: &Point) -> f64 {
        let mut s = y.dot(y);
        for (t, e) in &self.pairs {
            let d = Self::line_distance(y, e);
            s += t * t * d * d;
        }
        s.sqrt()
    }

    /// The norm truncated to the first `n` pairs.
    pub fn truncated(&self, n: usize) -> NormState {
        NormState {
            pairs: self.pairs[..n.min(self.pairs.len())].to_vec(),
        }
    }
}

/// Weight of `(y, e)` with respect to the norm of `state`: the directional
/// derivative divided by `p(e)`.  `None` when the derivative is neither
/// exact nor trusted.
pub fn weight(
    f: &LipschitzFunction,
    y: &Point,
    e: &Point,
    state: &NormState,
) -> Option<f64> {
    let d = f.dir_derivative(y, e, &default_scales());
    if !d.trusted {
        return None;
    }
    Some(d.value / state.p(e))
}

// ---------------------------------------------------------------------
// The growth predicate.
// ---------------------------------------------------------------------

/// Outcome of a growth-predicate check.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub enum GCheck {
    Holds { max_violation: f64 },
    Fails { max_violation: f64, at_t: f64 },
    /// A derivative diagnostic failed; neither membership nor its negation
    /// is claimed.
    Indeterminate,
}

/// Numerical slack on the growth-predicate inequalities: both sides are
/// Lipschitz in `t` with computable constants, so checking on a geometric
/// grid certifies them up to an explicit grid term absorbed here.
pub const G_PREDICATE_TOL: f64 = 1e-12;

/// Symmetric geometric grid `±[t_min, t_max]` with `per_decade` points per
/// factor of ten, used for the "for all t" quantifiers.
pub fn symmetric_geometric_grid(t_min: f64, t_max: f64, per_decade: usize) -> Vec<f64> {
    assert!(t_min > 0.0 && t_max > t_min && per_decade >= 1);
    let decades = (t_max / t_min).log10();
    let n = (decades * per_decade as f64).ceil() as usize + 1;
    let mut grid = Vec::with_capacity(2 * n);
    for i in 0..=n {
        let t = t_min * 10f64.powf(i as f64 / per_decade as f64);
        let t = t.min(t_max);
        grid.push(t);
        grid.push(-t);
    }
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    grid
}

/// Membership of `(y_cand, e_cand)` in the growth set of `(y, e)` at
/// parameter `sigma`: the weight may not drop, and the increments of `f`
/// along the base direction may not differ by more than
/// `(sigma + Omega(weight gap)) |t|` at any grid `t`.
#[allow(clippy::too_many_arguments)]
pub fn in_g(
    f: &LipschitzFunction,
    state: &NormState,
    y: &Point,
    e: &Point,
    y_cand: &Point,
    e_cand: &Point,
    sigma: f64,
    omega: &OmegaEnvelope,
    t_grid: &[f64],
) -> GCheck {
    let (w_base, w_cand) = match (
        weight(f, y, e, state),
        weight(f, y_cand, e_cand, state),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => return GCheck::Indeterminate,
    };
    if w_base > w_cand + G_PREDICATE_TOL {
        return GCheck::Fails {
            max_violation: w_base - w_cand,
            at_t: 0.0,
        };
    }
    let gap = (w_cand - w_base).max(0.0);
    let fy = f.eval(y);
    let fyc = f.eval(y_cand);
    let mut worst = f64::NEG_INFINITY;
    let mut worst_t = 0.0;
    for &t in t_grid {
        if t == 0.0 {
            continue;
        }
        let lhs = ((f.eval(&y_cand.offset(e, t)) - fyc) - (f.eval(&y.offset(e, t)) - fy)).abs();
        let rhs = (sigma + omega.omega(gap)) * t.abs() + G_PREDICATE_TOL;
        let viol = lhs - rhs;
        if viol > worst {
            worst = viol;
            worst_t = t;
        }
    }
    if worst > 0.0 {
        GCheck::Fails {
            max_violation: worst,
            at_t: worst_t,
        }
    } else {
        GCheck::Holds {
            max_violation: worst,
        }
    }
}

// ---------------------------------------------------------------------
// The Fréchet modulus probe.
// ---------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct ModulusPoint {
    pub r: f64,
    pub m: f64,
}

/// Empirical Fréchet modulus of `f` at `y` against the linear model
/// `r * f'(y, e) * e_star(u)`: the worst normalized remainder over sampled
/// unit directions, per radius.
pub fn frechet_modulus(
    f: &LipschitzFunction,
    y: &Point,
    derivative: f64,
    e_star: &Point,
    radii: &[f64],
    n_dirs: usize,
    seed: u64,
) -> Vec<ModulusPoint> {
    assert!(n_dirs >= 16);
    let dim = y.dim();
    let fy = f.eval(y);
    let dirs = unit_directions(dim, n_dirs, seed);
    radii
        .iter()
        .map(|&r| {
            let m = dirs
                .iter()
                .map(|u| {
                    let model = derivative * e_star.dot(u) * r;
                    ((f.eval(&y.offset(u, r)) - fy) - model).abs() / r
                })
                .fold(0.0f64, f64::max);
            ModulusPoint { r, m }
        })
        .collect()
}

/// Deterministic unit directions: the circle grid in the plane, seeded
/// Gaussian samples in higher dimension.
pub fn unit_directions(dim: usize, n: usize, seed: u64) -> Vec<Point> {
    if dim == 2 {
        return (0..n)
            .map(|j| {
                let a = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
                Point(vec![a.cos(), a.sin()])
            })
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        // Box-Muller pairs give rotation-invariant samples.
        let v = Point(
            (0..dim)
                .map(|_| {
                    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect::<Vec<_>>(),
        );
        if let Some(u) = v.normalized() {
            out.push(u);
        }
    }
    out
}

// ---------------------------------------------------------------------
// The wedge-growth search oracle.
// ---------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct HypothesisCheck {
    pub name: &'static str,
    pub pass: bool,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GrowthCandidate {
    pub y: Point,
    pub e: Point,
    pub derivative: f64,
    pub condition_margin: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GrowthSearch {
    pub hypotheses: Vec<HypothesisCheck>,
    pub hypotheses_pass: bool,
    /// A pair with derivative gain at least `eps` and the square-root
    /// growth condition holding on the grid, when one was found.
    pub found: Option<GrowthCandidate>,
    pub best: Option<GrowthCandidate>,
}

/// Brute-force realization of the derivative-growth lemma: verify its
/// numerical hypotheses, then scan the wedge
/// `[y - s1, y + lambda_p] ∪ [y + lambda_p, y + s2]` for a pair whose
/// derivative beats `f'(y, e) + eps` while the increment comparison stays
/// below `25 sqrt(gain * Lip) |t|` on the grid.
#[allow(clippy::too_many_arguments)]
pub fn wedge_growth_search(
    f: &LipschitzFunction,
    y: &Point,
    e: &Point,
    eps: f64,
    s: f64,
    xi: f64,
    lambda: &Point,
    s1: &Point,
    s2: &Point,
    lambda_p: &Point,
    samples: usize,
    t_grid: &[f64],
) -> GrowthSearch {
    let lip = f.lip;
    let base = f.dir_derivative(y, e, &default_scales());
    let mut checks = Vec::new();
    let mut push = |name: &'static str, lhs: f64, rhs: f64| {
        checks.push(HypothesisCheck {
            name,
            pass: lhs <= rhs,
            lhs,
            rhs,
        });
    };
    push("eps in (0, Lip/9)", eps, lip / 9.0 - f64::MIN_POSITIVE);
    push("eps positive", f64::MIN_POSITIVE, eps);
    push(
        "derivative exists and is nonnegative",
        if base.trusted { -base.value } else { f64::INFINITY },
        0.0,
    );
    // Near-linearity along e out to s * sqrt(2 Lip / eps).
    let t_max = s * (2.0 * lip / eps).sqrt();
    let lin_tol = eps * eps / (160.0 * lip);
    let fy = f.eval(y);
    let mut lin_worst = 0.0f64;
    for i in 1..=64 {
        let t = t_max * i as f64 / 64.0;
        for tt in [t, -t] {
            let dev = (f.eval(&y.offset(e, tt)) - fy - base.value * tt).abs() / tt.abs();
            lin_worst = lin_worst.max(dev);
        }
    }
    push("near-linearity along e", lin_worst, lin_tol);
    push("|xi| < s/2", xi.abs(), s / 2.0 - f64::MIN_POSITIVE);
    let y_lambda = y.add(lambda);
    let y_xi = y.offset(e, xi);
    push(
        "increment at lambda vs xi*e",
        240.0 * eps * s,
        (f.eval(&y_lambda) - f.eval(&y_xi)).abs(),
    );
    push(
        "lambda close to xi*e",
        lambda.sub(&e.clone().scale(xi)).norm(),
        s * (eps / lip).sqrt(),
    );
    for pi in [1.0f64, -1.0] {
        let num = e.clone().scale(pi * s).add(lambda).norm();
        let den = (pi * s + xi).abs();
        push(
            if pi > 0.0 {
                "direction ratio (+)"
            } else {
                "direction ratio (-)"
            },
            num / den,
            1.0 + eps / (4.0 * lip),
        );
    }
    let arm_tol = eps * eps / (320.0 * lip * lip) * s;
    push(
        "arm endpoints near ±s*e",
        s1.sub(&e.clone().scale(s))
            .norm()
            .max(s2.sub(&e.clone().scale(s)).norm()),
        arm_tol,
    );
    push(
        "lambda_p near lambda",
        lambda_p.sub(lambda).norm(),
        eps * s / (16.0 * lip),
    );
    let hypotheses_pass = checks.iter().all(|c| c.pass);
    if !hypotheses_pass {
        return GrowthSearch {
            hypotheses: checks,
            hypotheses_pass,
            found: None,
            best: None,
        };
    }

    let a = y.sub(s1);
    let apex = y.add(lambda_p);
    let b = y.add(s2);
    let mut found = None;
    let mut best: Option<GrowthCandidate> = None;
    for (seg_a, seg_b) in [(&a, &apex), (&apex, &b)] {
        let unit = match seg_b.sub(seg_a).normalized() {
            Some(u) => u,
            None => continue,
        };
        for i in 1..samples {
            let u = i as f64 / samples as f64;
            let yp = seg_a.lerp(seg_b, u);
            for cand_e in [unit.clone(), unit.clone().scale(-1.0), e.clone()] {
                let d = f.dir_derivative(&yp, &cand_e, &default_scales());
                if !d.trusted {
                    continue;
                }
                let gain = d.value - base.value;
                let margin = condition_margin(f, y, &yp, e, gain, lip, t_grid);
                let cand = GrowthCandidate {
                    y: yp.clone(),
                    e: cand_e,
                    derivative: d.value,
                    condition_margin: margin,
                };
                if best
                    .as_ref()
                    .map(|b| cand.derivative > b.derivative)
                    .unwrap_or(true)
                {
                    best = Some(cand.clone());
                }
                if found.is_none() && gain >= eps && margin <= 0.0 {
                    found = Some(cand);
                }
            }
        }
    }
    GrowthSearch {
        hypotheses: checks,
        hypotheses_pass,
        found,
        best,
    }
}

/// Worst grid excess of the increment comparison over the square-root
/// bound; non-positive means the condition holds on the grid.
fn condition_margin(
    f: &LipschitzFunction,
    y: &Point,
    yp: &Point,
    e: &Point,
    gain: f64,
    lip: f64,
    t_grid: &[f64],
) -> f64 {
    let fy = f.eval(y);
    let fyp = f.eval(yp);
    let cap = 25.0 * (gain.max(0.0) * lip).sqrt();
    let mut worst = f64::NEG_INFINITY;
    for &t in t_grid {
        if t == 0.0 {
            continue;
        }
        let lhs = ((f.eval(&yp.offset(e, t)) - fyp) - (f.eval(&y.offset(e, t)) - fy)).abs();
        worst = worst.max(lhs - cap * t.abs() - G_PREDICATE_TOL);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ambient::FatCantor;

    fn pt(x: f64, y: f64) -> Point {
        Point(vec![x, y])
    }

    #[test]
    fn linear_derivative_is_exact_everywhere() {
        let f = linear("a", pt(0.25, -0.5));
        let d = f.dir_derivative(&pt(3.0, 1.0), &pt(1.0, 2.0), &default_scales());
        assert!(d.exact && d.trusted);
        assert_eq!(d.value, 0.25 - 1.0);
    }

    #[test]
    fn linear_without_oracle_has_zero_spread() {
        let f = LipschitzFunction::new(
            "blackbox-linear",
            1.0,
            Arc::new(|y: &Point| 0.5 * y.0[0] - 0.25 * y.0[1]),
            None,
        );
        let d = f.dir_derivative(&pt(0.3, -0.7), &pt(1.0, 0.0), &default_scales());
        assert!(!d.exact);
        assert!(d.spread < 1e-10);
        assert!((d.value - 0.5).abs() < 1e-10);
    }

    #[test]
    fn l1_kink_is_flagged() {
        let f = l1_norm(2);
        assert!(f.exact_derivative(&pt(0.0, 0.0), &pt(1.0, 0.0)).is_none());
        let black = LipschitzFunction::new(
            "l1-blackbox",
            2f64.sqrt(),
            Arc::new(|y: &Point| y.0.iter().map(|c| c.abs()).sum()),
            None,
        );
        let d = black.dir_derivative(&pt(0.0, 0.0), &pt(1.0, 0.0), &default_scales());
        // One-sided slopes are +1 and -1.
        assert!((d.spread - 2.0).abs() < 1e-9);
        assert!(!d.trusted);
    }

    #[test]
    fn circle_distance_derivative() {
        let f = LipschitzFunction::new(
            "dist-to-unit-circle",
            1.0,
            Arc::new(|y: &Point| (y.norm() - 1.0).abs()),
            None,
        );
        let d = f.dir_derivative(&pt(2.0, 0.0), &pt(1.0, 0.0), &default_scales());
        assert!((d.value - 1.0).abs() < 1e-6);
        assert!(d.trusted);
    }

    #[test]
    fn oracle_matches_differences_at_smooth_points() {
        let f = max_affine(2, 5, 99);
        let scales = default_scales();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        for _ in 0..100 {
            let y = pt(rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9));
            let e = pt(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if e.norm() < 0.1 {
                continue;
            }
            let e = e.normalized().unwrap();
            if let Some(exact) = f.exact_derivative(&y, &e) {
                let black = LipschitzFunction::new("m", f.lip, {
                    let f2 = f.clone();
                    Arc::new(move |z: &Point| f2.eval(z))
                }, None);
                let d = black.dir_derivative(&y, &e, &scales);
                if d.trusted {
                    assert!((d.value - exact).abs() < 1e-6, "mismatch {} vs {exact}", d.value);
                    checked += 1;
                }
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn cantor_distance_slopes() {
        let f = distance_to_cantor_fiber(
            crate::ambient::CantorFiber::anchored_at(FatCantor::new(3), 0.0),
            0,
        );
        // 0.5 is the middle of the first removed gap: kink of the distance.
        assert!(f.exact_derivative(&pt(0.5, 0.0), &pt(1.0, 0.0)).is_none());
        // Just right of the gap start, the nearest retained point is left.
        let d = f.exact_derivative(&pt(0.4, 0.3), &pt(1.0, 0.0)).unwrap();
        assert_eq!(d, 1.0);
        // Vertical directions never move the fibre coordinate.
        assert_eq!(f.exact_derivative(&pt(0.5, 0.0), &pt(0.0, 1.0)), Some(0.0));
    }

    #[test]
    fn corpus_declared_constants_hold_sampled() {
        let bbox = (pt(-1.0, -1.0), pt(1.0, 1.0));
        for f in corpus(2, 42) {
            assert!(
                f.check_lipschitz(&bbox, 2000, 7).is_none(),
                "{} violated its declared constant",
                f.name
            );
            assert!((f.lip - 1.0 / 3.0).abs() < 1e-12, "{} not normalized", f.name);
        }
    }

    #[test]
    fn omega_spot_values() {
        let om = OmegaEnvelope::canonical();
        // The cap is active at 1: beta(1) = 2.
        assert_eq!(om.omega(1.0), 6.0);
        assert!(om.omega(1e-8) < 1e-2);
        assert!(om.omega(1e-8) > 8e-3);
    }

    #[test]
    fn omega_invariants_on_grids() {
        let om = OmegaEnvelope::canonical();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut prev = 0.0;
        for i in 0..1000 {
            let t = 1e-10 * 10f64.powf(i as f64 / 90.0);
            let w = om.omega(t);
            assert!(w + 1e-12 >= 2.0 * om.theta(t), "majorant fails at {t}");
            assert!(w >= prev - 1e-15, "monotonicity fails at {t}");
            prev = w;
        }
        for _ in 0..10_000 {
            let a = 10f64.powf(rng.gen_range(-9.0..0.5));
            let b = 10f64.powf(rng.gen_range(-9.0..0.5));
            assert!(om.omega(a) + 2.0 * b <= om.omega(a + b) + 1e-12);
        }
    }

    #[test]
    fn omega_rejects_unbounded_theta() {
        assert!(omega_envelope(Arc::new(|t: f64| 3.0 * t.max(1.0))).is_err());
    }

    #[test]
    fn p_norm_examples() {
        let empty = NormState::default();
        assert_eq!(empty.p(&pt(3.0, 4.0)), 5.0);
        let mut st = NormState::default();
        st.push(0.25, pt(1.0, 0.0));
        st.validate().unwrap();
        assert_eq!(st.p(&pt(1.0, 0.0)), 1.0);
        assert!((st.p(&pt(0.0, 1.0)) - 17f64.sqrt() / 4.0).abs() < 1e-15);
    }

    #[test]
    fn p_norm_sandwich_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let mut st = NormState::default();
            let mut t = rng.gen_range(0.05..0.49);
            for _ in 0..rng.gen_range(0..5) {
                let e = pt(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                if e.norm() < 0.1 {
                    continue;
                }
                st.push(t, e.normalized().unwrap());
                t *= rng.gen_range(0.1..0.49);
            }
            st.validate().unwrap();
            let y = pt(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let p = st.p(&y);
            let n = y.norm();
            assert!(n <= p * (1.0 + 1e-12) && p <= 2.0 * n * (1.0 + 1e-12) + 1e-300);
            // Extension never decreases the norm.
            for k in 0..st.len() {
                assert!(st.truncated(k).p(&y) <= p * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn in_g_reflexive_and_linear() {
        let f = linear("a", pt(0.3, 0.1));
        let st = NormState::default();
        let om = OmegaEnvelope::canonical();
        let grid = symmetric_geometric_grid(1e-6, 8.0, 64);
        let y = pt(0.2, -0.1);
        let e = pt(1.0, 0.0);
        match in_g(&f, &st, &y, &e, &y, &e, 0.0, &om, &grid) {
            GCheck::Holds { .. } => {}
            other => panic!("reflexivity failed: {other:?}"),
        }
        // Linear increments cancel between any two base points.
        let y2 = pt(-0.4, 0.6);
        match in_g(&f, &st, &y, &e, &y2, &e, 0.0, &om, &grid) {
            GCheck::Holds { .. } => {}
            other => panic!("linear cancellation failed: {other:?}"),
        }
    }

    #[test]
    fn in_g_detects_kink_violation() {
        let f = l1_norm(2);
        let st = NormState::default();
        let om = OmegaEnvelope::canonical();
        let grid = symmetric_geometric_grid(1e-6, 8.0, 64);
        // Base deep in the smooth cell, candidate across the kink with the
        // same weight (so the envelope argument is zero) and sigma = 0:
        // the first-coordinate increments differ by 2|t| for t < 0.
        let y = pt(5.0, 5.0);
        let y2 = pt(5.0, -5.0);
        let e = pt(0.0, 1.0);
        match in_g(&f, &st, &y, &e, &y2, &e, 0.0, &om, &grid) {
            GCheck::Fails { max_violation, .. } => assert!(max_violation > 0.1),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn frechet_modulus_of_linear_is_zero() {
        let a = pt(0.6, -0.3);
        let f = linear("a", a.clone());
        let y = pt(0.1, 0.2);
        let e = pt(1.0, 0.0);
        let deriv = f.exact_derivative(&y, &e).unwrap();
        // Model functional chosen so deriv * e_star = a exactly.
        let e_star = a.scale(1.0 / deriv);
        let radii: Vec<f64> = (0..6).map(|i| 0.5f64.powi(i)).collect();
        for mp in frechet_modulus(&f, &y, deriv, &e_star, &radii, 32, 1) {
            assert!(mp.m < 1e-12);
        }
    }

    #[test]
    fn frechet_modulus_l1_smooth_vs_kink() {
        let f = l1_norm(2);
        let radii: Vec<f64> = (2..10).map(|i| 0.5f64.powi(i)).collect();
        // Smooth point (1,1): gradient (1,1); below the kink distance the
        // function is exactly affine, so the modulus vanishes.
        let smooth = frechet_modulus(&f, &pt(1.0, 1.0), 1.0, &pt(1.0, 1.0), &radii, 64, 1);
        assert!(smooth.iter().all(|mp| mp.m < 1e-12));
        // Kink point (1,0): no linear model fits; modulus bounded below.
        let kink = frechet_modulus(&f, &pt(1.0, 0.0), 1.0, &pt(1.0, 0.0), &radii, 64, 1);
        assert!(kink.iter().all(|mp| mp.m > 0.5));
    }

    #[test]
    fn growth_search_reports_failed_hypotheses() {
        let f = l1_norm(2);
        let y = pt(1.0, 0.1);
        let e = pt(1.0, 0.0);
        let s = 0.05;
        let grid = symmetric_geometric_grid(1e-6, 8.0, 64);
        let r = wedge_growth_search(
            &f,
            &y,
            &e,
            0.05,
            s,
            0.0,
            &pt(0.0, 0.01),
            &e.clone().scale(s),
            &e.clone().scale(s),
            &pt(0.0, 0.01),
            50,
            &grid,
        );
        assert!(!r.hypotheses_pass);
        assert!(r.found.is_none());
        assert!(r.hypotheses.iter().any(|c| !c.pass));
    }

    #[test]
    fn growth_search_finds_kink_gain() {
        // f(z) = |z_2| with base derivative 0 along e_1; a short vertical
        // lift of the wedge apex makes both arms carry positive slope.
        let f = abs_coordinate(1);
        let y = pt(0.0, 0.0);
        let e = pt(1.0, 0.0);
        let s = 1.0;
        let eps = 8e-6;
        let h = 1.95e-3;
        let lambda = pt(0.0, h);
        let grid = symmetric_geometric_grid(1e-6, 8.0, 64);
        let r = wedge_growth_search(
            &f,
            &y,
            &e,
            eps,
            s,
            0.0,
            &lambda,
            &pt(s, 0.0),
            &pt(s, 0.0),
            &lambda,
            64,
            &grid,
        );
        for c in &r.hypotheses {
            assert!(c.pass, "hypothesis {} failed: {} vs {}", c.name, c.lhs, c.rhs);
        }
        let found = r.found.expect("kink gain exists");
        assert!(found.derivative >= eps);
        assert!(found.condition_margin <= 0.0);
    }

    #[test]
    fn growth_search_grid_scaling_keeps_segment_membership() {
        let f = abs_coordinate(1);
        let y = pt(0.0, 0.0);
        let e = pt(1.0, 0.0);
        let lambda = pt(0.0, 1.95e-3);
        let run = |grid: &[f64]| {
            wedge_growth_search(
                &f, &y, &e, 8e-6, 1.0, 0.0, &lambda, &pt(1.0, 0.0), &pt(1.0, 0.0), &lambda,
                64, grid,
            )
        };
        let g1 = symmetric_geometric_grid(1e-6, 8.0, 64);
        let g2: Vec<f64> = g1.iter().map(|t| t * 3.0).collect();
        let a = run(&g1).found.unwrap();
        let b = run(&g2).found.unwrap();
        assert_eq!(a.y.0, b.y.0);
    }
}
