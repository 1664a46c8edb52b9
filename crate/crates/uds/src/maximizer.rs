//! The directional-derivative almost-maximization loop over the tube set:
//! the parameter bundle, the iteration schedule, constrained candidate
//! pools, the near-supremum selection, the almost-maximality audit, and
//! the end-to-end differentiability pipeline.

use num::{BigInt, BigRational, Signed, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    add_linear, frechet_modulus, in_g, symmetric_geometric_grid, weight, GCheck,
    LipschitzFunction, ModulusPoint, NormState, OmegaEnvelope,
};
use crate::ambient::FatCantor;
use crate::error::{Result, UdsError};
use crate::geometry::{Point, Wedge};
use crate::tubes::{ApproxTube, Construction};

// ---------------------------------------------------------------------
// The bundle.
// ---------------------------------------------------------------------

/// A point of the parameter bundle: a tube parameter `tau` paired with an
/// ambient point.  The projection is simply `|x| = x.y`.
#[derive(Clone, Debug, Serialize)]
pub struct BundlePoint {
    pub tau: f64,
    pub y: Point,
}

/// The bundle over the depth-truncated tube sets: pairs `(tau, y)` with
/// `0 < tau < lambda` and `y` a member at every sampled parameter strictly
/// between `tau` and `lambda`.  The metric blows up toward the parameter
/// endpoints, so convergent sequences keep their parameters in a compact
/// sub-interval.
pub struct Bundle<'a> {
    pub construction: &'a Construction,
    pub lambda: f64,
    /// Number of sampled intermediate parameters per membership query.
    pub tau_samples: usize,
}

/// Builds the bundle and certifies it non-empty by exhibiting a member on
/// the widest wedge.
pub fn make_bundle(
    construction: &Construction,
    lambda: f64,
    tau_samples: usize,
) -> Result<Bundle<'_>> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(UdsError::invalid_input(format!(
            "bundle parameter must lie in (0, 1], got {lambda}"
        )));
    }
    if tau_samples == 0 {
        return Err(UdsError::invalid_input("need at least one tau sample"));
    }
    let bundle = Bundle {
        construction,
        lambda,
        tau_samples,
    };
    let witness = BundlePoint {
        tau: lambda / 2.0,
        y: construction.config.root_wedge().t2.clone(),
    };
    if !bundle.contains(&witness) {
        return Err(UdsError::verification(format!(
            "bundle over lambda = {lambda} is empty at the sampled grid"
        )));
    }
    Ok(bundle)
}

impl Bundle<'_> {
    /// Sampled parameters strictly between `tau` and `lambda`.
    fn tau_grid(&self, tau: f64) -> impl Iterator<Item = f64> + '_ {
        let m = self.tau_samples;
        let lambda = self.lambda;
        (1..=m).map(move |i| tau + (lambda - tau) * i as f64 / (m + 1) as f64)
    }

    pub fn contains(&self, x: &BundlePoint) -> bool {
        if !(x.tau > 0.0 && x.tau < self.lambda) {
            return false;
        }
        self.tau_grid(x.tau)
            .all(|tp| self.construction.membership_t(&x.y, tp).is_some())
    }

    /// Projection onto the ambient space.
    pub fn pi<'b>(&self, x: &'b BundlePoint) -> &'b Point {
        &x.y
    }

    /// Parameter part of the metric: distances of the reciprocals to both
    /// interval endpoints, so that `tau -> 0` and `tau -> lambda` are both
    /// infinitely far away.
    pub fn parameter_gap(&self, a: f64, b: f64) -> f64 {
        (1.0 / a - 1.0 / b).abs()
            + (1.0 / (self.lambda - a) - 1.0 / (self.lambda - b)).abs()
    }

    pub fn dist(&self, a: &BundlePoint, b: &BundlePoint) -> f64 {
        self.parameter_gap(a.tau, b.tau) + a.y.dist(&b.y)
    }
}

// ---------------------------------------------------------------------
// The schedule.
// ---------------------------------------------------------------------

/// One row of the iteration schedule, kept as exact rationals so the
/// strict parameter inequalities can be certified without rounding.
#[derive(Clone, Debug)]
pub struct ScheduleRow {
    pub n: usize,
    pub sigma: BigRational,
    pub t: BigRational,
    /// Slack of the near-supremum selection; zero row 0 (unused there).
    pub eps: BigRational,
    /// Predicate relaxation; zero at row 0 (unused there).
    pub nu: BigRational,
}

impl ScheduleRow {
    pub fn sigma_f64(&self) -> f64 {
        ratio_to_f64(&self.sigma)
    }
    pub fn t_f64(&self) -> f64 {
        ratio_to_f64(&self.t)
    }
    pub fn eps_f64(&self) -> f64 {
        ratio_to_f64(&self.eps)
    }
    pub fn nu_f64(&self) -> f64 {
        ratio_to_f64(&self.nu)
    }
}

fn ratio_to_f64(r: &BigRational) -> f64 {
    // Scale into f64 range first; schedule denominators overflow i128
    // after a handful of rows.
    let (num, den) = (r.numer(), r.denom());
    let nb = num.bits() as i64;
    let db = den.bits() as i64;
    let shift = (nb.max(db) - 52).max(0) as u64;
    let n2: BigInt = num >> shift;
    let d2: BigInt = den >> shift;
    let nf = n2.to_string().parse::<f64>().unwrap_or(0.0);
    let df = d2.to_string().parse::<f64>().unwrap_or(1.0);
    if df == 0.0 {
        0.0
    } else {
        nf / df
    }
}

/// The concrete iteration schedule: `sigma_n = 16/17^n`,
/// `t_n = (1/4)(2/9)^n`, `eps_n = t_n^2 sigma_n^2 / 2^14`,
/// `nu_n = sigma_{n-1}/4`, `delta_0 = 1`.  The ratios leave strict margin
/// in every required inequality (certified by [`IterSchedule::verify`]).
#[derive(Clone, Debug)]
pub struct IterSchedule {
    pub rows: Vec<ScheduleRow>,
}

fn big(n: i64) -> BigRational {
    BigRational::from_integer(BigInt::from(n))
}

fn frac(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

impl IterSchedule {
    pub fn standard(max_n: usize) -> IterSchedule {
        let mut rows = Vec::with_capacity(max_n + 1);
        let mut sigma = big(16);
        let mut t = frac(1, 4);
        rows.push(ScheduleRow {
            n: 0,
            sigma: sigma.clone(),
            t: t.clone(),
            eps: BigRational::zero(),
            nu: BigRational::zero(),
        });
        for n in 1..=max_n {
            let sigma_prev = sigma.clone();
            sigma *= frac(1, 17);
            t *= frac(2, 9);
            let eps = &t * &t * &sigma * &sigma / big(1 << 14);
            let nu = &sigma_prev / big(4);
            rows.push(ScheduleRow {
                n,
                sigma: sigma.clone(),
                t: t.clone(),
                eps,
                nu,
            });
        }
        IterSchedule { rows }
    }

    pub fn row(&self, n: usize) -> &ScheduleRow {
        &self.rows[n]
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Exact-arithmetic certification of the parameter constraints:
    /// `sigma_0 = 16`, `t_0 in (0, 1/2)`, and for every `n >= 1` the strict
    /// inequalities `sigma_n < sigma_{n-1}/16`, `t_n < t_{n-1}/2`,
    /// `t_n^2 < sigma_{n-1}/16`, `eps_n < t_n^2 sigma_n^2 / 2^13`, and
    /// `nu_n in (0, sigma_{n-1}/2)`.
    pub fn verify(&self) -> Result<()> {
        let fail = |n: usize, what: &str| {
            Err(UdsError::verification(format!(
                "schedule row {n}: {what}"
            )))
        };
        if self.rows.is_empty() || self.rows[0].sigma != big(16) {
            return fail(0, "sigma_0 != 16");
        }
        if !(self.rows[0].t > BigRational::zero() && self.rows[0].t < frac(1, 2)) {
            return fail(0, "t_0 outside (0, 1/2)");
        }
        for n in 1..self.rows.len() {
            let prev = &self.rows[n - 1];
            let cur = &self.rows[n];
            if !cur.sigma.is_positive() || cur.sigma >= &prev.sigma / big(16) {
                return fail(n, "sigma_n >= sigma_{n-1}/16");
            }
            if !cur.t.is_positive() || cur.t >= &prev.t / big(2) {
                return fail(n, "t_n >= t_{n-1}/2");
            }
            if &cur.t * &cur.t >= &prev.sigma / big(16) {
                return fail(n, "t_n^2 >= sigma_{n-1}/16");
            }
            let cap = &cur.t * &cur.t * &cur.sigma * &cur.sigma / big(1 << 13);
            if !cur.eps.is_positive() || cur.eps >= cap {
                return fail(n, "eps_n >= t_n^2 sigma_n^2 / 2^13");
            }
            if !cur.nu.is_positive() || cur.nu >= &prev.sigma / big(2) {
                return fail(n, "nu_n outside (0, sigma_{n-1}/2)");
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------
// Traces.
// ---------------------------------------------------------------------

/// One iteration step as recorded in the trace.
#[derive(Clone, Debug, Serialize)]
pub struct IterRecord {
    pub n: usize,
    pub x: BundlePoint,
    pub e: Point,
    pub weight: f64,
    pub sigma: f64,
    pub t: f64,
    pub eps: f64,
    pub nu: f64,
    /// Near-linearity radius solved from the schedule (undefined at row 0).
    pub delta_cap: f64,
    /// Ball radius for the next candidate pool.
    pub delta: f64,
    pub pool_size: usize,
    /// Weight improvement over the previous pair.
    pub weight_gap: f64,
    /// Smallest tilt component over the accepted pool (1 when no tilt
    /// direction was supplied).
    pub min_tilt: f64,
}

/// A candidate pair with its evaluated weight.
#[derive(Clone, Debug, Serialize)]
pub struct WeightedPair {
    pub x: BundlePoint,
    pub e: Point,
    pub weight: f64,
}

/// Full iteration trace, including the limit pair and the final norm.
#[derive(Clone, Debug, Serialize)]
pub struct IterTrace {
    pub function: String,
    pub records: Vec<IterRecord>,
    pub limit_x: BundlePoint,
    /// Limit direction, normalized to unit length in the final norm.
    pub limit_e: Point,
    #[serde(skip)]
    pub final_state: NormState,
    /// Weight of the limit pair under the final norm.
    pub limit_weight: f64,
}

impl IterTrace {
    /// JSON-lines rendering, one record per step.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Tolerance on the trace invariants (weight monotone, direction Cauchy).
pub const TRACE_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------
// Candidate pools.
// ---------------------------------------------------------------------

/// Parameters of the candidate search and the pipeline.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MaximizerParams {
    /// Maximum number of iteration steps (the trace also stops once
    /// `sigma_n` drops below `1e-12`).
    pub steps: usize,
    /// Candidate pool size per step.
    pub pool: usize,
    pub seed: u64,
    /// Sampled intermediate parameters per bundle membership query.
    pub tau_samples: usize,
    /// Probe count for the almost-maximality audit.
    pub probes: usize,
    /// Tilt direction of the objective, when known; pool minima of the
    /// tilt component are then recorded per step.
    pub tilt: Option<Point>,
}

impl Default for MaximizerParams {
    fn default() -> Self {
        MaximizerParams {
            steps: 12,
            pool: 64,
            seed: 2026,
            tau_samples: 6,
            probes: 200,
            tilt: None,
        }
    }
}

/// Stop refining the trace once `sigma_n` falls below this floor; past it
/// the selection slack underflows double precision.
pub const SIGMA_FLOOR: f64 = 1e-12;

fn rotate_2d(e: &Point, angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    Point(vec![c * e.0[0] - s * e.0[1], s * e.0[0] + c * e.0[1]])
}

/// Unit vector at angle `a` from `u`: a plane rotation in dimension two,
/// otherwise a nudge of size `a` toward the part of `toward` orthogonal
/// to `u`.
fn rotate_any(u: &Point, toward: &Point, a: f64) -> Point {
    if a == 0.0 {
        return u.clone();
    }
    if u.dim() == 2 {
        return rotate_2d(u, a);
    }
    let ortho = toward.sub(&u.scale(toward.dot(u)));
    match ortho.normalized() {
        Some(o) => u
            .add(&o.scale(a))
            .normalized()
            .unwrap_or_else(|| u.clone()),
        None => u.clone(),
    }
}

/// Steepest-ascent unit direction of `f` at `y`, when every coordinate
/// slope is trustworthy.  The selection searches all unit directions, not
/// just a neighborhood of the previous one; seeding the pool with the
/// local gradient direction is what keeps the finite search close to the
/// true per-ball supremum (the step-to-step direction bound is then a
/// consequence of near-maximality, not an input).
fn ascent_direction(f: &LipschitzFunction, y: &Point) -> Option<Point> {
    let scales = crate::analysis::default_scales();
    let mut grad = vec![0.0; y.dim()];
    for (i, g) in grad.iter_mut().enumerate() {
        let mut axis = vec![0.0; y.dim()];
        axis[i] = 1.0;
        let d = f.dir_derivative(y, &Point(axis), &scales);
        if !d.trusted {
            return None;
        }
        *g = d.value;
    }
    Point(grad).normalized()
}

/// Unit directions near `e` at scale `h` (a fan in the plane, random
/// perturbations otherwise), always including `e` itself.
fn direction_pool(e: &Point, h: f64, count: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let mut out = vec![e.clone()];
    if e.dim() == 2 {
        // `h` caps the chord |e' - e|; the matching angular reach is
        // 2 asin(h/2), the full half-turn once the cap stops binding.
        let reach = 2.0 * (h.min(2.0) / 2.0).asin();
        for i in 1..=count / 2 {
            let a = reach * i as f64 / (count / 2) as f64;
            out.push(rotate_2d(e, a));
            out.push(rotate_2d(e, -a));
        }
    } else {
        for _ in 0..count {
            let p = Point(
                e.0.iter()
                    .map(|c| c + rng.gen_range(-h..h))
                    .collect::<Vec<_>>(),
            );
            if let Some(u) = p.normalized() {
                out.push(u);
            }
        }
    }
    out
}

/// Ambient candidate points near `y`: arc-length samples of the wedges the
/// spatial index reports nearby (the zero-distance skeleton of the tube
/// set), clipped to the `delta` ball.
fn point_pool(
    construction: &Construction,
    y: &Point,
    delta: f64,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Point> {
    let mut wedges: Vec<&Wedge> = vec![];
    let root = construction.config.root_wedge();
    wedges.push(&root);
    let near = construction.tubes_near(y);
    let mut seen = std::collections::BTreeSet::new();
    for &id in near.iter().take(32) {
        let t = construction.triple(id);
        if seen.insert(t.wedge_index) {
            wedges.push(construction.wedge_of(t));
        }
    }
    let mut out = vec![y.clone()];
    for w in wedges {
        for (a, b) in [(&w.t1, &w.t2), (&w.t2, &w.t3)] {
            for _ in 0..count / 4 {
                let p = a.lerp(b, rng.gen_range(0.0..1.0));
                if p.dist(y) < delta {
                    out.push(p);
                }
            }
            // Deterministic anchors: the projection-adjacent endpoints.
            for p in [a, b] {
                if p.dist(y) < delta {
                    out.push((*p).clone());
                }
            }
        }
    }
    out
}

/// The constrained candidate pool for one step: pairs within the previous
/// ball that pass the growth predicate at `sigma_prev - nu`, with their
/// weights under the current norm.  The previous pair is always a member.
#[allow(clippy::too_many_arguments)]
pub fn sample_dn(
    bundle: &Bundle<'_>,
    f: &LipschitzFunction,
    state: &NormState,
    x_prev: &BundlePoint,
    e_prev: &Point,
    sigma_prev: f64,
    nu: f64,
    delta_prev: f64,
    direction_cap: f64,
    pool: usize,
    omega: &OmegaEnvelope,
    t_grid: &[f64],
    rng: &mut ChaCha8Rng,
) -> Vec<WeightedPair> {
    let w_prev = weight(f, &x_prev.y, e_prev, state)
        .expect("previous pair carries a trusted derivative");
    let mut out = vec![WeightedPair {
        x: x_prev.clone(),
        e: e_prev.clone(),
        weight: w_prev,
    }];
    let sigma_eff = sigma_prev - nu;
    let points = point_pool(bundle.construction, &x_prev.y, delta_prev, pool, rng);
    let dirs = direction_pool(e_prev, direction_cap, pool.min(48), rng);
    // Screen cheaply first: collect every candidate pair passing the ball,
    // direction-distance, and weight filters, then run the expensive growth
    // predicate best-weight-first up to the pool budget.  Running it in
    // discovery order instead would let one point's directions exhaust the
    // budget and starve the point search.
    let mut screened: Vec<WeightedPair> = vec![];
    for y in &points {
        let x = BundlePoint {
            tau: x_prev.tau,
            y: y.clone(),
        };
        if bundle.dist(&x, x_prev) >= delta_prev || !bundle.contains(&x) {
            continue;
        }
        let mut dirs_here = dirs.clone();
        if let Some(u) = ascent_direction(f, y) {
            // The locally optimal direction and a fine fan around it (the
            // global fan above may straddle it too coarsely).
            for a in [0.0, 1e-4, -1e-4, 1e-7, -1e-7] {
                dirs_here.push(rotate_any(&u, e_prev, a));
            }
        }
        for e in &dirs_here {
            // Direction-distance filter: members of the next candidate set
            // provably stay this close to the previous direction, so pairs
            // beyond the cap cannot matter.
            if e.sub(e_prev).norm() > direction_cap {
                continue;
            }
            let w = match weight(f, y, e, state) {
                Some(w) => w,
                None => continue,
            };
            if w + TRACE_TOL < w_prev {
                continue;
            }
            screened.push(WeightedPair {
                x: x.clone(),
                e: e.clone(),
                weight: w,
            });
        }
    }
    screened.sort_by(|a, b| b.weight.partial_cmp(&a.weight).unwrap());
    for cand in screened.into_iter().take(pool) {
        match in_g(
            f, state, &x_prev.y, e_prev, &cand.x.y, &cand.e, sigma_eff, omega, t_grid,
        ) {
            GCheck::Holds { .. } => out.push(cand),
            _ => continue,
        }
    }
    out
}

// ---------------------------------------------------------------------
// The iteration.
// ---------------------------------------------------------------------

/// Largest near-linearity radius at `(y, e)`: the biggest grid `T` with
/// `|f(y + t e) - f(y) - f'(y,e) t| <= sigma |t| / 32` for all sampled
/// `|t| <= T`.  Returns `None` when even the smallest scale fails.
fn linearity_radius(f: &LipschitzFunction, y: &Point, e: &Point, sigma: f64) -> Option<f64> {
    let d = f.dir_derivative(y, e, &crate::analysis::default_scales());
    if !d.trusted {
        return None;
    }
    let tol = sigma / 32.0;
    // Evaluations carry roundoff of order eps * |f|; dividing by |t| would
    // let that noise swamp the real deviation at small caps, so the check
    // runs against the exact-arithmetic bound plus that absolute slack.
    let fp_slack = 8.0 * f64::EPSILON * (1.0 + f.eval(y).abs());
    let mut best = None;
    for exp in (-40..4).rev() {
        let cap: f64 = 2.0f64.powi(exp);
        let fy = f.eval(y);
        let ok = (1..=16).all(|i| {
            let t = cap * i as f64 / 16.0;
            [t, -t].iter().all(|&tt| {
                (f.eval(&y.offset(e, tt)) - fy - d.value * tt).abs()
                    <= tol * tt.abs() + fp_slack
            })
        });
        if ok {
            best = Some(cap);
            break;
        }
    }
    if best.is_none() && std::env::var("UDS_DEBUG").is_ok() {
        eprintln!(
            "linearity_radius miss: y={:?} e={:?} v={} exact={} spread={} tol={}",
            y.0, e.0, d.value, d.exact, d.spread, tol
        );
        for exp in [-4, -12, -24, -40] {
            let cap: f64 = 2.0f64.powi(exp);
            let fy = f.eval(y);
            let dev = (1..=16)
                .flat_map(|i| {
                    let t = cap * i as f64 / 16.0;
                    [t, -t]
                })
                .map(|tt| (f.eval(&y.offset(e, tt)) - fy - d.value * tt).abs() / tt.abs())
                .fold(0.0f64, f64::max);
            eprintln!("  cap=2^{exp}: max relative dev {dev}");
        }
    }
    best
}

/// Runs the near-supremum selection for up to `params.steps` steps (or
/// until the schedule underflows), maintaining the growing norm state and
/// checking the trace invariants as it goes.
pub fn iterate(
    f: &LipschitzFunction,
    bundle: &Bundle<'_>,
    x0: BundlePoint,
    e0: Point,
    params: &MaximizerParams,
) -> Result<IterTrace> {
    if (e0.norm() - 1.0).abs() > 1e-9 {
        return Err(UdsError::invalid_input("starting direction must be unit"));
    }
    if !bundle.contains(&x0) {
        return Err(UdsError::invalid_input(
            "starting point is not a bundle member",
        ));
    }
    let schedule = IterSchedule::standard(params.steps);
    schedule.verify()?;
    let omega = OmegaEnvelope::canonical();
    let (lo, hi) = bundle.construction.config.bbox();
    let t_grid = symmetric_geometric_grid(1e-7, 4.0 * lo.dist(&hi), 64);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x6d61_7869_6d69_7a65);

    let mut state = NormState::default();
    let mut records: Vec<IterRecord> = vec![];
    let mut x = x0;
    let mut e = e0;
    let mut delta = 1.0;
    let w0 = weight(f, &x.y, &e, &state).ok_or_else(|| {
        UdsError::invalid_input("no trusted derivative at the starting pair")
    })?;
    if w0 < 0.0 {
        return Err(UdsError::invalid_input(
            "starting derivative is negative; flip the direction",
        ));
    }
    let row0 = schedule.row(0);
    records.push(IterRecord {
        n: 0,
        x: x.clone(),
        e: e.clone(),
        weight: w0,
        sigma: row0.sigma_f64(),
        t: row0.t_f64(),
        eps: 0.0,
        nu: 0.0,
        delta_cap: f64::INFINITY,
        delta,
        pool_size: 1,
        weight_gap: 0.0,
        min_tilt: params
            .tilt
            .as_ref()
            .map(|t| t.dot(&e))
            .unwrap_or(1.0),
    });

    for n in 1..=params.steps {
        let row = schedule.row(n);
        if row.sigma_f64() < SIGMA_FLOOR {
            break;
        }
        let prev = records.last().unwrap();
        let sigma_prev = schedule.row(n - 1).sigma_f64();
        let direction_cap = sigma_prev / 8.0;
        let pool = sample_dn(
            bundle,
            f,
            &state,
            &x,
            &e,
            sigma_prev,
            row.nu_f64(),
            delta,
            direction_cap,
            params.pool,
            &omega,
            &t_grid,
            &mut rng,
        );
        // Near-supremum selection: the pool maximum satisfies the eps_n
        // slack rule against every member by construction.  Ties keep the
        // earliest entry (the incumbent pair), so exact optima are stable.
        let best = pool
            .iter()
            .fold(&pool[0], |acc, p| if p.weight > acc.weight { p } else { acc })
            .clone();
        let gap = best.weight - prev.weight;
        if gap < -TRACE_TOL {
            return Err(abort_trace(
                &records,
                format!(
                    "weight decreased at step {n}: {} -> {}",
                    prev.weight, best.weight
                ),
            ));
        }
        if best.e.sub(&e).norm() > direction_cap + TRACE_TOL {
            return Err(abort_trace(
                &records,
                format!("direction moved beyond sigma_{}/8 at step {n}", n - 1),
            ));
        }
        let moved = bundle.dist(&best.x, &x);
        if moved >= delta {
            return Err(abort_trace(
                &records,
                format!("selected point escaped the delta ball at step {n}"),
            ));
        }

        // Solve the near-linearity radius at both the previous and the
        // selected pair, then size the next ball inside it.
        let nu = row.nu_f64();
        let rad_prev = linearity_radius(f, &x.y, &e, sigma_prev);
        let rad_new = linearity_radius(f, &best.x.y, &best.e, sigma_prev);
        let t_range = match (rad_prev, rad_new) {
            (Some(a), Some(b)) => a.min(b),
            _ => {
                return Err(abort_trace(
                    &records,
                    format!("no near-linearity radius at step {n}"),
                ))
            }
        };
        let delta_cap = nu * t_range / 4.0;
        let delta_next = (0.5 * (delta - moved) * (1.0 - 1e-9))
            .min(delta_cap)
            .max(f64::MIN_POSITIVE);

        state.push(row.t_f64(), best.e.clone());
        x = best.x.clone();
        e = best.e.clone();
        delta = delta_next;
        records.push(IterRecord {
            n,
            x: x.clone(),
            e: e.clone(),
            weight: best.weight,
            sigma: row.sigma_f64(),
            t: row.t_f64(),
            eps: row.eps_f64(),
            nu,
            delta_cap,
            delta,
            pool_size: pool.len(),
            weight_gap: gap,
            min_tilt: params
                .tilt
                .as_ref()
                .map(|tl| {
                    pool.iter()
                        .map(|p| tl.dot(&p.e))
                        .fold(f64::INFINITY, f64::min)
                })
                .unwrap_or(1.0),
        });
    }

    // Limit pair: the last iterate, with the direction normalized in the
    // final norm.
    let p_e = state.p(&e);
    let limit_e = e.scale(1.0 / p_e);
    let limit_weight = weight(f, &x.y, &e, &state)
        .ok_or_else(|| UdsError::internal("lost the derivative at the limit pair"))?;
    let trace = IterTrace {
        function: f.name.clone(),
        records,
        limit_x: x,
        limit_e,
        final_state: state,
        limit_weight,
    };
    check_trace_invariants(&trace)?;
    Ok(trace)
}

/// An invariant failed mid-trace: package the records produced so far as
/// JSON lines so the caller can persist the partial trace.
fn abort_trace(records: &[IterRecord], reason: String) -> UdsError {
    let partial = records
        .iter()
        .filter_map(|r| serde_json::to_string(r).ok())
        .collect::<Vec<_>>()
        .join("\n");
    UdsError::AbortedTrace {
        reason,
        partial_trace: partial,
    }
}

/// Re-checks the recorded trace against its stated invariants: weight
/// monotone within tolerance, direction increments within `sigma_n/8`,
/// ball nesting, and the point Cauchy bounds.
pub fn check_trace_invariants(trace: &IterTrace) -> Result<()> {
    let rs = &trace.records;
    for win in rs.windows(2) {
        let (a, b) = (&win[0], &win[1]);
        if b.weight + TRACE_TOL < a.weight {
            return Err(UdsError::verification(format!(
                "weight decreases at step {}",
                b.n
            )));
        }
        if b.e.sub(&a.e).norm() > a.sigma / 8.0 + TRACE_TOL {
            return Err(UdsError::verification(format!(
                "direction step {} exceeds sigma/8",
                b.n
            )));
        }
        if b.delta > 0.5 * a.delta + TRACE_TOL {
            return Err(UdsError::verification(format!(
                "ball at step {} is not nested",
                b.n
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------
// Almost-maximality.
// ---------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct AlmostMaxReport {
    pub eps: f64,
    /// Schedule floor `eps_n + 2 t_n^2` the tolerance must stay above.
    pub eps_floor: f64,
    pub probes_generated: usize,
    pub probes_admitted: usize,
    /// Largest observed weight excess over the limit pair.
    pub max_excess: f64,
    pub pass: bool,
    /// No probe survived the predicate filter; the pass is vacuous.
    pub vacuous: bool,
    pub worst_pair: Option<WeightedPair>,
}

/// Core comparison for the audit: given candidate pairs that already
/// passed the predicate filter (with their weights), measure the excess
/// over the limit weight.  Public so fault-injected pools can be assessed
/// in tests.
pub fn assess_probes(trace: &IterTrace, probes: &[WeightedPair], eps: f64) -> AlmostMaxReport {
    let mut max_excess = f64::NEG_INFINITY;
    let mut worst = None;
    for p in probes {
        let excess = p.weight - trace.limit_weight;
        if excess > max_excess {
            max_excess = excess;
            worst = Some(p.clone());
        }
    }
    let vacuous = probes.is_empty();
    AlmostMaxReport {
        eps,
        eps_floor: 0.0,
        probes_generated: probes.len(),
        probes_admitted: probes.len(),
        max_excess: if vacuous { 0.0 } else { max_excess },
        pass: vacuous || max_excess < eps,
        vacuous,
        worst_pair: worst,
    }
}

/// Audits the limit pair: random nearby pairs passing the zero-parameter
/// growth predicate under the final norm may not beat its weight by `eps`
/// or more.
pub fn almost_maximality_check(
    f: &LipschitzFunction,
    bundle: &Bundle<'_>,
    trace: &IterTrace,
    eps: f64,
    probes: usize,
    seed: u64,
) -> Result<AlmostMaxReport> {
    let last = trace
        .records
        .last()
        .ok_or_else(|| UdsError::invalid_input("empty trace"))?;
    let eps_floor = last.eps + 2.0 * last.t * last.t;
    if eps <= eps_floor {
        return Err(UdsError::invalid_input(format!(
            "tolerance {eps} must exceed the schedule floor {eps_floor}"
        )));
    }
    let omega = OmegaEnvelope::canonical();
    let (lo, hi) = bundle.construction.config.bbox();
    let t_grid = symmetric_geometric_grid(1e-7, 4.0 * lo.dist(&hi), 64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x616c_6d61_7831);
    let state = &trace.final_state;
    let x_t = &trace.limit_x;
    let e_t = trace
        .records
        .last()
        .map(|r| r.e.clone())
        .unwrap();
    let delta = last.delta;
    let points = point_pool(bundle.construction, &x_t.y, delta, probes, &mut rng);
    let dirs = direction_pool(&e_t, 0.25, 16, &mut rng);
    let mut admitted = vec![];
    let mut generated = 0usize;
    'outer: for y in &points {
        let mut dirs_here = dirs.clone();
        if let Some(u) = ascent_direction(f, y) {
            dirs_here.push(u);
        }
        for e in &dirs_here {
            generated += 1;
            if generated > probes {
                break 'outer;
            }
            let x = BundlePoint {
                tau: x_t.tau,
                y: y.clone(),
            };
            if bundle.dist(&x, x_t) > delta || !bundle.contains(&x) {
                continue;
            }
            let w = match weight(f, y, e, state) {
                Some(w) => w,
                None => continue,
            };
            match in_g(f, state, &x_t.y, &e_t, y, e, 0.0, &omega, &t_grid) {
                GCheck::Holds { .. } => {}
                _ => continue,
            }
            admitted.push(WeightedPair {
                x,
                e: e.clone(),
                weight: w,
            });
        }
    }
    let mut report = assess_probes(trace, &admitted, eps);
    report.eps_floor = eps_floor;
    report.probes_generated = generated;
    Ok(report)
}

// ---------------------------------------------------------------------
// Pipelines.
// ---------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct PipelineReport {
    pub function: String,
    /// Whether the corpus function carried an exact oracle; without one
    /// the run is diagnostic-grade only.
    pub exact_oracle: bool,
    pub trace_steps: usize,
    pub limit_point: Point,
    pub limit_direction: Point,
    pub limit_derivative: f64,
    pub modulus: Vec<ModulusPoint>,
    pub almost_max: AlmostMaxReport,
    /// Wedge-approximation certificates issued at the limit point.
    pub certificates: Vec<ApproxTube>,
    #[serde(skip)]
    pub trace: Option<IterTrace>,
}

/// End-to-end differentiability run: tilt `g` by twice its Lipschitz
/// constant along a base direction with nonnegative slope, iterate over
/// the bundle, then measure the Fréchet modulus of the limit pair down to
/// the construction's validity floor and certify nearby tube
/// approximations.
pub fn uds_pipeline(
    g: &LipschitzFunction,
    construction: &Construction,
    lambda_p: f64,
    lambda: f64,
    params: &MaximizerParams,
) -> Result<PipelineReport> {
    if !(0.0 < lambda_p && lambda_p < lambda && lambda <= 1.0) {
        return Err(UdsError::invalid_input(
            "need 0 < lambda' < lambda <= 1 for the pipeline",
        ));
    }
    let bundle = make_bundle(construction, lambda, params.tau_samples)?;
    let root = construction.config.root_wedge();

    // Base direction along the first root segment, flipped if the slope of
    // g there is negative; base point mid-segment.
    let mut e0 = root
        .t2
        .sub(&root.t1)
        .normalized()
        .ok_or_else(|| UdsError::invalid_input("degenerate root wedge"))?;
    let y0 = root.t1.lerp(&root.t2, 0.5);
    let scales = crate::analysis::default_scales();
    let d0 = g.dir_derivative(&y0, &e0, &scales);
    if !d0.trusted {
        return Err(UdsError::invalid_input(
            "no trusted slope of g at the base point",
        ));
    }
    if d0.value < 0.0 {
        e0 = e0.scale(-1.0);
    }
    let f = add_linear(g, 2.0 * g.lip, &e0);

    let x0 = BundlePoint {
        tau: lambda_p.min(lambda / 2.0),
        y: y0,
    };
    let mut params = params.clone();
    params.tilt = Some(e0.clone());
    let trace = iterate(&f, &bundle, x0, e0, &params)?;
    let last = trace.records.last().unwrap();
    let eps = (last.eps + 2.0 * last.t * last.t) * 4.0 + 1e-12;
    let almost_max = almost_maximality_check(&f, &bundle, &trace, eps, params.probes, params.seed)?;

    // Modulus curve at the limit pair against the linear model
    // f'(y, e) <e, u>, from an eighth of the box down to well below the
    // deepest stored width scale.
    let y_t = trace.limit_x.y.clone();
    let e_unit = trace.records.last().unwrap().e.clone();
    let d_t = f.dir_derivative(&y_t, &e_unit, &scales);
    let radii: Vec<f64> = (3..=12).map(|i| 0.5f64.powi(i)).collect();
    let modulus = frechet_modulus(&f, &y_t, d_t.value, &e_unit, &radii, 64, params.seed);

    // Certificates: approximating tubes at the limit point for two radii
    // under the validity ceiling.
    let mut certificates = vec![];
    if let Some(witnesses) = construction.membership_t(&y_t, lambda_p) {
        let psi = lambda - lambda_p;
        let ceiling = construction.delta1(&witnesses, psi);
        for frac in [0.5, 0.25] {
            let delta = frac * ceiling;
            let s = Wedge::new(
                y_t.offset(&e_unit, -0.5 * delta),
                y_t.clone(),
                y_t.offset(&e_unit, 0.5 * delta),
            );
            if let Ok(cert) =
                construction.approximating_tube(&y_t, delta, &s, lambda_p, lambda, 0.9)
            {
                certificates.push(cert);
            }
        }
    }

    Ok(PipelineReport {
        function: g.name.clone(),
        exact_oracle: g.has_oracle(),
        trace_steps: trace.records.len(),
        limit_point: y_t,
        limit_direction: e_unit,
        limit_derivative: d_t.value,
        modulus,
        almost_max,
        certificates,
        trace: Some(trace),
    })
}

// ---------------------------------------------------------------------
// The totally disconnected refinement.
// ---------------------------------------------------------------------

/// Membership oracle for the totally disconnected subset: the tube set
/// intersected with a closed ball and with the preimage of a shifted fat
/// Cantor set under a linear functional.
pub struct DisconnectedSet<'a> {
    pub construction: &'a Construction,
    pub lambda: f64,
    pub center: Point,
    pub radius: f64,
    pub cantor: FatCantor,
    /// Coefficients of the linear functional.
    pub functional: Point,
    /// Shift making the functional value at the center a retained point.
    pub shift: f64,
}

pub fn disconnected_set<'a>(
    construction: &'a Construction,
    lambda: f64,
    center: Point,
    radius: f64,
    cantor: FatCantor,
    functional: Point,
) -> Result<DisconnectedSet<'a>> {
    if functional.norm() == 0.0 {
        return Err(UdsError::invalid_input("functional must be non-zero"));
    }
    if construction.membership_t(&center, lambda).is_none() {
        return Err(UdsError::invalid_input(
            "center is not a tube-set member at the given parameter",
        ));
    }
    let shift = functional.dot(&center);
    Ok(DisconnectedSet {
        construction,
        lambda,
        center,
        radius,
        cantor,
        functional,
        shift,
    })
}

impl DisconnectedSet<'_> {
    pub fn contains(&self, y: &Point) -> bool {
        if y.dist(&self.center) > self.radius / 2.0 {
            return false;
        }
        if !self.cantor.contains(self.functional.dot(y) - self.shift) {
            return false;
        }
        self.construction.membership_t(y, self.lambda).is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{corpus, l1_norm, linear, scaled};
    use crate::tubes::BuildConfig;
    use std::sync::OnceLock;

    fn shared() -> &'static Construction {
        static C: OnceLock<Construction> = OnceLock::new();
        C.get_or_init(|| {
            let mut cfg = BuildConfig::default();
            cfg.depth = 3;
            Construction::build(cfg).unwrap()
        })
    }

    fn pt(x: f64, y: f64) -> Point {
        Point(vec![x, y])
    }

    #[test]
    fn schedule_is_exact() {
        let s = IterSchedule::standard(12);
        s.verify().unwrap();
        assert_eq!(s.row(0).sigma_f64(), 16.0);
        assert!((s.row(1).sigma_f64() - 16.0 / 17.0).abs() < 1e-15);
        assert!((s.row(2).t_f64() - 0.25 * (2.0 / 9.0) * (2.0 / 9.0)).abs() < 1e-17);
        // The floor is reached at n = 11.
        assert!(s.row(11).sigma_f64() < SIGMA_FLOOR);
        assert!(s.row(10).sigma_f64() >= SIGMA_FLOOR);
    }

    #[test]
    fn schedule_rejects_broken_rows() {
        let mut s = IterSchedule::standard(4);
        s.rows[2].t = s.rows[1].t.clone();
        assert!(s.verify().is_err());
    }

    #[test]
    fn bundle_membership_basics() {
        let c = shared();
        let b = make_bundle(c, 0.5, 4).unwrap();
        // Points on the widest wedge are members at every parameter.
        let root = c.config.root_wedge();
        let on_spine = BundlePoint {
            tau: 0.1,
            y: root.t1.lerp(&root.t2, 0.3),
        };
        assert!(b.contains(&on_spine));
        // Parameter at or beyond lambda: not in the bundle.
        assert!(!b.contains(&BundlePoint {
            tau: 0.5,
            y: root.t2.clone()
        }));
        // Far-away point: not in the bundle.
        assert!(!b.contains(&BundlePoint {
            tau: 0.1,
            y: pt(0.9, -0.9)
        }));
        // Projections of members are members of the depth-limited set.
        assert!(c.membership_t(b.pi(&on_spine), 0.5).is_some());
    }

    #[test]
    fn bundle_metric_blows_up_at_the_ends() {
        let c = shared();
        let b = make_bundle(c, 0.5, 4).unwrap();
        let y = c.config.root_wedge().t2;
        let mid = BundlePoint {
            tau: 0.25,
            y: y.clone(),
        };
        let near_zero = BundlePoint {
            tau: 1e-9,
            y: y.clone(),
        };
        let near_lambda = BundlePoint {
            tau: 0.5 - 1e-9,
            y,
        };
        assert!(b.dist(&mid, &near_zero) > 1e8);
        assert!(b.dist(&mid, &near_lambda) > 1e8);
        assert_eq!(b.dist(&mid, &mid), 0.0);
    }

    #[test]
    fn make_bundle_rejects_bad_lambda() {
        let c = shared();
        assert!(make_bundle(c, 0.0, 4).is_err());
        assert!(make_bundle(c, 1.5, 4).is_err());
    }

    #[test]
    fn linear_trace_has_constant_weight_and_direction() {
        let c = shared();
        let b = make_bundle(c, 0.5, 4).unwrap();
        // Gradient aligned with the base direction, so the tilted function
        // already has its optimal direction at step 0.
        let g = scaled(&linear("lin", pt(1.0, 0.0)), 1.0 / 3.0);
        let report = uds_pipeline(&g, c, 0.25, 0.5, &MaximizerParams::default()).unwrap();
        let trace = report.trace.as_ref().unwrap();
        let w0 = trace.records[0].weight;
        for r in &trace.records {
            assert!((r.weight - w0).abs() < 1e-9, "weight drifted at {}", r.n);
        }
        check_trace_invariants(trace).unwrap();
        // Linear functions have identically vanishing modulus.
        assert!(report.modulus.iter().all(|m| m.m < 1e-9));
        drop(b);
    }

    #[test]
    fn corpus_traces_pass_invariants() {
        let c = shared();
        for (i, g) in corpus(2, 7).into_iter().enumerate() {
            let mut params = MaximizerParams::default();
            params.steps = 6;
            params.pool = 32;
            params.seed = 100 + i as u64;
            let report = uds_pipeline(&g, c, 0.25, 0.5, &params)
                .unwrap_or_else(|e| panic!("{} failed: {e}", g.name));
            let trace = report.trace.as_ref().unwrap();
            check_trace_invariants(trace).unwrap();
            assert!(report.almost_max.pass, "{} failed the audit", g.name);
            // Weight never drops below the start.
            assert!(
                trace.records.last().unwrap().weight >= trace.records[0].weight - 1e-9
            );
        }
    }

    #[test]
    fn pool_always_contains_previous_pair_and_keeps_tilt_component() {
        let c = shared();
        let b = make_bundle(c, 0.5, 4).unwrap();
        let g = scaled(&l1_norm(2), 1.0 / (3.0 * 2f64.sqrt()));
        let root = c.config.root_wedge();
        let y0 = root.t1.lerp(&root.t2, 0.5);
        // Tilt direction with nonnegative base slope of g (the bound below
        // needs it).
        let mut e0 = root.t2.sub(&root.t1).normalized().unwrap();
        if g.exact_derivative(&y0, &e0).unwrap_or(-1.0) < 0.0 {
            e0 = e0.scale(-1.0);
        }
        let f = crate::analysis::add_linear(&g, 2.0 * g.lip, &e0);
        let state = NormState::default();
        let x0 = BundlePoint { tau: 0.25, y: y0 };
        let omega = OmegaEnvelope::canonical();
        let grid = symmetric_geometric_grid(1e-7, 16.0, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pool = sample_dn(
            &b, &f, &state, &x0, &e0, 16.0, 4.0, 1.0, 2.0, 48, &omega, &grid, &mut rng,
        );
        assert!(pool[0].x.y.0 == x0.y.0 && pool[0].e.0 == e0.0);
        assert!(pool.len() > 1, "pool collapsed to the previous pair");
        let w0 = weight(&f, &x0.y, &e0, &state).unwrap();
        for p in &pool {
            // Tilt component bound: any pair at least matching the base
            // weight keeps half its mass along the tilt direction.
            if p.weight >= w0 - 1e-12 {
                assert!(
                    e0.dot(&p.e) >= 0.5 - 1e-9,
                    "tilt component dropped below 1/2"
                );
            }
        }
    }

    #[test]
    fn almost_maximality_rejects_small_tolerance_and_flags_injection() {
        let c = shared();
        let g = scaled(&linear("lin", pt(1.0, 0.0)), 1.0 / 3.0);
        let report = uds_pipeline(&g, c, 0.25, 0.5, &MaximizerParams::default()).unwrap();
        let trace = report.trace.as_ref().unwrap();
        let last = trace.records.last().unwrap();
        let floor = last.eps + 2.0 * last.t * last.t;
        let b = make_bundle(c, 0.5, 4).unwrap();
        let f = crate::analysis::add_linear(
            &g,
            2.0 * g.lip,
            &c.config.root_wedge().t2.sub(&c.config.root_wedge().t1).normalized().unwrap(),
        );
        assert!(
            almost_maximality_check(&f, &b, trace, floor / 2.0, 10, 1).is_err(),
            "tolerance below the schedule floor must be rejected"
        );
        // Fault injection: a probe with an inflated weight must fail.
        let fake = WeightedPair {
            x: trace.limit_x.clone(),
            e: last.e.clone(),
            weight: trace.limit_weight + 1.0,
        };
        let rep = assess_probes(trace, &[fake.clone()], floor * 4.0);
        assert!(!rep.pass);
        assert!((rep.worst_pair.unwrap().weight - fake.weight).abs() < 1e-15);
        // Empty probe set: vacuous pass, flagged.
        let rep = assess_probes(trace, &[], floor * 4.0);
        assert!(rep.pass && rep.vacuous);
    }

    #[test]
    fn disconnected_set_membership() {
        let c = shared();
        let root = c.config.root_wedge();
        let y0 = root.t1.lerp(&root.t2, 0.5);
        let cantor = FatCantor::new(6);
        let s = disconnected_set(
            c,
            0.5,
            y0.clone(),
            0.25,
            cantor,
            pt(0.0, 1.0),
        )
        .unwrap();
        assert!(s.contains(&y0));
        // A value in the middle of the first removed gap is excluded.
        let mut gap = y0.clone();
        gap.0[1] += 0.5; // functional value lands mid-gap
        assert!(!s.contains(&gap));
        // Outside the ball: excluded regardless of the fibre.
        let mut far = y0.clone();
        far.0[0] += 10.0;
        assert!(!s.contains(&far));
        // A center outside the tube set is rejected up front.
        assert!(disconnected_set(
            c,
            0.5,
            pt(0.9, -0.9),
            0.25,
            FatCantor::new(3),
            pt(0.0, 1.0)
        )
        .is_err());
    }

    #[test]
    fn pipeline_modulus_decays_for_piecewise_linear_corpus() {
        let c = shared();
        let g = scaled(&l1_norm(2), 1.0 / (3.0 * 2f64.sqrt()));
        let mut params = MaximizerParams::default();
        params.pool = 96;
        let report = uds_pipeline(&g, c, 0.25, 0.5, &params).unwrap();
        let m_max = report.modulus.first().unwrap().m;
        let m_min = report.modulus.last().unwrap().m;
        assert!(
            m_min <= m_max / 4.0 || m_max < 1e-9,
            "modulus failed to decay: {m_max} -> {m_min}"
        );
    }
}
