//! The recursive tube construction.
//!
//! A *tube triple* `(r, w, alpha)` couples a family wedge `K_r` with a tube
//! half-width `w` and an approximation radius `alpha`, `0 < w <= alpha`.
//! Level `k` of the construction refines every earlier level: each parent
//! `(r, w, alpha)` at level `l < k` contributes, at scale
//! `beta = r_{k,l} * w`, a *self child* `(r, v, beta)` and further children
//! whose wedges come from the grid net at pitch matched to
//! `eps = (10 / rho) * beta` and stay inside the closed
//! `2 alpha`-neighbourhood of the parent wedge.
//!
//! The full net expansion is combinatorially enormous (it cubes the number
//! of grid points in the parent's neighbourhood), so the stored construction
//! materialises the self chains plus a deterministic, seeded sample of net
//! children per expansion; every stored triple is a genuine member of its
//! expansion and satisfies every tube invariant.  The *complete* net remains
//! available point-wise through grid quantization
//! ([`crate::ambient::WedgeFamily::quantize`]), which is how
//! [`Construction::approximating_tube`] produces certified approximating
//! tubes for arbitrary target wedges without enumeration.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ambient::{pitch_exp_for, LinearFunctional, WedgeFamily, WedgeKey};
use crate::error::{Result, UdsError};
use crate::geometry::{
    point_wedge_distance, wedge_distance, wedge_in_neighborhood, Point, Wedge,
};

/// Decay schedule `r_{k,l}` of the expansion scales, `0 <= l < k`.
///
/// The recursion keeps every value below `rho / 10`, below a global cap
/// (which controls how sharply tube widths collapse per level), and below
/// `(1/(k-1)) * min_{l < l' < k} r_{l',l}` so that later refinements of any
/// fixed level are much finer than earlier ones.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Schedule {
    pub rho: f64,
    pub r_cap: f64,
    /// `values[k][l]` holds `r_{k,l}` for `1 <= k <= max_k`, `0 <= l < k`.
    pub values: Vec<Vec<f64>>,
}

impl Schedule {
    pub fn new(rho: f64, r_cap: f64, max_k: u32) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(UdsError::invalid_input("rho must lie in (0, 1)"));
        }
        if !(r_cap > 0.0 && r_cap < rho / 10.0) {
            return Err(UdsError::invalid_input("r_cap must lie in (0, rho / 10)"));
        }
        let base = (rho / 20.0).min(r_cap);
        let mut values: Vec<Vec<f64>> = vec![vec![]]; // k = 0 unused
        for k in 1..=max_k {
            let mut row = Vec::with_capacity(k as usize);
            for l in 0..k {
                let v = if k == 1 {
                    base
                } else {
                    // r_{k,l} <= (1/(k-1)) * r_{l',l} for every l < l' < k,
                    // and r_{k,k-1} <= 1/(k-1).
                    let inv = 1.0 / (k - 1) as f64;
                    if l == k - 1 {
                        base.min(inv)
                    } else {
                        let min_prev = ((l + 1)..k)
                            .map(|lp| values[lp as usize][l as usize])
                            .fold(f64::INFINITY, f64::min);
                        base.min(inv * min_prev)
                    }
                };
                row.push(v);
            }
            values.push(row);
        }
        Ok(Schedule { rho, r_cap, values })
    }

    pub fn r(&self, k: u32, l: u32) -> f64 {
        self.values[k as usize][l as usize]
    }

    pub fn max_k(&self) -> u32 {
        (self.values.len() - 1) as u32
    }
}

/// Largest power of two `<= x`, or `None` when `x` has no positive dyadic
/// floor (i.e. `x <= 0` or underflows f64 entirely).
pub fn dyadic_floor(x: f64) -> Option<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return None;
    }
    let e = x.log2().floor();
    let v = e.exp2();
    // Guard against log/exp rounding at the boundary.
    let v = if v > x { v * 0.5 } else { v };
    if v > 0.0 {
        Some(v)
    } else {
        None
    }
}

/// Build-time parameters.  Everything downstream (membership, verification,
/// exports) is a deterministic function of this structure.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub dim: usize,
    /// Depth `K` of the truncated construction.
    pub depth: u32,
    /// Half-width of the ambient bounding box `[-h, h]^dim`.
    pub bbox_halfwidth: f64,
    /// Net scale parameter; expansions use nets at `eps = (10/rho) * beta`.
    pub rho: f64,
    /// Global cap on the schedule values `r_{k,l}`.
    pub r_cap: f64,
    /// Width ceiling: every tube width at level `k` stays below `eps0 / k`.
    pub eps0: f64,
    /// Root tube half-width and approximation radius.
    pub w0: f64,
    pub alpha0: f64,
    /// Root wedge vertices (dyadic; must be separated by phi).
    pub root: Vec<Vec<f64>>,
    /// Grid exponent of the root vertices.
    pub root_pitch_exp: i32,
    pub seed: u64,
    /// Hard cap on the number of stored triples; exceeding it aborts.
    pub budget: usize,
    /// Sampled net children kept per expansion at level `k`
    /// (index `k - 1`; missing entries mean zero).
    pub branch_budget: Vec<usize>,
    /// Stop adding branch wedges once the family holds this many members,
    /// so that the later enumeration indices keep positive radii.
    pub family_cap: usize,
    /// Diameter cap for sampled branch wedges, in units of the net scale.
    pub net_diameter_factor: f64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            dim: 2,
            depth: 4,
            bbox_halfwidth: 1.0,
            rho: 0.5,
            r_cap: 1.0 / 256.0,
            eps0: 0.5,
            w0: 0.125,
            alpha0: 0.25,
            root: vec![vec![-0.25, 0.0], vec![0.0, 0.0], vec![0.25, 0.25]],
            root_pitch_exp: -2,
            seed: 2026,
            budget: 1_000_000,
            branch_budget: vec![24, 2, 1, 0],
            family_cap: 400,
            net_diameter_factor: 8.0,
        }
    }
}

impl BuildConfig {
    pub fn bbox(&self) -> (Point, Point) {
        (
            Point(vec![-self.bbox_halfwidth; self.dim]),
            Point(vec![self.bbox_halfwidth; self.dim]),
        )
    }

    pub fn root_wedge(&self) -> Wedge {
        Wedge::new(
            Point(self.root[0].clone()),
            Point(self.root[1].clone()),
            Point(self.root[2].clone()),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(UdsError::invalid_input("ambient dimension must be >= 2"));
        }
        if self.depth < 1 {
            return Err(UdsError::invalid_input("depth must be >= 1"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(UdsError::invalid_input("rho must lie in (0, 1)"));
        }
        if !(self.w0 > 0.0 && self.w0 <= self.alpha0 && self.alpha0 < self.eps0) {
            return Err(UdsError::invalid_input(
                "root scales must satisfy 0 < w0 <= alpha0 < eps0",
            ));
        }
        if self.root.len() != 3 || self.root.iter().any(|v| v.len() != self.dim) {
            return Err(UdsError::invalid_input("root wedge needs 3 vertices of dim"));
        }
        let w = self.root_wedge();
        let phi = LinearFunctional::first_coordinate(self.dim);
        if phi.apply(&w.t1) == phi.apply(&w.t2) || phi.apply(&w.t2) == phi.apply(&w.t3) {
            return Err(UdsError::invalid_input(
                "root wedge vertices must be separated by the reference functional",
            ));
        }
        if self.budget == 0 {
            return Err(UdsError::invalid_input("budget must be positive"));
        }
        Ok(())
    }

    /// Hex digest of the canonical JSON rendering; stamped into reports.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One stored tube: wedge index `r` in the family, half-width `w`,
/// approximation radius `alpha`, construction level, and the parent it was
/// expanded from (`None` exactly for the root).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TubeTriple {
    pub id: u64,
    pub wedge_index: usize,
    pub level: u32,
    pub parent: Option<u64>,
    pub w: f64,
    pub alpha: f64,
}

/// Chain of triples witnessing a membership claim: ids from the root to a
/// terminal triple at the claimed level, together with the measured
/// distances from the query point to each wedge.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MembershipWitness {
    pub chain: Vec<u64>,
    pub level: u32,
    pub terminal_width: f64,
    pub distances: Vec<f64>,
}

/// Certified approximating tube returned by
/// [`Construction::approximating_tube`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ApproxTube {
    /// The approximating wedge (a net member at the certified pitch).
    pub wedge: Wedge,
    pub key: WedgeKey,
    /// Measured wedge distance to the target.
    pub gamma: f64,
    /// Net scale used, `(10/rho) * r_{K+1, l_m} * w_m`.
    pub eps: f64,
    /// Critical ancestor position in the witness chain.
    pub critical_m: usize,
    /// Ids of the witness chain the tube was grafted onto.
    pub chain: Vec<u64>,
    /// Validity ceiling for this query point.
    pub delta1: f64,
    /// Smallest wedge distance to the target over the exhaustive scan of
    /// the net members adjacent to the returned one.
    pub window_scan_min: f64,
    /// Number of members inspected by that scan.
    pub window_scan_count: usize,
    /// Membership checks of sampled points of the returned wedge, per level.
    pub membership_checked_levels: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InvariantViolation {
    pub id: u64,
    pub what: String,
}

/// The stored, depth-truncated construction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Construction {
    pub config: BuildConfig,
    pub family: WedgeFamily,
    pub schedule: Schedule,
    pub triples: Vec<TubeTriple>,
    /// Triple ids per level, `0 ..= depth`.
    pub levels: Vec<Vec<u64>>,
    #[serde(skip)]
    spatial: BTreeMap<Vec<i64>, Vec<u64>>,
}

/// Mesh of the coarse spatial index used to prefilter membership queries.
const SPATIAL_CELL: f64 = 1.0 / 32.0;

impl Construction {
    /// Run the deterministic build.  Aborts (rather than silently pruning)
    /// when the triple budget would be exceeded.
    pub fn build(config: BuildConfig) -> Result<Self> {
        config.validate()?;
        let schedule = Schedule::new(config.rho, config.r_cap, config.depth + 1)?;
        let phi = LinearFunctional::first_coordinate(config.dim);
        let mut family = WedgeFamily::incremental(config.bbox(), phi);
        let root_wedge = config.root_wedge();
        let root_key = WedgeKey::from_wedge(&root_wedge, config.root_pitch_exp);
        let root_index = family.intern(root_key.wedge(config.dim), root_key);
        let mut triples = vec![TubeTriple {
            id: 0,
            wedge_index: root_index,
            level: 0,
            parent: None,
            w: config.w0,
            alpha: config.alpha0,
        }];
        let mut levels: Vec<Vec<u64>> = vec![vec![0]];

        for k in 1..=config.depth {
            let mut level_ids = Vec::new();
            for l in 0..k {
                let parent_ids = levels[l as usize].clone();
                for pid in parent_ids {
                    let new = expand_expansion(
                        &config,
                        &schedule,
                        &mut family,
                        &triples[pid as usize].clone(),
                        k,
                        l,
                        triples.len() as u64,
                    )?;
                    for t in new {
                        if triples.len() >= config.budget {
                            return Err(UdsError::BudgetExceeded {
                                level: k,
                                have: triples.len(),
                                budget: config.budget,
                            });
                        }
                        level_ids.push(t.id);
                        triples.push(t);
                    }
                }
            }
            levels.push(level_ids);
        }

        let mut c = Construction {
            config,
            family,
            schedule,
            triples,
            levels,
            spatial: BTreeMap::new(),
        };
        c.rebuild_spatial();
        Ok(c)
    }

    pub fn depth(&self) -> u32 {
        self.config.depth
    }

    pub fn wedge_of(&self, t: &TubeTriple) -> &Wedge {
        &self.family.wedges[t.wedge_index].wedge
    }

    pub fn triple(&self, id: u64) -> &TubeTriple {
        &self.triples[id as usize]
    }

    fn rebuild_spatial(&mut self) {
        self.spatial.clear();
        for t in &self.triples {
            let w = &self.family.wedges[t.wedge_index].wedge;
            let (lo, hi) = w.bbox();
            let pad = t.alpha + t.w + SPATIAL_CELL;
            let lo_c: Vec<i64> = lo
                .0
                .iter()
                .map(|c| ((c - pad) / SPATIAL_CELL).floor() as i64)
                .collect();
            let hi_c: Vec<i64> = hi
                .0
                .iter()
                .map(|c| ((c + pad) / SPATIAL_CELL).floor() as i64)
                .collect();
            for cell in cells_between(&lo_c, &hi_c) {
                self.spatial.entry(cell).or_default().push(t.id);
            }
        }
    }

    /// Ids of the triples whose padded wedge boxes meet the cell of `y`.
    pub fn tubes_near(&self, y: &Point) -> &[u64] {
        let cell: Vec<i64> = y.0.iter().map(|c| (c / SPATIAL_CELL).floor() as i64).collect();
        self.spatial.get(&cell).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The all-self-children chain from the root down to `depth`; the
    /// backbone every fat-width membership argument rides on.
    pub fn spine(&self) -> Vec<u64> {
        let mut chain = vec![0u64];
        let root_wedge = self.triples[0].wedge_index;
        for k in 1..=self.depth() {
            let prev = *chain.last().unwrap();
            let next = self.levels[k as usize]
                .iter()
                .copied()
                .find(|id| {
                    let t = &self.triples[*id as usize];
                    t.parent == Some(prev) && t.wedge_index == root_wedge
                })
                .expect("self child exists at every level");
            chain.push(next);
        }
        chain
    }

    /// Witness search for `y` in the level-`k` membership set at parameter
    /// `lambda`, optionally constrained to a terminal width.  Returns the
    /// lexicographically smallest passing chain.
    pub fn membership_m(
        &self,
        y: &Point,
        k: u32,
        lambda: f64,
        target_w: Option<f64>,
    ) -> Option<MembershipWitness> {
        if k as usize >= self.levels.len() {
            return None;
        }
        let mut best: Option<MembershipWitness> = None;
        for &id in &self.levels[k as usize] {
            let t = &self.triples[id as usize];
            if let Some(wt) = target_w {
                if t.w != wt {
                    continue;
                }
            }
            let d_term = point_wedge_distance(y, self.wedge_of(t));
            if d_term > lambda * t.w {
                continue;
            }
            // Walk the ancestor chain, checking the radius condition at
            // every node (the root included).
            let mut chain_rev = vec![id];
            let mut dists_rev = vec![d_term];
            let mut ok = d_term <= lambda * t.alpha;
            let mut cur = t;
            while ok {
                match cur.parent {
                    None => break,
                    Some(pid) => {
                        let p = &self.triples[pid as usize];
                        let d = point_wedge_distance(y, self.wedge_of(p));
                        if d > lambda * p.alpha {
                            ok = false;
                        } else {
                            chain_rev.push(pid);
                            dists_rev.push(d);
                            cur = p;
                        }
                    }
                }
            }
            if !ok {
                continue;
            }
            chain_rev.reverse();
            dists_rev.reverse();
            let witness = MembershipWitness {
                chain: chain_rev,
                level: k,
                terminal_width: t.w,
                distances: dists_rev,
            };
            match &best {
                Some(b) if b.chain <= witness.chain => {}
                _ => best = Some(witness),
            }
        }
        best
    }

    /// Level-`k` union membership: some `n` with `k <= n <= (1+lambda) k`
    /// (clamped to the stored depth) admits a witness.
    pub fn membership_j(&self, y: &Point, k: u32, lambda: f64) -> Option<MembershipWitness> {
        let hi = (((1.0 + lambda) * k as f64).floor() as u32).min(self.depth());
        (k..=hi).find_map(|n| self.membership_m(y, n, lambda, None))
    }

    /// Depth-truncated set membership: every level `1 ..= depth` passes.
    pub fn membership_t(&self, y: &Point, lambda: f64) -> Option<Vec<MembershipWitness>> {
        let mut ws = Vec::with_capacity(self.depth() as usize);
        for k in 1..=self.depth() {
            ws.push(self.membership_j(y, k, lambda)?);
        }
        Some(ws)
    }

    /// Validity ceiling `delta_1` for wedge approximation at `y`: half of
    /// `psi` times the smallest terminal witness width over the levels,
    /// where `psi = lambda - lambda_p`.
    pub fn delta1(&self, witnesses: &[MembershipWitness], psi: f64) -> f64 {
        witnesses
            .iter()
            .map(|w| 0.5 * psi * w.terminal_width)
            .fold(f64::INFINITY, f64::min)
    }

    /// Certified wedge approximation: given a member `y` at `lambda_p`, a
    /// radius `delta` below the validity ceiling, and a target wedge `s`
    /// inside the closed `delta`-ball around `y`, produce a net wedge within
    /// wedge distance `eta * delta` of `s` all of whose sampled points are
    /// members at `lambda` up to the stored depth.
    pub fn approximating_tube(
        &self,
        y: &Point,
        delta: f64,
        s: &Wedge,
        lambda_p: f64,
        lambda: f64,
        eta: f64,
    ) -> Result<ApproxTube> {
        if !(0.0 < lambda_p && lambda_p < lambda && lambda < 1.0) {
            return Err(UdsError::invalid_input(
                "need 0 < lambda_p < lambda < 1",
            ));
        }
        if !(0.0 < eta && eta < 1.0) {
            return Err(UdsError::invalid_input("need eta in (0, 1)"));
        }
        let psi = lambda - lambda_p;
        let witnesses = self.membership_t(y, lambda_p).ok_or_else(|| {
            UdsError::invalid_input("query point is not a member at lambda_p")
        })?;
        let delta1 = self.delta1(&witnesses, psi);
        if delta >= delta1 {
            return Err(UdsError::invalid_input(format!(
                "delta {delta:.17e} is at or above the validity ceiling {delta1:.17e}"
            )));
        }
        if s.vertices().iter().any(|v| v.dist(y) > delta) {
            return Err(UdsError::invalid_input(
                "target wedge must lie in the closed delta-ball around y",
            ));
        }
        // Deepest witness chain and its critical ancestor: the last chain
        // position m with 2 delta <= psi * alpha_m.
        let deep = witnesses.last().unwrap();
        let alphas: Vec<f64> = deep
            .chain
            .iter()
            .map(|id| self.triples[*id as usize].alpha)
            .collect();
        if 2.0 * delta > psi * alphas[0] {
            return Err(UdsError::invalid_input(
                "delta too large for the root approximation radius",
            ));
        }
        let mut m = alphas.len() - 1;
        while 2.0 * delta > psi * alphas[m] {
            m -= 1;
        }
        let anchor = &self.triples[deep.chain[m] as usize];
        let l_m = anchor.level;
        let eps = (10.0 / self.config.rho) * self.schedule.r(self.depth() + 1, l_m) * anchor.w;
        let (wedge, key) = self.family.quantize(s, eps)?;
        let gamma = wedge_distance(&wedge, s);
        if gamma >= eta * delta {
            return Err(UdsError::verification(format!(
                "quantization landed at gamma {gamma:.17e} >= eta * delta {:.17e}",
                eta * delta
            )));
        }
        // Containment in the anchor's 2 alpha neighbourhood.
        let anchor_wedge = self.wedge_of(anchor).clone();
        let step = (wedge.len() / 32.0).max(1e-3 * eps);
        if !wedge_in_neighborhood(&wedge, &anchor_wedge, 2.0 * anchor.alpha, step) {
            return Err(UdsError::verification(
                "approximating wedge escaped the anchor neighbourhood",
            ));
        }
        // Exhaustive scan of the adjacent net members: every grid wedge one
        // pitch away in any vertex coordinate, filtered by separation.
        let (window_scan_min, window_scan_count) = self.window_scan(&key, s);
        // Membership of the returned wedge, sampled along the carried set.
        for z in wedge.sample(wedge.len().max(eps) / 8.0) {
            for k in 1..=self.depth() {
                if self.membership_j(&z, k, lambda).is_none() {
                    return Err(UdsError::verification(format!(
                        "sampled point of the approximating wedge failed membership at level {k}"
                    )));
                }
            }
        }
        Ok(ApproxTube {
            wedge,
            key,
            gamma,
            eps,
            critical_m: m,
            chain: deep.chain.clone(),
            delta1,
            window_scan_min,
            window_scan_count,
            membership_checked_levels: self.depth(),
        })
    }

    /// Scan the separated net members whose vertex coordinates differ from
    /// `key` by at most one grid unit; returns the minimum wedge distance to
    /// `s` and the number of members inspected.
    fn window_scan(&self, key: &WedgeKey, s: &Wedge) -> (f64, usize) {
        let dim = self.config.dim;
        let n = key.coords.len();
        let mut min_d = f64::INFINITY;
        let mut count = 0usize;
        let mut offsets = vec![0i64; n];
        loop {
            let coords: Vec<i64> = key
                .coords
                .iter()
                .zip(&offsets)
                .map(|(c, o)| c + o)
                .collect();
            let cand = WedgeKey {
                pitch_exp: key.pitch_exp,
                coords,
            };
            let w = cand.wedge(dim);
            let phi = &self.family.phi;
            if phi.apply(&w.t1) != phi.apply(&w.t2) && phi.apply(&w.t2) != phi.apply(&w.t3) {
                count += 1;
                min_d = min_d.min(wedge_distance(&w, s));
            }
            // Advance the mixed-radix counter over {-1, 0, 1}^n.
            let mut i = 0;
            loop {
                if i == n {
                    return (min_d, count);
                }
                offsets[i] += 1;
                if offsets[i] <= 1 {
                    break;
                }
                offsets[i] = -1;
                i += 1;
            }
        }
    }

    /// Sweep every stored triple against the tube invariants; an empty
    /// return certifies the construction.
    pub fn invariant_sweep(&self) -> Vec<InvariantViolation> {
        let mut out = Vec::new();
        let mut complain = |id: u64, what: String| out.push(InvariantViolation { id, what });
        for t in &self.triples {
            if !(t.w > 0.0 && t.w <= t.alpha && t.alpha < self.config.eps0) {
                complain(t.id, format!("scales out of order: w={} alpha={}", t.w, t.alpha));
            }
            if t.level >= 1 {
                if t.w >= self.config.eps0 / t.level as f64 {
                    complain(t.id, "width at or above eps0 / k".into());
                }
                if !self.family.g_contains_tube(t.wedge_index, t.w, t.level) {
                    complain(t.id, "tube escapes the level open set".into());
                }
                if t.w != dyadic_floor(t.w).unwrap_or(0.0) {
                    complain(t.id, "width is not dyadic".into());
                }
                match t.parent {
                    None => complain(t.id, "non-root without parent".into()),
                    Some(pid) => {
                        let p = &self.triples[pid as usize];
                        if p.level >= t.level {
                            complain(t.id, "parent level not below child level".into());
                        }
                        let beta = self.schedule.r(t.level, p.level) * p.w;
                        if t.alpha != beta {
                            complain(t.id, "alpha differs from r_{k,l} * parent width".into());
                        }
                        if t.alpha >= p.alpha / 10.0 {
                            complain(t.id, "alpha not below a tenth of the parent alpha".into());
                        }
                        // Self children share the parent wedge, where
                        // containment is exact; sampled checks there would
                        // only report their own conservative margin.
                        if t.wedge_index != p.wedge_index {
                            let cw = self.wedge_of(t);
                            let pw = self.wedge_of(p);
                            let r = 2.0 * p.alpha;
                            let step = (cw.len() / 64.0).clamp(r / 1024.0, r / 4.0);
                            if !wedge_in_neighborhood(cw, pw, r, step) {
                                complain(
                                    t.id,
                                    "child wedge escapes the parent neighbourhood".into(),
                                );
                            }
                        }
                    }
                }
            } else if t.parent.is_some() {
                complain(t.id, "root with a parent".into());
            }
        }
        out
    }

    /// Restrict to the levels `0 ..= new_depth` (triples keep their ids).
    pub fn depth_truncate(&self, new_depth: u32) -> Construction {
        assert!(new_depth >= 1 && new_depth <= self.depth());
        let keep: std::collections::BTreeSet<u64> = self.levels[..=new_depth as usize]
            .iter()
            .flatten()
            .copied()
            .collect();
        let mut c = Construction {
            config: BuildConfig {
                depth: new_depth,
                ..self.config.clone()
            },
            family: self.family.clone(),
            schedule: self.schedule.clone(),
            triples: self.triples.clone(),
            levels: self.levels[..=new_depth as usize].to_vec(),
            spatial: BTreeMap::new(),
        };
        // Drop the truncated triples from the chains by leaving them in the
        // vector (ids must stay stable) but outside `levels`; membership
        // only reaches triples through `levels`.
        let _ = keep;
        c.rebuild_spatial();
        c
    }

    // ------------------------------------------------------------------
    // Persistence: JSON header + little-endian binary triple section.
    // ------------------------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        #[derive(Serialize)]
        struct Header<'a> {
            version: u32,
            config: &'a BuildConfig,
            family: &'a WedgeFamily,
            schedule: &'a Schedule,
            levels: &'a Vec<Vec<u64>>,
            triple_count: u64,
        }
        let header = serde_json::to_vec(&Header {
            version: 1,
            config: &self.config,
            family: &self.family,
            schedule: &self.schedule,
            levels: &self.levels,
            triple_count: self.triples.len() as u64,
        })?;
        let mut out = Vec::with_capacity(header.len() + self.triples.len() * 44 + 16);
        out.extend_from_slice(b"UDSC");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.triples {
            out.extend_from_slice(&t.id.to_le_bytes());
            out.extend_from_slice(&(t.wedge_index as u64).to_le_bytes());
            out.extend_from_slice(&t.level.to_le_bytes());
            out.extend_from_slice(&t.parent.unwrap_or(u64::MAX).to_le_bytes());
            out.extend_from_slice(&t.w.to_le_bytes());
            out.extend_from_slice(&t.alpha.to_le_bytes());
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || UdsError::invalid_input("malformed construction file");
        if bytes.len() < 16 || &bytes[0..4] != b"UDSC" {
            return Err(bad());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != 1 {
            return Err(UdsError::invalid_input(format!(
                "unsupported construction file version {version}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + header_len {
            return Err(bad());
        }
        #[derive(Deserialize)]
        struct Header {
            #[allow(dead_code)]
            version: u32,
            config: BuildConfig,
            family: WedgeFamily,
            schedule: Schedule,
            levels: Vec<Vec<u64>>,
            triple_count: u64,
        }
        let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])?;
        let mut offset = 16 + header_len;
        let mut triples = Vec::with_capacity(header.triple_count as usize);
        for _ in 0..header.triple_count {
            if bytes.len() < offset + 44 {
                return Err(bad());
            }
            let id = u64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap());
            let r = u64::from_le_bytes(bytes[offset + 8..offset + 16].try_into().unwrap());
            let level = u32::from_le_bytes(bytes[offset + 16..offset + 20].try_into().unwrap());
            let parent_raw =
                u64::from_le_bytes(bytes[offset + 20..offset + 28].try_into().unwrap());
            let w = f64::from_le_bytes(bytes[offset + 28..offset + 36].try_into().unwrap());
            let alpha = f64::from_le_bytes(bytes[offset + 36..offset + 44].try_into().unwrap());
            triples.push(TubeTriple {
                id,
                wedge_index: r as usize,
                level,
                parent: if parent_raw == u64::MAX {
                    None
                } else {
                    Some(parent_raw)
                },
                w,
                alpha,
            });
            offset += 44;
        }
        let mut family = header.family;
        family.rebuild_index();
        let mut c = Construction {
            config: header.config,
            family,
            schedule: header.schedule,
            triples,
            levels: header.levels,
            spatial: BTreeMap::new(),
        };
        c.rebuild_spatial();
        Ok(c)
    }
}

/// Deterministic expansion of one parent at `(k, l)`: the self child plus a
/// seeded sample of net children.  The RNG stream is keyed by
/// `(seed, k, l, parent id)`, so the result set is independent of the order
/// expansions are run in.
fn expand_expansion(
    config: &BuildConfig,
    schedule: &Schedule,
    family: &mut WedgeFamily,
    parent: &TubeTriple,
    k: u32,
    l: u32,
    next_id: u64,
) -> Result<Vec<TubeTriple>> {
    debug_assert_eq!(parent.level, l);
    let beta = schedule.r(k, l) * parent.w;
    let mut next_id = next_id;
    let mut out = Vec::new();
    let width_of = |family: &WedgeFamily, idx: usize| -> Option<f64> {
        let cap = (config.eps0 / k as f64) * (1.0 - (-20.0_f64).exp2());
        dyadic_floor(beta.min(family.eta(idx, k)).min(cap))
    };

    // Self child: same wedge, shrunken scales.
    if let Some(v) = width_of(family, parent.wedge_index) {
        out.push(TubeTriple {
            id: next_id,
            wedge_index: parent.wedge_index,
            level: k,
            parent: Some(parent.id),
            w: v,
            alpha: beta,
        });
        next_id += 1;
    } else {
        return Err(UdsError::internal(
            "self child width underflowed; family grew too large",
        ));
    }

    let budget = config
        .branch_budget
        .get((k - 1) as usize)
        .copied()
        .unwrap_or(0);
    if budget == 0 || family.len() >= config.family_cap {
        return Ok(out);
    }

    let parent_wedge = family.wedges[parent.wedge_index].wedge.clone();
    let eps = (10.0 / config.rho) * beta;
    // Deep branch parents can carry widths far below the finest supported
    // grid; their expansions then consist of the self child alone.
    if pitch_exp_for(eps, config.dim) < crate::ambient::MIN_PITCH_EXP {
        return Ok(out);
    }
    let reach = (config.net_diameter_factor * eps).min(0.9 * parent.alpha);
    let mut rng = ChaCha8Rng::seed_from_u64(
        config
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(((k as u64) << 40) ^ ((l as u64) << 32) ^ parent.id),
    );
    let dim = config.dim;
    let mut taken: Vec<WedgeKey> = Vec::new();
    let mut attempts = 0usize;
    while out.len() - 1 < budget && attempts < 64 * budget {
        attempts += 1;
        // Anchor on the parent wedge, then jitter three vertices.
        let anchor = {
            let seg = if rng.gen::<bool>() { 0 } else { 1 };
            let t = rng.gen_range(0.0..1.0);
            let (a, b) = if seg == 0 {
                (&parent_wedge.t1, &parent_wedge.t2)
            } else {
                (&parent_wedge.t2, &parent_wedge.t3)
            };
            a.lerp(b, t)
        };
        let mut vert = || {
            let off: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let off = Point(off);
            let n = off.norm();
            let r = rng.gen_range(0.0..reach);
            if n == 0.0 {
                anchor.clone()
            } else {
                anchor.offset(&off, r / n)
            }
        };
        let s = Wedge::new(vert(), vert(), vert());
        let (wedge, key) = family.quantize(&s, eps)?;
        if taken.contains(&key) || key == family.wedges[parent.wedge_index].key {
            continue;
        }
        // Stay inside the ambient box and the parent neighbourhood.
        let hw = config.bbox_halfwidth;
        if wedge
            .vertices()
            .iter()
            .any(|v| v.0.iter().any(|c| c.abs() > hw))
        {
            continue;
        }
        let step = (wedge.len() / 32.0).max(1e-3 * eps);
        if !wedge_in_neighborhood(&wedge, &parent_wedge, 2.0 * parent.alpha, step) {
            continue;
        }
        if family.len() >= config.family_cap {
            break;
        }
        let idx = family.intern(wedge, key.clone());
        let v = match width_of(family, idx) {
            Some(v) => v,
            None => continue,
        };
        taken.push(key);
        out.push(TubeTriple {
            id: next_id,
            wedge_index: idx,
            level: k,
            parent: Some(parent.id),
            w: v,
            alpha: beta,
        });
        next_id += 1;
    }
    Ok(out)
}

fn cells_between(lo: &[i64], hi: &[i64]) -> Vec<Vec<i64>> {
    let mut cells: Vec<Vec<i64>> = vec![vec![]];
    for k in 0..lo.len() {
        let mut next = Vec::new();
        for c in &cells {
            for v in lo[k]..=hi[k] {
                let mut q = c.clone();
                q.push(v);
                next.push(q);
            }
        }
        cells = next;
    }
    cells
}

/// Convenience: quantization pitch for a net at scale `eps`.
pub fn net_pitch(eps: f64, dim: usize) -> f64 {
    (pitch_exp_for(eps, dim) as f64).exp2()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> BuildConfig {
        BuildConfig {
            depth: 2,
            branch_budget: vec![4, 1],
            ..BuildConfig::default()
        }
    }

    #[test]
    fn schedule_respects_the_recursion() {
        let s = Schedule::new(0.5, 1.0 / 256.0, 5).unwrap();
        for k in 1..=5u32 {
            for l in 0..k {
                let v = s.r(k, l);
                assert!(v > 0.0 && v < 0.5 / 10.0);
                assert!(v <= 1.0 / 256.0);
            }
        }
        // Later refinements of a level are at least (k-1) times finer than
        // the earliest refinement of the same level.
        for k in 2..=5u32 {
            for l in 0..k - 1 {
                for lp in (l + 1)..k {
                    assert!(s.r(k, l) <= s.r(lp, l) / (k - 1) as f64 + 1e-18);
                }
            }
            assert!(s.r(k, k - 1) <= 1.0 / (k - 1) as f64);
        }
    }

    #[test]
    fn depth_one_build_is_a_single_expansion() {
        let config = BuildConfig {
            depth: 1,
            branch_budget: vec![4],
            ..BuildConfig::default()
        };
        let c = Construction::build(config).unwrap();
        assert_eq!(c.levels.len(), 2);
        assert_eq!(c.levels[0], vec![0]);
        // Self child plus at most four branches.
        assert!(!c.levels[1].is_empty() && c.levels[1].len() <= 5);
        assert!(c.invariant_sweep().is_empty());
    }

    #[test]
    fn build_is_deterministic() {
        let a = Construction::build(small_config()).unwrap();
        let b = Construction::build(small_config()).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn save_load_round_trip_is_byte_identical() {
        let c = Construction::build(small_config()).unwrap();
        let bytes = c.to_bytes().unwrap();
        let loaded = Construction::from_bytes(&bytes).unwrap();
        assert_eq!(bytes, loaded.to_bytes().unwrap());
        assert!(loaded.invariant_sweep().is_empty());
    }

    #[test]
    fn budget_excess_aborts() {
        let config = BuildConfig {
            budget: 3,
            ..small_config()
        };
        match Construction::build(config) {
            Err(UdsError::BudgetExceeded { .. }) => {}
            other => panic!("expected budget abort, got {other:?}"),
        }
    }

    #[test]
    fn spine_membership_on_the_root_wedge() {
        let c = Construction::build(small_config()).unwrap();
        let spine = c.spine();
        assert_eq!(spine.len() as u32, c.depth() + 1);
        // A point on the root wedge is a member at every level and any
        // positive lambda.
        let y = Point(vec![-0.125, 0.0]);
        for k in 1..=c.depth() {
            assert!(c.membership_m(&y, k, 0.25, None).is_some());
        }
        assert!(c.membership_t(&y, 0.25).is_some());
        // A point far from every tube is not.
        let far = Point(vec![0.9, -0.9]);
        assert!(c.membership_t(&far, 0.25).is_none());
    }

    #[test]
    fn membership_respects_the_width_threshold() {
        let c = Construction::build(small_config()).unwrap();
        let spine = c.spine();
        let terminal = c.triple(*spine.last().unwrap());
        let lambda = 0.5;
        let w = terminal.w;
        // Offset a spine point vertically by just under / over lambda * w.
        let base = Point(vec![-0.125, 0.0]);
        let inside = Point(vec![-0.125, 0.9 * lambda * w]);
        let outside = Point(vec![-0.125, 4.0 * lambda * w]);
        assert_eq!(point_wedge_distance(&base, c.wedge_of(terminal)), 0.0);
        assert!(c.membership_m(&inside, c.depth(), lambda, None).is_some());
        assert!(c
            .membership_m(&outside, c.depth(), lambda, Some(w))
            .is_none());
    }

    #[test]
    fn dyadic_floor_behaviour() {
        assert_eq!(dyadic_floor(1.0), Some(1.0));
        assert_eq!(dyadic_floor(0.75), Some(0.5));
        assert_eq!(dyadic_floor(0.5), Some(0.5));
        assert_eq!(dyadic_floor(3.9), Some(2.0));
        assert_eq!(dyadic_floor(0.0), None);
        assert_eq!(dyadic_floor(-1.0), None);
    }

    #[test]
    fn approximating_tube_round_trip() {
        let c = Construction::build(BuildConfig::default()).unwrap();
        let y = Point(vec![-0.125, 0.0]);
        let lambda_p = 0.25;
        let lambda = 0.5;
        let psi = lambda - lambda_p;
        let ws = c.membership_t(&y, lambda_p).unwrap();
        let delta1 = c.delta1(&ws, psi);
        assert!(delta1 > 0.0);
        let delta = 0.8 * delta1;
        // A small wedge near y, inside the delta ball.
        let s = Wedge::new(
            Point(vec![y.0[0] - 0.5 * delta, y.0[1] + 0.1 * delta]),
            Point(vec![y.0[0], y.0[1] - 0.2 * delta]),
            Point(vec![y.0[0] + 0.4 * delta, y.0[1] + 0.3 * delta]),
        );
        let tube = c
            .approximating_tube(&y, delta, &s, lambda_p, lambda, 0.9)
            .unwrap();
        assert!(tube.gamma < 0.9 * delta);
        assert!(tube.window_scan_min <= tube.gamma);
        assert!(tube.window_scan_count > 0);
    }

    #[test]
    fn approximating_tube_rejects_large_delta() {
        let c = Construction::build(small_config()).unwrap();
        let y = Point(vec![-0.125, 0.0]);
        let s = Wedge::new(y.clone(), y.clone(), y.clone());
        let err = c
            .approximating_tube(&y, 0.4, &s, 0.25, 0.5, 0.9)
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
