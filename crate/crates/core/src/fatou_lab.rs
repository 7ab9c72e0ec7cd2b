//! Weak nontangential approach domains, maximal functions, the weak (1,1)
//! inequality, nontangential maximal bounds and Fatou-type experiments.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::boundary_measure::{gp2_directions, shadow_direction, ConformalDensity, Direction};
use crate::boundary_rep::{BoundaryFunction, PartitionFunction, StepFunction};
use crate::error::{Error, Result};
use crate::group_model::{common_prefix, AtomIndexer, GroupElement, GroupModel, Letter};
use crate::numeric::kahan_sum;
use crate::poisson_kernel::normalized_poisson;

#[derive(Clone, Debug)]
pub struct ApproachDomain {
    pub target: Direction,
    pub aperture: f64,
    pub basepoint: GroupElement,
    pub epsilon: f64,
    pub alpha: f64,
    pub exterior_radius: usize,
}

impl ApproachDomain {
    pub fn new(model: &GroupModel, target: Direction, aperture: f64, epsilon: f64) -> Result<Self> {
        if !(aperture > 0.0) {
            return Err(Error::Precondition(format!("aperture {aperture} must be positive")));
        }
        crate::boundary_measure::VisualMetricParams::new(model, epsilon)?;
        Ok(Self {
            target,
            aperture,
            basepoint: model.identity(),
            epsilon,
            alpha: model.alpha(),
            exterior_radius: 0,
        })
    }

    pub fn with_basepoint(mut self, x: GroupElement) -> Self {
        self.basepoint = x;
        self
    }

    /// log of the right-hand side C d^{eps/alpha} e^{-eps d}.
    fn log_radius(&self, d: usize) -> f64 {
        let d = d as f64;
        self.aperture.ln() + self.epsilon / self.alpha * d.ln() - self.epsilon * d
    }
}

/// y in Omega_C(v) iff d_x^eps(w_x^y, v) <= C d(x,y)^{eps/alpha} e^{-eps d(x,y)}.
pub fn in_domain(model: &GroupModel, dom: &ApproachDomain, y: &GroupElement) -> Result<bool> {
    let x = &dom.basepoint;
    let w = shadow_direction(model, x, y)?;
    let x_inv = model.inverse_word(x.word());
    let w_e = w.translate(model, &x_inv);
    let v_e = dom.target.translate(model, &x_inv);
    let d = model.distance_words(x.word(), y.word());
    let lhs = match gp2_directions(model, &w_e, &v_e) {
        None => f64::NEG_INFINITY,
        Some(t) => -dom.epsilon * t as f64 / 2.0,
    };
    Ok(lhs <= dom.log_radius(d) + 1e-12)
}

/// Domain members at distance exactly n from the basepoint, in shortlex order.
pub fn domain_members(model: &GroupModel, dom: &ApproachDomain, n: usize, cap: u64) -> Result<Vec<GroupElement>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let x = dom.basepoint.word();
    let x_inv = model.inverse_word(x);
    let v = dom.target.translate(model, &x_inv);
    // (w^y, v) <= lcp(y, v) + 1/2 unless y is a prefix of v.
    let need = -dom.log_radius(n) / dom.epsilon;
    let lo = (need - 0.5 - 1e-9).ceil().max(0.0) as usize;
    let axis = v.letters(n);
    let table = crate::group_model::ContinuationTable::new(model, n.max(1));
    let mut predicted: u128 = 1;
    for l in lo..n {
        predicted += table.count(l.checked_sub(1).map(|i| axis[i]), n - l);
    }
    if predicted > cap as u128 {
        return Err(Error::CapExceeded { predicted, cap });
    }
    let mut out = Vec::new();
    let mut candidates = vec![axis.clone()];
    for l in lo..n {
        let prev = if l == 0 { None } else { Some(axis[l - 1]) };
        for b in model.children(prev) {
            if b == axis[l] {
                continue;
            }
            let mut w = axis[..l].to_vec();
            w.push(b);
            extend_all(model, &mut w, n, &mut candidates);
        }
    }
    for c in candidates {
        let mut y = x.to_vec();
        model.reduce_onto(&mut y, &c);
        let y = model.element_unchecked(y);
        if in_domain(model, dom, &y)? {
            out.push(y);
        }
    }
    out.sort();
    Ok(out)
}

fn extend_all(model: &GroupModel, w: &mut Vec<Letter>, n: usize, out: &mut Vec<Vec<Letter>>) {
    if w.len() == n {
        out.push(w.clone());
        return;
    }
    for l in model.children(w.last().copied()) {
        w.push(l);
        extend_all(model, w, n, out);
        w.pop();
    }
}

/// Depth-m words extended canonically, plus `extra` pseudo-random deeper ones.
pub fn structured_directions(model: &GroupModel, m: usize, extra: usize, seed: u64) -> Vec<Direction> {
    let mut out: Vec<Direction> = model
        .words_of_length(m.max(1))
        .iter()
        .map(|w| Direction::canonical_extension(model, w).expect("nonempty"))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..extra {
        let len = m + 1 + rng.gen_range(0..10);
        let mut w = Vec::with_capacity(len);
        for _ in 0..len {
            let kids = model.children(w.last().copied());
            w.push(kids[rng.gen_range(0..kids.len())]);
        }
        out.push(Direction::canonical_extension(model, &w).expect("nonempty"));
    }
    out
}

/// A finite test measure: |f| d mu for a step function, or a point mass.
#[derive(Clone, Debug)]
pub enum TestMeasure {
    Function(StepFunction),
    Point(Direction),
}

impl TestMeasure {
    pub fn total_mass(&self, density: &ConformalDensity) -> Result<f64> {
        match self {
            TestMeasure::Function(f) => f.l1_norm(density),
            TestMeasure::Point(_) => Ok(1.0),
        }
    }

    /// nu(cyl w) / mu(cyl w).
    fn average(&self, density: &ConformalDensity, w: &[Letter]) -> Result<f64> {
        let mu = density.mass(w)?;
        match self {
            TestMeasure::Function(f) => {
                if w.len() >= f.depth() {
                    return Ok(f.value_at(w).norm());
                }
                let abs = f.map(|z| Complex64::new(z.norm(), 0.0));
                let ix = AtomIndexer::new(density.model(), f.depth());
                let mut parts = Vec::new();
                for (i, a) in ix.words().iter().enumerate() {
                    if a.starts_with(w) {
                        parts.push(abs.values()[i].re * density.mass(a)?);
                    }
                }
                Ok(kahan_sum(parts) / mu)
            }
            TestMeasure::Point(v) => {
                Ok(if v.letters(w.len()) == w { 1.0 / mu } else { 0.0 })
            }
        }
    }
}

/// M nu(v) = max over the ancestor cylinders of v down to depth M of nu/mu.
pub fn maximal_function(density: &ConformalDensity, nu: &TestMeasure, v: &Direction, depth: usize) -> Result<f64> {
    let w = v.letters(depth);
    let mut best = 0.0f64;
    for j in 0..=depth {
        best = best.max(nu.average(density, &w[..j])?);
    }
    Ok(best)
}

#[derive(Clone, Debug)]
pub struct MaximalReport {
    pub id: String,
    pub levels: Vec<f64>,
    pub superlevel: Vec<f64>,
    pub vitali_bound: Vec<f64>,
    pub dyadic_bound: Vec<f64>,
    pub vitali_ok: bool,
    pub dyadic_ok: bool,
    pub nonincreasing: bool,
}

/// Geometric level grid t_j = 2^{j-1}, j = 0..count.
pub fn level_grid(count: usize) -> Vec<f64> {
    (0..count).map(|j| 2f64.powi(j as i32 - 1)).collect()
}

/// Test inputs for the weak (1,1) check: `structured` alternating point masses
/// at structured directions and cylinder indicators of depth 1..=3, then
/// `random` non-negative step functions at depth min(depth, 4).
pub fn weak_11_inputs(
    model: &GroupModel,
    depth: usize,
    structured: usize,
    random: usize,
    seed: u64,
) -> Vec<(String, TestMeasure)> {
    let dirs = structured_directions(model, 2, structured, seed);
    let mut out = Vec::with_capacity(structured + random);
    for i in 0..structured {
        if i % 2 == 0 {
            let v = &dirs[(i / 2) % dirs.len()];
            out.push((format!("point:{}", v.format(model)), TestMeasure::Point(v.clone())));
        } else {
            let d = (1 + i % 3).min(depth);
            let words = model.words_of_length(d);
            let w = &words[(i / 2) % words.len()];
            let f = StepFunction::indicator(model, d, w);
            out.push((format!("indicator:{}", model.format_word(w)), TestMeasure::Function(f)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..random {
        let f = StepFunction::random_nonnegative(model, depth.min(4), &mut rng);
        out.push((format!("random:{i}"), TestMeasure::Function(f)));
    }
    out
}

/// Superlevel masses mu{M nu > t} at resolution M (M nu is constant on depth-M
/// atoms once M is at least the measure's own depth).
pub fn check_weak_11(
    density: &ConformalDensity,
    id: &str,
    nu: &TestMeasure,
    levels: &[f64],
    depth: usize,
) -> Result<MaximalReport> {
    let model = density.model();
    if let TestMeasure::Function(f) = nu {
        if f.depth() > depth {
            return Err(Error::Resolution(format!(
                "measure resolved at depth {}, report requested at depth {depth}",
                f.depth()
            )));
        }
    }
    let ix = AtomIndexer::new(model, depth);
    let atoms = ix.words();
    // Averages over every cylinder of depth <= M, shared by all atoms.
    let mut avg: Vec<Vec<f64>> = Vec::with_capacity(depth + 1);
    for j in 0..=depth {
        let words = model.words_of_length(j);
        let row: Result<Vec<f64>> = words.par_iter().map(|w| nu.average(density, w)).collect();
        avg.push(row?);
    }
    let ixs: Vec<AtomIndexer> = (0..=depth).map(|j| AtomIndexer::new(model, j)).collect();
    let maxf: Vec<f64> = atoms
        .iter()
        .map(|a| (0..=depth).map(|j| avg[j][ixs[j].index_of(&a[..j])]).fold(0.0, f64::max))
        .collect();
    let masses: Result<Vec<f64>> = atoms.iter().map(|a| density.mass(a)).collect();
    let masses = masses?;
    let total = nu.total_mass(density)?;
    let dim = density.alpha() / density.epsilon();
    let vitali = (dim * 3f64.ln()).exp();
    let mut superlevel = Vec::new();
    let mut vb = Vec::new();
    let mut db = Vec::new();
    for &t in levels {
        superlevel.push(kahan_sum(maxf.iter().zip(&masses).filter(|(m, _)| **m > t).map(|(_, w)| *w)));
        vb.push(vitali * total / t);
        db.push(total / t);
    }
    let tol = 1e-12;
    let vitali_ok = superlevel.iter().zip(&vb).all(|(s, b)| *s <= b + tol);
    let dyadic_ok = superlevel.iter().zip(&db).all(|(s, b)| *s <= b + tol);
    let mut order: Vec<usize> = (0..levels.len()).collect();
    order.sort_by(|&a, &b| levels[a].total_cmp(&levels[b]));
    let nonincreasing = order.windows(2).all(|p| superlevel[p[1]] <= superlevel[p[0]] + tol);
    Ok(MaximalReport {
        id: id.to_string(),
        levels: levels.to_vec(),
        superlevel,
        vitali_bound: vb,
        dyadic_bound: db,
        vitali_ok,
        dyadic_ok,
        nonincreasing,
    })
}

#[derive(Clone, Debug)]
pub struct NontangentialReport {
    pub value: f64,
    pub maximal: f64,
    /// value / maximal: the empirical constant C_0.
    pub c0: f64,
    pub members: usize,
    pub empty: bool,
}

/// sup of |P_0 f| over domain members with R <= d(x,y) <= N, against M f(v).
pub fn nontangential_maximal(
    density: &ConformalDensity,
    f: &StepFunction,
    dom: &ApproachDomain,
    r: usize,
    n_max: usize,
    cap: u64,
) -> Result<NontangentialReport> {
    if n_max < r {
        return Err(Error::Precondition(format!("search radius {n_max} below exterior radius {r}")));
    }
    let model = density.model();
    let mut ys = Vec::new();
    for n in r.max(1)..=n_max {
        ys.extend(domain_members(model, dom, n, cap)?);
    }
    let vals: Result<Vec<f64>> =
        ys.par_iter().map(|y| Ok(normalized_poisson(density, f, y)?.norm())).collect();
    let value = vals?.into_iter().fold(0.0, f64::max);
    let maximal = maximal_function(density, &TestMeasure::Function(f.clone()), &dom.target, n_max)?;
    Ok(NontangentialReport {
        value,
        maximal,
        c0: if maximal > 0.0 { value / maximal } else { 0.0 },
        members: ys.len(),
        empty: ys.is_empty(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub n: usize,
    pub y: Vec<Letter>,
    pub in_domain: bool,
    pub p0f: f64,
    pub error: f64,
}

#[derive(Clone, Debug)]
pub struct FatouTrace {
    pub rows: Vec<TraceRow>,
    pub limit: f64,
    /// Largest error among rows with |y| >= n, for each n in the schedule.
    pub envelope: Vec<(usize, f64)>,
}

impl FatouTrace {
    pub fn max_error_from(&self, n: usize) -> f64 {
        self.rows.iter().filter(|r| r.n >= n).map(|r| r.error).fold(0.0, f64::max)
    }

    pub fn envelope_nonincreasing(&self) -> bool {
        self.envelope.windows(2).all(|p| p[1].1 <= p[0].1 + 1e-15)
    }
}

/// |P_0 f(y) - f(v)| over every domain member y with n_min <= |y| <= n_max.
pub fn fatou_experiment(
    density: &ConformalDensity,
    f: &dyn BoundaryFunction,
    dom: &ApproachDomain,
    n_min: usize,
    n_max: usize,
    cap: u64,
) -> Result<FatouTrace> {
    let model = density.model();
    let limit_point = dom.target.letters(f.resolution().max(1));
    let limit = f.value_on(&limit_point).re;
    let mut ys = Vec::new();
    for n in n_min.max(1)..=n_max {
        ys.extend(domain_members(model, dom, n, cap)?);
    }
    let rows: Result<Vec<TraceRow>> = ys
        .par_iter()
        .map(|y| {
            let p = normalized_poisson(density, f, y)?.re;
            Ok(TraceRow { n: y.len(), y: y.word().to_vec(), in_domain: true, p0f: p, error: (p - limit).abs() })
        })
        .collect();
    let rows = rows?;
    let mut envelope = Vec::new();
    for n in n_min.max(1)..=n_max {
        let e = rows.iter().filter(|r| r.n >= n).map(|r| r.error).fold(0.0, f64::max);
        envelope.push((n, e));
    }
    Ok(FatouTrace { rows, limit, envelope })
}

/// Indicator of cyl(w) as a partition function (w and its siblings along the way).
pub fn cylinder_indicator(model: &GroupModel, w: &[Letter]) -> PartitionFunction {
    let one = Complex64::new(1.0, 0.0);
    let zero = Complex64::new(0.0, 0.0);
    let mut pieces = vec![(w.to_vec(), one)];
    for j in 0..w.len() {
        let prev = if j == 0 { None } else { Some(w[j - 1]) };
        for l in model.children(prev) {
            if l != w[j] {
                let mut c = w[..j].to_vec();
                c.push(l);
                pieces.push((c, zero));
            }
        }
    }
    PartitionFunction::new(model, pieces).expect("siblings partition the boundary")
}

/// Truncation xi_M = sum_{j<M} c_j 1_{A_j} + c_M 1_{cyl(v_M)}, with
/// A_j = cyl(v_j) minus cyl(v_{j+1}) and c_j = e^{alpha j/2}/(1+j).
pub fn structured_probe_function(model: &GroupModel, v: &Direction, m: usize) -> PartitionFunction {
    let axis = v.letters(m);
    let c = |j: usize| Complex64::new((model.alpha() * j as f64 / 2.0).exp() / (1.0 + j as f64), 0.0);
    let mut pieces = vec![(axis.clone(), c(m))];
    for j in 0..m {
        let prev = if j == 0 { None } else { Some(axis[j - 1]) };
        for l in model.children(prev) {
            if l != axis[j] {
                let mut w = axis[..j].to_vec();
                w.push(l);
                pieces.push((w, c(j)));
            }
        }
    }
    PartitionFunction::new(model, pieces).expect("strata partition the boundary")
}

pub enum ProbeFamily {
    /// The unbounded L^2 family, truncated at depth N.
    Structured,
    /// A bounded function; the probe is then inconclusive by construction.
    Bounded(PartitionFunction),
}

#[derive(Clone, Debug)]
pub struct ProbeReport {
    pub ns: Vec<usize>,
    pub ratios: Vec<f64>,
    pub truncation: usize,
    pub l2_norm: f64,
    pub sup_norm: f64,
    pub inconclusive: bool,
}

impl ProbeReport {
    pub fn ratio_at(&self, n: usize) -> Option<f64> {
        self.ns.iter().position(|&k| k == n).map(|i| self.ratios[i])
    }

    pub fn nondecreasing_from(&self, n0: usize) -> bool {
        let tail: Vec<f64> = self.ns.iter().zip(&self.ratios).filter(|(n, _)| **n >= n0).map(|(_, r)| *r).collect();
        tail.windows(2).all(|p| p[1] >= p[0])
    }
}

/// r_n = <pi(gamma_n)1, xi>/phi(gamma_n) = P_0 xi(gamma_n) along the prefixes
/// gamma_n of v, 1 <= n <= N.
pub fn fatou_counterexample_probe(
    density: &ConformalDensity,
    family: &ProbeFamily,
    v: &Direction,
    n_max: usize,
) -> Result<ProbeReport> {
    let model = density.model();
    let (xi, inconclusive) = match family {
        ProbeFamily::Structured => (structured_probe_function(model, v, n_max), false),
        ProbeFamily::Bounded(f) => (f.clone(), true),
    };
    let ns: Vec<usize> = (1..=n_max).collect();
    let ratios: Result<Vec<f64>> = ns
        .par_iter()
        .map(|&n| {
            let y = model.element_unchecked(v.letters(n));
            Ok(normalized_poisson(density, &xi, &y)?.re)
        })
        .collect();
    Ok(ProbeReport {
        ns,
        ratios: ratios?,
        truncation: n_max,
        l2_norm: xi.l2_norm(density)?,
        sup_norm: xi.sup_norm(),
        inconclusive,
    })
}

/// Largest |P_0 1_{cyl w}(y) - 1_{cyl w}(v)| over all cylinders w of depth <= m,
/// evaluated at one y (used to scan many indicators at once).
pub fn worst_indicator_error(
    density: &ConformalDensity,
    y: &GroupElement,
    v: &Direction,
    m: usize,
) -> Result<(f64, Vec<Letter>)> {
    let model = density.model();
    let phi = crate::poisson_kernel::phi_extension(density, y)?;
    let s = density.alpha() / 2.0;
    let mut worst = (0.0, Vec::new());
    for d in 0..=m {
        for w in model.words_of_length(d) {
            let p = crate::poisson_kernel::cylinder_kernel_integral(density, y.word(), &w, s)? / phi;
            let target = if common_prefix(&v.letters(d), &w) == d { 1.0 } else { 0.0 };
            let e = (p - target).abs();
            if e > worst.0 {
                worst = (e, w);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary_measure::exact_free_group_density;

    fn setup() -> (GroupModel, ConformalDensity) {
        let m = GroupModel::parse("free:2").unwrap();
        let d = exact_free_group_density(&m, &m.identity(), 12).unwrap();
        (m, d)
    }

    #[test]
    fn domain_examples() {
        let (m, _) = setup();
        let v = Direction::parse(&m, "a^inf").unwrap();
        let dom = ApproachDomain::new(&m, v.clone(), 1.0, 1.0).unwrap();
        for n in 1..10 {
            assert!(in_domain(&m, &dom, &m.element(vec![0; n]).unwrap()).unwrap());
            assert!(!in_domain(&m, &dom, &m.element(vec![2; n]).unwrap()).unwrap());
        }
        let wide = ApproachDomain::new(&m, v, 1e6, 1.0).unwrap();
        for y in m.words_of_length(1) {
            assert!(in_domain(&m, &wide, &m.element(y).unwrap()).unwrap());
        }
        assert!(matches!(in_domain(&m, &dom, &m.identity()), Err(Error::UndefinedDirection)));
    }

    #[test]
    fn enumeration_matches_brute_force() {
        let (m, _) = setup();
        let v = Direction::parse(&m, "(aB)^inf").unwrap();
        let dom = ApproachDomain::new(&m, v, 2.0, 1.0).unwrap();
        for n in 1..=7 {
            let fast = domain_members(&m, &dom, n, 1_000_000).unwrap();
            let mut brute: Vec<GroupElement> = m
                .words_of_length(n)
                .into_iter()
                .map(|w| m.element(w).unwrap())
                .filter(|y| in_domain(&m, &dom, y).unwrap())
                .collect();
            brute.sort();
            assert_eq!(fast, brute, "n = {n}");
        }
    }

    #[test]
    fn maximal_examples() {
        let (m, d) = setup();
        let f = StepFunction::indicator(&m, 1, &[0]);
        let nu = TestMeasure::Function(f);
        let va = Direction::parse(&m, "a^inf").unwrap();
        let vb = Direction::parse(&m, "b^inf").unwrap();
        assert!((maximal_function(&d, &nu, &va, 6).unwrap() - 1.0).abs() < 1e-15);
        assert!((maximal_function(&d, &nu, &vb, 6).unwrap() - 0.25).abs() < 1e-15);
        let point = TestMeasure::Point(va.clone());
        assert!((maximal_function(&d, &point, &va, 4).unwrap() - 4.0 * 27.0).abs() < 1e-9);
        let rep = check_weak_11(&d, "ind", &nu, &[0.5], 4).unwrap();
        assert!((rep.superlevel[0] - 0.25).abs() < 1e-15 && rep.vitali_ok && rep.dyadic_ok);
    }

    #[test]
    fn radial_error_decays_like_inverse_length() {
        let (m, d) = setup();
        let f = StepFunction::indicator(&m, 1, &[0]);
        for n in 1..20 {
            let y = m.element(vec![0; n]).unwrap();
            let p = normalized_poisson(&d, &f, &y).unwrap().re;
            assert!((1.0 - p - 1.5 / (n as f64 + 2.0)).abs() < 1e-13);
        }
    }

    #[test]
    fn probe_grows_and_bounded_is_inconclusive() {
        let (m, d) = setup();
        let v = Direction::parse(&m, "a^inf").unwrap();
        let rep = fatou_counterexample_probe(&d, &ProbeFamily::Structured, &v, 20).unwrap();
        let (r5, r10, r20) = (rep.ratio_at(5).unwrap(), rep.ratio_at(10).unwrap(), rep.ratio_at(20).unwrap());
        assert!(r20 > r10 && r10 > r5 && r20 > 2.0);
        let one = cylinder_indicator(&m, &[]);
        let flat = fatou_counterexample_probe(&d, &ProbeFamily::Bounded(one), &v, 10).unwrap();
        assert!(flat.inconclusive && flat.ratios.iter().all(|r| (r - 1.0).abs() < 1e-13));
    }
}
