//! Coefficient-decay battery: annulus averages F_{n,rho} and their dual L^1
//! bound, the cumulative RD-type sums S(n) against an assembled cubic, and the
//! equidistribution experiment for annulus sums of squared coefficients.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::boundary_measure::{shadow_direction, ConformalDensity};
use crate::boundary_rep::{atom_masses, matrix_coefficient, StepFunction};
use crate::error::{Error, Result};
use crate::group_model::{annulus_bounds, AtomIndexer, GroupElement, GroupModel, Letter};
use crate::numeric::{complex_sum, kahan_sum, KahanSum};
use crate::poisson_kernel::{
    fit_harish_chandra_estimates, harish_chandra, normalized_poisson, p_lambda_transform, poisson_kernel_power,
    HarishChandraEstimateFit,
};

/// Attached to every equidistribution report.
pub const ARITHMETIC_SPECTRUM_CAVEAT: &str = "word-metric lengths are integers (arithmetic length spectrum); \
the trace is an empirical limsup proxy over a finite window, not an instance of the non-arithmetic \
equidistribution theorem";

/// Elements per parallel batch when contributions are merged in order.
const BATCH: usize = 4096;

/// F_{n,rho} = |C_{n,rho}|^-1 sum over the annulus of pi_x(gamma)1 / phi_x(gamma).
#[derive(Clone, Debug)]
pub struct AnnulusAverage {
    pub n: usize,
    pub rho: f64,
    pub count: u128,
    pub function: StepFunction,
    pub sup: f64,
    /// Integral of F against mu_x; 1 up to rounding.
    pub integral: f64,
}

fn check_rho(n: usize, rho: f64) -> Result<()> {
    if !rho.is_finite() || rho < 0.0 {
        return Err(Error::EmptyAnnulus { n, rho });
    }
    Ok(())
}

fn annulus_elements(model: &GroupModel, n: usize, rho: f64, cap: u64) -> Result<Vec<GroupElement>> {
    let els = model.enumerate_annulus(n, rho, cap)?;
    if els.is_empty() {
        return Err(Error::EmptyAnnulus { n, rho });
    }
    Ok(els)
}

/// Value of the kernel P(x,y,.)^{alpha/2} on each piece of a partition of
/// cyl(c), refining only where the Busemann function is not yet determined.
fn kernel_pieces(
    density: &ConformalDensity,
    x: &[Letter],
    y: &[Letter],
    c: &mut Vec<Letter>,
    resolution: usize,
    out: &mut Vec<(usize, Vec<Letter>, f64)>,
    weight: f64,
) -> Result<()> {
    match poisson_kernel_power(density, x, y, c, density.alpha() / 2.0) {
        Ok(k) => {
            out.push((c.len(), c.clone(), k * weight));
            Ok(())
        }
        Err(Error::InsufficientDepth { required, .. }) => {
            if c.len() >= resolution {
                return Err(Error::Resolution(format!(
                    "kernel needs depth {required}, the average is resolved to {resolution}"
                )));
            }
            for l in density.model().children(c.last().copied()) {
                c.push(l);
                kernel_pieces(density, x, y, c, resolution, out, weight)?;
                c.pop();
            }
            Ok(())
        }
        Err(e) => Err(e),
    }
}

/// Cylinder additions making up K(x, gamma x, .)/phi(gamma): the strata
/// cyl(y_{<j} l), l != y_j, along the geodesic to y = gamma x, plus cyl(y).
fn exact_contributions(
    density: &ConformalDensity,
    gamma: &GroupElement,
    resolution: usize,
) -> Result<Vec<(usize, Vec<Letter>, f64)>> {
    let model = density.model();
    let x = density.basepoint().word();
    let y = model.mul_words(gamma.word(), x);
    let inv_phi = 1.0 / harish_chandra(density, gamma)?;
    let mut out = Vec::new();
    for j in 0..y.len() {
        for l in model.children(if j == 0 { None } else { Some(y[j - 1]) }) {
            if l == y[j] {
                continue;
            }
            let mut c = y[..j].to_vec();
            c.push(l);
            kernel_pieces(density, x, &y, &mut c, resolution, &mut out, inv_phi)?;
        }
    }
    let mut c = y.clone();
    kernel_pieces(density, x, &y, &mut c, resolution, &mut out, inv_phi)?;
    Ok(out)
}

/// Tabulated densities: the kernel is a mass ratio, so it is read atom by atom.
fn dense_contributions(
    density: &ConformalDensity,
    gamma: &GroupElement,
    ix: &AtomIndexer,
) -> Result<Vec<(usize, Vec<Letter>, f64)>> {
    let model = density.model();
    let x = density.basepoint().word();
    let y = model.mul_words(gamma.word(), x);
    let inv_phi = 1.0 / harish_chandra(density, gamma)?;
    (0..ix.count())
        .map(|i| {
            let w = ix.word_at(i);
            let k = poisson_kernel_power(density, x, &y, &w, density.alpha() / 2.0)?;
            Ok((w.len(), w, k * inv_phi))
        })
        .collect()
}

/// Exact F_{n,rho} at the given resolution, which must exceed n + rho + |x|.
pub fn annulus_average(
    density: &ConformalDensity,
    n: usize,
    rho: f64,
    resolution: usize,
    cap: u64,
) -> Result<AnnulusAverage> {
    check_rho(n, rho)?;
    let model = density.model();
    let (_, hi) = annulus_bounds(n, rho);
    let need = hi + density.basepoint().len() + 1;
    if resolution < need {
        return Err(Error::Resolution(format!(
            "F_(n,rho) with n + rho = {hi} needs resolution at least {need}, got {resolution}"
        )));
    }
    if !density.resolves(resolution) {
        return Err(Error::Resolution(format!(
            "density resolved to depth {}, average needs {resolution}",
            density.max_depth()
        )));
    }
    let els = annulus_elements(model, n, rho, cap)?;
    let count = els.len() as u128;
    let levels: Vec<AtomIndexer> = (0..=resolution).map(|d| AtomIndexer::new(model, d)).collect();
    let mut acc: Vec<Vec<KahanSum>> = levels.iter().map(|ix| vec![KahanSum::new(); ix.count()]).collect();
    for batch in els.chunks(BATCH) {
        let parts: Result<Vec<Vec<(usize, Vec<Letter>, f64)>>> = batch
            .par_iter()
            .map(|g| {
                if density.is_exact() {
                    exact_contributions(density, g, resolution)
                } else {
                    dense_contributions(density, g, &levels[resolution])
                }
            })
            .collect();
        for part in parts? {
            for (d, w, v) in part {
                acc[d][levels[d].index_of(&w)].add(v);
            }
        }
    }
    // push cylinder additions down to the atoms
    let mut values: Vec<f64> = vec![acc[0][0].value()];
    for d in 1..=resolution {
        values = (0..levels[d].count())
            .map(|i| {
                let w = levels[d].word_at(i);
                values[levels[d - 1].index_of(&w)] + acc[d][i].value()
            })
            .collect();
    }
    let scale = 1.0 / count as f64;
    let values: Vec<Complex64> = values.iter().map(|v| Complex64::new(v * scale, 0.0)).collect();
    let masses = atom_masses(density, &levels[resolution])?;
    let integral = kahan_sum(values.iter().zip(&masses).map(|(v, m)| v.re * m));
    let sup = values.iter().map(|v| v.re).fold(0.0, f64::max);
    let function = StepFunction::from_values(model, resolution, values)?;
    Ok(AnnulusAverage { n, rho, count, function, sup, integral })
}

/// Smallest resolution accepted by `annulus_average`.
pub fn minimal_resolution(density: &ConformalDensity, n: usize, rho: f64) -> usize {
    annulus_bounds(n, rho).1 + density.basepoint().len() + 1
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualL1Report {
    pub n: usize,
    pub rho: f64,
    /// |C|^-1 sum of P_0 f over the orbit points of the annulus.
    pub averaged: Complex64,
    /// <f, F_{n,rho}> against mu_x.
    pub pairing: Complex64,
    pub agreement: f64,
    pub l1: f64,
    pub m: f64,
    pub holds: bool,
    pub consistent: bool,
}

/// |C|^-1 |sum P_0 f(gamma x)| <= M ||f||_1 with M = sup F_{n,rho}, and the
/// pairing identity with F_{n,rho} checked to 1e-10.
pub fn dual_l1_check(density: &ConformalDensity, f: &StepFunction, avg: &AnnulusAverage, cap: u64) -> Result<DualL1Report> {
    let model = density.model();
    let x = density.basepoint().word();
    let terms: Vec<Result<Complex64>> = model.par_map_annulus(avg.n, avg.rho, cap, |g| {
        let y = model.element_unchecked(model.mul_words(g, x));
        normalized_poisson(density, f, &y)
    })?;
    let terms: Result<Vec<Complex64>> = terms.into_iter().collect();
    let averaged = complex_sum(terms?) / avg.count as f64;
    let pairing = f.inner(&avg.function, density)?;
    let agreement = (averaged - pairing).norm();
    let l1 = f.l1_norm(density)?;
    let holds = averaged.norm() <= avg.sup * l1 * (1.0 + 1e-12) + 1e-15;
    let consistent = agreement <= 1e-10 * averaged.norm().max(1.0);
    Ok(DualL1Report { n: avg.n, rho: avg.rho, averaged, pairing, agreement, l1, m: avg.sup, holds, consistent })
}

/// Ingredients of the cubic bound on S(n): the upper Harish-Chandra line Q2,
/// the uniform bound M on sphere averages and C' >= |S_k| e^{-alpha k}.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdConstants {
    pub q2: (f64, f64),
    pub m: f64,
    pub c_prime: f64,
    pub n_max: usize,
}

impl RdConstants {
    /// Coefficients c0..c3 of Q(n) = M C' sum_{k<=n} Q2(k)^2.
    pub fn cubic(&self) -> [f64; 4] {
        let (a, b) = self.q2;
        let s = self.m * self.c_prime;
        [s * b * b, s * (a * a / 6.0 + a * b + b * b), s * (a * a / 2.0 + a * b), s * a * a / 3.0]
    }

    pub fn q(&self, n: usize) -> f64 {
        let c = self.cubic();
        let n = n as f64;
        ((c[3] * n + c[2]) * n + c[1]) * n + c[0]
    }
}

/// Fits Q2 on spheres 1..=n_max (its value at 0 is lifted to cover phi(e) = 1)
/// and measures M over the sphere averages F_{k,0}, k <= n_max.
pub fn rd_constants(density: &ConformalDensity, n_max: usize, cap: u64) -> Result<RdConstants> {
    let model = density.model();
    let fit = fit_harish_chandra_estimates(density, 1, n_max.max(2))?;
    let q2 = (fit.q2.0, fit.q2.1.max(1.0));
    let mut m: f64 = 0.0;
    for k in 0..=n_max {
        let avg = annulus_average(density, k, 0.0, minimal_resolution(density, k, 0.0), cap)?;
        m = m.max(avg.sup);
    }
    let alpha = density.alpha();
    let c_prime = model
        .sphere_sizes(n_max)
        .iter()
        .enumerate()
        .map(|(k, &s)| s as f64 * (-alpha * k as f64).exp())
        .fold(0.0, f64::max);
    Ok(RdConstants { q2, m, c_prime, n_max })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdRow {
    pub n: usize,
    pub sphere_sum: f64,
    /// S(n), cumulative over the ball.
    pub s: f64,
    pub q: f64,
    /// S(n) / (1+n)^3.
    pub cubic_ratio: f64,
    pub certified: bool,
}

#[derive(Clone, Debug)]
pub struct RdReport {
    pub constants: RdConstants,
    pub rows: Vec<RdRow>,
}

impl RdReport {
    pub fn certified(&self) -> bool {
        self.rows.iter().all(|r| r.certified)
    }

    pub fn monotone(&self) -> bool {
        self.rows.windows(2).all(|p| p[1].s >= p[0].s)
    }

    /// S(n)/(1+n)^3 never rises above its value at the start of the window.
    pub fn ratio_within_envelope(&self, from: usize) -> bool {
        let mut rows = self.rows.iter().filter(|r| r.n >= from);
        let Some(first) = rows.next() else { return true };
        rows.all(|r| r.cubic_ratio <= first.cubic_ratio * (1.0 + 1e-12))
    }

    pub fn max_cubic_ratio(&self) -> f64 {
        self.rows.iter().map(|r| r.cubic_ratio).fold(0.0, f64::max)
    }
}

fn unit_check(density: &ConformalDensity, xi: &StepFunction) -> Result<()> {
    let norm = xi.l2_norm(density)?;
    if (norm - 1.0).abs() > 1e-10 {
        return Err(Error::Precondition(format!("xi must have unit L^2 norm, got {norm}")));
    }
    Ok(())
}

/// Sum over the sphere of radius k of |<pi(gamma)1, xi>|^2 = |P_0 xi(gamma x)|^2.
fn sphere_coefficient_sum(density: &ConformalDensity, xi: &StepFunction, k: usize, cap: u64) -> Result<f64> {
    let model = density.model();
    let x = density.basepoint().word();
    let terms: Vec<Result<f64>> = model.par_map_annulus(k, 0.0, cap, |g| {
        let y = model.element_unchecked(model.mul_words(g, x));
        Ok(p_lambda_transform(density, xi, &y, 0.0)?.norm_sqr())
    })?;
    let terms: Result<Vec<f64>> = terms.into_iter().collect();
    Ok(kahan_sum(terms?))
}

/// S(n) = sum over |gamma| <= n of |<pi(gamma)1, xi>|^2 for every n <= n_max,
/// certified against the cubic assembled from `constants`.
pub fn rd_sum_with(
    density: &ConformalDensity,
    xi: &StepFunction,
    constants: &RdConstants,
    n_max: usize,
    cap: u64,
) -> Result<RdReport> {
    unit_check(density, xi)?;
    if n_max > constants.n_max {
        return Err(Error::Precondition(format!(
            "constants cover n <= {}, asked for {n_max}",
            constants.n_max
        )));
    }
    let mut running = KahanSum::new();
    let mut rows = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        let sphere_sum = sphere_coefficient_sum(density, xi, n, cap)?;
        running.add(sphere_sum);
        let s = running.value();
        let q = constants.q(n);
        rows.push(RdRow {
            n,
            sphere_sum,
            s,
            q,
            cubic_ratio: s / ((1 + n) as f64).powi(3),
            certified: s <= q * (1.0 + 1e-12),
        });
    }
    Ok(RdReport { constants: *constants, rows })
}

pub fn rd_sum(density: &ConformalDensity, xi: &StepFunction, n_max: usize, cap: u64) -> Result<RdReport> {
    unit_check(density, xi)?;
    let constants = rd_constants(density, n_max, cap)?;
    rd_sum_with(density, xi, &constants, n_max, cap)
}

/// Per-sphere sums of |<pi(gamma) f, g>|^2 for k in lo..=hi.
fn sphere_pair_sums(
    density: &ConformalDensity,
    f: &StepFunction,
    g: &StepFunction,
    lo: usize,
    hi: usize,
    cap: u64,
) -> Result<Vec<f64>> {
    let model = density.model();
    (lo..=hi)
        .map(|k| {
            let terms: Vec<Result<f64>> = model.par_map_annulus(k, 0.0, cap, |w| {
                Ok(matrix_coefficient(density, &model.element_unchecked(w.to_vec()), f, g)?.norm_sqr())
            })?;
            let terms: Result<Vec<f64>> = terms.into_iter().collect();
            Ok(kahan_sum(terms?))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoblinRow {
    pub n: usize,
    pub count: u128,
    pub raw_sum: f64,
    pub q: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug)]
pub struct RoblinReport {
    pub rho: f64,
    pub window: (usize, usize),
    pub fitted_constant: f64,
    pub q2: (f64, f64),
    pub rows: Vec<RoblinRow>,
    pub max_ratio: f64,
    pub slack: f64,
    pub certified: bool,
    pub caveat: &'static str,
}

/// Unnormalized r(n) with constant 1: annulus sum over Q2(n)^2 e^{-alpha(n+rho)} |C|.
fn roblin_raw(
    density: &ConformalDensity,
    fit: &HarishChandraEstimateFit,
    f: &StepFunction,
    g: &StepFunction,
    rho: f64,
    window: (usize, usize),
    cap: u64,
) -> Result<Vec<(usize, u128, f64, f64)>> {
    let model = density.model();
    let lo = annulus_bounds(window.0, rho).0;
    let hi = annulus_bounds(window.1, rho).1;
    let guard = model.annulus_count(window.1, rho);
    if guard > cap as u128 {
        return Err(Error::CapExceeded { predicted: guard, cap });
    }
    let sums = sphere_pair_sums(density, f, g, lo, hi, cap)?;
    let sizes = model.sphere_sizes(hi);
    let alpha = density.alpha();
    Ok((window.0..=window.1)
        .map(|n| {
            let (a, b) = annulus_bounds(n, rho);
            let raw = kahan_sum((a..=b).map(|k| sums[k - lo]));
            let count: u128 = (a..=b).map(|k| sizes[k]).sum();
            let q = fit.q2_at(n as f64).powi(2) * (-alpha * (n as f64 + rho)).exp() * count as f64;
            (n, count, raw, q)
        })
        .collect())
}

fn roblin_fit(density: &ConformalDensity, window: (usize, usize)) -> Result<HarishChandraEstimateFit> {
    fit_harish_chandra_estimates(density, 1, window.1.max(2))
}

/// The constant inside Q, fitted on f = g = 1 so that the calibration trace
/// peaks at exactly 1 over the window; frozen for every other pair.
pub fn fit_roblin_constant(density: &ConformalDensity, rho: f64, window: (usize, usize), cap: u64) -> Result<f64> {
    let one = StepFunction::constant(density.model(), 0, 1.0);
    let fit = roblin_fit(density, window)?;
    let raw = roblin_raw(density, &fit, &one, &one, rho, window, cap)?;
    let peak = raw.iter().map(|&(_, _, s, q)| s / q).fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::EmptySupport);
    }
    Ok(1.0 / peak)
}

/// r(n) = K sum_{C_{n,rho}} |<pi(gamma) f, g>|^2 / (Q(n) ||f||^2 ||g||^2) over
/// the window, with max r <= 1 + slack as the limsup proxy.
#[allow(clippy::too_many_arguments)]
pub fn roblin_experiment(
    density: &ConformalDensity,
    f: &StepFunction,
    g: &StepFunction,
    rho: f64,
    window: (usize, usize),
    fitted_constant: f64,
    slack: f64,
    cap: u64,
) -> Result<RoblinReport> {
    if rho < 1.0 {
        return Err(Error::Precondition(format!("rho must be at least 1, got {rho}")));
    }
    if window.0 > window.1 {
        return Err(Error::Precondition(format!("empty window {}..{}", window.0, window.1)));
    }
    let nf = f.l2_norm(density)?;
    let ng = g.l2_norm(density)?;
    if nf <= 0.0 || ng <= 0.0 {
        return Err(Error::Precondition("f and g must have positive L^2 norm".into()));
    }
    let fit = roblin_fit(density, window)?;
    let raw = roblin_raw(density, &fit, f, g, rho, window, cap)?;
    let norm = (nf * ng).powi(2);
    let rows: Vec<RoblinRow> = raw
        .into_iter()
        .map(|(n, count, raw_sum, q)| RoblinRow {
            n,
            count,
            raw_sum,
            q: q / fitted_constant,
            ratio: raw_sum * fitted_constant / (q * norm),
        })
        .collect();
    let max_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    Ok(RoblinReport {
        rho,
        window,
        fitted_constant,
        q2: fit.q2,
        rows,
        max_ratio,
        slack,
        certified: max_ratio <= 1.0 + slack,
        caveat: ARITHMETIC_SPECTRUM_CAVEAT,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquidistributionRow {
    pub n: usize,
    pub count: u128,
    /// e^{-alpha n} times the number of gamma in the ball with both shadow
    /// directions in the chosen cylinders.
    pub normalized: f64,
    /// mu_x(cyl u) mu_x(cyl w).
    pub target: f64,
    pub ratio: f64,
}

/// Counts gamma with |gamma| <= n, w_x^{gamma^-1 x} in cyl(u) and
/// w_x^{gamma x} in cyl(w), for n in the window.
pub fn equidistribution_trace(
    density: &ConformalDensity,
    u: &[Letter],
    w: &[Letter],
    window: (usize, usize),
    cap: u64,
) -> Result<Vec<EquidistributionRow>> {
    let model = density.model();
    let x = density.basepoint();
    let ball: u128 = model.sphere_sizes(window.1).iter().sum();
    if ball > cap as u128 {
        return Err(Error::CapExceeded { predicted: ball, cap });
    }
    let target = density.mass_at(x.word(), u)? * density.mass_at(x.word(), w)?;
    let hits_in = |word: &[Letter], cyl: &[Letter]| -> Result<bool> {
        let y = model.element_unchecked(model.mul_words(word, x.word()));
        let dir = shadow_direction(model, x, &y)?;
        Ok(dir.letters(cyl.len()) == cyl)
    };
    let mut running: u128 = 0;
    let mut rows = Vec::new();
    for k in 1..=window.1 {
        let flags: Vec<Result<bool>> = model.par_map_annulus(k, 0.0, cap, |g| {
            let g_inv = model.inverse_word(g);
            Ok(hits_in(&g_inv, u)? && hits_in(g, w)?)
        })?;
        for f in flags {
            running += f? as u128;
        }
        if k >= window.0 {
            let normalized = running as f64 * (-density.alpha() * k as f64).exp();
            rows.push(EquidistributionRow { n: k, count: running, normalized, target, ratio: normalized / target });
        }
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeakInequalityReport {
    pub checked: usize,
    pub violations: usize,
    /// max |<pi(gamma) f, g>| / (||f||_inf ||g||_inf phi(gamma)).
    pub worst_ratio: f64,
}

/// Degree-zero weak inequality |<pi(gamma) f, g>| <= ||f||_inf ||g||_inf phi(gamma)
/// over the ball of radius n.
pub fn check_weak_inequality(
    density: &ConformalDensity,
    f: &StepFunction,
    g: &StepFunction,
    n: usize,
    cap: u64,
) -> Result<WeakInequalityReport> {
    let model = density.model();
    let scale = f.linf_norm() * g.linf_norm();
    let mut ratios = Vec::new();
    for k in 0..=n {
        let r: Vec<Result<f64>> = model.par_map_annulus(k, 0.0, cap, |w| {
            let gamma = model.element_unchecked(w.to_vec());
            let c = matrix_coefficient(density, &gamma, f, g)?.norm();
            Ok(c / (scale * harish_chandra(density, &gamma)?))
        })?;
        for x in r {
            ratios.push(x?);
        }
    }
    let worst_ratio = ratios.iter().copied().fold(0.0, f64::max);
    let violations = ratios.iter().filter(|&&r| r > 1.0 + 1e-12).count();
    Ok(WeakInequalityReport { checked: ratios.len(), violations, worst_ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary_measure::exact_free_group_density;
    use crate::group_model::DEFAULT_CAP;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (GroupModel, ConformalDensity) {
        let m = GroupModel::parse("free:2").unwrap();
        let d = exact_free_group_density(&m, &m.identity(), 0).unwrap();
        (m, d)
    }

    #[test]
    fn identity_annulus_is_constant_one() {
        let (_, d) = setup();
        let avg = annulus_average(&d, 0, 0.0, 1, DEFAULT_CAP).unwrap();
        assert_eq!(avg.count, 1);
        assert!((avg.sup - 1.0).abs() < 1e-14);
        assert!(avg.function.values().iter().all(|v| (v.re - 1.0).abs() < 1e-14));
        assert!(matches!(annulus_average(&d, 3, -1.0, 8, DEFAULT_CAP), Err(Error::EmptyAnnulus { .. })));
        assert!(matches!(annulus_average(&d, 3, 1.0, 4, DEFAULT_CAP), Err(Error::Resolution(_))));
    }

    #[test]
    fn annulus_average_normalized_and_dual() {
        let (m, d) = setup();
        for n in 2..=6 {
            let avg = annulus_average(&d, n, 1.0, n + 2, DEFAULT_CAP).unwrap();
            assert!((avg.integral - 1.0).abs() < 1e-12, "{}", avg.integral);
            assert!(avg.function.values().iter().all(|v| v.re >= 0.0));
        }
        let avg = annulus_average(&d, 6, 1.0, 8, DEFAULT_CAP).unwrap();
        let f = StepFunction::indicator(&m, 1, &[0]);
        let rep = dual_l1_check(&d, &f, &avg, DEFAULT_CAP).unwrap();
        assert!((rep.l1 - 0.25).abs() < 1e-14);
        assert!(rep.holds && rep.consistent, "{rep:?}");
        let one = StepFunction::constant(&m, 0, 1.0);
        let rep = dual_l1_check(&d, &one, &avg, DEFAULT_CAP).unwrap();
        assert!((rep.averaged.re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nonidentity_basepoint_average() {
        let (m, d) = setup();
        let x = m.parse_element("ab").unwrap();
        let dx = d.rebased(&x);
        let avg = annulus_average(&dx, 3, 1.0, minimal_resolution(&dx, 3, 1.0), DEFAULT_CAP).unwrap();
        assert!((avg.integral - 1.0).abs() < 1e-12, "{}", avg.integral);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = StepFunction::random_nonnegative(&m, 2, &mut rng);
        let rep = dual_l1_check(&dx, &f, &avg, DEFAULT_CAP).unwrap();
        assert!(rep.holds && rep.consistent, "{rep:?}");
    }

    #[test]
    fn rd_sum_of_constant_matches_closed_form() {
        let (m, d) = setup();
        let one = StepFunction::constant(&m, 0, 1.0);
        let rep = rd_sum(&d, &one, 8, DEFAULT_CAP).unwrap();
        // S(n) = 1 + sum_{1<=k<=n} (4/3) 3^k ((k+2)/2)^2 3^-k
        let mut s = 1.0;
        for row in &rep.rows {
            if row.n > 0 {
                s += (row.n as f64 + 2.0).powi(2) / 3.0;
            }
            assert!((row.s - s).abs() < 1e-10 * s, "{} {}", row.s, s);
        }
        assert!(rep.certified() && rep.monotone() && rep.ratio_within_envelope(5));
        assert!((rep.constants.c_prime - 4.0 / 3.0).abs() < 1e-12);
        assert!(rd_sum(&d, &one.scale(2.0), 3, DEFAULT_CAP).is_err());
    }

    #[test]
    fn weak_inequality_and_roblin_calibration() {
        let (m, d) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = StepFunction::random_nonnegative(&m, 2, &mut rng);
        let g = StepFunction::random_nonnegative(&m, 2, &mut rng);
        let rep = check_weak_inequality(&d, &f, &g, 5, DEFAULT_CAP).unwrap();
        assert_eq!(rep.violations, 0);
        let window = (3, 6);
        let k = fit_roblin_constant(&d, 1.0, window, DEFAULT_CAP).unwrap();
        let one = StepFunction::constant(&m, 0, 1.0);
        let cal = roblin_experiment(&d, &one, &one, 1.0, window, k, 0.0, DEFAULT_CAP).unwrap();
        assert!((cal.max_ratio - 1.0).abs() < 1e-12);
        let h = StepFunction::indicator(&m, 1, &[0]).scale(2.0);
        let rep = roblin_experiment(&d, &h, &h, 1.0, window, k, 0.25, DEFAULT_CAP).unwrap();
        assert!(rep.certified, "{:?}", rep.rows);
        let rows = equidistribution_trace(&d, &[0], &[0], (4, 7), DEFAULT_CAP).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.ratio > 0.0));
    }
}
