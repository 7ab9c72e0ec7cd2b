//! Poisson kernel powers, the transforms P_lambda and the normalized square-root
//! transform, the Harish-Chandra function, its degree-one estimates, and
//! Dirac-Weierstrass tail certificates.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::boundary_measure::{ConformalDensity, Direction};
use crate::boundary_rep::BoundaryFunction;
use crate::error::{Error, Result};
use crate::group_model::{common_prefix, Backend, Combine, GroupElement, Letter};
use crate::numeric::{kahan_sum, log_sum_exp, ComplexSum};

/// P(x,y,v)^s: e^{s beta_v(x,y)} for the closed-form density, otherwise
/// (mu_y(cyl v)/mu_x(cyl v))^{s/alpha} from cylinder masses.
pub fn poisson_kernel_power(
    density: &ConformalDensity,
    x: &[Letter],
    y: &[Letter],
    v: &[Letter],
    s: f64,
) -> Result<f64> {
    let model = density.model();
    let beta = crate::boundary_measure::busemann(model, v, x, y)?;
    if density.is_exact() {
        return Ok((s * beta as f64).exp());
    }
    let my = density.mass_at(y, v)?;
    let mx = density.mass_at(x, v)?;
    if !(mx > 0.0 && my > 0.0) {
        return Err(Error::Resolution(format!(
            "cylinder {} carries no mass, kernel ratio undefined",
            model.format_word(v)
        )));
    }
    Ok(((my.ln() - mx.ln()) * s / density.alpha()).exp())
}

fn exact_log_mass(density: &ConformalDensity, depth: usize) -> f64 {
    density.reference_log_mass(depth).expect("closed-form density")
}

/// Integral over cyl(w) of e^{s beta_v(e,y)} for the free density at the
/// identity, split by the common-prefix length with y.
fn free_cylinder_integral(density: &ConformalDensity, y: &[Letter], w: &[Letter], s: f64) -> f64 {
    let n = y.len();
    let l = common_prefix(w, y);
    if l < w.len() {
        return (s * (2.0 * l as f64 - n as f64) + exact_log_mass(density, w.len())).exp();
    }
    let Backend::Free { rank } = density.model().backend() else { unreachable!() };
    let q = (2 * rank as usize - 1) as f64;
    let terms: Vec<f64> = (w.len()..=n)
        .map(|j| {
            let log_stratum = if j == n {
                exact_log_mass(density, n)
            } else if j == 0 {
                (1.0 - 1.0 / (2.0 * rank as f64)).ln()
            } else {
                exact_log_mass(density, j) + (1.0 - 1.0 / q).ln()
            };
            s * (2.0 * j as f64 - n as f64) + log_stratum
        })
        .collect();
    log_sum_exp(&terms).exp()
}

/// Integral over cyl(w) of P(x,y,v)^s d mu_x(v), x the density's basepoint.
pub fn cylinder_kernel_integral(density: &ConformalDensity, y: &[Letter], w: &[Letter], s: f64) -> Result<f64> {
    let model = density.model();
    let x = density.basepoint().word();
    if density.is_exact_at_identity() {
        return Ok(free_cylinder_integral(density, y, w, s));
    }
    if density.is_exact() {
        return exact_integral_refined(density, x, y, w, s);
    }
    let need = (model.distance_words(x, y) + x.len() + 1).max(w.len());
    if need > density.max_depth() {
        return Err(Error::InsufficientDepth { required: need, available: density.max_depth() });
    }
    let mut parts = Vec::new();
    let mut buf = w.to_vec();
    collect_tabulated(density, x, y, &mut buf, need, s, &mut parts)?;
    Ok(kahan_sum(parts))
}

fn collect_tabulated(
    density: &ConformalDensity,
    x: &[Letter],
    y: &[Letter],
    buf: &mut Vec<Letter>,
    need: usize,
    s: f64,
    out: &mut Vec<f64>,
) -> Result<()> {
    if buf.len() == need {
        let mx = density.mass_at(x, buf)?;
        if mx > 0.0 {
            out.push(mx * poisson_kernel_power(density, x, y, buf, s)?);
        }
        return Ok(());
    }
    for l in density.model().children(buf.last().copied()) {
        buf.push(l);
        collect_tabulated(density, x, y, buf, need, s, out)?;
        buf.pop();
    }
    Ok(())
}

fn exact_integral_refined(density: &ConformalDensity, x: &[Letter], y: &[Letter], w: &[Letter], s: f64) -> Result<f64> {
    let model = density.model();
    let bxy = crate::boundary_measure::busemann(model, w, x, y);
    let bex = crate::boundary_measure::busemann(model, w, &[], x);
    match (bxy, bex) {
        (Ok(a), Ok(b)) => Ok((s * a as f64 + density.alpha() * b as f64 + exact_log_mass(density, w.len())).exp()),
        (Err(Error::InsufficientDepth { .. }), _) | (_, Err(Error::InsufficientDepth { .. })) => {
            let mut parts = Vec::new();
            for l in model.children(w.last().copied()) {
                let mut c = w.to_vec();
                c.push(l);
                parts.push(exact_integral_refined(density, x, y, &c, s)?);
            }
            Ok(kahan_sum(parts))
        }
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}

/// P_{lambda} f(y) = integral of P(x,y,v)^{alpha(lambda+1/2)} f(v) d mu_x(v).
pub fn p_lambda_transform(
    density: &ConformalDensity,
    f: &dyn BoundaryFunction,
    y: &GroupElement,
    lambda: f64,
) -> Result<Complex64> {
    let model = density.model();
    if f.model() != model || y.backend() != model.backend() {
        return Err(Error::ModelMismatch { left: model.name(), right: f.model().name() });
    }
    let s = density.alpha() * (lambda + 0.5);
    if density.is_exact_at_identity() {
        if let Some(step) = f.as_step() {
            return Ok(stratified_transform(density, step, y.word(), s));
        }
    }
    let mut pieces = Vec::new();
    f.for_each_piece(&mut |w, z| pieces.push((w.to_vec(), z)));
    let parts: Result<Vec<Complex64>> = pieces
        .par_iter()
        .map(|(w, z)| Ok(z * cylinder_kernel_integral(density, y.word(), w, s)?))
        .collect();
    let mut acc = ComplexSum::new();
    for p in parts? {
        acc.add(p);
    }
    Ok(acc.value())
}

/// Sum over common-prefix strata S_j of e^{s(2j-n)} times the integral of f over
/// S_j, with the stratum integrals read from prefix integrals of f.
fn stratified_transform(
    density: &ConformalDensity,
    f: &crate::boundary_rep::StepFunction,
    y: &[Letter],
    s: f64,
) -> Complex64 {
    let n = y.len();
    let m = f.depth();
    let tail_value = if n > m { Some(f.value_at(y)) } else { None };
    let prefix = |j: usize| -> Complex64 {
        if j <= m {
            f.exact_prefix_integral(density, &y[..j])
        } else {
            tail_value.unwrap() * density.reference_mass(&y[..j]).unwrap()
        }
    };
    let mut acc = ComplexSum::new();
    let mut current = prefix(0);
    for j in 0..=n {
        let k = (s * (2.0 * j as f64 - n as f64)).exp();
        if j == n {
            acc.add(current * k);
        } else {
            let next = prefix(j + 1);
            acc.add((current - next) * k);
            current = next;
        }
    }
    acc.value()
}

/// phi-extension P_0 1(y).
pub fn phi_extension(density: &ConformalDensity, y: &GroupElement) -> Result<f64> {
    cylinder_kernel_integral(density, y.word(), &[], density.alpha() / 2.0)
}

/// Harish-Chandra function phi_x(gamma) = <pi_x(gamma)1, 1> = P_0 1(gamma x).
pub fn harish_chandra(density: &ConformalDensity, gamma: &GroupElement) -> Result<f64> {
    let model = density.model();
    if gamma.backend() != model.backend() {
        return Err(Error::ModelMismatch { left: model.name(), right: gamma.backend().to_string() });
    }
    let y = model.mul_words(gamma.word(), density.basepoint().word());
    cylinder_kernel_integral(density, &y, &[], density.alpha() / 2.0)
}

/// Closed-form free-group phi at word length n, for rank k.
pub fn free_phi(rank: u8, n: usize) -> f64 {
    let model = crate::group_model::GroupModel::free(rank).expect("rank >= 2");
    let density = crate::boundary_measure::exact_free_group_density(&model, &model.identity(), 0).expect("free");
    let y: Vec<Letter> = vec![0; n];
    free_cylinder_integral(&density, &y, &[], density.alpha() / 2.0)
}

/// Normalized square-root transform P_0 f(y) / P_0 1(y).
pub fn normalized_poisson(density: &ConformalDensity, f: &dyn BoundaryFunction, y: &GroupElement) -> Result<Complex64> {
    let num = p_lambda_transform(density, f, y, 0.0)?;
    Ok(num / phi_extension(density, y)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HarishChandraEstimateFit {
    /// (slope, intercept) of the lower polynomial.
    pub q1: (f64, f64),
    pub q2: (f64, f64),
    pub exterior_radius: usize,
    pub max_n: usize,
    pub witnesses: usize,
}

impl HarishChandraEstimateFit {
    pub fn q1_at(&self, n: f64) -> f64 {
        self.q1.0 * n + self.q1.1
    }

    pub fn q2_at(&self, n: f64) -> f64 {
        self.q2.0 * n + self.q2.1
    }
}

/// A few words of length n spread across the sphere.
pub fn sphere_representatives(model: &crate::group_model::GroupModel, n: usize) -> Vec<Vec<Letter>> {
    let mut reps: Vec<Vec<Letter>> = Vec::new();
    for pick in 0..3usize {
        let mut w: Vec<Letter> = Vec::with_capacity(n);
        for _ in 0..n {
            let kids = model.children(w.last().copied());
            let l = match pick {
                0 => kids[0],
                1 => kids[kids.len() - 1],
                _ => kids[kids.len() / 2],
            };
            w.push(l);
        }
        if !reps.contains(&w) {
            reps.push(w);
        }
    }
    reps
}

/// Best line a n + b with a, b >= floor lying above (upper) or below (lower)
/// every point, by vertex enumeration of the two-variable linear program.
fn fit_line(points: &[(f64, f64)], upper: bool, floor: f64) -> Option<(f64, f64)> {
    let feasible = |a: f64, b: f64| {
        a >= floor
            && b >= floor
            && points.iter().all(|&(n, r)| {
                let v = a * n + b;
                let tol = 1e-12 * r.abs().max(1.0);
                if upper { v >= r - tol } else { v <= r + tol }
            })
    };
    let sum_n: f64 = points.iter().map(|p| p.0).sum();
    let count = points.len() as f64;
    let objective = |a: f64, b: f64| a * sum_n + b * count;
    let mut candidates = vec![(floor, floor)];
    for (i, &(n1, r1)) in points.iter().enumerate() {
        candidates.push((floor, r1 - floor * n1));
        candidates.push(((r1 - floor) / n1.max(1e-300), floor));
        for &(n2, r2) in &points[i + 1..] {
            if n1 != n2 {
                let a = (r2 - r1) / (n2 - n1);
                candidates.push((a, r1 - a * n1));
            }
        }
    }
    let mut best: Option<(f64, f64)> = None;
    for (a, b) in candidates {
        if !feasible(a, b) {
            continue;
        }
        let better = match best {
            None => true,
            Some((ba, bb)) => {
                if upper { objective(a, b) < objective(ba, bb) } else { objective(a, b) > objective(ba, bb) }
            }
        };
        if better {
            best = Some((a, b));
        }
    }
    best
}

/// Degree-one polynomials Q1 <= phi(n) e^{alpha n/2} <= Q2 on sphere
/// representatives with R <= n <= N.
pub fn fit_harish_chandra_estimates(
    density: &ConformalDensity,
    r: usize,
    n_max: usize,
) -> Result<HarishChandraEstimateFit> {
    if r < 1 || n_max <= r {
        return Err(Error::Precondition(format!("need N > R >= 1, got R = {r}, N = {n_max}")));
    }
    let model = density.model();
    let words: Vec<(usize, Vec<Letter>)> = (r..=n_max)
        .flat_map(|n| sphere_representatives(model, n).into_iter().map(move |w| (n, w)))
        .collect();
    let points: Result<Vec<(f64, f64)>> = words
        .par_iter()
        .map(|(n, w)| {
            let phi = harish_chandra(density, &model.element_unchecked(w.clone()))?;
            Ok((*n as f64, phi * (density.alpha() * *n as f64 / 2.0).exp()))
        })
        .collect();
    let points = points?;
    let scale = points.iter().map(|p| p.1).fold(0.0, f64::max);
    let floor = 1e-9 * scale.max(1e-300);
    let infeasible = |what: &str| Error::EstimateViolation(format!("no positive degree-one {what} bound exists"));
    let (a2, b2) = fit_line(&points, true, floor).ok_or_else(|| infeasible("upper"))?;
    let (mut a1, mut b1) = fit_line(&points, false, floor).ok_or_else(|| infeasible("lower"))?;
    if a1 > a2 {
        a1 = a2;
        b1 = points.iter().map(|&(n, v)| v - a2 * n).fold(f64::INFINITY, f64::min);
    }
    let pad = 1e-12;
    let fit = HarishChandraEstimateFit {
        q1: (a1 * (1.0 - pad), b1 * (1.0 - pad)),
        q2: (a2 * (1.0 + pad), b2 * (1.0 + pad)),
        exterior_radius: r,
        max_n: n_max,
        witnesses: points.len(),
    };
    let ok = fit.q1.0 > 0.0
        && fit.q1.1 > 0.0
        && points.iter().all(|&(n, v)| fit.q1_at(n) <= v && v <= fit.q2_at(n))
        && fit.q1_at(r as f64) <= fit.q2_at(r as f64);
    if !ok {
        return Err(infeasible("two-sided"));
    }
    Ok(fit)
}

#[derive(Clone, Debug)]
pub struct DiracWeierstrassReport {
    /// t_j: mass of the normalized kernel outside the ball, per approach point.
    pub tails: Vec<f64>,
    /// Kernel mass inside plus outside the ball, per approach point.
    pub totals: Vec<f64>,
    pub positive: bool,
    pub unit_integral: bool,
    pub monotone: bool,
    pub below_threshold: bool,
}

/// Cylinders making up the closed visual ball {v : (v,v0)_e >= T}, T = -ln(r)/eps,
/// and its complement.
pub fn visual_ball_partition(
    model: &crate::group_model::GroupModel,
    v0: &Direction,
    r: f64,
    epsilon: f64,
) -> (Vec<Vec<Letter>>, Vec<Vec<Letter>>) {
    let t2 = (-2.0 * r.ln() / epsilon - 1e-9).ceil();
    if t2 <= 0.0 {
        return (vec![Vec::new()], Vec::new());
    }
    let t2 = t2 as usize;
    let depth = t2.div_ceil(2);
    let axis = v0.letters(depth);
    let mut inside = vec![axis.clone()];
    let mut outside = Vec::new();
    for j in 0..depth {
        let prev = if j == 0 { None } else { Some(axis[j - 1]) };
        for l in model.children(prev) {
            if l == axis[j] {
                continue;
            }
            let mut c = axis[..j].to_vec();
            c.push(l);
            let merges = matches!(model.combine(model.inverse_letter(axis[j]), l), Combine::Merge(_));
            if 2 * j + usize::from(merges) >= t2 {
                inside.push(c);
            } else {
                outside.push(c);
            }
        }
    }
    (inside, outside)
}

pub fn certify_dirac_weierstrass(
    density: &ConformalDensity,
    v0: &Direction,
    r: f64,
    approach: &[GroupElement],
    threshold: f64,
) -> Result<DiracWeierstrassReport> {
    let model = density.model();
    if !density.basepoint().is_identity() {
        return Err(Error::Unsupported("tail certificates are computed at the identity basepoint".into()));
    }
    let mut last_len = None;
    for y in approach {
        let radial = y.word() == v0.letters(y.len()).as_slice();
        let increasing = last_len.map_or(true, |l| y.len() > l);
        if !radial || !increasing {
            return Err(Error::UnsupportedApproach(format!(
                "{} is not the next prefix of {}",
                model.format(y),
                v0.format(model)
            )));
        }
        last_len = Some(y.len());
    }
    let (inside, outside) = visual_ball_partition(model, v0, r, density.epsilon());
    let s = density.alpha() / 2.0;
    let mut tails = Vec::new();
    let mut totals = Vec::new();
    let mut positive = true;
    for y in approach {
        let phi = phi_extension(density, y)?;
        let integrate = |cyls: &[Vec<Letter>]| -> Result<f64> {
            let parts: Result<Vec<f64>> =
                cyls.iter().map(|c| cylinder_kernel_integral(density, y.word(), c, s)).collect();
            Ok(kahan_sum(parts?) / phi)
        };
        let a = integrate(&inside)?;
        let b = integrate(&outside)?;
        positive &= phi > 0.0 && a >= 0.0 && b >= 0.0;
        tails.push(b);
        totals.push(a + b);
    }
    let unit_integral = totals.iter().all(|t| (t - 1.0).abs() <= 1e-12);
    let monotone = tails.windows(2).skip(1).all(|p| p[1] <= p[0] * (1.0 + 1e-15));
    let below_threshold = tails.last().map_or(true, |&t| t <= threshold);
    Ok(DiracWeierstrassReport { tails, totals, positive, unit_integral, monotone, below_threshold })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary_measure::exact_free_group_density;
    use crate::boundary_rep::StepFunction;
    use crate::group_model::GroupModel;

    fn setup() -> (GroupModel, ConformalDensity) {
        let m = GroupModel::parse("free:2").unwrap();
        let d = exact_free_group_density(&m, &m.identity(), 12).unwrap();
        (m, d)
    }

    #[test]
    fn kernel_power_examples() {
        let (m, d) = setup();
        let g = m.parse_element("abA").unwrap();
        let s = d.alpha() / 2.0;
        let up = poisson_kernel_power(&d, &[], g.word(), &m.parse_element("abAb").unwrap().into_word(), s).unwrap();
        assert!((up - 3f64.powf(1.5)).abs() < 1e-12);
        let down = poisson_kernel_power(&d, &[], g.word(), &[2, 2], s).unwrap();
        assert!((down - 3f64.powf(-1.5)).abs() < 1e-14);
        assert_eq!(poisson_kernel_power(&d, g.word(), g.word(), &[], 0.7).unwrap(), 1.0);
    }

    #[test]
    fn phi_closed_form_and_generic_agree() {
        let (m, d) = setup();
        for n in 0..=8usize {
            let g = m.element(vec![2; n]).unwrap();
            let closed = (n as f64 + 2.0) * 3f64.powf(-(n as f64) / 2.0) / 2.0;
            let phi = harish_chandra(&d, &g).unwrap();
            assert!((phi - closed).abs() < 1e-14 * closed, "n = {n}");
            let one = StepFunction::constant(&m, 2, 1.0);
            let pieces = crate::boundary_rep::PartitionFunction::new(
                &m,
                one.atoms().into_iter().map(|w| (w, Complex64::new(1.0, 0.0))).collect(),
            )
            .unwrap();
            let generic = p_lambda_transform(&d, &pieces, &g, 0.0).unwrap().re;
            assert!((generic - closed).abs() < 1e-14);
        }
        assert!((free_phi(2, 1) - 1.5 / 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn full_kernel_integrates_to_one() {
        let (m, d) = setup();
        let one = StepFunction::constant(&m, 0, 1.0);
        for s in ["a", "aBa", "bbAB"] {
            let g = m.parse_element(s).unwrap();
            let v = p_lambda_transform(&d, &one, &g, 0.5).unwrap();
            assert!((v.re - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn normalized_transform_of_indicator_increases() {
        let (m, d) = setup();
        let f = StepFunction::indicator(&m, 1, &[0]);
        let mut prev = 0.0;
        for n in 1..12 {
            let y = m.element(vec![0; n]).unwrap();
            let v = normalized_poisson(&d, &f, &y).unwrap().re;
            assert!(v > prev && v < 1.0);
            prev = v;
        }
    }

    #[test]
    fn basepoint_other_than_identity() {
        let (m, d) = setup();
        let x = m.parse_element("b").unwrap();
        let dx = d.rebased(&x);
        let g = m.parse_element("aa").unwrap();
        // phi_x(gamma) = phi_e(x^-1 gamma x)
        let lhs = harish_chandra(&dx, &g).unwrap();
        let direct = harish_chandra(&d, &m.parse_element("Baab").unwrap()).unwrap();
        assert!((lhs - direct).abs() < 1e-14, "{lhs} vs {direct}");
    }

    #[test]
    fn hc_fit_f2() {
        let (_, d) = setup();
        let fit = fit_harish_chandra_estimates(&d, 1, 14).unwrap();
        assert!((fit.q1.0 - 0.5).abs() < 1e-9 && (fit.q1.1 - 1.0).abs() < 1e-9);
        assert!((fit.q2.0 - 0.5).abs() < 1e-9 && (fit.q2.1 - 1.0).abs() < 1e-9);
        assert!(fit_harish_chandra_estimates(&d, 0, 5).is_err());
    }

    #[test]
    fn dirac_weierstrass_radial() {
        let (m, d) = setup();
        let v0 = Direction::parse(&m, "a^inf").unwrap();
        let ys: Vec<_> = (1..=10).map(|j| m.element(vec![0; j]).unwrap()).collect();
        let rep = certify_dirac_weierstrass(&d, &v0, (-1f64).exp(), &ys, 0.13).unwrap();
        assert!(rep.positive && rep.unit_integral && rep.monotone && rep.below_threshold, "{rep:?}");
        // Outside cyl(a) the normalized kernel keeps mass 3/(2(j+2)).
        for (j, t) in (1..=10).zip(&rep.tails) {
            assert!((t - 1.5 / (j as f64 + 2.0)).abs() < 1e-14);
        }
        let full = certify_dirac_weierstrass(&d, &v0, 1.0, &ys, 1e-2).unwrap();
        assert!(full.tails.iter().all(|&t| t == 0.0));
        let bad = vec![m.parse_element("b").unwrap()];
        assert!(matches!(
            certify_dirac_weierstrass(&d, &v0, 0.5, &bad, 1e-2),
            Err(Error::UnsupportedApproach(_))
        ));
    }
}
