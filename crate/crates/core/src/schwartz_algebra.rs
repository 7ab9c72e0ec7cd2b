//! Harish-Chandra-Schwartz space S_t: weighted sup norms, convolution, the
//! kernel sum bound behind closure under convolution, and l^2 boundedness.

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;

use crate::boundary_measure::ConformalDensity;
use crate::error::{Error, Result};
use crate::group_model::{Combine, ContinuationTable, GroupElement, GroupModel, Letter};
use crate::numeric::{kahan_sum, ComplexSum};
use crate::poisson_kernel::{harish_chandra, sphere_representatives};

/// Decay degree below which sum |C_n| phi(n)^2 (1+n)^{-t} diverges: the
/// Harish-Chandra estimates have degree one, so the summand is ~ n^2 (1+n)^{-t}.
pub fn critical_degree(density: &ConformalDensity) -> Result<f64> {
    crate::poisson_kernel::fit_harish_chandra_estimates(density, 1, 8)?;
    let hc_degree = 1.0;
    Ok(2.0 * hc_degree + 1.0)
}

/// phi(gamma), tabulated by length when phi is constant on spheres.
#[derive(Clone, Debug)]
pub struct PhiWeights {
    density: ConformalDensity,
    by_length: Vec<f64>,
}

impl PhiWeights {
    pub fn new(density: &ConformalDensity, max_len: usize) -> Result<Self> {
        let mut by_length = Vec::new();
        if density.is_exact_at_identity() {
            let model = density.model();
            for n in 0..=max_len {
                by_length.push(harish_chandra(density, &model.element_unchecked(vec![0; n]))?);
            }
        }
        Ok(Self { density: density.clone(), by_length })
    }

    pub fn density(&self) -> &ConformalDensity {
        &self.density
    }

    pub fn sphere_constant(&self) -> bool {
        !self.by_length.is_empty()
    }

    pub fn phi_len(&self, n: usize) -> Option<f64> {
        self.by_length.get(n).copied()
    }

    pub fn phi(&self, w: &[Letter]) -> Result<f64> {
        if let Some(v) = self.phi_len(w.len()) {
            return Ok(v);
        }
        harish_chandra(&self.density, &self.density.model().element_unchecked(w.to_vec()))
    }
}

/// Finitely supported function on the group with a decay degree t.
#[derive(Clone, Debug, PartialEq)]
pub struct SchwartzElement {
    model: GroupModel,
    t: f64,
    entries: Vec<(GroupElement, Complex64)>,
}

impl SchwartzElement {
    /// Sorts by shortlex and adds up repeated elements.
    pub fn from_entries(model: &GroupModel, t: f64, mut entries: Vec<(GroupElement, Complex64)>) -> Result<Self> {
        for (g, _) in &entries {
            if g.backend() != model.backend() {
                return Err(Error::ModelMismatch { left: model.name(), right: g.backend().to_string() });
            }
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut merged: Vec<(GroupElement, Complex64)> = Vec::with_capacity(entries.len());
        let mut acc = ComplexSum::new();
        let mut current: Option<GroupElement> = None;
        for (g, z) in entries {
            if current.as_ref() != Some(&g) {
                if let Some(prev) = current.take() {
                    merged.push((prev, acc.value()));
                }
                acc = ComplexSum::new();
                current = Some(g);
            }
            acc.add(z);
        }
        if let Some(prev) = current {
            merged.push((prev, acc.value()));
        }
        merged.retain(|(_, z)| *z != Complex64::new(0.0, 0.0));
        Ok(Self { model: model.clone(), t, entries: merged })
    }

    pub fn zero(model: &GroupModel, t: f64) -> Self {
        Self { model: model.clone(), t, entries: Vec::new() }
    }

    pub fn delta(model: &GroupModel, g: &GroupElement, t: f64) -> Self {
        Self { model: model.clone(), t, entries: vec![(g.clone(), Complex64::new(1.0, 0.0))] }
    }

    pub fn sphere_indicator(model: &GroupModel, n: usize, t: f64, cap: u64) -> Result<Self> {
        let support = model.enumerate_annulus(n, 0.0, cap)?;
        let entries = support.into_iter().map(|g| (g, Complex64::new(1.0, 0.0))).collect();
        Self::from_entries(model, t, entries)
    }

    pub fn ball_indicator(model: &GroupModel, r: usize, t: f64, cap: u64) -> Result<Self> {
        let support = model.enumerate_ball(r, cap)?;
        let entries = support.into_iter().map(|g| (g, Complex64::new(1.0, 0.0))).collect();
        Self::from_entries(model, t, entries)
    }

    /// Real values uniform in [-1, 1) on a random subset of the ball of radius r.
    pub fn random<R: Rng>(model: &GroupModel, r: usize, t: f64, density: f64, rng: &mut R, cap: u64) -> Result<Self> {
        let ball = model.enumerate_ball(r, cap)?;
        let mut entries = Vec::new();
        for g in ball {
            if rng.gen::<f64>() < density {
                entries.push((g, Complex64::new(rng.gen_range(-1.0..1.0), 0.0)));
            }
        }
        Self::from_entries(model, t, entries)
    }

    pub fn model(&self) -> &GroupModel {
        &self.model
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn entries(&self) -> &[(GroupElement, Complex64)] {
        &self.entries
    }

    pub fn value(&self, g: &GroupElement) -> Complex64 {
        match self.entries.binary_search_by(|e| e.0.cmp(g)) {
            Ok(i) => self.entries[i].1,
            Err(_) => Complex64::new(0.0, 0.0),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        let entries = self.entries.iter().map(|(g, z)| (g.clone(), z * c)).collect();
        Self { model: self.model.clone(), t: self.t, entries }
    }

    pub fn with_t(&self, t: f64) -> Self {
        Self { t, ..self.clone() }
    }

    /// f*(gamma) = conj(f(gamma^-1)).
    pub fn involution(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(g, z)| (self.model.element_unchecked(self.model.inverse_word(g.word())), z.conj()))
            .collect();
        Self::from_entries(&self.model, self.t, entries).expect("same model")
    }

    pub fn l2_norm(&self) -> f64 {
        kahan_sum(self.entries.iter().map(|(_, z)| z.norm_sqr())).sqrt()
    }

    /// max |f(gamma)| (1+|gamma|)^t / phi(gamma).
    pub fn schwartz_norm(&self, weights: &PhiWeights) -> Result<f64> {
        let mut best = 0.0f64;
        for (g, z) in &self.entries {
            let w = (1.0 + g.len() as f64).powf(self.t) / weights.phi(g.word())?;
            best = best.max(z.norm() * w);
        }
        Ok(best)
    }
}

/// f1 * f2 (g) = sum_gamma f1(gamma) f2(gamma^-1 g).
pub fn convolve(f1: &SchwartzElement, f2: &SchwartzElement, cap: u64) -> Result<SchwartzElement> {
    if f1.model != f2.model {
        return Err(Error::ModelMismatch { left: f1.model.name(), right: f2.model.name() });
    }
    if f1.t != f2.t {
        return Err(Error::Precondition(format!("decay degrees differ: {} vs {}", f1.t, f2.t)));
    }
    Ok(SchwartzElement { t: f1.t, ..convolve_entries(f1, f2, cap)? })
}

fn convolve_entries(f1: &SchwartzElement, f2: &SchwartzElement, cap: u64) -> Result<SchwartzElement> {
    let pairs = f1.entries.len() as u128 * f2.entries.len() as u128;
    if pairs > cap as u128 {
        return Err(Error::CapExceeded { predicted: pairs, cap });
    }
    let model = &f1.model;
    // Products come back in (i, j) order; the stable sort keeps that order
    // within each output element, so the sums do not depend on scheduling.
    let chunks: Vec<Vec<(Vec<Letter>, Complex64)>> = f1
        .entries
        .par_iter()
        .map(|(g1, z1)| {
            f2.entries.iter().map(|(g2, z2)| (model.mul_words(g1.word(), g2.word()), z1 * z2)).collect()
        })
        .collect();
    let mut all: Vec<(Vec<Letter>, Complex64)> = chunks.into_iter().flatten().collect();
    all.sort_by(|a, b| crate::group_model::shortlex_cmp(&a.0, &b.0));
    let mut entries: Vec<(GroupElement, Complex64)> = Vec::new();
    let mut i = 0;
    while i < all.len() {
        let mut acc = ComplexSum::new();
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            acc.add(all[j].1);
            j += 1;
        }
        let v = acc.value();
        if v != Complex64::new(0.0, 0.0) {
            entries.push((model.element_unchecked(all[i].0.clone()), v));
        }
        i = j;
    }
    Ok(SchwartzElement { model: model.clone(), t: f1.t, entries })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trick2Report {
    pub g_len: usize,
    pub t: f64,
    pub radius: usize,
    /// S_N(g,t) = sum over |gamma| <= N of phi(g gamma^-1) phi(gamma) (1+|gamma|)^{-t}.
    pub partial: f64,
    /// Certified bound on the remaining terms (infinite when divergent, None
    /// when no closed form is available for the backend).
    pub tail: Option<f64>,
    pub phi_g: f64,
    pub ratio: f64,
    pub ratio_upper: Option<f64>,
    pub divergent: bool,
}

/// t-independent part of the length-k layer: sum over |eta| = k of
/// phi(g eta) phi(k). Counts eta by how much of g it cancels.
fn layer_weight(model: &GroupModel, table: &ContinuationTable, weights: &PhiWeights, g: &[Letter], k: usize) -> f64 {
    let l = g.len();
    let g_inv = model.inverse_word(g);
    let phi = |n: usize| weights.phi_len(n).expect("phi tabulated far enough");
    let mut parts = Vec::new();
    for c in 0..=k.min(l) {
        if c == k {
            parts.push(phi(l - k));
        } else if c == l {
            let prev = if l == 0 { None } else { Some(g_inv[l - 1]) };
            parts.push(table.count(prev, k - l) as f64 * phi(k - l));
        } else {
            let prev = if c == 0 { None } else { Some(g_inv[c - 1]) };
            let left = g[l - 1 - c];
            for b in model.children(prev) {
                if b == g_inv[c] {
                    continue;
                }
                let merged = matches!(model.combine(left, b), Combine::Merge(_));
                let len = l + k - 2 * c - usize::from(merged);
                parts.push(table.count_starting(b, k - c) as f64 * phi(len));
            }
        }
    }
    kahan_sum(parts) * phi(k)
}

/// Upper or lower bound for sum_{u >= u0} u^{-p}, p > 1.
fn power_tail(u0: f64, p: f64, upper: bool) -> f64 {
    let integral = u0.powf(1.0 - p) / (p - 1.0);
    if upper { integral + u0.powf(-p) } else { integral }
}

pub fn trick2_sum(
    weights: &PhiWeights,
    g: &GroupElement,
    t: f64,
    radius: usize,
    cap: u64,
) -> Result<Trick2Report> {
    let density = weights.density();
    let model = density.model();
    if radius < g.len() + 2 {
        return Err(Error::Precondition(format!("radius {radius} must be at least |g| + 2 = {}", g.len() + 2)));
    }
    let t0 = critical_degree(density)?;
    let divergent = t <= t0;
    let phi_g = weights.phi(g.word())?;
    let (partial, tail) = if weights.sphere_constant() && weights.phi_len(radius + 4 + g.len()).is_some() {
        let table = ContinuationTable::new(model, radius + 4);
        let u: Vec<f64> = (0..=radius + 4).map(|k| layer_weight(model, &table, weights, g.word(), k)).collect();
        let partial = kahan_sum((0..=radius).map(|k| u[k] * (1.0 + k as f64).powf(-t)));
        let tail = if divergent {
            Some(f64::INFINITY)
        } else {
            quadratic_tail(&u, radius, t)
        };
        (partial, tail)
    } else {
        let gammas = model.enumerate_ball(radius, cap)?;
        let terms: Result<Vec<f64>> = gammas
            .par_iter()
            .map(|gm| {
                let h = model.mul_words(g.word(), &model.inverse_word(gm.word()));
                Ok(weights.phi(&h)? * weights.phi(gm.word())? * (1.0 + gm.len() as f64).powf(-t))
            })
            .collect();
        let partial = kahan_sum(terms?);
        (partial, if divergent { Some(f64::INFINITY) } else { None })
    };
    let ratio = partial / phi_g;
    Ok(Trick2Report {
        g_len: g.len(),
        t,
        radius,
        partial,
        tail,
        phi_g,
        ratio,
        ratio_upper: tail.map(|b| (partial + b) / phi_g),
        divergent,
    })
}

/// Beyond |g| the layer weight is an exact quadratic in k; interpolate it from
/// three layers, confirm on a fourth, and bound the remaining power sums.
fn quadratic_tail(u: &[f64], radius: usize, t: f64) -> Option<f64> {
    let ks = [radius + 1, radius + 2, radius + 3];
    // Quadratic in s = 1 + k through three points.
    let s: Vec<f64> = ks.iter().map(|&k| 1.0 + k as f64).collect();
    let y: Vec<f64> = ks.iter().map(|&k| u[k]).collect();
    let d1 = (y[1] - y[0]) / (s[1] - s[0]);
    let d2 = (y[2] - y[1]) / (s[2] - s[1]);
    let a = (d2 - d1) / (s[2] - s[0]);
    let b = d1 - a * (s[0] + s[1]);
    let c = y[0] - a * s[0] * s[0] - b * s[0];
    let check_s = 2.0 + (radius + 3) as f64;
    let predicted = a * check_s * check_s + b * check_s + c;
    if (predicted - u[radius + 4]).abs() > 1e-9 * u[radius + 4].abs().max(1e-300) {
        return None;
    }
    let u0 = 2.0 + radius as f64;
    let term = |coef: f64, p: f64| coef * power_tail(u0, p, coef >= 0.0);
    Some(term(a, t - 2.0) + term(b, t - 1.0) + term(c, t))
}

/// C_t: largest (S + tail)/phi(g) over representatives of each length <= max_len.
pub fn trick2_constant(weights: &PhiWeights, t: f64, radius: usize, max_len: usize, cap: u64) -> Result<f64> {
    let model = weights.density().model();
    let mut best = 0.0f64;
    for len in 0..=max_len {
        for w in sphere_representatives(model, len) {
            let rep = trick2_sum(weights, &model.element_unchecked(w), t, radius.max(len + 2), cap)?;
            let r = rep.ratio_upper.ok_or_else(|| {
                Error::Unsupported(format!("no certified tail for {}", model.name()))
            })?;
            best = best.max(r);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosureReport {
    pub norm1: f64,
    pub norm2: f64,
    pub norm_product: f64,
    /// B_t = 2^{t+1} C_t.
    pub bound_constant: f64,
    pub measured_constant: f64,
    pub certified: bool,
}

/// ||f1 * f2||_{S_t} <= 2^{t+1} C_t ||f1||_{S_t} ||f2||_{S_t}.
pub fn check_algebra_closure(
    weights: &PhiWeights,
    f1: &SchwartzElement,
    f2: &SchwartzElement,
    c_t: f64,
    cap: u64,
) -> Result<ClosureReport> {
    let t = f1.t;
    if t <= critical_degree(weights.density())? {
        return Err(Error::Divergence { s: t, alpha: critical_degree(weights.density())? });
    }
    let prod = convolve(f1, f2, cap)?;
    let n1 = f1.schwartz_norm(weights)?;
    let n2 = f2.schwartz_norm(weights)?;
    let np = prod.schwartz_norm(weights)?;
    let bound_constant = 2f64.powf(t + 1.0) * c_t;
    let denom = n1 * n2;
    let measured_constant = if denom > 0.0 { np / denom } else { 0.0 };
    Ok(ClosureReport {
        norm1: n1,
        norm2: n2,
        norm_product: np,
        bound_constant,
        measured_constant,
        certified: np <= bound_constant * denom * (1.0 + 1e-12),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct L2Report {
    pub lhs: f64,
    pub schwartz_norm: f64,
    pub h_norm: f64,
    pub c_t: f64,
    pub rhs: f64,
    /// The same bound with C_t^2, as the constant appears in the chained estimate.
    pub rhs_squared_constant: f64,
    pub certified: bool,
}

/// ||f * h||_2 <= C_t ||f||_{S_t} ||h||_2.
pub fn check_l2_boundedness(
    weights: &PhiWeights,
    f: &SchwartzElement,
    h: &SchwartzElement,
    c_t: f64,
    cap: u64,
) -> Result<L2Report> {
    let t0 = critical_degree(weights.density())?;
    if f.t <= t0 {
        return Err(Error::Divergence { s: f.t, alpha: t0 });
    }
    let conv = convolve_entries(f, h, cap)?;
    let lhs = conv.l2_norm();
    let sn = f.schwartz_norm(weights)?;
    let hn = h.l2_norm();
    let rhs = c_t * sn * hn;
    Ok(L2Report {
        lhs,
        schwartz_norm: sn,
        h_norm: hn,
        c_t,
        rhs,
        rhs_squared_constant: c_t * c_t * sn * hn,
        certified: lhs <= rhs * (1.0 + 1e-12),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary_measure::exact_free_group_density;
    use crate::group_model::DEFAULT_CAP;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (GroupModel, PhiWeights) {
        let m = GroupModel::parse("free:2").unwrap();
        let d = exact_free_group_density(&m, &m.identity(), 0).unwrap();
        let w = PhiWeights::new(&d, 40).unwrap();
        (m, w)
    }

    #[test]
    fn norm_examples() {
        let (m, w) = setup();
        assert_eq!(SchwartzElement::delta(&m, &m.identity(), 4.0).schwartz_norm(&w).unwrap(), 1.0);
        let g = m.parse_element("ab").unwrap();
        let n = SchwartzElement::delta(&m, &g, 4.0).schwartz_norm(&w).unwrap();
        assert!((n - 121.5).abs() < 1e-11);
        assert_eq!(SchwartzElement::zero(&m, 4.0).schwartz_norm(&w).unwrap(), 0.0);
    }

    #[test]
    fn convolution_against_double_sum() {
        let (m, _) = setup();
        let ball = SchwartzElement::ball_indicator(&m, 1, 4.0, DEFAULT_CAP).unwrap();
        let conv = convolve(&ball, &ball, DEFAULT_CAP).unwrap();
        for g in m.enumerate_annulus(2, 2.0, DEFAULT_CAP).unwrap() {
            let mut direct = 0.0;
            for a in ball.entries() {
                for b in ball.entries() {
                    if m.multiply(&a.0, &b.0).unwrap() == g {
                        direct += 1.0;
                    }
                }
            }
            assert_eq!(conv.value(&g).re, direct);
        }
        let g = m.parse_element("aB").unwrap();
        let gi = m.inverse(&g).unwrap();
        let unit = convolve(&SchwartzElement::delta(&m, &g, 4.0), &SchwartzElement::delta(&m, &gi, 4.0), 10).unwrap();
        assert_eq!(unit, SchwartzElement::delta(&m, &m.identity(), 4.0));
    }

    #[test]
    fn layer_counts_match_enumeration() {
        let (m, w) = setup();
        let table = ContinuationTable::new(&m, 8);
        for gs in ["e", "a", "aB", "abAb"] {
            let g = m.parse_element(gs).unwrap();
            for k in 0..=6 {
                let fast = layer_weight(&m, &table, &w, g.word(), k);
                let mut parts = Vec::new();
                for eta in m.words_of_length(k) {
                    let h = m.mul_words(g.word(), &eta);
                    parts.push(w.phi(&h).unwrap() * w.phi(&eta).unwrap());
                }
                let slow = kahan_sum(parts);
                assert!((fast - slow).abs() < 1e-12 * slow, "{gs} k={k}");
            }
        }
    }

    #[test]
    fn identity_tail_is_the_closed_form_series() {
        let (m, w) = setup();
        let rep = trick2_sum(&w, &m.identity(), 4.0, 12, DEFAULT_CAP).unwrap();
        let direct: f64 = (0..=12)
            .map(|k| {
                let c = if k == 0 { 1.0 } else { 4.0 * 3f64.powi(k - 1) };
                let phi = (k as f64 + 2.0) / 2.0 * 3f64.powf(-(k as f64) / 2.0);
                c * phi * phi / (1.0 + k as f64).powi(4)
            })
            .sum();
        assert!((rep.partial - direct).abs() < 1e-12);
        let far: f64 = (13..200000).map(|k| {
            let k = k as f64;
            (k + 2.0).powi(2) / (3.0 * (1.0 + k).powi(4))
        }).sum();
        let tail = rep.tail.unwrap();
        assert!(tail >= far && tail < far * 1.2, "{tail} vs {far}");
        assert!(trick2_sum(&w, &m.identity(), 2.0, 12, DEFAULT_CAP).unwrap().divergent);
    }

    #[test]
    fn closure_and_l2_on_random_pairs() {
        let (m, w) = setup();
        let c_t = trick2_constant(&w, 4.0, 12, 10, DEFAULT_CAP).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let f1 = SchwartzElement::random(&m, 3, 4.0, 0.5, &mut rng, DEFAULT_CAP).unwrap();
            let f2 = SchwartzElement::random(&m, 3, 4.0, 0.5, &mut rng, DEFAULT_CAP).unwrap();
            assert!(check_algebra_closure(&w, &f1, &f2, c_t, DEFAULT_CAP).unwrap().certified);
            let h = SchwartzElement::random(&m, 4, 0.0, 0.5, &mut rng, DEFAULT_CAP).unwrap();
            assert!(check_l2_boundedness(&w, &f1, &h, c_t, DEFAULT_CAP).unwrap().certified);
        }
        let f = SchwartzElement::random(&m, 3, 4.0, 0.5, &mut rng, DEFAULT_CAP).unwrap();
        let ns = f.schwartz_norm(&w).unwrap();
        assert!((f.involution().schwartz_norm(&w).unwrap() - ns).abs() < 1e-12 * ns);
    }
}
