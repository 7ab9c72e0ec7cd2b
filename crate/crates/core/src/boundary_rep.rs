//! Boundary functions at finite resolution and the boundary representation
//! (pi_x(gamma) xi)(v) = P(x, gamma x, v)^{alpha/2} xi(gamma^-1 v).

use std::sync::OnceLock;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;

use crate::boundary_measure::ConformalDensity;
use crate::error::{Error, Result};
use crate::group_model::{AtomIndexer, GroupElement, GroupModel, Letter};
use crate::numeric::{complex_sum, kahan_sum, ComplexSum};
use crate::poisson_kernel::{harish_chandra, normalized_poisson, poisson_kernel_power};

/// A boundary function constant on each piece of a finite cylinder partition.
pub trait BoundaryFunction: Sync {
    fn model(&self) -> &GroupModel;
    /// Visits every piece with a nonzero value.
    fn for_each_piece(&self, f: &mut dyn FnMut(&[Letter], Complex64));
    fn sup_norm(&self) -> f64;
    /// Deepest piece; any word at least this long determines a value.
    fn resolution(&self) -> usize;
    fn value_on(&self, w: &[Letter]) -> Complex64;
    fn as_step(&self) -> Option<&StepFunction> {
        None
    }
}

/// Dense function on the depth-m cylinders.
#[derive(Clone, Debug)]
pub struct StepFunction {
    model: GroupModel,
    depth: usize,
    values: Vec<Complex64>,
    indexer: AtomIndexer,
    /// Integrals over every cylinder of depth <= m under the closed-form free
    /// density at the identity (unique per model, so safe to cache).
    prefix_cache: OnceLock<(Vec<AtomIndexer>, Vec<Vec<Complex64>>)>,
}

impl StepFunction {
    pub fn from_values(model: &GroupModel, depth: usize, values: Vec<Complex64>) -> Result<Self> {
        let indexer = AtomIndexer::new(model, depth);
        if values.len() != indexer.count() {
            return Err(Error::Precondition(format!(
                "{} values given for {} atoms at depth {depth}",
                values.len(),
                indexer.count()
            )));
        }
        Ok(Self { model: model.clone(), depth, values, indexer, prefix_cache: OnceLock::new() })
    }

    pub fn from_fn(model: &GroupModel, depth: usize, f: impl Fn(&[Letter]) -> Complex64) -> Self {
        let indexer = AtomIndexer::new(model, depth);
        let values = indexer.words().iter().map(|w| f(w)).collect();
        Self { model: model.clone(), depth, values, indexer, prefix_cache: OnceLock::new() }
    }

    pub fn constant(model: &GroupModel, depth: usize, c: f64) -> Self {
        Self::from_fn(model, depth, |_| Complex64::new(c, 0.0))
    }

    /// Indicator of cyl(prefix), at depth max(depth, |prefix|).
    pub fn indicator(model: &GroupModel, depth: usize, prefix: &[Letter]) -> Self {
        let d = depth.max(prefix.len());
        Self::from_fn(model, d, |w| {
            Complex64::new(if w.starts_with(prefix) { 1.0 } else { 0.0 }, 0.0)
        })
    }

    /// Values drawn uniformly from [0,1).
    pub fn random_nonnegative<R: Rng>(model: &GroupModel, depth: usize, rng: &mut R) -> Self {
        let n = AtomIndexer::new(model, depth).count();
        let values = (0..n).map(|_| Complex64::new(rng.gen::<f64>(), 0.0)).collect();
        Self::from_values(model, depth, values).expect("sized from the indexer")
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn atoms(&self) -> Vec<Vec<Letter>> {
        self.indexer.words()
    }

    /// Value at any boundary word of length >= depth.
    pub fn value_at(&self, w: &[Letter]) -> Complex64 {
        self.values[self.indexer.index_of(w)]
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|z| z.im == 0.0 && z.re >= 0.0)
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        let values = self.values.iter().map(|&z| f(z)).collect();
        Self::from_values(&self.model, self.depth, values).expect("same size")
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|z| z * c)
    }

    pub fn refine(&self, depth: usize) -> Result<Self> {
        if depth < self.depth {
            return Err(Error::Precondition(format!(
                "refinement to depth {depth} would coarsen a depth-{} function",
                self.depth
            )));
        }
        Ok(Self::from_fn(&self.model, depth, |w| self.value_at(w)))
    }

    /// mu_x of every atom, in index order.
    pub fn atom_masses(&self, density: &ConformalDensity) -> Result<Vec<f64>> {
        atom_masses(density, &self.indexer)
    }

    pub fn l1_norm(&self, density: &ConformalDensity) -> Result<f64> {
        let m = self.atom_masses(density)?;
        Ok(kahan_sum(self.values.iter().zip(&m).map(|(z, w)| z.norm() * w)))
    }

    pub fn l2_norm(&self, density: &ConformalDensity) -> Result<f64> {
        let m = self.atom_masses(density)?;
        Ok(kahan_sum(self.values.iter().zip(&m).map(|(z, w)| z.norm_sqr() * w)).sqrt())
    }

    pub fn linf_norm(&self) -> f64 {
        self.values.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// <f, g> = integral of f conj(g) d mu_x, at the finer of the two depths.
    pub fn inner(&self, other: &StepFunction, density: &ConformalDensity) -> Result<Complex64> {
        let d = self.depth.max(other.depth);
        let a = self.refine(d)?;
        let b = other.refine(d)?;
        let m = a.atom_masses(density)?;
        Ok(complex_sum(a.values.iter().zip(&b.values).zip(&m).map(|((x, y), w)| x * y.conj() * *w)))
    }

    /// Integral of f over cyl(w) for the closed-form free density at the
    /// identity, for |w| <= depth.
    pub(crate) fn exact_prefix_integral(&self, density: &ConformalDensity, w: &[Letter]) -> Complex64 {
        let (ix, tables) = self.prefix_cache.get_or_init(|| {
            let ix: Vec<AtomIndexer> = (0..=self.depth).map(|d| AtomIndexer::new(&self.model, d)).collect();
            let bottom_mass = density.reference_mass(&self.indexer.word_at(0)).expect("exact");
            let mut tables = vec![Vec::new(); self.depth + 1];
            tables[self.depth] = self.values.iter().map(|z| z * bottom_mass).collect();
            for d in (0..self.depth).rev() {
                let mut acc = vec![ComplexSum::new(); ix[d].count()];
                for (i, z) in tables[d + 1].iter().enumerate() {
                    let parent = ix[d].index_of(&ix[d + 1].word_at(i));
                    acc[parent].add(*z);
                }
                tables[d] = acc.iter().map(|a| a.value()).collect();
            }
            (ix, tables)
        });
        tables[w.len()][ix[w.len()].index_of(w)]
    }
}

impl BoundaryFunction for StepFunction {
    fn model(&self) -> &GroupModel {
        &self.model
    }

    fn for_each_piece(&self, f: &mut dyn FnMut(&[Letter], Complex64)) {
        for (i, &z) in self.values.iter().enumerate() {
            if z != Complex64::new(0.0, 0.0) {
                f(&self.indexer.word_at(i), z);
            }
        }
    }

    fn sup_norm(&self) -> f64 {
        self.linf_norm()
    }

    fn resolution(&self) -> usize {
        self.depth
    }

    fn value_on(&self, w: &[Letter]) -> Complex64 {
        self.value_at(w)
    }

    fn as_step(&self) -> Option<&StepFunction> {
        Some(self)
    }
}

/// Function given on an arbitrary finite partition of the boundary into
/// cylinders of mixed depths.
#[derive(Clone, Debug)]
pub struct PartitionFunction {
    model: GroupModel,
    pieces: Vec<(Vec<Letter>, Complex64)>,
}

impl PartitionFunction {
    pub fn new(model: &GroupModel, mut pieces: Vec<(Vec<Letter>, Complex64)>) -> Result<Self> {
        pieces.sort_by(|a, b| a.0.cmp(&b.0));
        for (w, _) in &pieces {
            if !model.is_normal(w) {
                return Err(Error::Precondition(format!("piece {} is not reduced", model.format_word(w))));
            }
        }
        for pair in pieces.windows(2) {
            if pair[1].0.starts_with(&pair[0].0) {
                return Err(Error::Precondition("partition pieces overlap".into()));
            }
        }
        // Completeness under the uniform-splitting measure.
        let covered = kahan_sum(pieces.iter().map(|(w, _)| uniform_split_mass(model, w)));
        if (covered - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition(format!("pieces cover mass {covered}, not the whole boundary")));
        }
        Ok(Self { model: model.clone(), pieces })
    }

    pub fn pieces(&self) -> &[(Vec<Letter>, Complex64)] {
        &self.pieces
    }

    pub fn max_depth(&self) -> usize {
        self.pieces.iter().map(|(w, _)| w.len()).max().unwrap_or(0)
    }

    pub fn value_at(&self, w: &[Letter]) -> Option<Complex64> {
        self.pieces.iter().find(|(p, _)| w.starts_with(p)).map(|(_, z)| *z)
    }

    pub fn l1_norm(&self, density: &ConformalDensity) -> Result<f64> {
        let parts: Result<Vec<f64>> =
            self.pieces.iter().map(|(w, z)| Ok(z.norm() * density.mass(w)?)).collect();
        Ok(kahan_sum(parts?))
    }

    pub fn l2_norm(&self, density: &ConformalDensity) -> Result<f64> {
        let parts: Result<Vec<f64>> =
            self.pieces.iter().map(|(w, z)| Ok(z.norm_sqr() * density.mass(w)?)).collect();
        Ok(kahan_sum(parts?).sqrt())
    }
}

impl BoundaryFunction for PartitionFunction {
    fn model(&self) -> &GroupModel {
        &self.model
    }

    fn for_each_piece(&self, f: &mut dyn FnMut(&[Letter], Complex64)) {
        for (w, z) in &self.pieces {
            if *z != Complex64::new(0.0, 0.0) {
                f(w, *z);
            }
        }
    }

    fn sup_norm(&self) -> f64 {
        self.pieces.iter().map(|(_, z)| z.norm()).fold(0.0, f64::max)
    }

    fn resolution(&self) -> usize {
        self.max_depth()
    }

    fn value_on(&self, w: &[Letter]) -> Complex64 {
        self.value_at(w).expect("pieces cover the boundary")
    }
}

fn uniform_split_mass(model: &GroupModel, w: &[Letter]) -> f64 {
    let mut m = 1.0;
    let mut prev = None;
    for &l in w {
        m /= model.children(prev).len() as f64;
        prev = Some(l);
    }
    m
}

pub(crate) fn atom_masses(density: &ConformalDensity, ix: &AtomIndexer) -> Result<Vec<f64>> {
    if density.is_exact_at_identity() {
        let m = density.reference_mass(&ix.word_at(0))?;
        return Ok(vec![m; ix.count()]);
    }
    (0..ix.count()).into_par_iter().map(|i| density.mass(&ix.word_at(i))).collect()
}

/// pi_x(gamma) f at resolution m + |gamma| (deeper only when the basepoint is
/// not the identity and the kernel needs it).
pub fn act(density: &ConformalDensity, gamma: &GroupElement, f: &StepFunction) -> Result<StepFunction> {
    let model = density.model();
    if gamma.backend() != model.backend() {
        return Err(Error::ModelMismatch { left: model.name(), right: gamma.backend().to_string() });
    }
    let x = density.basepoint().word();
    let gx = model.mul_words(gamma.word(), x);
    let mut depth = f.depth + gamma.len();
    if !x.is_empty() {
        depth = depth.max(model.distance_words(x, &gx) + x.len() + 1);
    }
    let g_inv = model.inverse_word(gamma.word());
    let ix = AtomIndexer::new(model, depth);
    let values: Result<Vec<Complex64>> = (0..ix.count())
        .into_par_iter()
        .map(|i| {
            let b = ix.word_at(i);
            let k = poisson_kernel_power(density, x, &gx, &b, density.alpha() / 2.0)?;
            let pre = model.mul_words(&g_inv, &b);
            Ok(f.value_at(&pre) * k)
        })
        .collect();
    StepFunction::from_values(model, depth, values?)
}

/// <pi_x(gamma) f, g>.
pub fn matrix_coefficient(
    density: &ConformalDensity,
    gamma: &GroupElement,
    f: &StepFunction,
    g: &StepFunction,
) -> Result<Complex64> {
    if density.is_exact_at_identity() {
        return Ok(free_coefficient_stratified(density, gamma.word(), f, g));
    }
    act(density, gamma, f)?.inner(g, density)
}

/// Generic route through the dense action; oracle for the stratified path.
pub fn matrix_coefficient_dense(
    density: &ConformalDensity,
    gamma: &GroupElement,
    f: &StepFunction,
    g: &StepFunction,
) -> Result<Complex64> {
    act(density, gamma, f)?.inner(g, density)
}

/// Closed-form free density at the identity: split the boundary by the
/// common-prefix length j with gamma. On cyl(gamma_j l) the kernel is
/// e^{(alpha/2)(2j-n)} and gamma^-1 maps it onto cyl(sigma_j l), sigma_j the
/// inverse of the untraversed suffix; refine both sides in lockstep.
fn free_coefficient_stratified(
    density: &ConformalDensity,
    gamma: &[Letter],
    f: &StepFunction,
    g: &StepFunction,
) -> Complex64 {
    let model = density.model();
    let n = gamma.len();
    let half = density.alpha() / 2.0;
    let mut acc = ComplexSum::new();
    for j in 0..=n {
        let k = (half * (2.0 * j as f64 - n as f64)).exp();
        let sigma = model.inverse_word(&gamma[j..]);
        for l in model.children(if j == 0 { None } else { Some(gamma[j - 1]) }) {
            if j < n && l == gamma[j] {
                continue;
            }
            let mut c = gamma[..j].to_vec();
            c.push(l);
            let mut d = sigma.clone();
            d.push(l);
            let extra = g.depth.saturating_sub(c.len()).max(f.depth.saturating_sub(d.len()));
            let mut local = ComplexSum::new();
            let base_len = c.len();
            visit_continuations(model, &mut c, &mut d, extra, &mut |c, d| {
                let m = density.reference_mass(c).expect("exact density");
                local.add(f.value_at(d) * g.value_at(c).conj() * m);
            });
            debug_assert_eq!(c.len(), base_len);
            acc.add(local.value() * k);
        }
    }
    acc.value()
}

fn visit_continuations(
    model: &GroupModel,
    c: &mut Vec<Letter>,
    d: &mut Vec<Letter>,
    remaining: usize,
    f: &mut dyn FnMut(&[Letter], &[Letter]),
) {
    if remaining == 0 {
        f(c, d);
        return;
    }
    for l in model.children(c.last().copied()) {
        c.push(l);
        d.push(l);
        visit_continuations(model, c, d, remaining - 1, f);
        c.pop();
        d.pop();
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CsReport {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
}

/// <pi(gamma) xi, eta>^2 / phi(gamma)^2 <= P0(xi^2)(gamma^-1 x) P0(eta^2)(gamma x).
pub fn check_cs_poisson(
    density: &ConformalDensity,
    gamma: &GroupElement,
    xi: &StepFunction,
    eta: &StepFunction,
) -> Result<CsReport> {
    if !xi.is_nonnegative() || !eta.is_nonnegative() {
        return Err(Error::Precondition("both test functions must be non-negative".into()));
    }
    let model = density.model();
    let x = density.basepoint().word();
    let coef = matrix_coefficient(density, gamma, xi, eta)?;
    let phi = harish_chandra(density, gamma)?;
    let lhs = coef.norm_sqr() / (phi * phi);
    let g_inv = model.inverse_word(gamma.word());
    let y_minus = model.element_unchecked(model.mul_words(&g_inv, x));
    let y_plus = model.element_unchecked(model.mul_words(gamma.word(), x));
    let a = normalized_poisson(density, &xi.map(|z| z * z), &y_minus)?.re;
    let b = normalized_poisson(density, &eta.map(|z| z * z), &y_plus)?.re;
    let rhs = a * b;
    let slack = rhs - lhs;
    Ok(CsReport { lhs, rhs, slack, holds: slack >= -1e-10 * rhs.abs().max(lhs.abs()).max(1e-300) })
}

/// M_{x,x'} f = e^{-(alpha/2) beta_v(x,x')} f, an isometry L^2(mu_x) -> L^2(mu_x')
/// intertwining pi_x and pi_x'.
pub fn intertwiner(
    density: &ConformalDensity,
    x: &GroupElement,
    x_prime: &GroupElement,
    f: &StepFunction,
) -> Result<StepFunction> {
    let model = density.model();
    let depth = if x == x_prime {
        f.depth
    } else {
        f.depth.max(model.distance_words(x.word(), x_prime.word()) + x_prime.len() + 1)
    };
    let base = density.rebased(x);
    let ix = AtomIndexer::new(model, depth);
    let values: Result<Vec<Complex64>> = (0..ix.count())
        .into_par_iter()
        .map(|i| {
            let b = ix.word_at(i);
            let k = poisson_kernel_power(&base, x_prime.word(), x.word(), &b, density.alpha() / 2.0)?;
            Ok(f.value_at(&b) * k)
        })
        .collect();
    StepFunction::from_values(model, depth, values?)
}
