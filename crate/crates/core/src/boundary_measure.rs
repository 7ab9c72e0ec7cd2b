//! Boundary of a tree-like model as a cylinder algebra, Busemann cocycle,
//! visual metric balls, and conformal densities (exact and Patterson).

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::group_model::{common_prefix, AtomIndexer, Backend, GroupElement, GroupModel, Letter};
use crate::numeric::kahan_sum;

/// Clopen set of boundary points whose normal form starts with `prefix`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Cylinder {
    prefix: GroupElement,
}

impl Cylinder {
    pub fn new(prefix: GroupElement) -> Self {
        Self { prefix }
    }

    pub fn root(model: &GroupModel) -> Self {
        Self { prefix: model.identity() }
    }

    pub fn depth(&self) -> usize {
        self.prefix.len()
    }

    pub fn word(&self) -> &[Letter] {
        self.prefix.word()
    }

    pub fn prefix(&self) -> &GroupElement {
        &self.prefix
    }

    pub fn children(&self, model: &GroupModel) -> Vec<Cylinder> {
        let last = self.word().last().copied();
        model
            .children(last)
            .into_iter()
            .map(|l| {
                let mut w = self.word().to_vec();
                w.push(l);
                Cylinder { prefix: model.element_unchecked(w) }
            })
            .collect()
    }

    pub fn contains_word(&self, w: &[Letter]) -> bool {
        w.len() >= self.depth() && &w[..self.depth()] == self.word()
    }
}

/// Eventually periodic infinite normal-form word: `prefix` then `period`
/// repeated forever.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Direction {
    prefix: Vec<Letter>,
    period: Vec<Letter>,
}

impl Direction {
    pub fn new(model: &GroupModel, prefix: Vec<Letter>, period: Vec<Letter>) -> Result<Self> {
        let bad = |why: &str| Error::Parse {
            input: format!("{}({})^inf", model.format_word(&prefix), model.format_word(&period)),
            reason: why.to_string(),
        };
        if period.is_empty() {
            return Err(bad("empty period"));
        }
        if !model.is_normal(&prefix) || !model.is_normal(&period) {
            return Err(bad("not in normal form"));
        }
        if !model.compatible(period.last().copied(), period[0]) {
            return Err(bad("period does not repeat in normal form"));
        }
        if !model.compatible(prefix.last().copied(), period[0]) {
            return Err(bad("prefix and period do not join in normal form"));
        }
        Ok(Self::normalized(prefix, period))
    }

    fn normalized(mut prefix: Vec<Letter>, mut period: Vec<Letter>) -> Self {
        let p = period.len();
        for d in 1..=p {
            if p % d == 0 && (0..p).all(|i| period[i] == period[i % d]) {
                period.truncate(d);
                break;
            }
        }
        while let (Some(&a), Some(&b)) = (prefix.last(), period.last()) {
            if a != b {
                break;
            }
            prefix.pop();
            period.rotate_right(1);
        }
        Self { prefix, period }
    }

    /// Canonical extension of a nonempty word: repeatedly append the smallest
    /// letter that keeps the word in normal form.
    pub fn canonical_extension(model: &GroupModel, word: &[Letter]) -> Result<Self> {
        let Some(&last) = word.last() else {
            return Err(Error::UndefinedDirection);
        };
        let mut states = vec![last];
        loop {
            let next = model.smallest_child(states.last().copied());
            if let Some(pos) = states.iter().position(|&s| s == next) {
                let mut prefix = word.to_vec();
                prefix.extend_from_slice(&states[1..=pos]);
                let period = states[pos + 1..].iter().copied().chain(std::iter::once(next)).collect();
                return Ok(Self::normalized(prefix, period));
            }
            states.push(next);
        }
    }

    pub fn prefix(&self) -> &[Letter] {
        &self.prefix
    }

    pub fn period(&self) -> &[Letter] {
        &self.period
    }

    pub fn letter(&self, i: usize) -> Letter {
        if i < self.prefix.len() {
            self.prefix[i]
        } else {
            self.period[(i - self.prefix.len()) % self.period.len()]
        }
    }

    /// First n letters (the depth-n cylinder containing the point).
    pub fn letters(&self, n: usize) -> Vec<Letter> {
        (0..n).map(|i| self.letter(i)).collect()
    }

    pub fn cylinder(&self, model: &GroupModel, n: usize) -> Cylinder {
        Cylinder::new(model.element_unchecked(self.letters(n)))
    }

    /// Number of letters after which the word is fully determined by its
    /// periodic continuation.
    fn horizon(&self) -> usize {
        self.prefix.len() + self.period.len()
    }

    /// Image under left multiplication by g.
    pub fn translate(&self, model: &GroupModel, g: &[Letter]) -> Self {
        let copies = g.len() / self.period.len() + 2;
        let mut word = self.prefix.clone();
        for _ in 0..copies {
            word.extend_from_slice(&self.period);
        }
        let mut out = g.to_vec();
        model.reduce_onto(&mut out, &word);
        Self::normalized(out, self.period.clone())
    }

    pub fn parse(model: &GroupModel, s: &str) -> Result<Self> {
        let t = s.trim();
        let err = |why: &str| Error::Parse { input: s.to_string(), reason: why.to_string() };
        let body = t
            .strip_suffix("^inf")
            .or_else(|| t.strip_suffix("^∞"))
            .ok_or_else(|| err("directions are written like a^inf, ba^inf or (ab)^inf"))?;
        let (prefix_str, period_str) = if let Some(inner) = body.strip_suffix(')') {
            let open = inner.rfind('(').ok_or_else(|| err("unbalanced parenthesis"))?;
            (&inner[..open], &inner[open + 1..])
        } else {
            let split = body
                .char_indices()
                .filter(|(_, c)| c.is_ascii_alphabetic())
                .map(|(i, _)| i)
                .last()
                .ok_or_else(|| err("missing periodic letter"))?;
            (&body[..split], &body[split..])
        };
        let prefix = model.parse_element(prefix_str)?.into_word();
        let period = model.parse_element(period_str)?.into_word();
        Self::new(model, prefix, period)
    }

    pub fn format(&self, model: &GroupModel) -> String {
        let pre = if self.prefix.is_empty() { String::new() } else { model.format_word(&self.prefix) };
        if self.period.len() == 1 && !model.letter_name(self.period[0]).contains('^') {
            format!("{pre}{}^inf", model.format_word(&self.period))
        } else {
            format!("{pre}({})^inf", model.format_word(&self.period))
        }
    }
}

/// Twice the Gromov product (v,w)_e of two boundary points; None if v = w.
pub fn gp2_directions(model: &GroupModel, v: &Direction, w: &Direction) -> Option<i64> {
    let bound = v.horizon().max(w.horizon()) + v.period.len() * w.period.len() + 1;
    let mut l = 0;
    while l < bound && v.letter(l) == w.letter(l) {
        l += 1;
    }
    if l == bound {
        return None;
    }
    let mut twice = 2 * l as i64;
    if let crate::group_model::Combine::Merge(_) =
        model.combine(model.inverse_letter(v.letter(l)), w.letter(l))
    {
        twice += 1;
    }
    Some(twice)
}

/// Twice the Gromov product (v,y)_e of a boundary point and a group element.
pub fn gp2_direction_word(model: &GroupModel, v: &Direction, y: &[Letter]) -> i64 {
    let vw = v.letters(y.len() + 1);
    model.gp2_identity(&vw, y)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisualMetricParams {
    pub epsilon: f64,
    pub c_m: f64,
}

impl VisualMetricParams {
    pub fn new(model: &GroupModel, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::Precondition(format!("visual parameter {epsilon} must lie in (0,1]")));
        }
        if model.delta() > 0.0 && epsilon > std::f64::consts::LN_2 / (4.0 * model.delta()) {
            return Err(Error::Precondition(format!(
                "visual parameter {epsilon} exceeds log 2/(4 delta) for delta = {}",
                model.delta()
            )));
        }
        // d(v,w) = exp(-eps (v,w)_e) exactly on block-graph backends.
        Ok(Self { epsilon, c_m: 1.0 })
    }

    pub fn distance(&self, model: &GroupModel, v: &Direction, w: &Direction) -> f64 {
        match gp2_directions(model, v, w) {
            None => 0.0,
            Some(t) => (-self.epsilon * t as f64 / 2.0).exp(),
        }
    }
}

/// Busemann cocycle beta_v(x,y) = 2(v,y)_x - d(x,y) for v given by a finite
/// prefix. The value is always an integer on these backends.
pub fn busemann(model: &GroupModel, v: &[Letter], x: &[Letter], y: &[Letter]) -> Result<i64> {
    if x == y {
        return Ok(0);
    }
    let x_inv = model.inverse_word(x);
    let mut h = x_inv.clone();
    model.reduce_onto(&mut h, y);
    let (g, cancelled) = if x.is_empty() {
        (v.to_vec(), 0)
    } else {
        let mut g = x_inv;
        let c = model.reduce_onto(&mut g, v);
        (g, c)
    };
    let required = h.len() + x.len() + 1;
    if cancelled >= v.len() {
        return Err(Error::InsufficientDepth { required, available: v.len() });
    }
    let l = common_prefix(&g, &h);
    if l < g.len() || l == h.len() {
        Ok(model.gp2_identity(&g, &h) - h.len() as i64)
    } else {
        Err(Error::InsufficientDepth { required, available: v.len() })
    }
}

pub fn busemann_elements(
    model: &GroupModel,
    v: &Cylinder,
    x: &GroupElement,
    y: &GroupElement,
) -> Result<i64> {
    busemann(model, v.word(), x.word(), y.word())
}

/// Busemann cocycle at a genuine boundary point.
pub fn busemann_direction(model: &GroupModel, v: &Direction, x: &[Letter], y: &[Letter]) -> i64 {
    let depth = 2 * x.len() + y.len() + v.horizon() + 2;
    busemann(model, &v.letters(depth), x, y).expect("depth chosen large enough")
}

/// Shadow direction w_x^y: geodesic from x through y, continued canonically.
pub fn shadow_direction(model: &GroupModel, x: &GroupElement, y: &GroupElement) -> Result<Direction> {
    if x == y {
        return Err(Error::UndefinedDirection);
    }
    let mut h = model.inverse_word(x.word());
    model.reduce_onto(&mut h, y.word());
    let ext = Direction::canonical_extension(model, &h)?;
    Ok(ext.translate(model, x.word()))
}

#[derive(Clone, Debug)]
enum Masses {
    /// mu_e(cyl w) = (2k)^-1 (2k-1)^-(|w|-1).
    ExactFree { rank: u32 },
    /// Reference masses at the identity, one table per depth.
    Tabulated { tables: Vec<Vec<f64>>, indexers: Vec<AtomIndexer> },
}

/// Gamma-invariant (quasi-)conformal density, stored through its masses at the
/// identity and transported to other basepoints.
#[derive(Clone, Debug)]
pub struct ConformalDensity {
    model: GroupModel,
    basepoint: GroupElement,
    alpha: f64,
    c_q: f64,
    max_depth: usize,
    epsilon: f64,
    masses: Masses,
}

pub fn exact_free_group_density(
    model: &GroupModel,
    x: &GroupElement,
    depth: usize,
) -> Result<ConformalDensity> {
    let Backend::Free { rank } = model.backend() else {
        return Err(Error::Unsupported(format!(
            "closed-form density exists only for free groups, not {}",
            model.name()
        )));
    };
    if x.backend() != model.backend() {
        return Err(Error::ModelMismatch { left: model.name(), right: x.backend().to_string() });
    }
    Ok(ConformalDensity {
        model: model.clone(),
        basepoint: x.clone(),
        alpha: model.alpha(),
        c_q: 1.0,
        max_depth: depth,
        epsilon: 1.0,
        masses: Masses::ExactFree { rank: rank as u32 },
    })
}

/// Atom budget for `patterson_density`; every level of the table is stored.
pub const PATTERSON_ATOM_CAP: u64 = 1_000_000;

/// `patterson_density_capped` with the default atom budget.
pub fn patterson_density(
    model: &GroupModel,
    x: &GroupElement,
    s: f64,
    radius: usize,
    depth: usize,
) -> Result<ConformalDensity> {
    patterson_density_capped(model, x, s, radius, depth, PATTERSON_ATOM_CAP)
}

/// Patterson orbit-sum density at the identity: masses are
/// sum_{gamma in Gamma_N, w^gamma in cyl} e^{-s|gamma|} / sum_{gamma in Gamma_N} e^{-s|gamma|}
/// (the identity carries no direction and is left out of both sums).
pub fn patterson_density_capped(
    model: &GroupModel,
    x: &GroupElement,
    s: f64,
    radius: usize,
    depth: usize,
    cap: u64,
) -> Result<ConformalDensity> {
    if !(s > model.alpha()) {
        return Err(Error::Divergence { s, alpha: model.alpha() });
    }
    if radius < depth + 5 {
        return Err(Error::Resolution(format!(
            "orbit radius {radius} must be at least depth + 5 = {}",
            depth + 5
        )));
    }
    if !x.is_identity() {
        return Err(Error::Unsupported(
            "orbit sums are tabulated at the identity; transport them with mass_at".into(),
        ));
    }
    let atoms: u128 = model.sphere_sizes(depth).iter().sum();
    if atoms > cap as u128 {
        return Err(Error::CapExceeded { predicted: atoms, cap });
    }
    let table = crate::group_model::ContinuationTable::new(model, radius);
    let weights: Vec<f64> = (0..=radius).map(|n| (-s * n as f64).exp()).collect();
    let sizes = model.sphere_sizes(radius);
    let total = kahan_sum((1..=radius).map(|n| sizes[n] as f64 * weights[n]));

    let deep = AtomIndexer::new(model, depth);
    let atoms = deep.words();
    // Elements of length >= depth are counted by prefix.
    let mut bottom: Vec<f64> = atoms
        .par_iter()
        .map(|w| {
            let last = w.last().copied();
            kahan_sum((depth.max(1)..=radius).map(|n| {
                table.count(last, n - depth) as f64 * weights[n]
            }))
        })
        .collect();
    if depth == 0 {
        bottom = vec![total];
    }
    // Shorter elements are pushed along their canonical extension.
    for n in 1..depth {
        model.visit_sphere(n, &mut |g| {
            let dir = Direction::canonical_extension(model, g).expect("nonempty");
            bottom[deep.index_of(&dir.letters(depth))] += weights[n];
        });
    }
    let mut tables = vec![Vec::new(); depth + 1];
    tables[depth] = bottom.iter().map(|m| m / total).collect();
    let mut indexers: Vec<AtomIndexer> = (0..=depth).map(|d| AtomIndexer::new(model, d)).collect();
    for d in (0..depth).rev() {
        let mut row = vec![0.0; indexers[d].count()];
        let child = &indexers[d + 1];
        let mut parts: Vec<Vec<f64>> = vec![Vec::new(); row.len()];
        for (i, w) in child.words().iter().enumerate() {
            parts[indexers[d].index_of(w)].push(tables[d + 1][i]);
        }
        for (r, p) in row.iter_mut().zip(parts) {
            *r = kahan_sum(p);
        }
        tables[d] = row;
    }
    if depth == 0 {
        tables[0] = vec![1.0];
    }
    indexers.truncate(depth + 1);
    let mut density = ConformalDensity {
        model: model.clone(),
        basepoint: x.clone(),
        alpha: model.alpha(),
        c_q: 1.0,
        max_depth: depth,
        epsilon: 1.0,
        masses: Masses::Tabulated { tables, indexers },
    };
    density.c_q = density.measured_cocycle_defect();
    Ok(density)
}

#[derive(Clone, Copy, Debug)]
pub struct RegularityReport {
    pub dimension: f64,
    pub k: f64,
    pub depth: usize,
    pub min_ratio: f64,
    pub max_ratio: f64,
}

/// Smallest k with k^-1 r^D <= mu(B(v,r)) <= k r^D over all resolved centers
/// and radii r = e^{-eps j}; closed balls of those radii are cylinders.
pub fn certify_ahlfors_regularity(
    density: &ConformalDensity,
    params: &VisualMetricParams,
    depth: usize,
) -> Result<RegularityReport> {
    if depth > density.max_depth() {
        return Err(Error::Resolution(format!(
            "density resolved to depth {}, regularity requested at {depth}",
            density.max_depth()
        )));
    }
    let dim = density.alpha() / params.epsilon;
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for j in 0..=depth {
        let r_d = (-params.epsilon * j as f64 * dim).exp();
        for w in density.model().words_of_length(j) {
            let m = density.reference_mass(&w)?;
            if !(m > 0.0) {
                return Err(Error::EmptySupport);
            }
            lo = lo.min(m / r_d);
            hi = hi.max(m / r_d);
        }
    }
    Ok(RegularityReport { dimension: dim, k: hi.max(1.0 / lo), depth, min_ratio: lo, max_ratio: hi })
}

impl ConformalDensity {
    pub fn model(&self) -> &GroupModel {
        &self.model
    }

    pub fn basepoint(&self) -> &GroupElement {
        &self.basepoint
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn c_q(&self) -> f64 {
        self.c_q
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// True for the closed-form free-group density, which resolves every depth.
    pub fn is_exact(&self) -> bool {
        matches!(self.masses, Masses::ExactFree { .. })
    }

    /// Fast stratified paths apply: closed-form masses seen from the identity.
    pub fn is_exact_at_identity(&self) -> bool {
        self.is_exact() && self.basepoint.is_identity()
    }

    /// Same density seen from another basepoint.
    pub fn rebased(&self, x: &GroupElement) -> Self {
        let mut d = self.clone();
        d.basepoint = x.clone();
        d
    }

    /// Resolution available for a cylinder mass lookup at the identity.
    pub fn resolves(&self, depth: usize) -> bool {
        self.is_exact() || depth <= self.max_depth
    }

    /// mu_e(cyl w).
    pub fn reference_mass(&self, w: &[Letter]) -> Result<f64> {
        match &self.masses {
            Masses::ExactFree { rank } => Ok(exact_free_mass(*rank, w.len())),
            Masses::Tabulated { tables, indexers } => {
                if w.len() > self.max_depth {
                    return Err(Error::InsufficientDepth { required: w.len(), available: self.max_depth });
                }
                Ok(tables[w.len()][indexers[w.len()].index_of(w)])
            }
        }
    }

    /// log mu_e(cyl w) for the closed-form density.
    pub fn reference_log_mass(&self, depth: usize) -> Option<f64> {
        match &self.masses {
            Masses::ExactFree { rank } => Some(exact_free_log_mass(*rank, depth)),
            Masses::Tabulated { .. } => None,
        }
    }

    /// mu_e(g . cyl w), by refining cyl w until g maps each piece to a cylinder.
    pub fn translated_reference_mass(&self, g: &[Letter], w: &[Letter]) -> Result<f64> {
        if g.is_empty() || w.is_empty() {
            return self.reference_mass(w);
        }
        if w.len() > g.len() {
            let image = self.model.mul_words(g, w);
            return self.reference_mass(&image);
        }
        let extra = g.len() - w.len() + 1;
        let mut parts = Vec::new();
        let mut buf = w.to_vec();
        self.collect_translated(g, &mut buf, w.len() + extra, &mut parts)?;
        Ok(kahan_sum(parts))
    }

    fn collect_translated(
        &self,
        g: &[Letter],
        buf: &mut Vec<Letter>,
        target: usize,
        out: &mut Vec<f64>,
    ) -> Result<()> {
        if buf.len() == target {
            let image = self.model.mul_words(g, buf);
            out.push(self.reference_mass(&image)?);
            return Ok(());
        }
        let last = buf.last().copied();
        for l in self.model.children(last) {
            buf.push(l);
            self.collect_translated(g, buf, target, out)?;
            buf.pop();
        }
        Ok(())
    }

    /// mu_y(cyl w) = mu_e(y^-1 cyl w) (Gamma-invariance route).
    pub fn mass_at(&self, y: &[Letter], w: &[Letter]) -> Result<f64> {
        let y_inv = self.model.inverse_word(y);
        self.translated_reference_mass(&y_inv, w)
    }

    /// mu_x(cyl w) at this density's basepoint.
    pub fn mass(&self, w: &[Letter]) -> Result<f64> {
        if self.basepoint.is_identity() {
            return self.reference_mass(w);
        }
        if self.is_exact() {
            self.mass_via_cocycle(self.basepoint.word(), w)
        } else {
            self.mass_at(self.basepoint.word(), w)
        }
    }

    /// mu_y(cyl w) = integral over cyl w of e^{alpha beta_v(e,y)} dmu_e (cocycle route).
    pub fn mass_via_cocycle(&self, y: &[Letter], w: &[Letter]) -> Result<f64> {
        match busemann(&self.model, w, &[], y) {
            Ok(b) => Ok((self.alpha * b as f64).exp() * self.reference_mass(w)?),
            Err(Error::InsufficientDepth { .. }) => {
                let mut parts = Vec::new();
                for l in self.model.children(w.last().copied()) {
                    let mut c = w.to_vec();
                    c.push(l);
                    parts.push(self.mass_via_cocycle(y, &c)?);
                }
                Ok(kahan_sum(parts))
            }
            Err(e) => Err(e),
        }
    }

    /// Largest max(r, 1/r) of r = mu_s(A) / (e^{alpha beta_A(e,s)} mu_e(A)) over
    /// resolved cylinders A and one-letter translations s.
    pub fn measured_cocycle_defect(&self) -> f64 {
        if self.is_exact() {
            return 1.0;
        }
        let mut worst = 1.0f64;
        for d in 1..=self.max_depth {
            for w in self.model.words_of_length(d) {
                let Ok(base) = self.reference_mass(&w) else { continue };
                for s in self.model.letters() {
                    let Ok(moved) = self.mass_at(&[s], &w) else { continue };
                    let Ok(b) = busemann(&self.model, &w, &[], &[s]) else { continue };
                    let predicted = (self.alpha * b as f64).exp() * base;
                    if predicted > 0.0 && moved > 0.0 {
                        let r = moved / predicted;
                        worst = worst.max(r.max(1.0 / r));
                    } else if predicted > 0.0 || moved > 0.0 {
                        worst = f64::INFINITY;
                    }
                }
            }
        }
        worst
    }

    /// Writes the header and every cylinder mass up to max depth.
    pub fn to_text(&self) -> Result<String> {
        let mut s = String::new();
        writeln!(s, "hyplab-density 1").unwrap();
        writeln!(s, "model {}", self.model.name()).unwrap();
        writeln!(s, "alpha {:.16e}", self.alpha).unwrap();
        writeln!(s, "epsilon {:.16e}", self.epsilon).unwrap();
        writeln!(s, "c_q {:.16e}", self.c_q).unwrap();
        writeln!(s, "depth {}", self.max_depth).unwrap();
        for d in 0..=self.max_depth {
            for w in self.model.words_of_length(d) {
                writeln!(s, "{} {:.16e}", self.model.format_word(&w), self.reference_mass(&w)?).unwrap();
            }
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |why: String| Error::Parse { input: "density file".into(), reason: why };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let magic = lines.next().ok_or_else(|| err("empty file".into()))?;
        if magic.trim() != "hyplab-density 1" {
            return Err(err(format!("unknown header `{magic}`")));
        }
        let mut field = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| err(format!("missing `{key}`")))?;
            let (k, v) = line.split_once(' ').ok_or_else(|| err(format!("bad line `{line}`")))?;
            if k != key {
                return Err(err(format!("expected `{key}`, found `{k}`")));
            }
            Ok(v.trim().to_string())
        };
        let model = GroupModel::parse(&field("model")?)?;
        let num = |v: String| v.parse::<f64>().map_err(|_| err(format!("bad number `{v}`")));
        let alpha = num(field("alpha")?)?;
        let epsilon = num(field("epsilon")?)?;
        let c_q = num(field("c_q")?)?;
        let depth: usize = field("depth")?.parse().map_err(|_| err("bad depth".into()))?;
        let indexers: Vec<AtomIndexer> = (0..=depth).map(|d| AtomIndexer::new(&model, d)).collect();
        let mut tables: Vec<Vec<f64>> = indexers.iter().map(|ix| vec![f64::NAN; ix.count()]).collect();
        for line in lines {
            let (w, m) = line.split_once(' ').ok_or_else(|| err(format!("bad line `{line}`")))?;
            let word = model.parse_element(w)?.into_word();
            if word.len() > depth {
                return Err(err(format!("cylinder `{w}` deeper than declared depth")));
            }
            tables[word.len()][indexers[word.len()].index_of(&word)] = num(m.trim().to_string())?;
        }
        if tables.iter().flatten().any(|m| m.is_nan()) {
            return Err(err("missing cylinder masses".into()));
        }
        Ok(Self {
            basepoint: model.identity(),
            model,
            alpha,
            c_q,
            max_depth: depth,
            epsilon,
            masses: Masses::Tabulated { tables, indexers },
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Tabulated copy from explicit depth-M masses (coarser depths by summation).
    pub fn from_bottom_masses(model: &GroupModel, depth: usize, bottom: Vec<f64>) -> Result<Self> {
        let indexers: Vec<AtomIndexer> = (0..=depth).map(|d| AtomIndexer::new(model, d)).collect();
        if bottom.len() != indexers[depth].count() {
            return Err(Error::Precondition("mass vector does not match the atom count".into()));
        }
        let mut tables = vec![Vec::new(); depth + 1];
        tables[depth] = bottom;
        for d in (0..depth).rev() {
            let mut row = vec![0.0; indexers[d].count()];
            for (i, w) in indexers[d + 1].words().iter().enumerate() {
                row[indexers[d].index_of(w)] += tables[d + 1][i];
            }
            tables[d] = row;
        }
        Ok(Self {
            model: model.clone(),
            basepoint: model.identity(),
            alpha: model.alpha(),
            c_q: 1.0,
            max_depth: depth,
            epsilon: 1.0,
            masses: Masses::Tabulated { tables, indexers },
        })
    }
}

fn exact_free_mass(rank: u32, depth: usize) -> f64 {
    if depth == 0 {
        return 1.0;
    }
    let q = (2 * rank - 1) as f64;
    1.0 / (2.0 * rank as f64) * q.powi(-(depth as i32 - 1))
}

fn exact_free_log_mass(rank: u32, depth: usize) -> f64 {
    if depth == 0 {
        return 0.0;
    }
    let q = (2 * rank - 1) as f64;
    -(2.0 * rank as f64).ln() - (depth as f64 - 1.0) * q.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f2() -> GroupModel {
        GroupModel::parse("free:2").unwrap()
    }

    fn w(m: &GroupModel, s: &str) -> Vec<Letter> {
        m.parse_element(s).unwrap().into_word()
    }

    #[test]
    fn busemann_examples() {
        let m = f2();
        let g = w(&m, "abA");
        assert_eq!(busemann(&m, &w(&m, "ab"), &g, &g).unwrap(), 0);
        assert_eq!(busemann(&m, &w(&m, "abAb"), &[], &g).unwrap(), 3);
        assert_eq!(busemann(&m, &w(&m, "bb"), &[], &g).unwrap(), -3);
        let err = busemann(&m, &w(&m, "ab"), &[], &g).unwrap_err();
        assert!(matches!(err, Error::InsufficientDepth { required: 4, available: 2 }));
    }

    #[test]
    fn exact_masses() {
        let m = f2();
        let d = exact_free_group_density(&m, &m.identity(), 6).unwrap();
        assert_eq!(d.reference_mass(&w(&m, "a")).unwrap(), 0.25);
        assert!((d.reference_mass(&w(&m, "ab")).unwrap() - 1.0 / 12.0).abs() < 1e-17);
        assert_eq!(d.reference_mass(&[]).unwrap(), 1.0);
    }

    #[test]
    fn invariance_and_cocycle_routes_agree() {
        let m = f2();
        let d = exact_free_group_density(&m, &m.identity(), 6).unwrap();
        for y in ["a", "aB", "Bab"] {
            for c in ["a", "b", "ab", "AAb", "Bab", "BaBB"] {
                let a = d.mass_at(&w(&m, y), &w(&m, c)).unwrap();
                let b = d.mass_via_cocycle(&w(&m, y), &w(&m, c)).unwrap();
                assert!((a - b).abs() < 1e-15 * a.max(b), "{y} {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn shadow_direction_examples() {
        let m = f2();
        let e = m.identity();
        let ab = m.parse_element("ab").unwrap();
        let dir = shadow_direction(&m, &e, &ab).unwrap();
        assert_eq!(&dir.letters(2), ab.word());
        assert_eq!(gp2_direction_word(&m, &dir, ab.word()), 4);
        assert!(matches!(shadow_direction(&m, &ab, &ab), Err(Error::UndefinedDirection)));
        assert_eq!(dir.format(&m), "aba^inf");
    }

    #[test]
    fn direction_parsing() {
        let m = f2();
        let v = Direction::parse(&m, "a^inf").unwrap();
        assert_eq!(v.letters(3), w(&m, "aaa"));
        let u = Direction::parse(&m, "B(ab)^inf").unwrap();
        assert_eq!(u.letters(5), w(&m, "Babab"));
        assert!(Direction::parse(&m, "aA^inf").is_err());
        let z = GroupModel::parse("zfp:2,3").unwrap();
        let c = Direction::canonical_extension(&z, &w(&z, "b^2")).unwrap();
        assert_eq!(c.letters(4), w(&z, "b^2aba"));
    }

    #[test]
    fn ahlfors_on_f2() {
        let m = f2();
        let d = exact_free_group_density(&m, &m.identity(), 10).unwrap();
        let p = VisualMetricParams::new(&m, 1.0).unwrap();
        let r = certify_ahlfors_regularity(&d, &p, 10).unwrap();
        assert!((r.dimension - 3f64.ln()).abs() < 1e-15);
        assert!(r.k <= 3.0);
        let empty = ConformalDensity::from_bottom_masses(&m, 2, vec![0.0; 12]).unwrap();
        assert!(matches!(certify_ahlfors_regularity(&empty, &p, 2), Err(Error::EmptySupport)));
    }

    #[test]
    fn patterson_preconditions() {
        let m = f2();
        let e = m.identity();
        assert!(matches!(patterson_density(&m, &e, m.alpha(), 16, 3), Err(Error::Divergence { .. })));
        assert!(matches!(patterson_density(&m, &e, m.alpha() + 0.05, 7, 3), Err(Error::Resolution(_))));
        let p = patterson_density(&m, &e, m.alpha() + 0.05, 16, 3).unwrap();
        let total: f64 = m.words_of_length(1).iter().map(|c| p.reference_mass(c).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((p.reference_mass(&w(&m, "a")).unwrap() - 0.25).abs() < 0.02);
    }

    #[test]
    fn density_file_roundtrip_is_bit_exact() {
        let m = f2();
        let p = patterson_density(&m, &m.identity(), m.alpha() + 0.05, 9, 3).unwrap();
        let text = p.to_text().unwrap();
        let q = ConformalDensity::from_text(&text).unwrap();
        assert_eq!(q.alpha().to_bits(), p.alpha().to_bits());
        assert_eq!(q.c_q().to_bits(), p.c_q().to_bits());
        for d in 0..=3 {
            for c in m.words_of_length(d) {
                assert_eq!(q.reference_mass(&c).unwrap().to_bits(), p.reference_mass(&c).unwrap().to_bits());
            }
        }
        assert_eq!(q.to_text().unwrap(), text);
    }
}
