//! Tree-like group models: free groups and free products of two finite cyclic
//! groups, both with a generating set whose Cayley graph is a block graph.
//!
//! Elements are normal-form words over a small letter alphabet. For `free:k`
//! the letters are `a, A, b, B, ...` (uppercase = inverse). For `zfp:p,q` every
//! nontrivial power of the two factor generators is a letter, so word length
//! counts syllables.

use std::cmp::Ordering;
use std::fmt;

use num_rational::Ratio;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub type Letter = u8;

pub const DEFAULT_CAP: u64 = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Backend {
    Free { rank: u8 },
    CyclicFreeProduct { p: u8, q: u8 },
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backend::Free { rank } => write!(f, "free:{rank}"),
            Backend::CyclicFreeProduct { p, q } => write!(f, "zfp:{p},{q}"),
        }
    }
}

/// Result of juxtaposing two letters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combine {
    Free,
    Cancel,
    Merge(Letter),
}

#[derive(Clone, Debug)]
pub struct GroupModel {
    backend: Backend,
    n_letters: usize,
    combine: Vec<Combine>,
    inverse: Vec<Letter>,
    delta: f64,
    alpha: f64,
}

impl PartialEq for GroupModel {
    fn eq(&self, other: &Self) -> bool {
        self.backend == other.backend
    }
}

impl Eq for GroupModel {}

/// Normal-form word tagged with its model.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GroupElement {
    backend: Backend,
    word: Vec<Letter>,
}

impl GroupElement {
    pub fn word(&self) -> &[Letter] {
        &self.word
    }

    pub fn len(&self) -> usize {
        self.word.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.word.is_empty()
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn into_word(self) -> Vec<Letter> {
        self.word
    }
}

impl PartialOrd for GroupElement {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for GroupElement {
    fn cmp(&self, other: &Self) -> Ordering {
        shortlex_cmp(&self.word, &other.word)
    }
}

pub fn shortlex_cmp(a: &[Letter], b: &[Letter]) -> Ordering {
    a.len().cmp(&b.len()).then_with(|| a.cmp(b))
}

/// Growth-rate estimate from exact sphere counts.
#[derive(Clone, Copy, Debug)]
pub struct GrowthEstimate {
    pub radius: usize,
    /// log|C_R| / R.
    pub raw: f64,
    /// Two-step ratio (log|C_R| - log|C_{R-2}|)/2, exact for period-2 growth.
    pub extrapolated: f64,
}

impl GroupModel {
    pub fn free(rank: u8) -> Result<Self> {
        if rank < 2 || rank > 13 {
            return Err(Error::InvalidModel(format!("free:{rank}")));
        }
        let n = 2 * rank as usize;
        let inverse: Vec<Letter> = (0..n as u8).map(|l| l ^ 1).collect();
        let mut combine = vec![Combine::Free; n * n];
        for a in 0..n {
            combine[a * n + (a ^ 1)] = Combine::Cancel;
        }
        Ok(Self {
            backend: Backend::Free { rank },
            n_letters: n,
            combine,
            inverse,
            delta: 0.0,
            alpha: ((2 * rank as u32 - 1) as f64).ln(),
        })
    }

    pub fn cyclic_free_product(p: u8, q: u8) -> Result<Self> {
        if p < 2 || q < 2 || (p == 2 && q == 2) || p > 40 || q > 40 {
            return Err(Error::InvalidModel(format!("zfp:{p},{q}")));
        }
        let n = (p - 1) as usize + (q - 1) as usize;
        let split = (p - 1) as usize;
        let factor_of = |l: usize| -> (usize, usize, usize) {
            if l < split {
                (0, l + 1, p as usize)
            } else {
                (1, l - split + 1, q as usize)
            }
        };
        let letter_of = |factor: usize, power: usize| -> Letter {
            if factor == 0 {
                (power - 1) as Letter
            } else {
                (split + power - 1) as Letter
            }
        };
        let mut combine = vec![Combine::Free; n * n];
        let mut inverse = vec![0; n];
        for a in 0..n {
            let (fa, ea, order) = factor_of(a);
            inverse[a] = letter_of(fa, order - ea);
            for b in 0..n {
                let (fb, eb, _) = factor_of(b);
                if fa == fb {
                    let e = (ea + eb) % order;
                    combine[a * n + b] = if e == 0 {
                        Combine::Cancel
                    } else {
                        Combine::Merge(letter_of(fa, e))
                    };
                }
            }
        }
        let mut model = Self {
            backend: Backend::CyclicFreeProduct { p, q },
            n_letters: n,
            combine,
            inverse,
            delta: 0.0,
            alpha: 0.5 * (((p - 1) as f64) * ((q - 1) as f64)).ln(),
        };
        model.delta = certify_delta(&model, DELTA_CONSTRUCTION_RADIUS);
        Ok(model)
    }

    /// Parses `free:k` or `zfp:p,q`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidModel(s.to_string());
        if let Some(rest) = s.strip_prefix("free:") {
            let k: u8 = rest.trim().parse().map_err(|_| bad())?;
            return Self::free(k).map_err(|_| bad());
        }
        if let Some(rest) = s.strip_prefix("zfp:") {
            let mut it = rest.split(',');
            let p: u8 = it.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
            let q: u8 = it.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
            if it.next().is_some() {
                return Err(bad());
            }
            return Self::cyclic_free_product(p, q).map_err(|_| bad());
        }
        Err(bad())
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn name(&self) -> String {
        self.backend.to_string()
    }

    pub fn is_free(&self) -> bool {
        matches!(self.backend, Backend::Free { .. })
    }

    pub fn alphabet_size(&self) -> usize {
        self.n_letters
    }

    pub fn letters(&self) -> impl Iterator<Item = Letter> {
        0..self.n_letters as Letter
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Constant c with (y, w_x^y)_x >= d(x,y) - c; zero on block-graph backends.
    pub fn upper_gromov_c(&self) -> f64 {
        0.0
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn combine(&self, a: Letter, b: Letter) -> Combine {
        self.combine[a as usize * self.n_letters + b as usize]
    }

    pub fn compatible(&self, prev: Option<Letter>, next: Letter) -> bool {
        match prev {
            None => true,
            Some(p) => self.combine(p, next) == Combine::Free,
        }
    }

    pub fn inverse_letter(&self, l: Letter) -> Letter {
        self.inverse[l as usize]
    }

    /// Factor index of a letter: generator index for free groups, 0/1 otherwise.
    pub fn factor(&self, l: Letter) -> usize {
        match self.backend {
            Backend::Free { .. } => (l >> 1) as usize,
            Backend::CyclicFreeProduct { p, .. } => usize::from(l as usize >= (p - 1) as usize),
        }
    }

    pub fn identity(&self) -> GroupElement {
        GroupElement { backend: self.backend, word: Vec::new() }
    }

    /// Wraps a word, rejecting anything not in normal form.
    pub fn element(&self, word: Vec<Letter>) -> Result<GroupElement> {
        if let Some(&l) = word.iter().find(|&&l| l as usize >= self.n_letters) {
            return Err(Error::Parse {
                input: format!("{word:?}"),
                reason: format!("letter code {l} outside the alphabet"),
            });
        }
        if !self.is_normal(&word) {
            return Err(Error::Parse {
                input: self.format_word(&word),
                reason: "word is not in normal form".into(),
            });
        }
        Ok(GroupElement { backend: self.backend, word })
    }

    pub(crate) fn element_unchecked(&self, word: Vec<Letter>) -> GroupElement {
        debug_assert!(self.is_normal(&word));
        GroupElement { backend: self.backend, word }
    }

    pub fn is_normal(&self, word: &[Letter]) -> bool {
        word.windows(2).all(|w| self.combine(w[0], w[1]) == Combine::Free)
    }

    /// Pushes one letter onto a normal-form stack. Returns true if the letter
    /// was absorbed by cancellation.
    pub fn push_letter(&self, stack: &mut Vec<Letter>, l: Letter) -> bool {
        let mut cur = l;
        loop {
            match stack.last() {
                None => {
                    stack.push(cur);
                    return false;
                }
                Some(&top) => match self.combine(top, cur) {
                    Combine::Free => {
                        stack.push(cur);
                        return false;
                    }
                    Combine::Cancel => {
                        stack.pop();
                        return true;
                    }
                    Combine::Merge(m) => {
                        stack.pop();
                        cur = m;
                    }
                },
            }
        }
    }

    /// Appends `word` (normal form) to `stack`, reducing; returns how many
    /// letters of `word` were cancelled.
    pub fn reduce_onto(&self, stack: &mut Vec<Letter>, word: &[Letter]) -> usize {
        word.iter().filter(|&&l| self.push_letter(stack, l)).count()
    }

    /// Normal form of the concatenation of arbitrary letter words.
    pub fn reduce_word(&self, word: &[Letter]) -> Vec<Letter> {
        let mut out = Vec::with_capacity(word.len());
        for &l in word {
            self.push_letter(&mut out, l);
        }
        out
    }

    pub fn inverse_word(&self, word: &[Letter]) -> Vec<Letter> {
        word.iter().rev().map(|&l| self.inverse_letter(l)).collect()
    }

    pub fn mul_words(&self, a: &[Letter], b: &[Letter]) -> Vec<Letter> {
        let mut out = a.to_vec();
        self.reduce_onto(&mut out, b);
        out
    }

    fn check(&self, g: &GroupElement) -> Result<()> {
        if g.backend != self.backend {
            return Err(Error::ModelMismatch { left: self.name(), right: g.backend.to_string() });
        }
        Ok(())
    }

    pub fn multiply(&self, a: &GroupElement, b: &GroupElement) -> Result<GroupElement> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.element_unchecked(self.mul_words(&a.word, &b.word)))
    }

    pub fn inverse(&self, a: &GroupElement) -> Result<GroupElement> {
        self.check(a)?;
        Ok(self.element_unchecked(self.inverse_word(&a.word)))
    }

    pub fn distance(&self, a: &GroupElement, b: &GroupElement) -> Result<usize> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.distance_words(&a.word, &b.word))
    }

    pub fn distance_words(&self, a: &[Letter], b: &[Letter]) -> usize {
        let mut s = self.inverse_word(a);
        self.reduce_onto(&mut s, b);
        s.len()
    }

    /// Twice the Gromov product (y,z)_e, computed from the common prefix.
    pub fn gp2_identity(&self, y: &[Letter], z: &[Letter]) -> i64 {
        let l = common_prefix(y, z);
        let mut twice = 2 * l as i64;
        if l < y.len() && l < z.len() {
            if let Combine::Merge(_) = self.combine(self.inverse_letter(y[l]), z[l]) {
                twice += 1;
            }
        }
        twice
    }

    /// (y,z)_x = (d(x,y) + d(x,z) - d(y,z))/2, exactly.
    pub fn gromov_product(
        &self,
        base: &GroupElement,
        y: &GroupElement,
        z: &GroupElement,
    ) -> Result<Ratio<i64>> {
        let dxy = self.distance(base, y)? as i64;
        let dxz = self.distance(base, z)? as i64;
        let dyz = self.distance(y, z)? as i64;
        Ok(Ratio::new(dxy + dxz - dyz, 2))
    }

    pub fn format_word(&self, word: &[Letter]) -> String {
        if word.is_empty() {
            return "e".into();
        }
        let mut s = String::new();
        for &l in word {
            s.push_str(&self.letter_name(l));
        }
        s
    }

    pub fn format(&self, g: &GroupElement) -> String {
        self.format_word(&g.word)
    }

    pub fn letter_name(&self, l: Letter) -> String {
        match self.backend {
            Backend::Free { .. } => {
                let c = (b'a' + (l >> 1)) as char;
                if l & 1 == 0 {
                    c.to_string()
                } else {
                    c.to_ascii_uppercase().to_string()
                }
            }
            Backend::CyclicFreeProduct { p, .. } => {
                let split = p - 1;
                let (c, e) = if l < split { ('a', l + 1) } else { ('b', l - split + 1) };
                if e == 1 {
                    c.to_string()
                } else {
                    format!("{c}^{e}")
                }
            }
        }
    }

    /// Letter for a generator symbol raised to +1 / -1.
    fn generator_letter(&self, c: char) -> Option<(Letter, bool)> {
        let lower = c.to_ascii_lowercase();
        let idx = (lower as u32).checked_sub('a' as u32)? as u8;
        let inverted = c.is_ascii_uppercase();
        match self.backend {
            Backend::Free { rank } => {
                if idx >= rank {
                    return None;
                }
                Some((2 * idx, inverted))
            }
            Backend::CyclicFreeProduct { p, .. } => match idx {
                0 => Some((0, inverted)),
                1 => Some((p - 1, inverted)),
                _ => None,
            },
        }
    }

    /// Parses words like `ab`, `aB`, `b⁻¹a`, `a^3b^-2`, `e`.
    pub fn parse_element(&self, s: &str) -> Result<GroupElement> {
        let err = |reason: &str| Error::Parse { input: s.to_string(), reason: reason.to_string() };
        let t = s.trim();
        if t.is_empty() || t == "e" || t == "1" {
            return Ok(self.identity());
        }
        let chars: Vec<char> = t.chars().collect();
        let mut i = 0;
        let mut word: Vec<Letter> = Vec::new();
        while i < chars.len() {
            let c = chars[i];
            if c.is_whitespace() || c == '*' || c == '.' {
                i += 1;
                continue;
            }
            let (letter, inverted) =
                self.generator_letter(c).ok_or_else(|| err(&format!("unknown generator `{c}`")))?;
            i += 1;
            let mut exp: i64 = 1;
            if i < chars.len() && chars[i] == '⁻' {
                if i + 1 < chars.len() && chars[i + 1] == '¹' {
                    exp = -1;
                    i += 2;
                } else {
                    return Err(err("expected ⁻¹"));
                }
            } else if i < chars.len() && chars[i] == '^' {
                i += 1;
                let start = i;
                if i < chars.len() && (chars[i] == '-' || chars[i] == '+') {
                    i += 1;
                }
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                let num: String = chars[start..i].iter().collect();
                exp = num.parse().map_err(|_| err("bad exponent"))?;
            }
            if inverted {
                exp = -exp;
            }
            let base = if exp < 0 { self.inverse_letter(letter) } else { letter };
            for _ in 0..exp.unsigned_abs() {
                self.push_letter(&mut word, base);
            }
        }
        Ok(self.element_unchecked(word))
    }

    // ---- counting -------------------------------------------------------

    /// Exact sphere sizes |C_0|, ..., |C_max|.
    pub fn sphere_sizes(&self, max: usize) -> Vec<u128> {
        let table = ContinuationTable::new(self, max);
        (0..=max).map(|k| table.count(None, k)).collect()
    }

    pub fn sphere_size(&self, k: usize) -> u128 {
        self.sphere_sizes(k)[k]
    }

    pub fn annulus_count(&self, n: usize, rho: f64) -> u128 {
        let (lo, hi) = annulus_bounds(n, rho);
        self.sphere_sizes(hi)[lo..=hi].iter().fold(0u128, |a, &b| a.saturating_add(b))
    }

    /// sup_k |C_k| e^{-alpha k} over k <= max.
    pub fn sphere_growth_constant(&self, max: usize) -> f64 {
        self.sphere_sizes(max)
            .iter()
            .enumerate()
            .map(|(k, &c)| c as f64 * (-self.alpha * k as f64).exp())
            .fold(0.0, f64::max)
    }

    pub fn estimate_critical_exponent(&self, radius: usize) -> Result<GrowthEstimate> {
        if radius < 5 {
            return Err(Error::DegenerateEstimate { radius, min: 5 });
        }
        let sizes = self.sphere_sizes(radius);
        let lr = (sizes[radius] as f64).ln();
        let lr2 = (sizes[radius - 2] as f64).ln();
        Ok(GrowthEstimate { radius, raw: lr / radius as f64, extrapolated: 0.5 * (lr - lr2) })
    }

    // ---- enumeration ----------------------------------------------------

    fn guard(&self, n: usize, rho: f64, cap: u64) -> Result<(usize, usize)> {
        let predicted = self.annulus_count(n, rho);
        if predicted > cap as u128 {
            return Err(Error::CapExceeded { predicted, cap });
        }
        Ok(annulus_bounds(n, rho))
    }

    /// All elements with n - rho <= |g| <= n + rho, in shortlex order.
    pub fn enumerate_annulus(&self, n: usize, rho: f64, cap: u64) -> Result<Vec<GroupElement>> {
        self.par_map_annulus(n, rho, cap, |w| self.element_unchecked(w.to_vec()))
    }

    /// All elements with |g| <= r, in shortlex order.
    pub fn enumerate_ball(&self, r: usize, cap: u64) -> Result<Vec<GroupElement>> {
        let predicted = self.sphere_sizes(r).iter().fold(0u128, |a, &b| a.saturating_add(b));
        if predicted > cap as u128 {
            return Err(Error::CapExceeded { predicted, cap });
        }
        let mut out = Vec::new();
        for k in 0..=r {
            out.extend(self.enumerate_annulus(k, 0.0, cap)?);
        }
        Ok(out)
    }

    /// Maps every annulus element in parallel; the output is in shortlex order
    /// regardless of the thread count.
    pub fn par_map_annulus<T, F>(&self, n: usize, rho: f64, cap: u64, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(&[Letter]) -> T + Sync,
    {
        let (lo, hi) = self.guard(n, rho, cap)?;
        let mut out = Vec::new();
        for k in lo..=hi {
            let prefixes = self.words_of_length(k.min(2));
            let chunks: Vec<Vec<T>> = prefixes
                .par_iter()
                .map(|p| {
                    let mut local = Vec::new();
                    let mut buf = p.clone();
                    self.dfs(&mut buf, k, &mut |w| local.push(f(w)));
                    local
                })
                .collect();
            for c in chunks {
                out.extend(c);
            }
        }
        Ok(out)
    }

    /// Serial visit of the sphere of radius k (lexicographic order).
    pub fn visit_sphere(&self, k: usize, f: &mut dyn FnMut(&[Letter])) {
        let mut buf = Vec::with_capacity(k);
        self.dfs(&mut buf, k, f);
    }

    fn dfs(&self, buf: &mut Vec<Letter>, k: usize, f: &mut dyn FnMut(&[Letter])) {
        if buf.len() == k {
            f(buf);
            return;
        }
        let last = buf.last().copied();
        for l in 0..self.n_letters as Letter {
            if self.compatible(last, l) {
                buf.push(l);
                self.dfs(buf, k, f);
                buf.pop();
            }
        }
    }

    /// All normal-form words of length k, lexicographic.
    pub fn words_of_length(&self, k: usize) -> Vec<Vec<Letter>> {
        let mut out = Vec::new();
        self.visit_sphere(k, &mut |w| out.push(w.to_vec()));
        out
    }

    /// Letters that may follow `prev` in a normal form.
    pub fn children(&self, prev: Option<Letter>) -> Vec<Letter> {
        self.letters().filter(|&l| self.compatible(prev, l)).collect()
    }

    /// Canonical extension letter: the smallest letter allowed after `prev`.
    pub fn smallest_child(&self, prev: Option<Letter>) -> Letter {
        self.letters().find(|&l| self.compatible(prev, l)).expect("alphabet has a compatible letter")
    }
}

pub fn common_prefix(a: &[Letter], b: &[Letter]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// Integer length range of the annulus n - rho <= k <= n + rho.
pub fn annulus_bounds(n: usize, rho: f64) -> (usize, usize) {
    let lo = (n as f64 - rho).ceil().max(0.0) as usize;
    let hi = (n as f64 + rho + 1e-12).floor() as usize;
    (lo, hi.max(lo))
}

const DELTA_CONSTRUCTION_RADIUS: usize = 3;

/// Largest four-point slack min((y,u)_e,(u,z)_e) - (y,z)_e over the ball of
/// the given radius (basepoint e suffices by invariance).
pub fn certify_delta(model: &GroupModel, radius: usize) -> f64 {
    let mut ball: Vec<Vec<Letter>> = Vec::new();
    for k in 0..=radius {
        ball.extend(model.words_of_length(k));
    }
    let worst: i64 = ball
        .par_iter()
        .map(|y| {
            let mut local = i64::MIN;
            for z in &ball {
                let yz = model.gp2_identity(y, z);
                for u in &ball {
                    let m = model.gp2_identity(y, u).min(model.gp2_identity(u, z));
                    local = local.max(m - yz);
                }
            }
            local
        })
        .max()
        .unwrap_or(0);
    (worst.max(0)) as f64 / 2.0
}

/// Number of normal-form continuations, tabulated per starting letter.
#[derive(Clone, Debug)]
pub struct ContinuationTable {
    n_letters: usize,
    /// starting[r][l]: words of length r + 1 starting with l.
    starting: Vec<Vec<u128>>,
    follow: Vec<Vec<Letter>>,
    roots: Vec<Letter>,
}

impl ContinuationTable {
    pub fn new(model: &GroupModel, max_len: usize) -> Self {
        let n = model.alphabet_size();
        let follow: Vec<Vec<Letter>> =
            (0..n as Letter).map(|l| model.children(Some(l))).collect();
        let mut starting = vec![vec![1u128; n]];
        for r in 1..max_len.max(1) {
            let prev = &starting[r - 1];
            let row: Vec<u128> = (0..n)
                .map(|l| {
                    follow[l].iter().fold(0u128, |a, &m| a.saturating_add(prev[m as usize]))
                })
                .collect();
            starting.push(row);
        }
        Self { n_letters: n, starting, follow, roots: model.children(None) }
    }

    /// Words of length `len` that may follow `prev` (None = at the root).
    pub fn count(&self, prev: Option<Letter>, len: usize) -> u128 {
        if len == 0 {
            return 1;
        }
        assert!(len <= self.starting.len(), "continuation table too short");
        let row = &self.starting[len - 1];
        let letters = match prev {
            None => &self.roots,
            Some(p) => &self.follow[p as usize],
        };
        letters.iter().fold(0u128, |a, &m| a.saturating_add(row[m as usize]))
    }

    /// Words of length `len` starting with `first`.
    pub fn count_starting(&self, first: Letter, len: usize) -> u128 {
        if len == 0 {
            return 1;
        }
        self.starting[len - 1][first as usize]
    }

    pub fn alphabet_size(&self) -> usize {
        self.n_letters
    }
}

/// Shortlex ranking of the normal-form words of a fixed length.
#[derive(Clone, Debug)]
pub struct AtomIndexer {
    depth: usize,
    count: usize,
    n_letters: usize,
    /// below[i][(prev+1)*n + l]: number of depth-words whose letter at position
    /// i is smaller than l, given the previous letter.
    below: Vec<Vec<u64>>,
    /// starting[r][l] as in ContinuationTable, in u64.
    starting: Vec<Vec<u64>>,
    compat: Vec<bool>,
}

impl AtomIndexer {
    pub fn new(model: &GroupModel, depth: usize) -> Self {
        let n = model.alphabet_size();
        let table = ContinuationTable::new(model, depth.max(1));
        let count = table.count(None, depth);
        assert!(count <= usize::MAX as u128 / 2, "too many atoms at depth {depth}");
        let starting: Vec<Vec<u64>> = (0..depth.max(1))
            .map(|r| (0..n).map(|l| table.count_starting(l as Letter, r + 1) as u64).collect())
            .collect();
        let mut compat = vec![false; (n + 1) * n];
        for prev in 0..=n {
            let p = if prev == 0 { None } else { Some((prev - 1) as Letter) };
            for l in 0..n {
                compat[prev * n + l] = model.compatible(p, l as Letter);
            }
        }
        let mut below = Vec::with_capacity(depth);
        for i in 0..depth {
            let rem = depth - i; // letters from position i on
            let mut row = vec![0u64; (n + 1) * n];
            for prev in 0..=n {
                let mut acc = 0u64;
                for l in 0..n {
                    row[prev * n + l] = acc;
                    if compat[prev * n + l] {
                        acc += starting[rem - 1][l];
                    }
                }
            }
            below.push(row);
        }
        Self { depth, count: count as usize, n_letters: n, below, starting, compat }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Index of the atom containing a word of length >= depth (only the first
    /// `depth` letters are read).
    pub fn index_of(&self, word: &[Letter]) -> usize {
        debug_assert!(word.len() >= self.depth);
        let n = self.n_letters;
        let mut idx = 0u64;
        let mut prev = 0usize;
        for i in 0..self.depth {
            let l = word[i] as usize;
            idx += self.below[i][prev * n + l];
            prev = l + 1;
        }
        idx as usize
    }

    pub fn word_at(&self, mut idx: usize) -> Vec<Letter> {
        let n = self.n_letters;
        let mut out = Vec::with_capacity(self.depth);
        let mut prev = 0usize;
        for i in 0..self.depth {
            let rem = self.depth - i;
            let mut chosen = None;
            for l in 0..n {
                if !self.compat[prev * n + l] {
                    continue;
                }
                let c = self.starting[rem - 1][l] as usize;
                if idx < c {
                    chosen = Some(l);
                    break;
                }
                idx -= c;
            }
            let l = chosen.expect("atom index out of range");
            out.push(l as Letter);
            prev = l + 1;
        }
        out
    }

    /// All atom words in index order.
    pub fn words(&self) -> Vec<Vec<Letter>> {
        (0..self.count).map(|i| self.word_at(i)).collect()
    }
}
