//! Exact symbolic Hamiltonians: finite sums `c · q^α · p^β · trig(k·q)` with
//! at most one trigonometric factor per term.
//!
//! Bracket convention: `{f,g} = Σ_j ∂_{p_j}f ∂_{q_j}g − ∂_{q_j}f ∂_{p_j}g`,
//! so the vector field of `f` is `(∂_p f, −∂_q f)`.

mod parse;

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{input, Result};
use crate::geometry::PhasePoint;

pub use parse::parse_expr;

/// Coefficients below this fraction of the operand scale are treated as
/// cancellation residue and removed during canonicalisation.
pub const ZERO_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Trig {
    Cos,
    Sin,
}

/// Monomial signature of a term. A trig frequency is nonzero with its first
/// nonzero entry positive.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Monomial {
    pub qexp: Vec<u32>,
    pub pexp: Vec<u32>,
    pub trig: Option<(Vec<i64>, Trig)>,
}

impl Monomial {
    fn one(d: usize) -> Self {
        Monomial { qexp: vec![0; d], pexp: vec![0; d], trig: None }
    }

    pub fn is_constant(&self) -> bool {
        self.trig.is_none() && self.qexp.iter().all(|&e| e == 0) && self.pexp.iter().all(|&e| e == 0)
    }

    fn degree(&self) -> u32 {
        self.qexp.iter().sum::<u32>() + self.pexp.iter().sum::<u32>()
    }
}

type TrigFactor = Option<(Vec<i64>, Trig)>;

/// Brings a trig factor to canonical sign; returns the coefficient sign and
/// the canonical factor, or `None` for the zero function.
fn canonical_trig(k: Vec<i64>, t: Trig) -> Option<(f64, TrigFactor)> {
    match k.iter().find(|&&x| x != 0) {
        None => match t {
            Trig::Cos => Some((1.0, None)),
            Trig::Sin => None,
        },
        Some(&first) if first > 0 => Some((1.0, Some((k, t)))),
        Some(_) => {
            let neg: Vec<i64> = k.iter().map(|x| -x).collect();
            match t {
                Trig::Cos => Some((1.0, Some((neg, Trig::Cos)))),
                Trig::Sin => Some((-1.0, Some((neg, Trig::Sin)))),
            }
        }
    }
}

/// Product of two trig factors as a sum of at most two signed factors.
fn trig_product(a: &TrigFactor, b: &TrigFactor) -> Vec<(f64, TrigFactor)> {
    let (ka, ta, kb, tb) = match (a, b) {
        (None, x) | (x, None) => return vec![(1.0, x.clone())],
        (Some((ka, ta)), Some((kb, tb))) => (ka, *ta, kb, *tb),
    };
    let sum: Vec<i64> = ka.iter().zip(kb).map(|(x, y)| x + y).collect();
    let diff: Vec<i64> = ka.iter().zip(kb).map(|(x, y)| x - y).collect();
    // cos a cos b = ½cos(a−b) + ½cos(a+b); sin a sin b = ½cos(a−b) − ½cos(a+b);
    // sin a cos b = ½sin(a+b) + ½sin(a−b); cos a sin b = ½sin(a+b) − ½sin(a−b).
    let raw = match (ta, tb) {
        (Trig::Cos, Trig::Cos) => [(0.5, diff, Trig::Cos), (0.5, sum, Trig::Cos)],
        (Trig::Sin, Trig::Sin) => [(0.5, diff, Trig::Cos), (-0.5, sum, Trig::Cos)],
        (Trig::Sin, Trig::Cos) => [(0.5, sum, Trig::Sin), (0.5, diff, Trig::Sin)],
        (Trig::Cos, Trig::Sin) => [(0.5, sum, Trig::Sin), (-0.5, diff, Trig::Sin)],
    };
    raw.into_iter()
        .filter_map(|(c, k, t)| canonical_trig(k, t).map(|(s, f)| (c * s, f)))
        .collect()
}

/// Symbolic Hamiltonian in canonical form.
#[derive(Debug, Clone, PartialEq)]
pub struct HamExpr {
    d: usize,
    terms: BTreeMap<Monomial, f64>,
}

impl HamExpr {
    pub fn zero(d: usize) -> Self {
        HamExpr { d, terms: BTreeMap::new() }
    }

    pub fn constant(d: usize, c: f64) -> Self {
        Self::from_terms(d, [(Monomial::one(d), c)], c.abs())
    }

    pub fn q(d: usize, i: usize) -> Self {
        let mut m = Monomial::one(d);
        m.qexp[i] += 1;
        Self::from_terms(d, [(m, 1.0)], 1.0)
    }

    pub fn p(d: usize, i: usize) -> Self {
        let mut m = Monomial::one(d);
        m.pexp[i] += 1;
        Self::from_terms(d, [(m, 1.0)], 1.0)
    }

    pub fn cos(k: Vec<i64>) -> Self {
        Self::trig(k, Trig::Cos)
    }

    pub fn sin(k: Vec<i64>) -> Self {
        Self::trig(k, Trig::Sin)
    }

    fn trig(k: Vec<i64>, t: Trig) -> Self {
        let d = k.len();
        match canonical_trig(k, t) {
            None => Self::zero(d),
            Some((s, f)) => {
                let mut m = Monomial::one(d);
                m.trig = f;
                Self::from_terms(d, [(m, s)], 1.0)
            }
        }
    }

    /// Monomial `c · q^α · p^β`.
    pub fn monomial(c: f64, qexp: Vec<u32>, pexp: Vec<u32>) -> Self {
        let d = qexp.len();
        assert_eq!(pexp.len(), d, "exponent vectors must share a dimension");
        Self::from_terms(d, [(Monomial { qexp, pexp, trig: None }, c)], c.abs())
    }

    /// Kinetic energy `|p|²/2`.
    pub fn kinetic(d: usize) -> Self {
        (0..d).fold(Self::zero(d), |acc, i| acc.add(&Self::p(d, i).mul(&Self::p(d, i)).scale(0.5)))
    }

    /// Harmonic potential `|q|²/2`.
    pub fn harmonic(d: usize) -> Self {
        (0..d).fold(Self::zero(d), |acc, i| acc.add(&Self::q(d, i).mul(&Self::q(d, i)).scale(0.5)))
    }

    fn from_terms(d: usize, terms: impl IntoIterator<Item = (Monomial, f64)>, scale: f64) -> Self {
        let mut map: BTreeMap<Monomial, f64> = BTreeMap::new();
        for (m, c) in terms {
            *map.entry(m).or_insert(0.0) += c;
        }
        let cut = ZERO_TOL * scale;
        map.retain(|_, c| !(c.is_finite() && (*c == 0.0 || c.abs() <= cut)));
        HamExpr { d, terms: map }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> {
        self.terms.iter().map(|(m, c)| (m, *c))
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn is_empty(&self) -> bool {
        self.is_zero()
    }

    fn max_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |a, c| a.max(c.abs()))
    }

    fn check_dim(&self, other: &HamExpr) -> Result<()> {
        if self.d != other.d {
            return input(format!("expression dimensions differ ({} vs {})", self.d, other.d));
        }
        Ok(())
    }

    pub fn add(&self, other: &HamExpr) -> HamExpr {
        assert_eq!(self.d, other.d, "expression dimensions differ");
        let scale = self.max_coeff().max(other.max_coeff());
        Self::from_terms(
            self.d,
            self.terms.iter().chain(&other.terms).map(|(m, c)| (m.clone(), *c)),
            scale,
        )
    }

    pub fn sub(&self, other: &HamExpr) -> HamExpr {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> HamExpr {
        Self::from_terms(self.d, self.terms.iter().map(|(m, c)| (m.clone(), c * s)), self.max_coeff() * s.abs())
    }

    pub fn mul(&self, other: &HamExpr) -> HamExpr {
        assert_eq!(self.d, other.d, "expression dimensions differ");
        let mut out = Vec::new();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                let qexp: Vec<u32> = ma.qexp.iter().zip(&mb.qexp).map(|(a, b)| a + b).collect();
                let pexp: Vec<u32> = ma.pexp.iter().zip(&mb.pexp).map(|(a, b)| a + b).collect();
                for (s, trig) in trig_product(&ma.trig, &mb.trig) {
                    out.push((Monomial { qexp: qexp.clone(), pexp: pexp.clone(), trig }, ca * cb * s));
                }
            }
        }
        Self::from_terms(self.d, out, self.max_coeff() * other.max_coeff())
    }

    pub fn powi(&self, n: u32) -> HamExpr {
        (0..n).fold(Self::constant(self.d, 1.0), |acc, _| acc.mul(self))
    }

    /// Partial derivative in `q_i`.
    pub fn diff_q(&self, i: usize) -> HamExpr {
        let mut out = Vec::new();
        for (m, c) in &self.terms {
            if m.qexp[i] > 0 {
                let mut n = m.clone();
                n.qexp[i] -= 1;
                out.push((n, c * m.qexp[i] as f64));
            }
            if let Some((k, t)) = &m.trig {
                if k[i] != 0 {
                    let (s, nt) = match t {
                        Trig::Cos => (-1.0, Trig::Sin),
                        Trig::Sin => (1.0, Trig::Cos),
                    };
                    let mut n = m.clone();
                    n.trig = Some((k.clone(), nt));
                    out.push((n, c * s * k[i] as f64));
                }
            }
        }
        let scale = self.max_coeff() * self.max_frequency().max(self.max_degree() as f64).max(1.0);
        Self::from_terms(self.d, out, scale)
    }

    /// Partial derivative in `p_i`.
    pub fn diff_p(&self, i: usize) -> HamExpr {
        let mut out = Vec::new();
        for (m, c) in &self.terms {
            if m.pexp[i] > 0 {
                let mut n = m.clone();
                n.pexp[i] -= 1;
                out.push((n, c * m.pexp[i] as f64));
            }
        }
        Self::from_terms(self.d, out, self.max_coeff() * (self.max_degree() as f64).max(1.0))
    }

    fn max_frequency(&self) -> f64 {
        self.terms
            .keys()
            .filter_map(|m| m.trig.as_ref())
            .flat_map(|(k, _)| k.iter().map(|x| x.abs() as f64))
            .fold(0.0, f64::max)
    }

    /// Bounds on `|∂_{q_i} f|` and `|∂_{p_i} f|` over the box `|q_i| <= qmax_i`,
    /// `|p_i| <= pmax_i`.
    pub fn abs_grad_bound(&self, qmax: &[f64], pmax: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.d;
        let mut bq = vec![0.0; d];
        let mut bp = vec![0.0; d];
        let pow = |x: f64, e: u32| if e == 0 { 1.0 } else { x.powi(e as i32) };
        for (m, c) in &self.terms {
            let qa: Vec<f64> = (0..d).map(|i| pow(qmax[i], m.qexp[i])).collect();
            let pa: Vec<f64> = (0..d).map(|i| pow(pmax[i], m.pexp[i])).collect();
            let qall: f64 = qa.iter().product();
            let pall: f64 = pa.iter().product();
            for i in 0..d {
                let qless: f64 = (0..d)
                    .map(|j| if j == i { if m.qexp[i] > 0 { m.qexp[i] as f64 * pow(qmax[i], m.qexp[i] - 1) } else { 0.0 } } else { qa[j] })
                    .product();
                let k = m.trig.as_ref().map_or(0.0, |(k, _)| k[i].abs() as f64);
                bq[i] += c.abs() * (qless + k * qall) * pall;
                let pless: f64 = (0..d)
                    .map(|j| if j == i { if m.pexp[i] > 0 { m.pexp[i] as f64 * pow(pmax[i], m.pexp[i] - 1) } else { 0.0 } } else { pa[j] })
                    .product();
                bp[i] += c.abs() * qall * pless;
            }
        }
        (bq, bp)
    }

    pub fn max_degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    pub fn depends_on_p(&self) -> bool {
        self.terms.keys().any(|m| m.pexp.iter().any(|&e| e > 0))
    }

    pub fn depends_on_q(&self) -> bool {
        self.terms.keys().any(|m| m.trig.is_some() || m.qexp.iter().any(|&e| e > 0))
    }

    /// Copy without the constant term.
    pub fn drop_constant(&self) -> HamExpr {
        let mut e = self.clone();
        e.terms.retain(|m, _| !m.is_constant());
        e
    }

    /// Coefficient-wise comparison with absolute tolerance `tol`.
    pub fn approx_eq(&self, other: &HamExpr, tol: f64) -> bool {
        self.d == other.d && self.sub(other).terms.values().all(|c| c.abs() <= tol)
    }

    /// Largest coefficient magnitude of `self − other`.
    pub fn coeff_distance(&self, other: &HamExpr) -> f64 {
        self.sub(other).max_coeff()
    }

    pub fn eval(&self, x: &PhasePoint) -> f64 {
        self.grad_eval(x).0
    }

    /// Value and the gradients in `q` and `p`, evaluated exactly term by term.
    pub fn grad_eval(&self, x: &PhasePoint) -> (f64, Vec<f64>, Vec<f64>) {
        let d = self.d;
        let mut val = 0.0;
        let mut gq = vec![0.0; d];
        let mut gp = vec![0.0; d];
        for (m, c) in &self.terms {
            let qpow: Vec<f64> = (0..d).map(|i| x.q[i].powi(m.qexp[i] as i32)).collect();
            let ppow: Vec<f64> = (0..d).map(|i| x.p[i].powi(m.pexp[i] as i32)).collect();
            let poly: f64 = qpow.iter().product::<f64>() * ppow.iter().product::<f64>();
            let (tv, tdv) = match &m.trig {
                None => (1.0, 0.0),
                Some((k, t)) => {
                    let arg: f64 = k.iter().zip(&x.q).map(|(k, q)| *k as f64 * q).sum();
                    match t {
                        Trig::Cos => (arg.cos(), -arg.sin()),
                        Trig::Sin => (arg.sin(), arg.cos()),
                    }
                }
            };
            val += c * poly * tv;
            for i in 0..d {
                let mut dpoly = 0.0;
                if m.qexp[i] > 0 {
                    let partial: f64 = (0..d)
                        .map(|j| {
                            if j == i {
                                m.qexp[i] as f64 * x.q[i].powi(m.qexp[i] as i32 - 1)
                            } else {
                                qpow[j]
                            }
                        })
                        .product();
                    dpoly = partial * ppow.iter().product::<f64>();
                }
                let ktrig = m.trig.as_ref().map_or(0.0, |(k, _)| k[i] as f64);
                gq[i] += c * (dpoly * tv + poly * tdv * ktrig);
                if m.pexp[i] > 0 {
                    let partial: f64 = (0..d)
                        .map(|j| {
                            if j == i {
                                m.pexp[i] as f64 * x.p[i].powi(m.pexp[i] as i32 - 1)
                            } else {
                                ppow[j]
                            }
                        })
                        .product();
                    gp[i] += c * qpow.iter().product::<f64>() * partial * tv;
                }
            }
        }
        (val, gq, gp)
    }

    /// Hessian of a `q`-only expression with respect to `q`.
    pub fn hessian_q(&self, x: &PhasePoint) -> Vec<Vec<f64>> {
        (0..self.d)
            .map(|i| {
                let di = self.diff_q(i);
                (0..self.d).map(|j| di.diff_q(j).eval(x)).collect()
            })
            .collect()
    }

    /// Replaces every `p_j` by `p_j + shift_j`, where each shift is a
    /// `q`-only expression.
    pub fn substitute_p(&self, shift: &[HamExpr]) -> Result<HamExpr> {
        if shift.len() != self.d {
            return input("substitution needs one expression per momentum");
        }
        for s in shift {
            self.check_dim(s)?;
            if s.depends_on_p() {
                return input("momentum substitution must depend on q only");
            }
        }
        let mut out = Self::zero(self.d);
        for (m, c) in &self.terms {
            let mut base = m.clone();
            base.pexp = vec![0; self.d];
            let mut term = Self::from_terms(self.d, [(base, *c)], c.abs());
            for j in 0..self.d {
                let lin = Self::p(self.d, j).add(&shift[j]);
                term = term.mul(&lin.powi(m.pexp[j]));
            }
            out = out.add(&term);
        }
        Ok(out)
    }
}

/// Poisson bracket `{f,g}`.
pub fn poisson_bracket(f: &HamExpr, g: &HamExpr) -> Result<HamExpr> {
    f.check_dim(g)?;
    let mut out = HamExpr::zero(f.d);
    for j in 0..f.d {
        out = out.add(&f.diff_p(j).mul(&g.diff_q(j)));
        out = out.sub(&f.diff_q(j).mul(&g.diff_p(j)));
    }
    Ok(out)
}

/// `m`-fold nested bracket `{f,{f,…{f,g}}}`.
pub fn ad_power(f: &HamExpr, g: &HamExpr, m: usize) -> Result<HamExpr> {
    let mut out = g.clone();
    for _ in 0..m {
        out = poisson_bracket(f, &out)?;
    }
    Ok(out)
}

/// Value and gradients of `f` at `x`.
pub fn grad_eval(f: &HamExpr, x: &PhasePoint) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if x.q.len() != f.d || x.p.len() != f.d {
        return input("point dimension does not match the expression");
    }
    Ok(f.grad_eval(x))
}

impl fmt::Display for HamExpr {
    fn fmt(&self, out: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(out, "0");
        }
        for (n, (m, c)) in self.terms.iter().enumerate() {
            let mut factors: Vec<String> = Vec::new();
            for (i, e) in m.qexp.iter().enumerate() {
                match e {
                    0 => {}
                    1 => factors.push(format!("q{}", i + 1)),
                    e => factors.push(format!("q{}^{}", i + 1, e)),
                }
            }
            for (i, e) in m.pexp.iter().enumerate() {
                match e {
                    0 => {}
                    1 => factors.push(format!("p{}", i + 1)),
                    e => factors.push(format!("p{}^{}", i + 1, e)),
                }
            }
            if let Some((k, t)) = &m.trig {
                let name = match t {
                    Trig::Cos => "cos",
                    Trig::Sin => "sin",
                };
                factors.push(format!("{name}({})", linear_form(k)));
            }
            let mag = c.abs();
            let sign = if *c < 0.0 { "-" } else { "+" };
            if n == 0 {
                if *c < 0.0 {
                    write!(out, "-")?;
                }
            } else {
                write!(out, " {sign} ")?;
            }
            if factors.is_empty() {
                write!(out, "{mag:?}")?;
            } else if mag == 1.0 {
                write!(out, "{}", factors.join("*"))?;
            } else {
                write!(out, "{mag:?}*{}", factors.join("*"))?;
            }
        }
        Ok(())
    }
}

fn linear_form(k: &[i64]) -> String {
    let mut s = String::new();
    for (i, &c) in k.iter().enumerate() {
        if c == 0 {
            continue;
        }
        if !s.is_empty() {
            s.push(if c > 0 { '+' } else { '-' });
        } else if c < 0 {
            s.push('-');
        }
        if c.abs() != 1 {
            s.push_str(&format!("{}*", c.abs()));
        }
        s.push_str(&format!("q{}", i + 1));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(q: &[f64], p: &[f64]) -> PhasePoint {
        PhasePoint::new(q.to_vec(), p.to_vec())
    }

    #[test]
    fn bracket_examples() {
        let k = HamExpr::kinetic(1);
        let b = poisson_bracket(&k, &HamExpr::q(1, 0)).unwrap();
        assert_eq!(b, HamExpr::p(1, 0));
        let b = poisson_bracket(&k, &HamExpr::harmonic(1)).unwrap();
        assert_eq!(b, HamExpr::p(1, 0).mul(&HamExpr::q(1, 0)));
    }

    #[test]
    fn ad_square_of_cos() {
        let r = ad_power(&HamExpr::kinetic(1), &HamExpr::cos(vec![1]), 2).unwrap();
        let expect = HamExpr::monomial(-1.0, vec![0], vec![2]).mul(&HamExpr::cos(vec![1]));
        assert_eq!(r, expect);
    }

    #[test]
    fn ad_power_examples() {
        let g = HamExpr::harmonic(1);
        assert_eq!(ad_power(&HamExpr::kinetic(1), &g, 0).unwrap(), g);
        let r = ad_power(&HamExpr::kinetic(1), &g, 2).unwrap();
        assert!(r.approx_eq(&HamExpr::monomial(1.0, vec![0], vec![2]), 1e-15));
    }

    #[test]
    fn ad_of_sin_matches_finite_difference_bracket() {
        let f = HamExpr::kinetic(1);
        let g = HamExpr::sin(vec![1]);
        let b = ad_power(&f, &g, 1).unwrap();
        let hstep = 1e-5;
        for i in 0..20 {
            let q = -3.0 + 0.31 * i as f64;
            let p = 2.0 - 0.17 * i as f64;
            let dq = |e: &HamExpr| {
                (e.eval(&pt(&[q + hstep], &[p])) - e.eval(&pt(&[q - hstep], &[p]))) / (2.0 * hstep)
            };
            let dp = |e: &HamExpr| {
                (e.eval(&pt(&[q], &[p + hstep])) - e.eval(&pt(&[q], &[p - hstep]))) / (2.0 * hstep)
            };
            let fd = dp(&f) * dq(&g) - dq(&f) * dp(&g);
            assert!((b.eval(&pt(&[q], &[p])) - fd).abs() < 1e-6);
        }
        assert_eq!(b, HamExpr::p(1, 0).mul(&HamExpr::cos(vec![1])));
    }

    #[test]
    fn grad_eval_examples() {
        let f = HamExpr::q(1, 0).mul(&HamExpr::p(1, 0));
        let (v, gq, gp) = grad_eval(&f, &pt(&[2.0], &[3.0])).unwrap();
        assert_eq!((v, gq[0], gp[0]), (6.0, 3.0, 2.0));
        let (v, gq, _) = grad_eval(&HamExpr::cos(vec![1]), &pt(&[0.0], &[0.0])).unwrap();
        assert_eq!((v, gq[0]), (1.0, 0.0));
        assert!(grad_eval(&f, &pt(&[0.0, 1.0], &[0.0, 1.0])).is_err());
    }

    #[test]
    fn trig_products_reduce() {
        let c = HamExpr::cos(vec![1]);
        let s = HamExpr::sin(vec![1]);
        let sq = c.mul(&c).add(&s.mul(&s));
        assert!(sq.approx_eq(&HamExpr::constant(1, 1.0), 1e-15));
        assert_eq!(HamExpr::sin(vec![-1]), HamExpr::sin(vec![1]).scale(-1.0));
        assert_eq!(HamExpr::cos(vec![-2]), HamExpr::cos(vec![2]));
        assert!(HamExpr::sin(vec![0]).is_zero());
    }

    #[test]
    fn substitute_p_expands_kick() {
        let h = HamExpr::kinetic(1);
        let shift = HamExpr::constant(1, 2.0);
        let r = h.substitute_p(&[shift]).unwrap();
        let expect = HamExpr::kinetic(1).add(&HamExpr::p(1, 0).scale(2.0)).add(&HamExpr::constant(1, 2.0));
        assert!(r.approx_eq(&expect, 1e-15));
    }

    #[test]
    fn display_round_trips() {
        let e = parse_expr("0.5*p1^2 + cos(q1) - 2*sin(q1+q2) + 3*q2*p1", 2).unwrap();
        let back = parse_expr(&e.to_string(), 2).unwrap();
        assert_eq!(e, back);
    }
}
