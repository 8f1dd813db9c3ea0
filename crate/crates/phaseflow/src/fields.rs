//! Smooth cutoffs and black-box scalar fields with analytic derivatives.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::error::{input, Result};
use crate::geometry::shortest_angle;

/// Smooth function of one point of `R^n` with value, gradient and Hessian.
pub trait ScalarField: Send + Sync + Debug {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn grad(&self, x: &[f64]) -> Vec<f64>;
    fn hessian(&self, x: &[f64]) -> Vec<Vec<f64>>;
    /// Global bound on `|∇f|_∞`, when known.
    fn grad_bound(&self) -> Option<f64> {
        None
    }
    /// Global Lipschitz bound of `∇f`, when known.
    fn lipschitz(&self) -> Option<f64> {
        None
    }
    fn describe(&self) -> serde_json::Value;
}

fn psi(t: f64) -> (f64, f64, f64) {
    if t <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let e = (-1.0 / t).exp();
    let t2 = t * t;
    (e, e / t2, e * (1.0 / (t2 * t2) - 2.0 / (t2 * t)))
}

/// Smooth step `S` with `S = 0` on `t <= 0`, `S = 1` on `t >= 1`; returns
/// `(S, S', S'')`.
pub fn smooth_step(t: f64) -> (f64, f64, f64) {
    if t <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if t >= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    let (a, a1, a2) = psi(t);
    let (b, bm1, b2) = psi(1.0 - t);
    let b1 = -bm1;
    let den = a + b;
    let d1 = a1 + b1;
    let d2 = a2 + b2;
    let s = a / den;
    let num1 = a1 * den - a * d1;
    let s1 = num1 / (den * den);
    let s2 = (a2 * den - a * d2) / (den * den) - 2.0 * d1 * num1 / (den * den * den);
    (s, s1, s2)
}

/// Radial cutoff: `≡ 1` on `r <= r1`, `≡ 0` on `r >= r2`, monotone between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffSpec {
    pub r1: f64,
    pub r2: f64,
}

impl CutoffSpec {
    pub fn new(r1: f64, r2: f64) -> Result<Self> {
        if !(r1 > 0.0 && r2 > r1 && r2.is_finite()) {
            return input(format!("cutoff radii must satisfy 0 < r1 < r2 (got {r1}, {r2})"));
        }
        Ok(CutoffSpec { r1, r2 })
    }

    /// `(χ(r), χ'(r), χ''(r))` for `r >= 0`.
    pub fn profile(&self, r: f64) -> (f64, f64, f64) {
        let w = self.r2 - self.r1;
        let (s, s1, s2) = smooth_step((r - self.r1) / w);
        (1.0 - s, -s1 / w, -s2 / (w * w))
    }

    /// Supremum of `|χ'|`.
    pub fn slope_bound(&self) -> f64 {
        // max S' of the logistic-exponential step is 2 at t = 1/2.
        2.0 / (self.r2 - self.r1)
    }
}

/// Even one-dimensional cutoff in `|t|`.
fn axis_cutoff(c: &CutoffSpec, t: f64) -> (f64, f64, f64) {
    let r = t.abs();
    let (v, d1, d2) = c.profile(r);
    (v, d1 * t.signum(), d2)
}

/// `e^{−|x|²/2}`.
#[derive(Debug, Clone, Copy)]
pub struct Gaussian {
    pub d: usize,
}

impl ScalarField for Gaussian {
    fn dim(&self) -> usize {
        self.d
    }
    fn value(&self, x: &[f64]) -> f64 {
        (-0.5 * x.iter().map(|v| v * v).sum::<f64>()).exp()
    }
    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let e = self.value(x);
        x.iter().map(|v| -v * e).collect()
    }
    fn hessian(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let e = self.value(x);
        (0..self.d)
            .map(|i| {
                (0..self.d)
                    .map(|j| e * (x[i] * x[j] - if i == j { 1.0 } else { 0.0 }))
                    .collect()
            })
            .collect()
    }
    fn grad_bound(&self) -> Option<f64> {
        Some((-0.5f64).exp())
    }
    fn lipschitz(&self) -> Option<f64> {
        Some(self.d as f64)
    }
    fn describe(&self) -> serde_json::Value {
        serde_json::json!({"builtin": "gaussian", "d": self.d})
    }
}

/// One localized affine piece: `β(x) · (slope·(x − center) + offset)` where
/// `β` is the product over axes of `χ(|x_i − center_i|)` with per-axis radii.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub center: Vec<f64>,
    pub plateau: Vec<f64>,
    pub support: Vec<f64>,
    pub slope: Vec<f64>,
    pub offset: f64,
}

impl Piece {
    fn cutoffs(&self) -> Vec<CutoffSpec> {
        self.plateau
            .iter()
            .zip(&self.support)
            .map(|(&a, &b)| CutoffSpec { r1: a, r2: b })
            .collect()
    }
}

/// Sum of localized affine pieces, indexed by a uniform hash grid.
///
/// Periodic axes are `2π`-periodic; coordinate differences on those axes use
/// the shortest representative, so each support must be narrower than `π`.
#[derive(Debug, Clone)]
pub struct LocalizedLinear {
    d: usize,
    periodic: Vec<bool>,
    pieces: Vec<Piece>,
    cutoffs: Vec<Vec<CutoffSpec>>,
    cell: Vec<f64>,
    cells_per_turn: Vec<i64>,
    index: HashMap<Vec<i64>, Vec<usize>>,
    label: String,
}

impl LocalizedLinear {
    pub fn new(d: usize, periodic: Vec<bool>, pieces: Vec<Piece>, label: &str) -> Result<Self> {
        if periodic.len() != d {
            return input("periodic flags must have length d");
        }
        for p in &pieces {
            if p.center.len() != d || p.plateau.len() != d || p.support.len() != d || p.slope.len() != d {
                return input("piece vectors must have length d");
            }
            for i in 0..d {
                if !(p.plateau[i] > 0.0 && p.support[i] > p.plateau[i]) {
                    return input("piece radii must satisfy 0 < plateau < support");
                }
                if periodic[i] && p.support[i] >= std::f64::consts::PI {
                    return input("periodic supports must be narrower than π");
                }
            }
        }
        let mut cell = vec![1.0; d];
        let mut cells_per_turn = vec![0; d];
        for i in 0..d {
            let r = pieces.iter().map(|p| p.support[i]).fold(0.0, f64::max);
            let size = (2.0 * r).max(1e-9);
            if periodic[i] {
                let n = ((TAU / size).floor() as i64).max(1);
                cells_per_turn[i] = n;
                cell[i] = TAU / n as f64;
            } else {
                cell[i] = size;
            }
        }
        let mut f = LocalizedLinear {
            d,
            periodic,
            cutoffs: pieces.iter().map(Piece::cutoffs).collect(),
            pieces,
            cell,
            cells_per_turn,
            index: HashMap::new(),
            label: label.to_string(),
        };
        for n in 0..f.pieces.len() {
            let lo: Vec<i64> = (0..d)
                .map(|i| ((f.pieces[n].center[i] - f.pieces[n].support[i]) / f.cell[i]).floor() as i64)
                .collect();
            let hi: Vec<i64> = (0..d)
                .map(|i| ((f.pieces[n].center[i] + f.pieces[n].support[i]) / f.cell[i]).floor() as i64)
                .collect();
            for cell in lattice_box(&lo, &hi) {
                let key = f.wrap_key(&cell);
                let slot = f.index.entry(key).or_default();
                if slot.last() != Some(&n) {
                    slot.push(n);
                }
            }
        }
        Ok(f)
    }

    fn wrap_key(&self, k: &[i64]) -> Vec<i64> {
        k.iter()
            .enumerate()
            .map(|(i, &v)| if self.periodic[i] { v.rem_euclid(self.cells_per_turn[i]) } else { v })
            .collect()
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    fn candidates(&self, x: &[f64]) -> &[usize] {
        let key: Vec<i64> = (0..self.d).map(|i| (x[i] / self.cell[i]).floor() as i64).collect();
        self.index.get(&self.wrap_key(&key)).map_or(&[], |v| v.as_slice())
    }

    fn delta(&self, x: &[f64], c: &[f64]) -> Vec<f64> {
        (0..self.d)
            .map(|i| if self.periodic[i] { shortest_angle(x[i] - c[i]) } else { x[i] - c[i] })
            .collect()
    }

    /// Value, gradient and Hessian in one pass.
    pub fn eval_all(&self, x: &[f64]) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
        let d = self.d;
        let mut v = 0.0;
        let mut g = vec![0.0; d];
        let mut hm = vec![vec![0.0; d]; d];
        for &n in self.candidates(x) {
            let p = &self.pieces[n];
            let dx = self.delta(x, &p.center);
            if (0..d).any(|i| dx[i].abs() >= p.support[i]) {
                continue;
            }
            let axes: Vec<(f64, f64, f64)> =
                (0..d).map(|i| axis_cutoff(&self.cutoffs[n][i], dx[i])).collect();
            let beta: f64 = axes.iter().map(|a| a.0).product();
            let prod_except = |skip: &[usize]| -> f64 {
                (0..d).filter(|i| !skip.contains(i)).map(|i| axes[i].0).product()
            };
            let lin: f64 = p.slope.iter().zip(&dx).map(|(a, b)| a * b).sum::<f64>() + p.offset;
            let dbeta: Vec<f64> = (0..d).map(|i| axes[i].1 * prod_except(&[i])).collect();
            v += beta * lin;
            for i in 0..d {
                g[i] += dbeta[i] * lin + beta * p.slope[i];
                for j in 0..d {
                    let ddbeta = if i == j { axes[i].2 * prod_except(&[i]) } else { axes[i].1 * axes[j].1 * prod_except(&[i, j]) };
                    hm[i][j] += ddbeta * lin + dbeta[i] * p.slope[j] + dbeta[j] * p.slope[i];
                }
            }
        }
        (v, g, hm)
    }
}

impl ScalarField for LocalizedLinear {
    fn dim(&self) -> usize {
        self.d
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.eval_all(x).0
    }
    fn grad(&self, x: &[f64]) -> Vec<f64> {
        self.eval_all(x).1
    }
    fn hessian(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.eval_all(x).2
    }
    fn grad_bound(&self) -> Option<f64> {
        // Overlapping supports are bounded by summing per-piece bounds.
        let mut total: f64 = 0.0;
        for list in self.index.values() {
            let s: f64 = list
                .iter()
                .map(|&n| {
                    let p = &self.pieces[n];
                    let slope = p.slope.iter().fold(0.0f64, |a, b| a.max(b.abs()));
                    let reach: f64 = p.slope.iter().zip(&p.support).map(|(a, r)| (a * r).abs()).sum::<f64>() + p.offset.abs();
                    let steep = self.cutoffs[n].iter().map(|c| c.slope_bound()).fold(0.0, f64::max);
                    slope + reach * steep * self.d as f64
                })
                .sum();
            total = total.max(s);
        }
        Some(total)
    }
    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "localized_linear",
            "label": self.label,
            "periodic": self.periodic,
            "pieces": self.pieces,
        })
    }
}

/// All integer points of the box `[lo, hi]` in lexicographic order.
pub fn lattice_box(lo: &[i64], hi: &[i64]) -> Vec<Vec<i64>> {
    let mut out = Vec::new();
    if lo.iter().zip(hi).any(|(a, b)| a > b) {
        return out;
    }
    let mut cur = lo.to_vec();
    loop {
        out.push(cur.clone());
        let mut i = cur.len();
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if cur[i] < hi[i] {
                cur[i] += 1;
                cur[i + 1..].copy_from_slice(&lo[i + 1..]);
                break;
            }
        }
    }
}
