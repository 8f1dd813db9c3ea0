//! Mechanical control systems `H_u = |p|²/2 + V0 + Σ u_j V_j`, the two
//! presets, and piecewise-constant control schedules.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::fields::{Gaussian, ScalarField};
use crate::geometry::{PhasePoint, SpaceKind, SpaceSpec};
use crate::symbolic::{parse_expr, HamExpr};

/// Default sup-radius of the safety box used for escape monitoring.
pub const DEFAULT_SAFETY_RADIUS: f64 = 1e3;

/// Function of `q` only: symbolic or black-box.
#[derive(Debug, Clone)]
pub enum Potential {
    Expr(HamExpr),
    Field(Arc<dyn ScalarField>),
}

impl Potential {
    pub fn expr(e: HamExpr) -> Result<Self> {
        if e.depends_on_p() {
            return input(format!("potential '{e}' depends on p"));
        }
        Ok(Potential::Expr(e))
    }

    pub fn zero(d: usize) -> Self {
        Potential::Expr(HamExpr::zero(d))
    }

    pub fn dim(&self) -> usize {
        match self {
            Potential::Expr(e) => e.d(),
            Potential::Field(f) => f.dim(),
        }
    }

    fn as_point(q: &[f64]) -> PhasePoint {
        PhasePoint::new(q.to_vec(), vec![0.0; q.len()])
    }

    pub fn value(&self, q: &[f64]) -> f64 {
        match self {
            Potential::Expr(e) => e.eval(&Self::as_point(q)),
            Potential::Field(f) => f.value(q),
        }
    }

    pub fn grad(&self, q: &[f64]) -> Vec<f64> {
        match self {
            Potential::Expr(e) => e.grad_eval(&Self::as_point(q)).1,
            Potential::Field(f) => f.grad(q),
        }
    }

    pub fn hessian(&self, q: &[f64]) -> Vec<Vec<f64>> {
        match self {
            Potential::Expr(e) => e.hessian_q(&Self::as_point(q)),
            Potential::Field(f) => f.hessian(q),
        }
    }

    pub fn as_expr(&self) -> Option<&HamExpr> {
        match self {
            Potential::Expr(e) => Some(e),
            Potential::Field(_) => None,
        }
    }

    pub fn describe(&self) -> serde_json::Value {
        match self {
            Potential::Expr(e) => serde_json::Value::String(e.to_string()),
            Potential::Field(f) => f.describe(),
        }
    }
}

/// Mechanical control system on `T*R^d` or `T*T^d`.
#[derive(Debug, Clone)]
pub struct MechanicalSystem {
    pub space: SpaceSpec,
    pub v0: Potential,
    pub controls: Vec<Potential>,
    pub safety_radius: f64,
}

impl MechanicalSystem {
    pub fn new(space: SpaceSpec, v0: Potential, controls: Vec<Potential>) -> Result<Self> {
        for v in std::iter::once(&v0).chain(&controls) {
            if v.dim() != space.d {
                return input("potential dimension does not match the space");
            }
            if let Potential::Expr(e) = v {
                if e.depends_on_p() {
                    return input(format!("potential '{e}' depends on p"));
                }
            }
        }
        Ok(MechanicalSystem { space, v0, controls, safety_radius: DEFAULT_SAFETY_RADIUS })
    }

    pub fn with_safety_radius(mut self, r: f64) -> Self {
        self.safety_radius = r;
        self
    }

    pub fn m(&self) -> usize {
        self.controls.len()
    }

    pub fn d(&self) -> usize {
        self.space.d
    }

    /// Hamiltonian with the control frozen at `u`.
    pub fn frozen_hamiltonian(&self, u: &[f64]) -> Result<FrozenHamiltonian> {
        if u.len() != self.m() {
            return input(format!("control vector has length {} but m = {}", u.len(), self.m()));
        }
        let mut expr = Some(HamExpr::kinetic(self.d()));
        let mut potential_expr = Some(HamExpr::zero(self.d()));
        for (c, v) in std::iter::once((1.0, &self.v0)).chain(u.iter().copied().zip(&self.controls)) {
            if c == 0.0 {
                continue;
            }
            match (v.as_expr(), potential_expr.as_mut()) {
                (Some(e), Some(acc)) => *acc = acc.add(&e.scale(c)),
                _ => potential_expr = None,
            }
        }
        if let (Some(h), Some(v)) = (expr.as_mut(), potential_expr.as_ref()) {
            *h = h.add(v);
        } else {
            expr = None;
        }
        Ok(FrozenHamiltonian {
            d: self.d(),
            v0: self.v0.clone(),
            controls: self.controls.clone(),
            u: u.to_vec(),
            hess_expr: potential_expr.as_ref().map(|e| {
                (0..self.d()).map(|i| {
                    let di = e.diff_q(i);
                    (0..self.d()).map(|j| di.diff_q(j)).collect()
                }).collect()
            }),
            expr,
            potential_expr,
        })
    }

    /// Drift `H_0 = |p|²/2 + V0`.
    pub fn drift(&self) -> FrozenHamiltonian {
        self.frozen_hamiltonian(&vec![0.0; self.m()]).expect("zero control has length m")
    }

    pub fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "space": self.space,
            "V0": self.v0.describe(),
            "controls": self.controls.iter().map(Potential::describe).collect::<Vec<_>>(),
        })
    }
}

/// Euclidean preset: controls `q_1, …, q_d` and the Gaussian `e^{−|q|²/2}`.
pub fn euclidean_preset(d: usize, v0: Potential) -> Result<MechanicalSystem> {
    let space = SpaceSpec::euclidean(d)?;
    let mut controls: Vec<Potential> = (0..d).map(|i| Potential::Expr(HamExpr::q(d, i))).collect();
    controls.push(Potential::Field(Arc::new(Gaussian { d })));
    MechanicalSystem::new(space, v0, controls)
}

/// Torus frequencies `k_j = e_j` for `j < d` and `k_d = (1, …, 1)`.
pub fn torus_frequencies(d: usize) -> Vec<Vec<i64>> {
    (0..d)
        .map(|j| {
            if j + 1 == d {
                vec![1; d]
            } else {
                (0..d).map(|i| i64::from(i == j)).collect()
            }
        })
        .collect()
}

/// Torus preset: controls `cos(k_j·q), sin(k_j·q)` for each frequency.
pub fn torus_preset(d: usize, v0: Potential) -> Result<MechanicalSystem> {
    let space = SpaceSpec::torus(d)?;
    let mut controls = Vec::with_capacity(2 * d);
    for k in torus_frequencies(d) {
        controls.push(Potential::Expr(HamExpr::cos(k.clone())));
        controls.push(Potential::Expr(HamExpr::sin(k)));
    }
    MechanicalSystem::new(space, v0, controls)
}

/// Auxiliary oscillator system `|p|²/2 + u|q|²/2` on `T*R^d`.
pub fn oscillator_system(d: usize) -> Result<MechanicalSystem> {
    MechanicalSystem::new(SpaceSpec::euclidean(d)?, Potential::zero(d), vec![Potential::Expr(HamExpr::harmonic(d))])
}

/// Control-frozen Hamiltonian handle.
#[derive(Debug, Clone)]
pub struct FrozenHamiltonian {
    d: usize,
    v0: Potential,
    controls: Vec<Potential>,
    u: Vec<f64>,
    expr: Option<HamExpr>,
    potential_expr: Option<HamExpr>,
    hess_expr: Option<Vec<Vec<HamExpr>>>,
}

impl FrozenHamiltonian {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    /// Symbolic form when every part is symbolic.
    pub fn expr(&self) -> Option<&HamExpr> {
        self.expr.as_ref()
    }

    fn parts(&self) -> impl Iterator<Item = (f64, &Potential)> {
        std::iter::once((1.0, &self.v0))
            .chain(self.u.iter().copied().zip(&self.controls))
            .filter(|(c, _)| *c != 0.0)
    }

    pub fn potential(&self, q: &[f64]) -> f64 {
        match &self.potential_expr {
            Some(e) => e.eval(&PhasePoint::new(q.to_vec(), vec![0.0; self.d])),
            None => self.parts().map(|(c, v)| c * v.value(q)).sum(),
        }
    }

    /// `∇V_u(q)`.
    pub fn potential_grad(&self, q: &[f64]) -> Vec<f64> {
        if let Some(e) = &self.potential_expr {
            return e.grad_eval(&PhasePoint::new(q.to_vec(), vec![0.0; self.d])).1;
        }
        let mut g = vec![0.0; self.d];
        for (c, v) in self.parts() {
            for (gi, vi) in g.iter_mut().zip(v.grad(q)) {
                *gi += c * vi;
            }
        }
        g
    }

    /// `Hess V_u(q)`.
    pub fn potential_hessian(&self, q: &[f64]) -> Vec<Vec<f64>> {
        if let Some(h) = &self.hess_expr {
            let x = PhasePoint::new(q.to_vec(), vec![0.0; self.d]);
            return h.iter().map(|row| row.iter().map(|e| e.eval(&x)).collect()).collect();
        }
        let mut h = vec![vec![0.0; self.d]; self.d];
        for (c, v) in self.parts() {
            for (row, vrow) in h.iter_mut().zip(v.hessian(q)) {
                for (a, b) in row.iter_mut().zip(vrow) {
                    *a += c * b;
                }
            }
        }
        h
    }

    pub fn value(&self, x: &PhasePoint) -> f64 {
        0.5 * x.p.iter().map(|p| p * p).sum::<f64>() + self.potential(&x.q)
    }

    /// `(∇_q H, ∇_p H)`.
    pub fn grad(&self, x: &PhasePoint) -> (Vec<f64>, Vec<f64>) {
        (self.potential_grad(&x.q), x.p.clone())
    }
}

/// One segment of a piecewise-constant control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub tau: f64,
    pub u: Vec<f64>,
}

/// Piecewise-constant control `u(·)` as ordered `(duration, control)` pairs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlSchedule {
    segments: Vec<Segment>,
}

impl ControlSchedule {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if let Some(first) = segments.first() {
            let m = first.u.len();
            for (i, s) in segments.iter().enumerate() {
                if !(s.tau > 0.0 && s.tau.is_finite()) {
                    return input(format!("segment {i} has non-positive duration {}", s.tau));
                }
                if s.u.len() != m {
                    return input(format!("segment {i} has {} controls, expected {m}", s.u.len()));
                }
                if s.u.iter().any(|v| !v.is_finite()) {
                    return input(format!("segment {i} has a non-finite control"));
                }
            }
        }
        Ok(ControlSchedule { segments })
    }

    pub fn constant(tau: f64, u: Vec<f64>) -> Result<Self> {
        Self::new(vec![Segment { tau, u }])
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.tau).sum()
    }

    /// `self` followed by `other`.
    pub fn concat(&self, other: &ControlSchedule) -> Result<Self> {
        let mut segs = self.segments.clone();
        segs.extend(other.segments.iter().cloned());
        Self::new(segs)
    }

    pub fn check_controls(&self, m: usize) -> Result<()> {
        match self.segments.first() {
            Some(s) if s.u.len() != m => input(format!("schedule has {} controls, system has {m}", s.u.len())),
            _ => Ok(()),
        }
    }

    /// Reads CSV rows `tau,u_1,…,u_m`; a non-numeric first row is a header.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .flexible(true)
            .from_reader(reader);
        let mut segs = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = rec.position().map_or(row + 1, |p| p.line() as usize);
            let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
            match parsed {
                Ok(v) if v.len() >= 2 => segs.push(Segment { tau: v[0], u: v[1..].to_vec() }),
                Ok(_) => {
                    return Err(Error::Parse { pos: line, msg: "row needs a duration and at least one control".into() })
                }
                Err(_) if row == 0 => continue,
                Err(e) => return Err(Error::Parse { pos: line, msg: format!("invalid number: {e}") }),
            }
        }
        Self::new(segs).map_err(|e| match e {
            Error::Input(msg) => Error::Parse { pos: 0, msg },
            other => other,
        })
    }

    pub fn to_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let m = self.segments.first().map_or(0, |s| s.u.len());
        let mut header = vec!["tau".to_string()];
        header.extend((1..=m).map(|j| format!("u{j}")));
        w.write_record(&header)?;
        for s in &self.segments {
            let mut rec = vec![format!("{:?}", s.tau)];
            rec.extend(s.u.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Potential literal in a system config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PotentialSpec {
    Expr(String),
    Builtin { builtin: String },
}

impl PotentialSpec {
    pub fn build(&self, d: usize) -> Result<Potential> {
        match self {
            PotentialSpec::Expr(s) => Potential::expr(parse_expr(s, d)?),
            PotentialSpec::Builtin { builtin } => match builtin.as_str() {
                "zero" => Ok(Potential::zero(d)),
                "gaussian" => Ok(Potential::Field(Arc::new(Gaussian { d }))),
                "harmonic" => Ok(Potential::Expr(HamExpr::harmonic(d))),
                other => input(format!("unknown builtin potential '{other}'")),
            },
        }
    }
}

/// Control list in a system config: a named preset or explicit potentials.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ControlsSpec {
    Preset { preset: String },
    List(Vec<PotentialSpec>),
}

/// JSON system config `{space:{kind,d}, V0, controls, safety_radius}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemConfig {
    pub space: SpaceSpec,
    #[serde(rename = "V0", default)]
    pub v0: Option<PotentialSpec>,
    #[serde(default)]
    pub controls: Option<ControlsSpec>,
    #[serde(default)]
    pub safety_radius: Option<f64>,
}

impl SystemConfig {
    pub fn build(&self) -> Result<MechanicalSystem> {
        let d = self.space.d;
        SpaceSpec::new(self.space.kind, d)?;
        let v0 = match &self.v0 {
            Some(spec) => spec.build(d)?,
            None => Potential::zero(d),
        };
        let preset = match &self.controls {
            None => Some(match self.space.kind {
                SpaceKind::Euclidean => "euclidean".to_string(),
                SpaceKind::Torus => "torus".to_string(),
            }),
            Some(ControlsSpec::Preset { preset }) => Some(preset.clone()),
            Some(ControlsSpec::List(_)) => None,
        };
        let sys = match (preset.as_deref(), &self.controls) {
            (Some("euclidean"), _) if self.space.kind == SpaceKind::Euclidean => euclidean_preset(d, v0)?,
            (Some("torus"), _) if self.space.kind == SpaceKind::Torus => torus_preset(d, v0)?,
            (Some("oscillator"), _) if self.space.kind == SpaceKind::Euclidean => {
                MechanicalSystem::new(self.space, v0, vec![Potential::Expr(HamExpr::harmonic(d))])?
            }
            (Some(p), _) => return input(format!("preset '{p}' is not available on this space")),
            (None, Some(ControlsSpec::List(list))) => {
                let controls = list.iter().map(|s| s.build(d)).collect::<Result<Vec<_>>>()?;
                MechanicalSystem::new(self.space, v0, controls)?
            }
            (None, _) => unreachable!("explicit list handled above"),
        };
        Ok(match self.safety_radius {
            Some(r) if r > 0.0 => sys.with_safety_radius(r),
            Some(_) => return input("safety_radius must be positive"),
            None => sys,
        })
    }
}
