//! Flow maps: Strang-split and RK4 integration of Hamilton's equations,
//! closed-form primitive flows and tangent maps.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::error::{input, Error, Result};
use crate::exec::{map_indexed, max_indexed, ExecMode};
use crate::fields::{CutoffSpec, ScalarField};
use crate::geometry::{shortest_angle, sup_distance_unchecked, PhasePoint, SpaceSpec};
use crate::symbolic::HamExpr;
use crate::systems::{ControlSchedule, FrozenHamiltonian, MechanicalSystem, Potential, DEFAULT_SAFETY_RADIUS};

/// Which half of phase space a profile reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Q,
    P,
}

/// Symbolic profile of a single variable block with precomputed derivatives.
#[derive(Debug, Clone)]
pub struct ExprProfile {
    expr: HamExpr,
    axis: Axis,
    grad: Vec<HamExpr>,
    hess: Vec<Vec<HamExpr>>,
}

impl ExprProfile {
    fn new(expr: HamExpr, axis: Axis) -> Result<Self> {
        let d = expr.d();
        let diff = |e: &HamExpr, i: usize| match axis {
            Axis::Q => e.diff_q(i),
            Axis::P => e.diff_p(i),
        };
        let grad: Vec<HamExpr> = (0..d).map(|i| diff(&expr, i)).collect();
        let hess = grad.iter().map(|g| (0..d).map(|j| diff(g, j)).collect()).collect();
        Ok(ExprProfile { expr, axis, grad, hess })
    }

    fn point(&self, x: &[f64]) -> PhasePoint {
        let z = vec![0.0; x.len()];
        match self.axis {
            Axis::Q => PhasePoint::new(x.to_vec(), z),
            Axis::P => PhasePoint::new(z, x.to_vec()),
        }
    }
}

/// Shear profile: a function of `q` (vertical shears) or of `p` (horizontal
/// shears).
#[derive(Debug, Clone)]
pub enum Profile {
    Expr(ExprProfile),
    Field(Arc<dyn ScalarField>),
}

impl Profile {
    pub fn q_expr(e: HamExpr) -> Result<Self> {
        if e.depends_on_p() {
            return input(format!("vertical shear profile '{e}' depends on p"));
        }
        Ok(Profile::Expr(ExprProfile::new(e, Axis::Q)?))
    }

    pub fn p_expr(e: HamExpr) -> Result<Self> {
        if e.depends_on_q() {
            return input(format!("horizontal shear profile '{e}' depends on q"));
        }
        Ok(Profile::Expr(ExprProfile::new(e, Axis::P)?))
    }

    pub fn field(f: Arc<dyn ScalarField>) -> Self {
        Profile::Field(f)
    }

    pub fn from_potential(v: &Potential) -> Result<Self> {
        match v {
            Potential::Expr(e) => Self::q_expr(e.clone()),
            Potential::Field(f) => Ok(Profile::Field(f.clone())),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Profile::Expr(e) => e.expr.d(),
            Profile::Field(f) => f.dim(),
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Profile::Expr(e) => e.expr.eval(&e.point(x)),
            Profile::Field(f) => f.value(x),
        }
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Profile::Expr(e) => {
                let pt = e.point(x);
                e.grad.iter().map(|g| g.eval(&pt)).collect()
            }
            Profile::Field(f) => f.grad(x),
        }
    }

    pub fn hessian(&self, x: &[f64]) -> Vec<Vec<f64>> {
        match self {
            Profile::Expr(e) => {
                let pt = e.point(x);
                e.hess.iter().map(|row| row.iter().map(|h| h.eval(&pt)).collect()).collect()
            }
            Profile::Field(f) => f.hessian(x),
        }
    }

    pub fn as_expr(&self) -> Option<&HamExpr> {
        match self {
            Profile::Expr(e) => Some(&e.expr),
            Profile::Field(_) => None,
        }
    }

    /// Bound on `|∇f|_∞` over `|x_i| <= xmax_i`.
    pub fn grad_bound_on(&self, xmax: &[f64]) -> f64 {
        match self {
            Profile::Expr(e) => {
                let (bq, bp) = match e.axis {
                    Axis::Q => e.expr.abs_grad_bound(xmax, &vec![0.0; xmax.len()]),
                    Axis::P => e.expr.abs_grad_bound(&vec![0.0; xmax.len()], xmax),
                };
                let b = if e.axis == Axis::Q { bq } else { bp };
                b.into_iter().fold(0.0, f64::max)
            }
            Profile::Field(f) => f.grad_bound().unwrap_or(f64::INFINITY),
        }
    }

    pub fn describe(&self) -> Value {
        match self {
            Profile::Expr(e) => Value::String(e.expr.to_string()),
            Profile::Field(f) => f.describe(),
        }
    }
}

/// Smooth function on phase space for RK4 integration.
pub trait PhaseField: Send + Sync + Debug {
    fn d(&self) -> usize;
    fn value(&self, x: &PhasePoint) -> f64;
    /// `(∇_q H, ∇_p H)`.
    fn grad(&self, x: &PhasePoint) -> (Vec<f64>, Vec<f64>);
    /// Full `2d × 2d` Hessian ordered `(q, p)`.
    fn hessian(&self, x: &PhasePoint) -> DMatrix<f64>;
    fn describe(&self) -> Value;
}

/// Symbolic Hamiltonian with precomputed first and second derivatives.
#[derive(Debug, Clone)]
pub struct ExprHamiltonian {
    expr: HamExpr,
    grad: Vec<HamExpr>,
    hess: Vec<Vec<HamExpr>>,
}

impl ExprHamiltonian {
    pub fn new(expr: HamExpr) -> Self {
        let d = expr.d();
        let diff = |e: &HamExpr, i: usize| if i < d { e.diff_q(i) } else { e.diff_p(i - d) };
        let grad: Vec<HamExpr> = (0..2 * d).map(|i| diff(&expr, i)).collect();
        let hess = grad.iter().map(|g| (0..2 * d).map(|j| diff(g, j)).collect()).collect();
        ExprHamiltonian { expr, grad, hess }
    }

    pub fn expr(&self) -> &HamExpr {
        &self.expr
    }
}

impl PhaseField for ExprHamiltonian {
    fn d(&self) -> usize {
        self.expr.d()
    }
    fn value(&self, x: &PhasePoint) -> f64 {
        self.expr.eval(x)
    }
    fn grad(&self, x: &PhasePoint) -> (Vec<f64>, Vec<f64>) {
        let (_, gq, gp) = self.expr.grad_eval(x);
        (gq, gp)
    }
    fn hessian(&self, x: &PhasePoint) -> DMatrix<f64> {
        let n = self.grad.len();
        DMatrix::from_fn(n, n, |i, j| self.hess[i][j].eval(x))
    }
    fn describe(&self) -> Value {
        Value::String(self.expr.to_string())
    }
}

/// Hamiltonian handle for numeric stages.
#[derive(Debug, Clone)]
pub enum Hamiltonian {
    /// Separable mechanical Hamiltonian, integrated by Strang splitting.
    Mechanical(FrozenHamiltonian),
    /// General Hamiltonian, integrated by classical RK4.
    Field(Arc<dyn PhaseField>),
}

impl Hamiltonian {
    pub fn expr(e: HamExpr) -> Self {
        Hamiltonian::Field(Arc::new(ExprHamiltonian::new(e)))
    }

    pub fn d(&self) -> usize {
        match self {
            Hamiltonian::Mechanical(h) => h.d(),
            Hamiltonian::Field(f) => f.d(),
        }
    }

    pub fn value(&self, x: &PhasePoint) -> f64 {
        match self {
            Hamiltonian::Mechanical(h) => h.value(x),
            Hamiltonian::Field(f) => f.value(x),
        }
    }

    pub fn describe(&self) -> Value {
        match self {
            Hamiltonian::Mechanical(h) => match h.expr() {
                Some(e) => json!({"mechanical": e.to_string()}),
                None => json!({"mechanical": {"u": h.u()}}),
            },
            Hamiltonian::Field(f) => f.describe(),
        }
    }
}

/// How a rotation stage treats points inside its support.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationMode {
    /// Exact elliptic rotation; the cutoff Hamiltonian is a function of the
    /// conserved form, so every orbit is an ellipse with a constant angular
    /// speed and the closed form holds on the whole support.
    ClosedForm,
    /// RK4 integration of the cutoff Hamiltonian with the given step count.
    Numeric { steps: usize },
}

/// Simultaneous localized harmonic rotations with pairwise disjoint supports.
///
/// Around each center the generator is `h_w = χ(ρ)·ρ²/(2w²)` with
/// `ρ² = |δq|² + w²|δp|²`; on `ρ < r1` it is the oscillator whose time-`t`
/// map is the elliptic rotation by angle `t/w`.
#[derive(Debug, Clone)]
pub struct Rotation {
    pub centers: Vec<PhasePoint>,
    pub w: f64,
    pub t: f64,
    pub cutoff: CutoffSpec,
    pub mode: RotationMode,
    periodic: bool,
    cell: (f64, f64),
    turns: i64,
    index: HashMap<Vec<i64>, Vec<usize>>,
}

impl Rotation {
    pub fn new(space: &SpaceSpec, centers: Vec<PhasePoint>, w: f64, t: f64, cutoff: CutoffSpec) -> Result<Self> {
        if !(w > 0.0 && w.is_finite()) {
            return input("rotation width w must be positive");
        }
        let d = space.d;
        for c in &centers {
            space.check_point(c)?;
        }
        let periodic = space.is_torus();
        if periodic && cutoff.r2 >= std::f64::consts::PI {
            return input("rotation support must be narrower than π on the torus");
        }
        let mut qcell = 2.0 * cutoff.r2;
        let mut turns = 0;
        if periodic {
            turns = ((TAU / qcell).floor() as i64).max(1);
            qcell = TAU / turns as f64;
        }
        let pcell = 2.0 * cutoff.r2 / w;
        let mut rot = Rotation {
            centers: centers.iter().map(|c| c.canonical(space)).collect(),
            w,
            t,
            cutoff,
            mode: RotationMode::ClosedForm,
            periodic,
            cell: (qcell, pcell),
            turns,
            index: HashMap::new(),
        };
        for n in 0..rot.centers.len() {
            let c = rot.centers[n].clone();
            let mut lo = Vec::with_capacity(2 * d);
            let mut hi = Vec::with_capacity(2 * d);
            for i in 0..d {
                lo.push(((c.q[i] - cutoff.r2) / qcell).floor() as i64);
                hi.push(((c.q[i] + cutoff.r2) / qcell).floor() as i64);
            }
            for i in 0..d {
                lo.push(((c.p[i] - cutoff.r2 / w) / pcell).floor() as i64);
                hi.push(((c.p[i] + cutoff.r2 / w) / pcell).floor() as i64);
            }
            for key in crate::fields::lattice_box(&lo, &hi) {
                let key = rot.wrap_key(key, d);
                for &m in rot.index.get(&key).map_or(&[][..], |v| v.as_slice()) {
                    if rot.supports_overlap(&rot.centers[m], &c, space) {
                        return Err(Error::Geometry(format!(
                            "rotation supports around centers {m} and {n} overlap"
                        )));
                    }
                }
                let slot = rot.index.entry(key).or_default();
                if slot.last() != Some(&n) {
                    slot.push(n);
                }
            }
        }
        Ok(rot)
    }

    pub fn with_mode(mut self, mode: RotationMode) -> Self {
        self.mode = mode;
        self
    }

    fn wrap_key(&self, mut key: Vec<i64>, d: usize) -> Vec<i64> {
        if self.periodic {
            for k in key.iter_mut().take(d) {
                *k = k.rem_euclid(self.turns);
            }
        }
        key
    }

    fn delta(&self, x: &PhasePoint, c: &PhasePoint) -> (Vec<f64>, Vec<f64>) {
        let dq = x
            .q
            .iter()
            .zip(&c.q)
            .map(|(a, b)| if self.periodic { shortest_angle(a - b) } else { a - b })
            .collect();
        let dp = x.p.iter().zip(&c.p).map(|(a, b)| a - b).collect();
        (dq, dp)
    }

    fn supports_overlap(&self, a: &PhasePoint, b: &PhasePoint, _space: &SpaceSpec) -> bool {
        let (dq, dp) = self.delta(a, b);
        // Ellipses of radius r2 in the (δq, w·δp) metric overlap iff the
        // scaled Euclidean distance between centers is below 2·r2; touching
        // supports are allowed up to rounding.
        let s: f64 = dq.iter().map(|v| v * v).sum::<f64>() + self.w * self.w * dp.iter().map(|v| v * v).sum::<f64>();
        s.sqrt() < 2.0 * self.cutoff.r2 * (1.0 - 1e-12)
    }

    /// Center whose support contains `x`, with the offsets to it.
    fn locate(&self, x: &PhasePoint) -> Option<(usize, Vec<f64>, Vec<f64>)> {
        let d = x.d();
        let mut key = Vec::with_capacity(2 * d);
        key.extend(x.q.iter().map(|v| (v / self.cell.0).floor() as i64));
        key.extend(x.p.iter().map(|v| (v / self.cell.1).floor() as i64));
        let key = self.wrap_key(key, d);
        for &n in self.index.get(&key)? {
            let (dq, dp) = self.delta(x, &self.centers[n]);
            if self.rho2(&dq, &dp) < self.cutoff.r2 * self.cutoff.r2 {
                return Some((n, dq, dp));
            }
        }
        None
    }

    fn rho2(&self, dq: &[f64], dp: &[f64]) -> f64 {
        dq.iter().map(|v| v * v).sum::<f64>() + self.w * self.w * dp.iter().map(|v| v * v).sum::<f64>()
    }

    /// True when `x` lies in a plateau ellipse, where the map is the plain
    /// oscillator rotation.
    pub fn certified(&self, x: &PhasePoint) -> bool {
        self.locate(x)
            .is_some_and(|(_, dq, dp)| self.rho2(&dq, &dp) < self.cutoff.r1 * self.cutoff.r1)
    }

    /// Angular speed `Ω(r) = (χ + rχ'/2)/w` and `dΩ/dr`.
    fn omega(&self, r: f64) -> (f64, f64) {
        let (c, c1, c2) = self.cutoff.profile(r);
        ((c + 0.5 * r * c1) / self.w, (1.5 * c1 + 0.5 * r * c2) / self.w)
    }

    fn closed_form(&self, x: &PhasePoint, tangent: Option<&mut DMatrix<f64>>) -> PhasePoint {
        let Some((n, dq, dp)) = self.locate(x) else { return x.clone() };
        let d = x.d();
        let w = self.w;
        let s = self.rho2(&dq, &dp);
        let r = s.sqrt();
        let (om, dom) = self.omega(r);
        let th = om * self.t;
        let (sn, cs) = th.sin_cos();
        let c = &self.centers[n];
        let mut y = PhasePoint::zeros(d);
        for i in 0..d {
            y.q[i] = c.q[i] + dq[i] * cs + w * dp[i] * sn;
            y.p[i] = c.p[i] - dq[i] / w * sn + dp[i] * cs;
        }
        if let Some(j) = tangent {
            // Scaled coordinates z = (δq, w·δp); y_z = R(θ(s)) z.
            let mut jz = DMatrix::<f64>::zeros(2 * d, 2 * d);
            for i in 0..d {
                jz[(i, i)] = cs;
                jz[(i, d + i)] = sn;
                jz[(d + i, i)] = -sn;
                jz[(d + i, d + i)] = cs;
            }
            if r > 0.0 && dom != 0.0 {
                let dth_ds = self.t * dom / (2.0 * r);
                let z: Vec<f64> = dq.iter().copied().chain(dp.iter().map(|v| w * v)).collect();
                // dR/dθ · z
                let mut rz = vec![0.0; 2 * d];
                for i in 0..d {
                    rz[i] = -z[i] * sn + z[d + i] * cs;
                    rz[d + i] = -z[i] * cs - z[d + i] * sn;
                }
                for a in 0..2 * d {
                    for b in 0..2 * d {
                        jz[(a, b)] += rz[a] * dth_ds * 2.0 * z[b];
                    }
                }
            }
            let mut scale = DMatrix::<f64>::identity(2 * d, 2 * d);
            let mut unscale = DMatrix::<f64>::identity(2 * d, 2 * d);
            for i in 0..d {
                scale[(d + i, d + i)] = w;
                unscale[(d + i, d + i)] = 1.0 / w;
            }
            *j = &unscale * jz * &scale * &*j;
        }
        y
    }

    fn cutoff_field(&self, n: usize) -> RotationHamiltonian {
        RotationHamiltonian { center: self.centers[n].clone(), w: self.w, cutoff: self.cutoff, periodic: self.periodic }
    }

    fn support_extent(&self) -> (f64, f64) {
        (self.cutoff.r2, self.cutoff.r2 / self.w)
    }
}

/// Cutoff oscillator Hamiltonian around one rotation center.
#[derive(Debug, Clone)]
pub struct RotationHamiltonian {
    center: PhasePoint,
    w: f64,
    cutoff: CutoffSpec,
    periodic: bool,
}

impl RotationHamiltonian {
    fn offsets(&self, x: &PhasePoint) -> (Vec<f64>, Vec<f64>, f64) {
        let dq: Vec<f64> = x
            .q
            .iter()
            .zip(&self.center.q)
            .map(|(a, b)| if self.periodic { shortest_angle(a - b) } else { a - b })
            .collect();
        let dp: Vec<f64> = x.p.iter().zip(&self.center.p).map(|(a, b)| a - b).collect();
        let s = dq.iter().map(|v| v * v).sum::<f64>() + self.w * self.w * dp.iter().map(|v| v * v).sum::<f64>();
        (dq, dp, s)
    }

    /// `G'(s)` and `G''(s)` for `h = G(ρ²)`.
    fn g_derivs(&self, s: f64) -> (f64, f64) {
        let r = s.sqrt();
        let (c, c1, c2) = self.cutoff.profile(r);
        let k = 1.0 / (2.0 * self.w * self.w);
        let g1 = k * (c + 0.5 * r * c1);
        let g2 = if r > 0.0 { k * (3.0 * c1 + r * c2) / (4.0 * r) } else { 0.0 };
        (g1, g2)
    }
}

impl PhaseField for RotationHamiltonian {
    fn d(&self) -> usize {
        self.center.d()
    }
    fn value(&self, x: &PhasePoint) -> f64 {
        let (_, _, s) = self.offsets(x);
        s * self.cutoff.profile(s.sqrt()).0 / (2.0 * self.w * self.w)
    }
    fn grad(&self, x: &PhasePoint) -> (Vec<f64>, Vec<f64>) {
        let (dq, dp, s) = self.offsets(x);
        let (g1, _) = self.g_derivs(s);
        let w2 = self.w * self.w;
        (dq.iter().map(|v| 2.0 * g1 * v).collect(), dp.iter().map(|v| 2.0 * g1 * w2 * v).collect())
    }
    fn hessian(&self, x: &PhasePoint) -> DMatrix<f64> {
        let (dq, dp, s) = self.offsets(x);
        let d = dq.len();
        let (g1, g2) = self.g_derivs(s);
        let w2 = self.w * self.w;
        // ds/dx = (2δq, 2w²δp); H = G''·ds dsᵀ + G'·diag(2, 2w²).
        let ds: Vec<f64> = dq.iter().map(|v| 2.0 * v).chain(dp.iter().map(|v| 2.0 * w2 * v)).collect();
        DMatrix::from_fn(2 * d, 2 * d, |i, j| {
            let diag = if i == j { if i < d { 2.0 * g1 } else { 2.0 * w2 * g1 } } else { 0.0 };
            g2 * ds[i] * ds[j] + diag
        })
    }
    fn describe(&self) -> Value {
        json!({"rotation_hamiltonian": {"center": self.center, "w": self.w, "cutoff": self.cutoff}})
    }
}

/// One stage of a flow map.
#[derive(Debug, Clone)]
pub enum Stage {
    /// Time-`duration` flow of a Hamiltonian (negative durations run backward).
    Numeric { ham: Hamiltonian, duration: f64, dt: f64, safety_radius: f64 },
    /// Piecewise-autonomous flow of a mechanical system under a schedule.
    Schedule { system: Arc<MechanicalSystem>, schedule: ControlSchedule, dt: f64 },
    /// `(q, p) ↦ (q, p − s∇f(q))`.
    VerticalShear { f: Profile, s: f64 },
    /// `(q, p) ↦ (q + s∇g(p), p)`.
    HorizontalShear { g: Profile, s: f64 },
    Rotation(Arc<Rotation>),
    /// `(q, p) ↦ (sq, p/s)`.
    Dilation { s: f64 },
    /// `(q, p) ↦ (q, −p)`; not Hamiltonian.
    Symmetry,
}

impl Stage {
    pub fn vertical_shear(f: Profile, s: f64) -> Stage {
        Stage::VerticalShear { f, s }
    }

    pub fn horizontal_shear(g: Profile, s: f64) -> Stage {
        Stage::HorizontalShear { g, s }
    }

    /// Free drift `e^{τ·|p|²/2}`.
    pub fn drift(d: usize, tau: f64) -> Stage {
        Stage::HorizontalShear { g: Profile::p_expr(HamExpr::kinetic(d)).expect("kinetic energy is p-only"), s: tau }
    }

    pub fn harmonic_rotation(space: &SpaceSpec, center: PhasePoint, w: f64, t: f64, cutoff: CutoffSpec) -> Result<Stage> {
        Ok(Stage::Rotation(Arc::new(Rotation::new(space, vec![center], w, t, cutoff)?)))
    }

    pub fn dilation(s: f64) -> Result<Stage> {
        if !(s > 0.0 && s.is_finite()) {
            return input("dilation factor must be positive");
        }
        Ok(Stage::Dilation { s })
    }

    pub fn numeric(ham: Hamiltonian, duration: f64, dt: f64) -> Result<Stage> {
        if !(dt > 0.0) {
            return input("step size must be positive");
        }
        Ok(Stage::Numeric { ham, duration, dt, safety_radius: DEFAULT_SAFETY_RADIUS })
    }

    pub fn schedule(system: Arc<MechanicalSystem>, schedule: ControlSchedule, dt: f64) -> Result<Stage> {
        if !(dt > 0.0) {
            return input("step size must be positive");
        }
        schedule.check_controls(system.m())?;
        Ok(Stage::Schedule { system, schedule, dt })
    }

    pub fn is_exact(&self) -> bool {
        !matches!(self, Stage::Numeric { .. } | Stage::Schedule { .. })
            && !matches!(self, Stage::Rotation(r) if r.mode != RotationMode::ClosedForm)
    }

    pub fn is_hamiltonian(&self) -> bool {
        !matches!(self, Stage::Symmetry)
    }

    /// Synthetic time spent in the stage.
    pub fn duration(&self) -> f64 {
        match self {
            Stage::Numeric { duration, .. } => duration.abs(),
            Stage::Schedule { schedule, .. } => schedule.total_duration(),
            Stage::VerticalShear { s, .. } | Stage::HorizontalShear { s, .. } => s.abs(),
            Stage::Rotation(r) => r.t.abs(),
            Stage::Dilation { s } => s.ln().abs(),
            Stage::Symmetry => 0.0,
        }
    }

    fn dim(&self) -> Option<usize> {
        match self {
            Stage::Numeric { ham, .. } => Some(ham.d()),
            Stage::Schedule { system, .. } => Some(system.d()),
            Stage::VerticalShear { f, .. } => Some(f.dim()),
            Stage::HorizontalShear { g, .. } => Some(g.dim()),
            Stage::Rotation(r) => r.centers.first().map(PhasePoint::d),
            Stage::Dilation { .. } | Stage::Symmetry => None,
        }
    }

    pub fn describe(&self) -> Value {
        match self {
            Stage::Numeric { ham, duration, dt, .. } => {
                json!({"numeric": {"hamiltonian": ham.describe(), "duration": duration, "dt": dt}})
            }
            Stage::Schedule { system, schedule, dt } => {
                json!({"schedule": {"system": system.describe(), "segments": schedule.segments(), "dt": dt}})
            }
            Stage::VerticalShear { f, s } => json!({"vertical_shear": {"f": f.describe(), "s": s}}),
            Stage::HorizontalShear { g, s } => json!({"horizontal_shear": {"g": g.describe(), "s": s}}),
            Stage::Rotation(r) => json!({"harmonic_rotation": {
                "centers": r.centers,
                "w": r.w,
                "t": r.t,
                "cutoff": r.cutoff,
                "mode": match r.mode {
                    RotationMode::ClosedForm => json!("closed_form"),
                    RotationMode::Numeric { steps } => json!({"numeric_steps": steps}),
                },
            }}),
            Stage::Dilation { s } => json!({"dilation": {"s": s}}),
            Stage::Symmetry => json!({"symmetry": {"hamiltonian": false}}),
        }
    }
}

/// Composition of stages applied in list order.
#[derive(Debug, Clone)]
pub struct FlowMap {
    pub space: SpaceSpec,
    stages: Vec<Stage>,
}

fn check_box(space: &SpaceSpec, x: &PhasePoint, radius: f64, time: f64) -> Result<()> {
    let qbad = !space.is_torus() && x.q.iter().any(|v| !(v.abs() <= radius));
    let pbad = x.p.iter().any(|v| !(v.abs() <= radius));
    if qbad || pbad {
        return Err(Error::Completeness {
            time,
            detail: format!("state (q={:?}, p={:?}) outside the safety box of sup-radius {radius}", x.q, x.p),
        });
    }
    Ok(())
}

/// Strang (kick–drift–kick) integration of a mechanical Hamiltonian with an
/// optional tangent map propagated alongside.
#[allow(clippy::too_many_arguments)]
fn strang(
    space: &SpaceSpec,
    h: &FrozenHamiltonian,
    x: &mut PhasePoint,
    duration: f64,
    dt: f64,
    radius: f64,
    t0: f64,
    mut tangent: Option<&mut DMatrix<f64>>,
) -> Result<()> {
    if duration == 0.0 {
        return Ok(());
    }
    let n = (duration.abs() / dt).ceil().max(1.0) as usize;
    let step = duration / n as f64;
    let d = x.d();
    let kick = |x: &mut PhasePoint, tangent: &mut Option<&mut DMatrix<f64>>, c: f64| {
        let g = h.potential_grad(&x.q);
        if let Some(j) = tangent.as_deref_mut() {
            let hs = h.potential_hessian(&x.q);
            let mut k = DMatrix::<f64>::identity(2 * d, 2 * d);
            for a in 0..d {
                for b in 0..d {
                    k[(d + a, b)] = -c * hs[a][b];
                }
            }
            *j = k * &*j;
        }
        for (p, gi) in x.p.iter_mut().zip(g) {
            *p -= c * gi;
        }
    };
    for k in 0..n {
        kick(x, &mut tangent, 0.5 * step);
        for i in 0..d {
            x.q[i] += step * x.p[i];
        }
        if let Some(j) = tangent.as_deref_mut() {
            let mut m = DMatrix::<f64>::identity(2 * d, 2 * d);
            for a in 0..d {
                m[(a, d + a)] = step;
            }
            *j = m * &*j;
        }
        space.wrap_q(&mut x.q);
        kick(x, &mut tangent, 0.5 * step);
        check_box(space, x, radius, t0 + (k + 1) as f64 * step.abs())?;
    }
    Ok(())
}

fn vector_field(h: &dyn PhaseField, x: &PhasePoint) -> Vec<f64> {
    let (gq, gp) = h.grad(x);
    gp.into_iter().chain(gq.into_iter().map(|v| -v)).collect()
}

/// Classical RK4 on `ẋ = (∂_p H, −∂_q H)` with an optional tangent map.
fn rk4(
    space: &SpaceSpec,
    h: &dyn PhaseField,
    x: &mut PhasePoint,
    duration: f64,
    steps: usize,
    radius: f64,
    mut tangent: Option<&mut DMatrix<f64>>,
) -> Result<()> {
    if duration == 0.0 {
        return Ok(());
    }
    let d = x.d();
    let step = duration / steps as f64;
    let jmat = |x: &PhasePoint| -> DMatrix<f64> {
        // DX = [[H_pq, H_pp], [−H_qq, −H_qp]].
        let hs = h.hessian(x);
        DMatrix::from_fn(2 * d, 2 * d, |i, j| if i < d { hs[(d + i, j)] } else { -hs[(i - d, j)] })
    };
    let shift = |x: &PhasePoint, k: &[f64], c: f64| {
        PhasePoint::from_slice(&x.to_vec().iter().zip(k).map(|(a, b)| a + c * b).collect::<Vec<_>>())
    };
    for n in 0..steps {
        let k1 = vector_field(h, x);
        let x2 = shift(x, &k1, 0.5 * step);
        let k2 = vector_field(h, &x2);
        let x3 = shift(x, &k2, 0.5 * step);
        let k3 = vector_field(h, &x3);
        let x4 = shift(x, &k3, step);
        let k4 = vector_field(h, &x4);
        if let Some(j) = tangent.as_deref_mut() {
            let a1 = jmat(x) * &*j;
            let a2 = jmat(&x2) * (&*j + &a1 * (0.5 * step));
            let a3 = jmat(&x3) * (&*j + &a2 * (0.5 * step));
            let a4 = jmat(&x4) * (&*j + &a3 * step);
            *j += (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (step / 6.0);
        }
        let mut v = x.to_vec();
        for i in 0..2 * d {
            v[i] += step / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        *x = PhasePoint::from_slice(&v);
        space.wrap_q(&mut x.q);
        check_box(space, x, radius, (n + 1) as f64 * step.abs())?;
    }
    Ok(())
}

impl Stage {
    /// Applies the stage, updating the tangent map when one is supplied.
    pub fn apply(&self, space: &SpaceSpec, x: &PhasePoint, mut tangent: Option<&mut DMatrix<f64>>) -> Result<PhasePoint> {
        let d = space.d;
        let mut y = x.canonical(space);
        match self {
            Stage::Numeric { ham, duration, dt, safety_radius } => match ham {
                Hamiltonian::Mechanical(h) => strang(space, h, &mut y, *duration, *dt, *safety_radius, 0.0, tangent)?,
                Hamiltonian::Field(f) => {
                    let steps = (duration.abs() / dt).ceil().max(1.0) as usize;
                    rk4(space, f.as_ref(), &mut y, *duration, steps, *safety_radius, tangent)?
                }
            },
            Stage::Schedule { system, schedule, dt } => {
                let mut t0 = 0.0;
                for seg in schedule.segments() {
                    let h = system.frozen_hamiltonian(&seg.u)?;
                    strang(space, &h, &mut y, seg.tau, *dt, system.safety_radius, t0, tangent.as_deref_mut())?;
                    t0 += seg.tau;
                }
            }
            Stage::VerticalShear { f, s } => {
                let g = f.grad(&y.q);
                if let Some(j) = tangent {
                    let hs = f.hessian(&y.q);
                    let mut m = DMatrix::<f64>::identity(2 * d, 2 * d);
                    for a in 0..d {
                        for b in 0..d {
                            m[(d + a, b)] = -s * hs[a][b];
                        }
                    }
                    *j = m * &*j;
                }
                for (p, gi) in y.p.iter_mut().zip(g) {
                    *p -= s * gi;
                }
            }
            Stage::HorizontalShear { g, s } => {
                let gr = g.grad(&y.p);
                if let Some(j) = tangent {
                    let hs = g.hessian(&y.p);
                    let mut m = DMatrix::<f64>::identity(2 * d, 2 * d);
                    for a in 0..d {
                        for b in 0..d {
                            m[(a, d + b)] = s * hs[a][b];
                        }
                    }
                    *j = m * &*j;
                }
                for (q, gi) in y.q.iter_mut().zip(gr) {
                    *q += s * gi;
                }
                space.wrap_q(&mut y.q);
            }
            Stage::Rotation(r) => {
                y = match r.mode {
                    RotationMode::ClosedForm => r.closed_form(&y, tangent),
                    RotationMode::Numeric { steps } => match r.locate(&y) {
                        None => y,
                        Some((n, _, _)) => {
                            let field = r.cutoff_field(n);
                            rk4(space, &field, &mut y, r.t, steps, f64::INFINITY, tangent)?;
                            y
                        }
                    },
                };
                space.wrap_q(&mut y.q);
            }
            Stage::Dilation { s } => {
                if space.is_torus() {
                    return Err(Error::Unsupported("dilations are not defined on T*T^d".into()));
                }
                for q in y.q.iter_mut() {
                    *q *= s;
                }
                for p in y.p.iter_mut() {
                    *p /= s;
                }
                if let Some(j) = tangent {
                    let m = DMatrix::from_fn(2 * d, 2 * d, |a, b| if a != b { 0.0 } else if a < d { *s } else { 1.0 / s });
                    *j = m * &*j;
                }
            }
            Stage::Symmetry => {
                for p in y.p.iter_mut() {
                    *p = -*p;
                }
                if let Some(j) = tangent {
                    let m = DMatrix::from_fn(2 * d, 2 * d, |a, b| if a != b { 0.0 } else if a < d { 1.0 } else { -1.0 });
                    *j = m * &*j;
                }
            }
        }
        Ok(y)
    }

    /// Inverse stage; schedules become backward numeric segments.
    pub fn inverse(&self) -> Vec<Stage> {
        match self {
            Stage::Numeric { ham, duration, dt, safety_radius } => vec![Stage::Numeric {
                ham: ham.clone(),
                duration: -duration,
                dt: *dt,
                safety_radius: *safety_radius,
            }],
            Stage::Schedule { system, schedule, dt } => schedule
                .segments()
                .iter()
                .rev()
                .map(|seg| Stage::Numeric {
                    ham: Hamiltonian::Mechanical(system.frozen_hamiltonian(&seg.u).expect("schedule was validated")),
                    duration: -seg.tau,
                    dt: *dt,
                    safety_radius: system.safety_radius,
                })
                .collect(),
            Stage::VerticalShear { f, s } => vec![Stage::VerticalShear { f: f.clone(), s: -s }],
            Stage::HorizontalShear { g, s } => vec![Stage::HorizontalShear { g: g.clone(), s: -s }],
            Stage::Rotation(r) => {
                let mut inv = (**r).clone();
                inv.t = -r.t;
                vec![Stage::Rotation(Arc::new(inv))]
            }
            Stage::Dilation { s } => vec![Stage::Dilation { s: 1.0 / s }],
            Stage::Symmetry => vec![Stage::Symmetry],
        }
    }

    /// Box containing the preimage of `[lo, hi]` (flattened `2d` bounds).
    fn preimage_box(&self, space: &SpaceSpec, lo: &[f64], hi: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = space.d;
        let (mut a, mut b) = (lo.to_vec(), hi.to_vec());
        let absmax = |i: usize| lo[i].abs().max(hi[i].abs());
        let full_q = |a: &mut Vec<f64>, b: &mut Vec<f64>| {
            if space.is_torus() {
                for i in 0..d {
                    a[i] = 0.0;
                    b[i] = TAU;
                }
            }
        };
        match self {
            Stage::VerticalShear { f, s } => {
                let qmax: Vec<f64> = (0..d).map(|i| if space.is_torus() { TAU } else { absmax(i) }).collect();
                let g = s.abs() * f.grad_bound_on(&qmax);
                for i in d..2 * d {
                    a[i] -= g;
                    b[i] += g;
                }
            }
            Stage::HorizontalShear { g, s } => {
                let pmax: Vec<f64> = (d..2 * d).map(absmax).collect();
                let m = s.abs() * g.grad_bound_on(&pmax);
                for i in 0..d {
                    a[i] -= m;
                    b[i] += m;
                }
                full_q(&mut a, &mut b);
            }
            Stage::Rotation(r) => {
                let (eq, ep) = r.support_extent();
                for c in &r.centers {
                    let meets = (0..d).all(|i| {
                        let dq = if space.is_torus() { 0.0 } else { (c.q[i] - lo[i]).min(hi[i] - c.q[i]).min(0.0).abs() };
                        dq < eq
                    }) && (0..d).all(|i| c.p[i] + ep > lo[d + i] && c.p[i] - ep < hi[d + i]);
                    if meets {
                        for i in 0..d {
                            if !space.is_torus() {
                                a[i] = a[i].min(c.q[i] - eq);
                                b[i] = b[i].max(c.q[i] + eq);
                            }
                            a[d + i] = a[d + i].min(c.p[i] - ep);
                            b[d + i] = b[d + i].max(c.p[i] + ep);
                        }
                    }
                }
            }
            Stage::Dilation { s } => {
                for i in 0..d {
                    a[i] = lo[i] / s;
                    b[i] = hi[i] / s;
                    a[d + i] = lo[d + i] * s;
                    b[d + i] = hi[d + i] * s;
                }
            }
            Stage::Symmetry => {
                for i in d..2 * d {
                    a[i] = -hi[i];
                    b[i] = -lo[i];
                }
            }
            Stage::Numeric { .. } | Stage::Schedule { .. } => {
                return sampled_preimage_box(space, &self.inverse(), lo, hi);
            }
        }
        Ok((a, b))
    }
}

/// Bounding box of the backward images of boundary samples, padded by one
/// sample spacing on every side.
fn sampled_preimage_box(space: &SpaceSpec, inverse: &[Stage], lo: &[f64], hi: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = lo.len();
    let per_axis = if n <= 2 { 65 } else { 9 };
    let mut a = vec![f64::INFINITY; n];
    let mut b = vec![f64::NEG_INFINITY; n];
    let mut spacing: f64 = 0.0;
    for i in 0..n {
        spacing = spacing.max((hi[i] - lo[i]) / (per_axis - 1) as f64);
    }
    let grid: Vec<Vec<i64>> = crate::fields::lattice_box(&vec![0; n], &vec![per_axis as i64 - 1; n]);
    for cell in grid {
        if !cell.iter().any(|&c| c == 0 || c == per_axis as i64 - 1) {
            continue;
        }
        let v: Vec<f64> = (0..n).map(|i| lo[i] + (hi[i] - lo[i]) * cell[i] as f64 / (per_axis - 1) as f64).collect();
        let mut x = PhasePoint::from_slice(&v);
        for st in inverse {
            x = st.apply(space, &x, None)?;
        }
        let y = x.to_vec();
        for i in 0..n {
            a[i] = a[i].min(y[i]);
            b[i] = b[i].max(y[i]);
        }
    }
    let pad = 2.0 * spacing + 0.05 * (0..n).map(|i| b[i] - a[i]).fold(0.0, f64::max);
    for i in 0..n {
        a[i] -= pad;
        b[i] += pad;
    }
    if space.is_torus() {
        for i in 0..space.d {
            a[i] = 0.0;
            b[i] = TAU;
        }
    }
    Ok((a, b))
}

impl FlowMap {
    pub fn identity(space: SpaceSpec) -> Self {
        FlowMap { space, stages: Vec::new() }
    }

    pub fn new(space: SpaceSpec, stages: Vec<Stage>) -> Result<Self> {
        let mut f = Self::identity(space);
        for s in stages {
            f.push(s)?;
        }
        Ok(f)
    }

    pub fn push(&mut self, stage: Stage) -> Result<()> {
        if let Some(d) = stage.dim() {
            if d != self.space.d {
                return input(format!("stage dimension {d} does not match the space (d = {})", self.space.d));
            }
        }
        if matches!(stage, Stage::Dilation { .. }) && self.space.is_torus() {
            return Err(Error::Unsupported("dilations are not defined on T*T^d".into()));
        }
        if let Stage::Schedule { system, .. } = &stage {
            if system.space != self.space {
                return input("schedule system lives on a different space");
            }
        }
        self.stages.push(stage);
        Ok(())
    }

    pub fn with(mut self, stage: Stage) -> Result<Self> {
        self.push(stage)?;
        Ok(self)
    }

    /// `self` followed by `other`.
    pub fn then(&self, other: &FlowMap) -> Result<FlowMap> {
        if self.space != other.space {
            return input("flow maps live on different spaces");
        }
        let mut f = self.clone();
        f.stages.extend(other.stages.iter().cloned());
        Ok(f)
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn is_hamiltonian(&self) -> bool {
        self.stages.iter().all(Stage::is_hamiltonian)
    }

    pub fn total_time(&self) -> f64 {
        self.stages.iter().map(Stage::duration).sum()
    }

    pub fn apply(&self, x: &PhasePoint) -> Result<PhasePoint> {
        self.space.check_point(x)?;
        let mut y = x.canonical(&self.space);
        for s in &self.stages {
            y = s.apply(&self.space, &y, None)?;
        }
        Ok(y)
    }

    pub fn apply_many(&self, mode: ExecMode, xs: &[PhasePoint]) -> Result<Vec<PhasePoint>> {
        map_indexed(mode, xs.len(), |i| self.apply(&xs[i])).into_iter().collect()
    }

    /// Endpoint and full `2d × 2d` tangent map.
    pub fn tangent(&self, x: &PhasePoint) -> Result<(PhasePoint, DMatrix<f64>)> {
        self.space.check_point(x)?;
        let n = 2 * self.space.d;
        let mut j = DMatrix::<f64>::identity(n, n);
        let mut y = x.canonical(&self.space);
        for s in &self.stages {
            y = s.apply(&self.space, &y, Some(&mut j))?;
        }
        Ok((y, j))
    }

    /// Determinant of the tangent map: exact stages contribute their exact
    /// determinant, numeric stages the determinant of their integrated
    /// variational matrix.
    pub fn jacobian_det(&self, x: &PhasePoint) -> Result<f64> {
        self.space.check_point(x)?;
        let n = 2 * self.space.d;
        let mut det = 1.0;
        let mut y = x.canonical(&self.space);
        for s in &self.stages {
            if s.is_exact() {
                if matches!(s, Stage::Symmetry) && self.space.d % 2 == 1 {
                    det = -det;
                }
                y = s.apply(&self.space, &y, None)?;
            } else {
                let mut j = DMatrix::<f64>::identity(n, n);
                y = s.apply(&self.space, &y, Some(&mut j))?;
                det *= j.determinant();
            }
        }
        Ok(det)
    }

    /// Frobenius norm of `JᵀΩJ − Ω` for the tangent map `J` at `x`.
    pub fn symplectic_defect(&self, x: &PhasePoint) -> Result<f64> {
        let (_, j) = self.tangent(x)?;
        let omega = symplectic_form(self.space.d);
        Ok((j.transpose() * &omega * &j - &omega).norm())
    }

    pub fn inverse(&self) -> FlowMap {
        FlowMap { space: self.space, stages: self.stages.iter().rev().flat_map(Stage::inverse).collect() }
    }

    /// Box containing `Φ⁻¹([lo, hi])`; on the torus the `q`-range is the full
    /// period.
    pub fn preimage_box(&self, lo: &[f64], hi: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (mut a, mut b) = (lo.to_vec(), hi.to_vec());
        for s in self.stages.iter().rev() {
            let (na, nb) = s.preimage_box(&self.space, &a, &b)?;
            a = na;
            b = nb;
        }
        Ok((a, b))
    }

    pub fn describe(&self) -> Value {
        json!({
            "space": self.space,
            "hamiltonian": self.is_hamiltonian(),
            "stages": self.stages.iter().map(Stage::describe).collect::<Vec<_>>(),
        })
    }
}

/// Canonical form `Ω = [[0, I], [−I, 0]]` in `(q, p)` order.
pub fn symplectic_form(d: usize) -> DMatrix<f64> {
    let mut omega = DMatrix::<f64>::zeros(2 * d, 2 * d);
    for i in 0..d {
        omega[(i, d + i)] = 1.0;
        omega[(d + i, i)] = -1.0;
    }
    omega
}

/// Endpoint of `sys` under `sched` from `x0` with Strang steps of size `dt`,
/// plus the trajectory sampled at every step when requested.
pub fn integrate(
    sys: &MechanicalSystem,
    sched: &ControlSchedule,
    x0: &PhasePoint,
    dt: f64,
    record: bool,
) -> Result<(PhasePoint, Vec<(f64, PhasePoint)>)> {
    if !(dt > 0.0) {
        return input("step size must be positive");
    }
    sys.space.check_point(x0)?;
    sched.check_controls(sys.m())?;
    let mut x = x0.canonical(&sys.space);
    check_box(&sys.space, &x, sys.safety_radius, 0.0)?;
    let mut traj = Vec::new();
    if record {
        traj.push((0.0, x.clone()));
    }
    let mut t0 = 0.0;
    for seg in sched.segments() {
        let h = sys.frozen_hamiltonian(&seg.u)?;
        if record {
            let n = (seg.tau / dt).ceil().max(1.0) as usize;
            let step = seg.tau / n as f64;
            for k in 0..n {
                strang(&sys.space, &h, &mut x, step, step, sys.safety_radius, t0 + k as f64 * step, None)?;
                traj.push((t0 + (k + 1) as f64 * step, x.clone()));
            }
        } else {
            strang(&sys.space, &h, &mut x, seg.tau, dt, sys.safety_radius, t0, None)?;
        }
        t0 += seg.tau;
    }
    Ok((x, traj))
}

/// Axis-aligned sample box `K` in flattened `(q, p)` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SampleBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || !lo.len().is_multiple_of(2) || lo.iter().zip(&hi).any(|(a, b)| !(a <= b)) {
            return input("sample box needs matching even-length bounds with lo <= hi");
        }
        Ok(SampleBox { lo, hi })
    }

    /// `[−r, r]^{2d}`.
    pub fn cube(d: usize, r: f64) -> Self {
        SampleBox { lo: vec![-r; 2 * d], hi: vec![r; 2 * d] }
    }

    /// Deterministic Halton sample of `n` points.
    pub fn halton(&self, n: usize) -> Vec<PhasePoint> {
        const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
        let dim = self.lo.len();
        (0..n)
            .map(|k| {
                let v: Vec<f64> = (0..dim)
                    .map(|i| {
                        let u = radical_inverse(k as u64 + 1, PRIMES[i % PRIMES.len()]);
                        self.lo[i] + (self.hi[i] - self.lo[i]) * u
                    })
                    .collect();
                PhasePoint::from_slice(&v)
            })
            .collect()
    }
}

fn radical_inverse(mut k: u64, base: u64) -> f64 {
    let mut inv = 1.0 / base as f64;
    let mut out = 0.0;
    while k > 0 {
        out += (k % base) as f64 * inv;
        k /= base;
        inv /= base as f64;
    }
    out
}

/// Largest sup-distance between the two flows over a Halton sample of `K`.
pub fn c0_distance(a: &FlowMap, b: &FlowMap, k: &SampleBox, n: usize, mode: ExecMode) -> Result<f64> {
    if a.space != b.space {
        return input("flows live on different spaces");
    }
    let pts = k.halton(n);
    let ya = a.apply_many(mode, &pts)?;
    let yb = b.apply_many(mode, &pts)?;
    Ok(max_indexed(mode, n, |i| sup_distance_unchecked(&ya[i], &yb[i], &a.space)))
}
