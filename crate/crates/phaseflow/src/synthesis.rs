//! Small-time reachability calculus: kicks, conjugation, Lie products,
//! bracket schedules and drift reversal, with convergence measurement.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use serde::Serialize;
use serde_json::{json, Value};

use crate::compiler::symmetry_columns;
use crate::error::{input, Error, Result};
use crate::exec::ExecMode;
use crate::fields::lattice_box;
use crate::flow::{c0_distance, FlowMap, Hamiltonian, Profile, SampleBox, Stage};
use crate::geometry::{Mesh, SpaceSpec};
use crate::symbolic::{poisson_bracket, HamExpr};
use crate::systems::{oscillator_system, ControlSchedule, MechanicalSystem, Segment};

/// Builds the realization of `λ·f` for a scale `λ`.
pub type Builder<'a> = dyn Fn(f64) -> Result<SynthesisResult> + 'a;

/// Realized flow as an ordered block list with the generator it approximates.
///
/// `predicted` is the time-one generator with additive constants dropped;
/// `oracle` is an exact flow of that generator when one is known in closed
/// form.
#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub space: SpaceSpec,
    pub blocks: Vec<Stage>,
    pub predicted: Option<HamExpr>,
    pub oracle: Option<FlowMap>,
    pub params: BTreeMap<String, f64>,
}

impl SynthesisResult {
    /// Single admitted exact stage.
    pub fn exact(space: SpaceSpec, stage: Stage, predicted: Option<HamExpr>) -> Result<Self> {
        let oracle = FlowMap::new(space, vec![stage.clone()])?;
        Ok(SynthesisResult { space, blocks: vec![stage], predicted, oracle: Some(oracle), params: BTreeMap::new() })
    }

    /// Exact vertical shear `e^{s·f⃗}` for a `q`-only `f`.
    pub fn kick(space: SpaceSpec, f: &HamExpr, s: f64) -> Result<Self> {
        let stage = Stage::vertical_shear(Profile::q_expr(f.clone())?, s);
        Self::exact(space, stage, Some(f.scale(s).drop_constant()))
    }

    /// Exact drift `e^{t·|p|²/2}`.
    pub fn exact_drift(space: SpaceSpec, t: f64) -> Result<Self> {
        Self::exact(space, Stage::drift(space.d, t), Some(HamExpr::kinetic(space.d).scale(t)))
    }

    /// Exact dilation `e^{λ·(p·q)}`, i.e. `D_{e^λ}`.
    pub fn dilation(space: SpaceSpec, lambda: f64) -> Result<Self> {
        if space.is_torus() {
            return Err(Error::Unsupported("dilations are not defined on the torus".into()));
        }
        let d = space.d;
        let pq = (0..d).fold(HamExpr::zero(d), |acc, i| acc.add(&HamExpr::q(d, i).mul(&HamExpr::p(d, i))));
        Self::exact(space, Stage::dilation(lambda.exp())?, Some(pq.scale(lambda)))
    }

    /// Uncontrolled flow of `sys` for time `t`.
    pub fn drift(sys: &Arc<MechanicalSystem>, t: f64, dt: f64) -> Result<Self> {
        let predicted = sys.v0.as_expr().map(|v| HamExpr::kinetic(sys.d()).add(v).scale(t).drop_constant());
        let mut r = Self::schedule(sys, ControlSchedule::constant(t, vec![0.0; sys.m()])?, dt, predicted)?;
        r.params.insert("t".into(), t);
        Ok(r)
    }

    fn schedule(sys: &Arc<MechanicalSystem>, sched: ControlSchedule, dt: f64, predicted: Option<HamExpr>) -> Result<Self> {
        Ok(SynthesisResult {
            space: sys.space,
            blocks: vec![Stage::schedule(sys.clone(), sched, dt)?],
            predicted,
            oracle: None,
            params: BTreeMap::new(),
        })
    }

    fn empty(space: SpaceSpec) -> Self {
        SynthesisResult {
            space,
            blocks: Vec::new(),
            predicted: Some(HamExpr::zero(space.d)),
            oracle: Some(FlowMap::identity(space)),
            params: BTreeMap::new(),
        }
    }

    /// Control time: total duration of the schedule blocks.
    pub fn total_time(&self) -> f64 {
        self.blocks.iter().filter(|b| matches!(b, Stage::Schedule { .. })).map(Stage::duration).sum()
    }

    /// Number of admitted exact blocks.
    pub fn exact_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| b.is_exact()).count()
    }

    /// Concatenated schedule when every block is a schedule of one system.
    pub fn schedule_only(&self) -> Option<ControlSchedule> {
        let mut out = ControlSchedule::default();
        let mut sys: Option<&Arc<MechanicalSystem>> = None;
        for b in &self.blocks {
            match b {
                Stage::Schedule { system, schedule, .. } => {
                    if sys.is_some_and(|s| !Arc::ptr_eq(s, system)) {
                        return None;
                    }
                    sys = Some(system);
                    out = out.concat(schedule).ok()?;
                }
                _ => return None,
            }
        }
        Some(out)
    }

    pub fn flow(&self) -> Result<FlowMap> {
        FlowMap::new(self.space, self.blocks.clone())
    }

    /// Exact flow of the predicted generator, when available in closed form.
    pub fn exact_target(&self) -> Option<FlowMap> {
        if let Some(o) = &self.oracle {
            return Some(o.clone());
        }
        let h = self.predicted.as_ref()?.drop_constant();
        if h.is_zero() {
            return Some(FlowMap::identity(self.space));
        }
        let stage = if !h.depends_on_p() {
            Stage::vertical_shear(Profile::q_expr(h).ok()?, 1.0)
        } else if !h.depends_on_q() {
            Stage::horizontal_shear(Profile::p_expr(h).ok()?, 1.0)
        } else {
            return None;
        };
        FlowMap::new(self.space, vec![stage]).ok()
    }

    /// Flow of the predicted generator; numeric with step `dt` when no closed
    /// form is known.
    pub fn predicted_flow(&self, dt: f64) -> Result<FlowMap> {
        if let Some(f) = self.exact_target() {
            return Ok(f);
        }
        let h = self.predicted.as_ref().ok_or_else(|| Error::Unsupported("no predicted generator".into()))?;
        FlowMap::new(self.space, vec![Stage::numeric(Hamiltonian::expr(h.clone()), 1.0, dt)?])
    }

    /// Realization of the inverse flow. Kick segments reverse their controls;
    /// pure drift segments cannot be reversed.
    pub fn inverse(&self) -> Result<SynthesisResult> {
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in self.blocks.iter().rev() {
            match b {
                Stage::Schedule { system, schedule, dt } => {
                    let mut segs = Vec::with_capacity(schedule.segments().len());
                    for seg in schedule.segments().iter().rev() {
                        if seg.u.iter().all(|&v| v == 0.0) {
                            return input("a pure drift segment cannot be reversed within the calculus");
                        }
                        segs.push(Segment { tau: seg.tau, u: seg.u.iter().map(|v| -v).collect() });
                    }
                    blocks.push(Stage::schedule(system.clone(), ControlSchedule::new(segs)?, *dt)?);
                }
                Stage::Numeric { .. } => return input("numeric stages are not invertible within the calculus"),
                s => blocks.extend(s.inverse()),
            }
        }
        Ok(SynthesisResult {
            space: self.space,
            blocks,
            predicted: self.predicted.as_ref().map(|h| h.scale(-1.0)),
            oracle: self.oracle.as_ref().map(FlowMap::inverse),
            params: self.params.clone(),
        })
    }

    /// `self` followed by `next`; generators are not combined.
    pub fn then(&self, next: &SynthesisResult) -> Result<SynthesisResult> {
        check_space(self, next)?;
        let mut blocks = self.blocks.clone();
        blocks.extend(next.blocks.iter().cloned());
        let mut params = self.params.clone();
        params.extend(next.params.clone());
        Ok(SynthesisResult { space: self.space, blocks, predicted: None, oracle: None, params })
    }

    pub fn describe(&self) -> Value {
        json!({
            "predicted": self.predicted.as_ref().map(|h| h.to_string()),
            "params": self.params,
            "total_time": self.total_time(),
            "exact_blocks": self.exact_blocks(),
            "blocks": self.blocks.iter().map(Stage::describe).collect::<Vec<_>>(),
        })
    }
}

fn check_space(a: &SynthesisResult, b: &SynthesisResult) -> Result<()> {
    if a.space != b.space {
        return input("synthesis results live on different spaces");
    }
    Ok(())
}

/// One segment of duration `σ` with `u_j = s/σ`; approximates `e^{s·V⃗_j}`.
pub fn potential_kick(sys: &Arc<MechanicalSystem>, j: usize, s: f64, sigma: f64, dt: f64) -> Result<SynthesisResult> {
    if j >= sys.m() {
        return input(format!("control index {j} out of range (m = {})", sys.m()));
    }
    if !(sigma > 0.0) {
        return input("kick duration must be positive");
    }
    let mut u = vec![0.0; sys.m()];
    u[j] = s / sigma;
    let v = &sys.controls[j];
    let predicted = v.as_expr().map(|e| e.scale(s).drop_constant());
    let mut r = SynthesisResult::schedule(sys, ControlSchedule::constant(sigma, u)?, dt, predicted)?;
    r.oracle = Some(FlowMap::new(sys.space, vec![Stage::vertical_shear(Profile::from_potential(v)?, s)])?);
    r.params.insert("s".into(), s);
    r.params.insert("sigma".into(), sigma);
    Ok(r)
}

/// `φ`, then `mid`, then `φ⁻¹`: realizes `e^{h∘φ}` for `mid ≈ e^{h}`,
/// `φ = inner`.
pub fn conjugate(inner: &SynthesisResult, mid: &SynthesisResult) -> Result<SynthesisResult> {
    check_space(inner, mid)?;
    let inv = inner.inverse()?;
    let mut blocks = inner.blocks.clone();
    blocks.extend(mid.blocks.iter().cloned());
    blocks.extend(inv.blocks);
    let predicted = match (&inner.predicted, &mid.predicted) {
        (Some(f), Some(h)) => compose_generator(h, f)?,
        _ => None,
    };
    let oracle = match (inner.exact_target(), mid.exact_target()) {
        (Some(a), Some(b)) => Some(a.then(&b)?.then(&a.inverse())?),
        _ => None,
    };
    let mut params = inner.params.clone();
    params.extend(mid.params.clone());
    Ok(SynthesisResult { space: inner.space, blocks, predicted, oracle, params })
}

/// `h ∘ e^{f⃗}` when it has a closed symbolic form.
fn compose_generator(h: &HamExpr, f: &HamExpr) -> Result<Option<HamExpr>> {
    let f = f.drop_constant();
    if f.is_zero() {
        return Ok(Some(h.drop_constant()));
    }
    if !f.depends_on_p() {
        let d = f.d();
        let shift: Vec<HamExpr> = (0..d).map(|i| f.diff_q(i).scale(-1.0)).collect();
        return Ok(Some(h.substitute_p(&shift)?.drop_constant()));
    }
    if !f.depends_on_q() && !h.depends_on_q() {
        return Ok(Some(h.drop_constant()));
    }
    Ok(None)
}

/// `(e^{f/n} e^{g/n})^n`; approximates `e^{f+g}`.
pub fn lie_product(f: &Builder, g: &Builder, n: usize) -> Result<SynthesisResult> {
    if n == 0 {
        return input("lie product needs n >= 1");
    }
    let fr = f(1.0 / n as f64)?;
    let gr = g(1.0 / n as f64)?;
    check_space(&fr, &gr)?;
    let mut blocks = Vec::with_capacity(n * (fr.blocks.len() + gr.blocks.len()));
    for _ in 0..n {
        blocks.extend(fr.blocks.iter().cloned());
        blocks.extend(gr.blocks.iter().cloned());
    }
    let predicted = match (&fr.predicted, &gr.predicted) {
        (Some(a), Some(b)) => Some(a.add(b).scale(n as f64).drop_constant()),
        _ => None,
    };
    let mut params = fr.params.clone();
    params.extend(gr.params.clone());
    params.insert("n".into(), n as f64);
    Ok(SynthesisResult { space: fr.space, blocks, predicted, oracle: None, params })
}

/// `e^{τf}`, then `e^{g/τ}`, then `e^{−τf}`; approximates
/// `e^{g/τ + {f,g}}` with an `O(τ)` remainder.
pub fn bracket_schedule(f: &Builder, g: &Builder, tau: f64) -> Result<SynthesisResult> {
    if !(tau > 0.0) {
        return input("bracket parameter τ must be positive");
    }
    let inner = f(tau)?;
    let mid = g(1.0 / tau)?;
    let mut r = conjugate(&inner, &mid)?;
    r.predicted = match (&inner.predicted, &mid.predicted) {
        (Some(a), Some(b)) => Some(b.add(&poisson_bracket(a, b)?).drop_constant()),
        _ => None,
    };
    r.oracle = None;
    r.params.insert("tau".into(), tau);
    Ok(r)
}

/// Oscillator flow `e^{t(|p|²+|q|²)/2}` of the auxiliary quadratic system.
pub fn oscillator(d: usize, t: f64, dt: f64) -> Result<SynthesisResult> {
    let sys = Arc::new(oscillator_system(d)?);
    let h = HamExpr::kinetic(d).add(&HamExpr::harmonic(d)).scale(t);
    let mut r = SynthesisResult::schedule(&sys, ControlSchedule::constant(t, vec![1.0])?, dt, Some(h))?;
    r.params.insert("t".into(), t);
    Ok(r)
}

/// Drift `e^{c·|p|²/2}` for `|c| <= 1` of either sign as `K(b)·R_t·K(b)`,
/// with `R_t` the oscillator flow, `sin t = c`, `b = tan(t/2)` and `K(b)`
/// the quadratic kick `p ↦ p + b·q`. Negative `c` takes `t ∈ (3π/2, 2π)`.
pub fn drift_via_oscillator(d: usize, c: f64, dt: f64) -> Result<SynthesisResult> {
    if !(c.abs() <= 1.0) {
        return input(format!("oscillator drift needs |c| <= 1, got {c}"));
    }
    let space = SpaceSpec::euclidean(d)?;
    if c == 0.0 {
        return Ok(SynthesisResult::empty(space));
    }
    let t = if c > 0.0 { c.asin() } else { TAU + c.asin() };
    let b = (0.5 * t).tan();
    let kick = SynthesisResult::kick(space, &HamExpr::harmonic(d), -b)?;
    let rot = oscillator(d, t, dt)?;
    let mut blocks = kick.blocks.clone();
    blocks.extend(rot.blocks);
    blocks.extend(kick.blocks);
    let mut params = BTreeMap::new();
    params.insert("oscillator_time".into(), t);
    params.insert("b".into(), b);
    Ok(SynthesisResult {
        space,
        blocks,
        predicted: Some(HamExpr::kinetic(d).scale(c)),
        oracle: Some(FlowMap::new(space, vec![Stage::drift(d, c)])?),
        params,
    })
}

/// `e^{w·|p|²/2}` for any sign of `w` through
/// `D_{1/√τ} ∘ e^{τw·|p|²/2} ∘ D_{√τ}`; the inner factor runs on the
/// system's drift when `w >= 0` and through the oscillator otherwise.
pub fn reverse_drift_euclidean(sys: &Arc<MechanicalSystem>, w: f64, tau: f64, dt: f64) -> Result<SynthesisResult> {
    if sys.space.is_torus() {
        return Err(Error::Unsupported(
            "drift reversal at the group level is only available on T*R^d; use the density-level plan on the torus".into(),
        ));
    }
    if !sys.v0.as_expr().is_some_and(HamExpr::is_zero) {
        return input("drift reversal needs a system with V0 = 0");
    }
    if !(tau > 0.0) {
        return input("dilation parameter τ must be positive");
    }
    let c = tau * w;
    let d = sys.d();
    let space = sys.space;
    let inner = if c > 0.0 {
        SynthesisResult::drift(sys, c, dt)?
    } else {
        drift_via_oscillator(d, c, dt)?
    };
    let root = tau.sqrt();
    let mut blocks = vec![Stage::dilation(root)?];
    blocks.extend(inner.blocks);
    blocks.push(Stage::dilation(1.0 / root)?);
    let mut params = inner.params;
    params.insert("w".into(), w);
    params.insert("tau".into(), tau);
    Ok(SynthesisResult {
        space,
        blocks,
        predicted: Some(HamExpr::kinetic(d).scale(w)),
        oracle: Some(FlowMap::new(space, vec![Stage::drift(d, w)])?),
        params,
    })
}

/// Density-level plan `[S̃, drift τ, S̃]` on the torus, valid for densities
/// with `|p|_∞ <= mesh.p_box`.
#[derive(Debug, Clone)]
pub struct DensityPlan {
    pub flow: FlowMap,
    pub eta: f64,
    pub w: f64,
    pub tau: f64,
}

impl DensityPlan {
    pub fn describe(&self) -> Value {
        json!({
            "eta": self.eta,
            "w": self.w,
            "tau": self.tau,
            "level": "density",
            "note": "acts on densities only; group-level reachability of torus horizontal shears is not claimed",
            "flow": self.flow.describe(),
        })
    }
}

/// Backward drift `ρ ∘ e^{τ·drift}` at density level; `η` defaults to `h/256`.
pub fn reverse_drift_density_torus(mesh: &Mesh, tau: f64, eta: Option<f64>, w: Option<f64>) -> Result<DensityPlan> {
    let n = mesh
        .cells_per_turn()
        .ok_or_else(|| Error::Unsupported("the density-level reversal plan is for the torus".into()))?;
    let d = mesh.d();
    let eta = eta.unwrap_or(mesh.h / 256.0);
    let cols = lattice_box(&vec![0; d], &vec![n - 1; d]);
    let (sym, w) = symmetry_columns(mesh, &cols, mesh.p_box, eta, w)?;
    let flow = FlowMap::new(mesh.space, vec![sym.clone(), Stage::drift(d, tau), sym])?;
    Ok(DensityPlan { flow, eta, w, tau })
}

/// Measured synthesis error on a sample box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SynthesisError {
    pub error: f64,
    pub total_time: f64,
}

pub fn synthesis_error(
    result: &SynthesisResult,
    target: &FlowMap,
    k: &SampleBox,
    n: usize,
    mode: ExecMode,
) -> Result<SynthesisError> {
    let error = c0_distance(&result.flow()?, target, k, n, mode)?;
    Ok(SynthesisError { error, total_time: result.total_time() })
}

/// Error of `build(x)` against its own predicted flow along a parameter
/// ladder.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ladder {
    pub params: Vec<f64>,
    pub errors: Vec<f64>,
    pub total_times: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl Ladder {
    pub fn max_ratio(&self) -> f64 {
        self.ratios.iter().copied().fold(0.0, f64::max)
    }
}

pub fn ladder(
    params: &[f64],
    build: &dyn Fn(f64) -> Result<SynthesisResult>,
    k: &SampleBox,
    n: usize,
    dt: f64,
    mode: ExecMode,
) -> Result<Ladder> {
    let mut errors = Vec::with_capacity(params.len());
    let mut total_times = Vec::with_capacity(params.len());
    for &x in params {
        let r = build(x)?;
        let e = synthesis_error(&r, &r.predicted_flow(dt)?, k, n, mode)?;
        errors.push(e.error);
        total_times.push(e.total_time);
    }
    let ratios = errors.windows(2).map(|w| w[1] / w[0]).collect();
    Ok(Ladder { params: params.to_vec(), errors, total_times, ratios })
}

/// Rotation angle that closes the oscillator period.
pub const OSCILLATOR_PERIOD: f64 = 2.0 * PI;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{l1_distance_with_tails, DensityField, Quadrature, WeightedCube};
    use crate::geometry::{Cube, PhasePoint};
    use crate::systems::{euclidean_preset, torus_preset, Potential};

    fn e1() -> Arc<MechanicalSystem> {
        Arc::new(euclidean_preset(1, Potential::zero(1)).unwrap())
    }

    fn unit() -> SampleBox {
        SampleBox::cube(1, 1.0)
    }

    fn err(r: &SynthesisResult, target: &FlowMap) -> f64 {
        synthesis_error(r, target, &unit(), 200, ExecMode::Sequential).unwrap().error
    }

    #[test]
    fn zero_kick_is_a_short_drift() {
        let sys = e1();
        let r = potential_kick(&sys, 0, 0.0, 0.01, 1e-3).unwrap();
        assert!(r.predicted.as_ref().unwrap().is_zero());
        let drift = FlowMap::new(sys.space, vec![Stage::drift(1, 0.01)]).unwrap();
        assert!(err(&r, &drift) < 1e-12);
    }

    #[test]
    fn kick_approximates_the_vertical_shear() {
        let sys = e1();
        let shear = FlowMap::new(sys.space, vec![Stage::vertical_shear(Profile::q_expr(HamExpr::q(1, 0)).unwrap(), 1.0)]).unwrap();
        let r = potential_kick(&sys, 0, 1.0, 1e-3, 1e-4).unwrap();
        assert!(err(&r, &shear) <= 5e-3);
        let es: Vec<f64> = [1e-2, 5e-3, 2.5e-3]
            .iter()
            .map(|&s| err(&potential_kick(&sys, 0, 1.0, s, s / 10.0).unwrap(), &shear))
            .collect();
        assert!(es[1] / es[0] <= 0.6 && es[2] / es[1] <= 0.6, "{es:?}");
    }

    #[test]
    fn conjugating_drift_by_a_linear_kick_adds_momentum() {
        let sys = e1();
        let (v, tau) = (0.7, 0.1);
        let inner = potential_kick(&sys, 0, -v / tau, 1e-3, 1e-4).unwrap();
        let mid = SynthesisResult::drift(&sys, tau, 1e-3).unwrap();
        let r = conjugate(&inner, &mid).unwrap();
        let want = HamExpr::kinetic(1).scale(tau).add(&HamExpr::p(1, 0).scale(v));
        assert!(r.predicted.unwrap().approx_eq(&want, 1e-12));
        let id = SynthesisResult::empty(sys.space);
        let same = conjugate(&id, &mid).unwrap();
        assert!(same.predicted.unwrap().approx_eq(mid.predicted.as_ref().unwrap(), 0.0));
    }

    #[test]
    fn momentum_generation_ladder() {
        let sys = e1();
        let v = 0.5;
        let target = FlowMap::new(sys.space, vec![Stage::horizontal_shear(Profile::p_expr(HamExpr::p(1, 0)).unwrap(), v)]).unwrap();
        let es: Vec<f64> = [0.1, 0.05, 0.025]
            .iter()
            .map(|&tau| {
                let sigma = tau * tau;
                let inner = potential_kick(&sys, 0, -v / tau, sigma, sigma / 10.0).unwrap();
                let mid = SynthesisResult::drift(&sys, tau, tau / 10.0).unwrap();
                err(&conjugate(&inner, &mid).unwrap(), &target)
            })
            .collect();
        assert!(es[1] < es[0] && es[2] < es[1], "{es:?}");
    }

    #[test]
    fn lie_product_cases() {
        let s = SpaceSpec::euclidean(1).unwrap();
        let q = HamExpr::q(1, 0);
        let q2 = HamExpr::harmonic(1);
        let zero: &Builder = &|_| Ok(SynthesisResult::empty(s));
        let fq: &Builder = &|l| SynthesisResult::kick(s, &q, l);
        let r = lie_product(fq, zero, 3).unwrap();
        assert!(err(&r, &r.predicted_flow(1e-3).unwrap()) < 1e-12);
        let r = lie_product(fq, fq, 5).unwrap();
        assert!(r.predicted.as_ref().unwrap().approx_eq(&q.scale(2.0), 1e-12));
        assert!(err(&r, &r.predicted_flow(1e-3).unwrap()) <= 1e-10);
        let fk: &Builder = &|l| SynthesisResult::kick(s, &q2, l);
        let g: &Builder = &|l| SynthesisResult::exact_drift(s, l);
        let l = ladder(&[4.0, 8.0, 16.0, 32.0], &|n| lie_product(fk, g, n as usize), &unit(), 200, 1e-3, ExecMode::Sequential).unwrap();
        assert!(l.max_ratio() <= 0.6, "{l:?}");
    }

    #[test]
    fn bracket_predictions() {
        let s = SpaceSpec::euclidean(1).unwrap();
        let q = HamExpr::q(1, 0);
        let q2 = HamExpr::harmonic(1);
        let f: &Builder = &|l| SynthesisResult::kick(s, &q, l);
        let g: &Builder = &|l| SynthesisResult::kick(s, &q2, l);
        let r = bracket_schedule(f, g, 0.1).unwrap();
        assert!(r.predicted.unwrap().approx_eq(&q2.scale(10.0), 1e-12));
        let p: &Builder = &|l| SynthesisResult::exact(s, Stage::horizontal_shear(Profile::p_expr(HamExpr::p(1, 0)).unwrap(), l), Some(HamExpr::p(1, 0).scale(l)));
        let r = bracket_schedule(f, p, 0.5).unwrap();
        assert!(r.predicted.unwrap().approx_eq(&HamExpr::p(1, 0).scale(2.0), 1e-12));
    }

    #[test]
    fn dilation_bracket_ladder() {
        let s = SpaceSpec::euclidean(1).unwrap();
        let f: &Builder = &|l| SynthesisResult::dilation(s, l);
        let g: &Builder = &|l| SynthesisResult::exact_drift(s, l);
        let r = bracket_schedule(f, g, 0.1).unwrap();
        assert!(r.predicted.as_ref().unwrap().approx_eq(&HamExpr::kinetic(1).scale(10.0 - 2.0), 1e-12));
        let l = ladder(&[0.1, 0.05, 0.025, 0.0125], &|t| bracket_schedule(f, g, t), &unit(), 200, 1e-3, ExecMode::Sequential).unwrap();
        assert!(l.max_ratio() <= 0.6, "{l:?}");
    }

    #[test]
    fn dilation_identity_is_exact() {
        let sys = e1();
        let target = FlowMap::new(sys.space, vec![Stage::drift(1, 1.0)]).unwrap();
        let r = reverse_drift_euclidean(&sys, 1.0, 0.25, 1e-3).unwrap();
        assert!(err(&r, &target) < 1e-12);
        assert!((r.total_time() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn negative_drift_through_the_oscillator() {
        let sys = e1();
        let r = reverse_drift_euclidean(&sys, -0.5, 1.0, 1e-4).unwrap();
        let target = FlowMap::new(sys.space, vec![Stage::drift(1, -0.5)]).unwrap();
        assert!(err(&r, &target) < 1e-8);
        let full = oscillator(1, OSCILLATOR_PERIOD, 1e-4).unwrap();
        assert!(err(&full, &FlowMap::identity(sys.space)) < 1e-8);
    }

    #[test]
    fn torus_drift_reversal_is_unsupported() {
        let sys = Arc::new(torus_preset(1, Potential::zero(1)).unwrap());
        assert!(matches!(reverse_drift_euclidean(&sys, -1.0, 1.0, 1e-3), Err(Error::Unsupported(_))));
        let kick = potential_kick(&sys, 0, 1.0, 0.1, 1e-2).unwrap();
        assert!(kick.inverse().is_ok());
        assert!(SynthesisResult::drift(&sys, 0.1, 1e-2).unwrap().inverse().is_err());
    }

    #[test]
    fn density_reversal_at_zero_time_is_identity() {
        let space = SpaceSpec::torus(1).unwrap();
        let mesh = Mesh::aligned(space, PI / 64.0, 1.0).unwrap();
        let plan = reverse_drift_density_torus(&mesh, 0.0, None, None).unwrap();
        let h = mesh.h;
        let rho = DensityField::cubes(
            space,
            vec![WeightedCube { cube: Cube { center: PhasePoint::new(vec![4.0 * h * 5.0], vec![2.0 * h]), radius: 4.0 * h }, weight: 1.0 }],
        )
        .unwrap();
        let quad = Quadrature::new(vec![0.0, -1.0], vec![TAU, 1.0], 128).unwrap();
        let mass = (8.0 * h).powi(2);
        let e = l1_distance_with_tails(&rho.pushforward(&plan.flow).unwrap(), &rho, mass, mass, &quad).unwrap();
        assert!(e < 0.02 * mass, "{e}");
    }

    #[test]
    fn density_reversal_matches_backward_drift() {
        let space = SpaceSpec::torus(1).unwrap();
        let mesh = Mesh::aligned(space, PI / 256.0, 1.0).unwrap();
        let plan = reverse_drift_density_torus(&mesh, 0.1, None, None).unwrap();
        let rho = DensityField::cubes(
            space,
            vec![
                WeightedCube { cube: Cube { center: PhasePoint::new(vec![1.0 * PI / 4.0], vec![0.25]), radius: PI / 8.0 }, weight: 1.0 },
                WeightedCube { cube: Cube { center: PhasePoint::new(vec![PI], vec![-0.5]), radius: PI / 16.0 }, weight: 2.0 },
            ],
        )
        .unwrap();
        let mass = (PI / 4.0).powi(2) + 2.0 * (PI / 8.0).powi(2);
        let back = FlowMap::new(space, vec![Stage::drift(1, -0.1)]).unwrap();
        let quad = Quadrature::new(vec![0.0, -1.0], vec![TAU, 1.0], 256).unwrap();
        let e = l1_distance_with_tails(&rho.pushforward(&plan.flow).unwrap(), &rho.pushforward(&back).unwrap(), mass, mass, &quad).unwrap();
        assert!(e <= 0.05, "{e}");
    }
}
