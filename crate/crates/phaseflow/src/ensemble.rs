//! Exact small-time steering of finite point ensembles with drift and
//! localized vertical shears.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{input, Error, Result};
use crate::fields::{LocalizedLinear, Piece};
use crate::flow::{FlowMap, Profile, Stage};
use crate::geometry::{shortest_angle, sup_distance_unchecked, PhasePoint, SpaceSpec};
use crate::systems::MechanicalSystem;

/// Initial ladder size of the separation search.
const LADDER: usize = 8;
/// Maximum number of ladder doublings.
const MAX_REFINEMENTS: usize = 20;
/// Positions closer than this count as coincident.
const MIN_SEPARATION: f64 = 1e-9;

/// Ordered, pairwise distinct phase points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleState {
    pub points: Vec<PhasePoint>,
}

impl EnsembleState {
    pub fn new(space: &SpaceSpec, points: Vec<PhasePoint>) -> Result<Self> {
        if points.is_empty() {
            return input("ensemble must contain at least one point");
        }
        for x in &points {
            space.check_point(x)?;
        }
        let points: Vec<PhasePoint> = points.iter().map(|x| x.canonical(space)).collect();
        for i in 0..points.len() {
            for j in 0..i {
                if sup_distance_unchecked(&points[i], &points[j], space) == 0.0 {
                    return input(format!("ensemble points {j} and {i} coincide"));
                }
            }
        }
        Ok(EnsembleState { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec<f64>> {
        self.points.iter().map(|x| x.q.clone()).collect()
    }
}

fn position_gap(space: &SpaceSpec, a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            // Symmetric in (x, y) so the gap does not depend on point order.
            let g = (x - y).abs();
            if space.is_torus() {
                let g = g.rem_euclid(std::f64::consts::TAU);
                g.min(std::f64::consts::TAU - g)
            } else {
                g
            }
        })
        .fold(0.0, f64::max)
}

/// Smallest pairwise sup-distance between positions; infinite for one point.
pub fn min_separation(space: &SpaceSpec, q: &[Vec<f64>]) -> f64 {
    let mut m = f64::INFINITY;
    for i in 0..q.len() {
        for j in 0..i {
            m = m.min(position_gap(space, &q[i], &q[j]));
        }
    }
    m
}

/// Drift time making the drifted positions pairwise distinct.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Separation {
    pub delta: f64,
    pub margin: f64,
}

fn drifted(space: &SpaceSpec, points: &[PhasePoint], t: f64) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|x| {
            let mut q: Vec<f64> = x.q.iter().zip(&x.p).map(|(q, p)| q + t * p).collect();
            space.wrap_q(&mut q);
            q
        })
        .collect()
}

/// Smallest `δ` on the ladder `{0, δmax/K, …, δmax}` (refined by doubling `K`)
/// with pairwise distinct positions `q^i + δp^i`. Negative `δmax` searches
/// backward in time.
pub fn separate(space: &SpaceSpec, state: &EnsembleState, delta_max: f64) -> Result<Separation> {
    if !(delta_max.is_finite() && delta_max != 0.0) {
        return input("separation horizon must be finite and nonzero");
    }
    let m0 = min_separation(space, &state.positions());
    if m0 > MIN_SEPARATION {
        return Ok(Separation { delta: 0.0, margin: m0 });
    }
    let mut k = LADDER;
    for _ in 0..=MAX_REFINEMENTS {
        for i in 1..=k {
            let t = delta_max * i as f64 / k as f64;
            let m = min_separation(space, &drifted(space, &state.points, t));
            if m > MIN_SEPARATION {
                return Ok(Separation { delta: t.abs(), margin: m });
            }
        }
        k *= 2;
    }
    Err(Error::Numeric("no separating drift time found on the refined ladder".into()))
}

/// Potential with prescribed gradients `a^i` at `q^i`, vanishing Hessian
/// there and disjoint box supports of radius `D/2` (`D` the minimal pairwise
/// sup-distance; plateau `D/3`).
pub fn interpolant(space: &SpaceSpec, positions: &[Vec<f64>], gradients: &[Vec<f64>], label: &str) -> Result<LocalizedLinear> {
    let d = space.d;
    if positions.len() != gradients.len() {
        return input("interpolant needs one gradient per position");
    }
    if positions.iter().chain(gradients).any(|v| v.len() != d) {
        return input("interpolant vectors must have length d");
    }
    let sep = min_separation(space, positions);
    if !(sep > MIN_SEPARATION) {
        return input("interpolation positions must be pairwise distinct");
    }
    let reach = sep.min(2.0);
    let pieces = positions
        .iter()
        .zip(gradients)
        .map(|(q, a)| {
            let mut c = q.clone();
            space.wrap_q(&mut c);
            Piece { center: c, plateau: vec![reach / 3.0; d], support: vec![reach / 2.0; d], slope: a.clone(), offset: 0.0 }
        })
        .collect();
    LocalizedLinear::new(d, vec![space.is_torus(); d], pieces, label)
}

/// Drift–shear–drift–shear plan with optional separation drifts.
#[derive(Debug, Clone)]
pub struct SteeringPlan {
    pub flow: FlowMap,
    pub tau: f64,
    pub delta_start: f64,
    pub delta_target: f64,
    /// Configuration displacements `p̂^i`.
    pub p_hat: Vec<Vec<f64>>,
}

impl SteeringPlan {
    pub fn total_time(&self) -> f64 {
        self.delta_start + self.tau + self.delta_target
    }

    pub fn describe(&self) -> Value {
        json!({
            "tau": self.tau,
            "delta_start": self.delta_start,
            "delta_target": self.delta_target,
            "total_time": self.total_time(),
            "p_hat": self.p_hat,
            "flow": self.flow.describe(),
        })
    }
}

/// Endpoint check of one ensemble member.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EndpointRow {
    pub i: usize,
    pub target: PhasePoint,
    pub achieved: PhasePoint,
    pub error: f64,
}

/// Plan mapping each start point to its target; `δmax` bounds each
/// separation drift.
pub fn steer(space: &SpaceSpec, start: &EnsembleState, target: &EnsembleState, tau: f64, delta_max: f64) -> Result<SteeringPlan> {
    if start.len() != target.len() {
        return input("start and target ensembles differ in size");
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return input("steering time τ must be positive");
    }
    let d = space.d;
    let sep0 = separate(space, start, delta_max)?;
    let sep1 = separate(space, target, -delta_max)?;
    let q0 = drifted(space, &start.points, sep0.delta);
    let q1 = drifted(space, &target.points, -sep1.delta);
    let p_hat: Vec<Vec<f64>> = q0
        .iter()
        .zip(&q1)
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(x, y)| if space.is_torus() { shortest_angle(y - x) } else { y - x })
                .collect()
        })
        .collect();
    let f_grad: Vec<Vec<f64>> = start
        .points
        .iter()
        .zip(&p_hat)
        .map(|(x, h)| x.p.iter().zip(h).map(|(p, h)| p - h / tau).collect())
        .collect();
    let g_grad: Vec<Vec<f64>> = target
        .points
        .iter()
        .zip(&p_hat)
        .map(|(x, h)| x.p.iter().zip(h).map(|(p, h)| -p + h / tau).collect())
        .collect();
    let f = interpolant(space, &q0, &f_grad, "steer_f")?;
    let g = interpolant(space, &q1, &g_grad, "steer_g")?;
    let mut stages = Vec::with_capacity(5);
    if sep0.delta > 0.0 {
        stages.push(Stage::drift(d, sep0.delta));
    }
    stages.push(Stage::vertical_shear(Profile::field(Arc::new(f)), 1.0));
    stages.push(Stage::drift(d, tau));
    stages.push(Stage::vertical_shear(Profile::field(Arc::new(g)), 1.0));
    if sep1.delta > 0.0 {
        stages.push(Stage::drift(d, sep1.delta));
    }
    Ok(SteeringPlan { flow: FlowMap::new(*space, stages)?, tau, delta_start: sep0.delta, delta_target: sep1.delta, p_hat })
}

/// Applies the plan to each start point and compares with its target.
pub fn verify_plan(plan: &SteeringPlan, start: &EnsembleState, target: &EnsembleState) -> Result<Vec<EndpointRow>> {
    let space = plan.flow.space;
    start
        .points
        .iter()
        .zip(&target.points)
        .enumerate()
        .map(|(i, (x, y))| {
            let z = plan.flow.apply(x)?.canonical(&space);
            Ok(EndpointRow { i, target: y.clone(), achieved: z.clone(), error: sup_distance_unchecked(&z, y, &space) })
        })
        .collect()
}

/// Numerical rank of the `2dN` tangent vectors `X^{i,k}` and `[X^{i,k}, H⃗₀]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankReport {
    pub dim: usize,
    pub rank: usize,
    pub singular_values: Vec<f64>,
    pub smallest: f64,
    pub delta: f64,
}

/// Builds unit probes `f^{i,k}` with `−∇f^{i,k}(q^j) = δ_{ij} e_k` and zero
/// Hessians at every `q^j`, then their brackets with the drift.
pub fn lie_rank_check(sys: &MechanicalSystem, gamma: &EnsembleState) -> Result<RankReport> {
    let space = sys.space;
    let d = space.d;
    let n = gamma.len();
    let sep = separate(&space, gamma, 1.0)?;
    let q = drifted(&space, &gamma.points, sep.delta);
    let p: Vec<&Vec<f64>> = gamma.points.iter().map(|x| &x.p).collect();
    let dim = 2 * d * n;
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dim);
    let mut brackets: Vec<Vec<f64>> = Vec::with_capacity(dim);
    for i in 0..n {
        for k in 0..d {
            let grads: Vec<Vec<f64>> = (0..n)
                .map(|j| (0..d).map(|l| if j == i && l == k { -1.0 } else { 0.0 }).collect())
                .collect();
            let f = interpolant(&space, &q, &grads, "probe")?;
            let mut x = vec![0.0; dim];
            let mut b = vec![0.0; dim];
            for j in 0..n {
                let (_, gf, hf) = f.eval_all(&q[j]);
                // X = (0, −∇f), Y = (p, −∇V₀); [X, Y] = DY·X − DX·Y = (−∇f, Hf·p).
                let base = 2 * d * j;
                for l in 0..d {
                    x[base + d + l] = -gf[l];
                    b[base + l] = -gf[l];
                    b[base + d + l] = (0..d).map(|m| hf[l][m] * p[j][m]).sum();
                }
            }
            cols.push(x);
            brackets.push(b);
        }
    }
    cols.extend(brackets);
    let m = DMatrix::from_fn(dim, dim, |r, c| cols[c][r]);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let tol = 1e-9 * sv.first().copied().unwrap_or(0.0).max(1.0);
    let rank = sv.iter().filter(|&&s| s > tol).count();
    let smallest = sv.last().copied().unwrap_or(0.0);
    Ok(RankReport { dim, rank, singular_values: sv, smallest, delta: sep.delta })
}
