//! Compilation of mesh permutations into exact Hamiltonian primitives.
//!
//! Every produced stage is a localized shear or a localized harmonic rotation
//! whose action on the shrunken cubes `C(m, h − η)` is known in closed form.
//!
//! Two routes exist. The swap route (`d = 1`, moves inside columns) spreads
//! the affected columns vertically, sorts each column with rotations that
//! swap consecutive cubes and undoes the spread. The parking route handles
//! arbitrary permutations: after the spread every moved cube is alone in its
//! momentum row, band shears carry it to a private parking column, a strip
//! shear lifts it to the row of its target slot, a second band shear drops it
//! into the target column and the spread is undone.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{input, Error, Result};
use crate::fields::{CutoffSpec, LocalizedLinear, Piece};
use crate::flow::{Axis, FlowMap, Profile, Rotation, Stage};
use crate::geometry::{sup_distance, CubeIndex, Mesh, MeshPermutation, PhasePoint};

/// Which construction `compile` uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    /// Swaps when `d = 1` and every move stays in its column, parking otherwise.
    #[default]
    Auto,
    Swaps,
    Parking,
}

/// Options for `compile`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompileOptions {
    /// Collar width; defaults to `h/32`.
    #[serde(default)]
    pub eta: Option<f64>,
    /// Rotation width for the swap route; chosen automatically when absent.
    #[serde(default)]
    pub w: Option<f64>,
    #[serde(default)]
    pub route: Route,
    /// Further configuration columns holding content that must stay fixed.
    #[serde(default)]
    pub occupied: Vec<Vec<i64>>,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions { eta: None, w: None, route: Route::Auto, occupied: Vec::new() }
    }
}

impl CompileOptions {
    pub fn eta(&self, h: f64) -> f64 {
        self.eta.unwrap_or(h / 32.0)
    }
}

/// Localized affine profile built from pieces on one variable block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizedProfile {
    #[serde(with = "axis_serde")]
    pub axis: Axis,
    pub pieces: Vec<Piece>,
}

mod axis_serde {
    use super::Axis;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(a: &Axis, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match a {
            Axis::Q => "q",
            Axis::P => "p",
        })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Axis, D::Error> {
        match String::deserialize(d)?.as_str() {
            "q" => Ok(Axis::Q),
            "p" => Ok(Axis::P),
            other => Err(serde::de::Error::custom(format!("unknown axis '{other}'"))),
        }
    }
}

impl LocalizedProfile {
    /// Shear profile; configuration axes are periodic on the torus.
    pub fn into_profile(&self, mesh: &Mesh, label: &str) -> Result<Profile> {
        let d = mesh.d();
        let periodic = vec![self.axis == Axis::Q && mesh.space.is_torus(); d];
        Ok(Profile::field(Arc::new(LocalizedLinear::new(d, periodic, self.pieces.clone(), label)?)))
    }
}

fn box_piece(center: Vec<f64>, h: f64, eta: f64, slope: Vec<f64>) -> Piece {
    let d = center.len();
    Piece { center, plateau: vec![h - eta; d], support: vec![h; d], slope, offset: 0.0 }
}

fn check_eta(mesh: &Mesh, eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta < mesh.h) {
        return input("collar η must satisfy 0 < η < h");
    }
    Ok(())
}

/// Vertical shear translating each listed configuration column by its
/// momentum shift on the plateau `|q − q^j|_∞ <= h − η`.
pub fn column_spread(mesh: &Mesh, shifts: &[(Vec<i64>, Vec<f64>)], eta: f64) -> Result<Stage> {
    check_eta(mesh, eta)?;
    let d = mesh.d();
    let mut seen = BTreeSet::new();
    let mut pieces = Vec::new();
    for (col, shift) in shifts {
        if col.len() != d || shift.len() != d {
            return input("column and shift need length d");
        }
        if !seen.insert(mesh.canonical_index(&CubeIndex::from_parts(col, &vec![0; d]))) {
            return input(format!("column {col:?} listed twice"));
        }
        pieces.push(box_piece(mesh.q_center(col), mesh.h, eta, shift.iter().map(|s| -s).collect()));
    }
    let prof = LocalizedProfile { axis: Axis::Q, pieces };
    Ok(Stage::vertical_shear(prof.into_profile(mesh, "column_spread")?, 1.0))
}

/// Horizontal shear translating each listed momentum row (centered at the
/// given momentum) by its configuration shift on `|p − p̄|_∞ <= h − η`.
pub fn horizontal_translate(mesh: &Mesh, moves: &[(Vec<f64>, Vec<f64>)], eta: f64) -> Result<Stage> {
    check_eta(mesh, eta)?;
    let d = mesh.d();
    let mut pieces: Vec<Piece> = Vec::new();
    for (row, shift) in moves {
        if row.len() != d || shift.len() != d {
            return input("row and shift need length d");
        }
        for other in &pieces {
            let sep = other.center.iter().zip(row).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if sep < 2.0 * mesh.h - 1e-9 * mesh.h {
                return Err(Error::Geometry("band supports overlap".into()));
            }
        }
        pieces.push(box_piece(row.clone(), mesh.h, eta, shift.clone()));
    }
    let prof = LocalizedProfile { axis: Axis::P, pieces };
    Ok(Stage::horizontal_shear(prof.into_profile(mesh, "horizontal_translate")?, 1.0))
}

/// Admissible rotation widths for swapping two consecutive cubes at center
/// distance `2h`, with the support allowed to reach `q_clearance` in `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SwapWindow {
    pub w_min: f64,
    pub w_max: f64,
}

fn swap_geometry(h: f64, eta: f64) -> (f64, f64) {
    let a = 2.0 * h - eta;
    let b = 2.0 * h + eta;
    (a, b)
}

/// Range of `w` for which the plateau ellipse contains both shrunken cubes
/// while the support avoids the neighbouring cubes of the column and stays
/// within `q_clearance`.
pub fn swap_window(h: f64, eta: f64, q_clearance: f64) -> SwapWindow {
    let (a, b) = swap_geometry(h, eta);
    let e = h - eta;
    let w_min = e / (b * b - a * a).sqrt();
    let w_max = if q_clearance > e { (q_clearance * q_clearance - e * e).sqrt() / a } else { 0.0 };
    SwapWindow { w_min, w_max }
}

/// Rotation by `π` (duration `πw`) exchanging the consecutive cubes
/// `(column, o)` and `(column, o + 1)` of a `d = 1` mesh.
pub fn swap_consecutive(mesh: &Mesh, column: i64, o: i64, eta: f64, w: Option<f64>, q_clearance: f64) -> Result<(Stage, f64)> {
    if mesh.d() != 1 {
        return Err(Error::Unsupported("swap_consecutive needs d = 1".into()));
    }
    check_eta(mesh, eta)?;
    let h = mesh.h;
    let mut qc = q_clearance;
    if mesh.space.is_torus() {
        qc = qc.min(PI - 1e-6);
    }
    let win = swap_window(h, eta, qc);
    let w = match w {
        Some(w) => {
            if !(w < win.w_max) {
                return Err(Error::Geometry(format!("w = {w} too large; max admissible w = {}", win.w_max)));
            }
            if !(w > win.w_min) {
                return Err(Error::Geometry(format!("w = {w} too small; min admissible w = {}", win.w_min)));
            }
            w
        }
        None => {
            if !(win.w_min < win.w_max) {
                return Err(Error::Geometry(format!(
                    "no admissible w: window ({}, {}) is empty",
                    win.w_min, win.w_max
                )));
            }
            (win.w_min * win.w_max).sqrt()
        }
    };
    let (a, b) = swap_geometry(h, eta);
    let e = h - eta;
    let r1_min = (e * e + w * w * a * a).sqrt();
    let r2 = (w * b).min(qc);
    let r1 = 0.5 * (r1_min + r2);
    let lo = mesh.center(&CubeIndex(vec![column, o]));
    let hi = mesh.center(&CubeIndex(vec![column, o + 1]));
    let center = PhasePoint::new(lo.q.clone(), vec![0.5 * (lo.p[0] + hi.p[0])]);
    let rot = Rotation::new(&mesh.space, vec![center], w, PI * w, CutoffSpec::new(r1, r2)?)?;
    Ok((Stage::Rotation(Arc::new(rot)), w))
}

/// Per-stage annotation of a compiled sequence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepInfo {
    pub kind: String,
    pub duration: f64,
    pub detail: Value,
}

/// Ordered list of exact primitives realizing a mesh permutation on the
/// shrunken cubes.
#[derive(Debug, Clone)]
pub struct PrimitiveSeq {
    pub route: Route,
    pub h: f64,
    pub eta: f64,
    pub flow: FlowMap,
    pub steps: Vec<StepInfo>,
}

impl PrimitiveSeq {
    fn new(mesh: &Mesh, route: Route, eta: f64) -> Self {
        PrimitiveSeq { route, h: mesh.h, eta, flow: FlowMap::identity(mesh.space), steps: Vec::new() }
    }

    fn push(&mut self, kind: &str, detail: Value, stage: Stage) -> Result<()> {
        self.steps.push(StepInfo { kind: kind.to_string(), duration: stage.duration(), detail });
        self.flow.push(stage)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_time(&self) -> f64 {
        self.flow.total_time()
    }

    pub fn to_json(&self) -> Value {
        json!({
            "route": self.route,
            "h": self.h,
            "eta": self.eta,
            "total_time": self.total_time(),
            "steps": self.steps,
            "stages": self.flow.stages().iter().map(Stage::describe).collect::<Vec<_>>(),
        })
    }

    /// Largest deviation between the images of the shrunken cubes and their
    /// prescribed images: centers must map to centers, corners to corners.
    /// `fixed` lists further cubes that must stay in place.
    pub fn verify(&self, mesh: &Mesh, perm: &MeshPermutation, fixed: &[CubeIndex]) -> Result<f64> {
        let e = mesh.h - self.eta;
        let d = mesh.d();
        let mut worst: f64 = 0.0;
        let cubes = perm.support().cloned().chain(fixed.iter().cloned());
        for n in cubes {
            let target = mesh.center(&perm.image(&n));
            let c = mesh.center(&n);
            let y = self.flow.apply(&c)?;
            worst = worst.max(sup_distance(&y, &target, &mesh.space)?);
            for k in 0..(1usize << (2 * d)).min(8) {
                let mut x = c.clone();
                for i in 0..2 * d {
                    *x.coord_mut(i) += if k >> i & 1 == 1 { e } else { -e };
                }
                let y = self.flow.apply(&x)?;
                let off = sup_offsets(&y, &target, mesh);
                // Each coordinate offset must be ±(h − η).
                let dev = off.iter().map(|v| (v.abs() - e).abs()).fold(0.0, f64::max);
                worst = worst.max(dev);
            }
        }
        Ok(worst)
    }
}

fn sup_offsets(y: &PhasePoint, c: &PhasePoint, mesh: &Mesh) -> Vec<f64> {
    let d = mesh.d();
    (0..2 * d)
        .map(|i| if i < d { mesh.space.q_diff(y.coord(i), c.coord(i)) } else { y.coord(i) - c.coord(i) })
        .collect()
}

/// Momentum offset between the staggered column ranges.
fn spread_step(mesh: &Mesh) -> f64 {
    let cell = 2.0 * mesh.h;
    let half = ((mesh.p_box + 2.0 * mesh.h) / cell).ceil() * cell;
    2.0 * half
}

fn columns_of(perm: &MeshPermutation) -> BTreeSet<Vec<i64>> {
    perm.support().map(|n| n.q_part().to_vec()).collect()
}

fn e1(d: usize, s: f64) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[0] = s;
    v
}

/// Compiles `perm` into exact primitives; the identity compiles to the empty
/// sequence.
pub fn compile(mesh: &Mesh, perm: &MeshPermutation, opts: &CompileOptions) -> Result<PrimitiveSeq> {
    let eta = opts.eta(mesh.h);
    check_eta(mesh, eta)?;
    let perm = perm.canonical(mesh)?;
    let d = mesh.d();
    for n in perm.support() {
        if n.0.len() != 2 * d {
            return input("cube index length does not match the mesh");
        }
        let p = mesh.p_center(n.p_part());
        if p.iter().any(|v| v.abs() + mesh.h > mesh.p_box + 1e-12) {
            return Err(Error::Range(format!("cube {:?} lies outside the momentum box", n.0)));
        }
    }
    let in_columns = perm.pairs().all(|(a, b)| a.q_part() == b.q_part());
    let route = match opts.route {
        Route::Auto if d == 1 && in_columns => Route::Swaps,
        Route::Auto => Route::Parking,
        r => r,
    };
    if perm.is_empty() {
        return Ok(PrimitiveSeq::new(mesh, route, eta));
    }
    match route {
        Route::Swaps => {
            if d != 1 || !in_columns {
                return Err(Error::Unsupported("the swap route needs d = 1 and moves inside columns".into()));
            }
            compile_swaps(mesh, &perm, eta, opts.w)
        }
        _ => compile_parking(mesh, &perm, eta, opts),
    }
}

fn spread_shifts(mesh: &Mesh, cols: &BTreeSet<Vec<i64>>) -> Vec<(Vec<i64>, Vec<f64>)> {
    let step = spread_step(mesh);
    cols.iter()
        .enumerate()
        .map(|(rank, c)| (c.clone(), e1(mesh.d(), step * (rank + 1) as f64)))
        .collect()
}

fn compile_swaps(mesh: &Mesh, perm: &MeshPermutation, eta: f64, w: Option<f64>) -> Result<PrimitiveSeq> {
    let mut seq = PrimitiveSeq::new(mesh, Route::Swaps, eta);
    let cols = columns_of(perm);
    let shifts = spread_shifts(mesh, &cols);
    let lift: BTreeMap<i64, i64> = shifts
        .iter()
        .map(|(c, s)| (c[0], (s[0] / (2.0 * mesh.h)).round() as i64))
        .collect();
    seq.push("column_spread", json!({"columns": shifts}), column_spread(mesh, &shifts, eta)?)?;
    // The spread isolates each column in momentum, so the rotation may reach
    // into neighbouring columns.
    let clearance = 8.0 * mesh.h;
    for col in &cols {
        let q = col[0];
        let moved: Vec<i64> = perm.support().filter(|n| n.0[0] == q).map(|n| n.0[1]).collect();
        let (lo, hi) = (*moved.iter().min().unwrap(), *moved.iter().max().unwrap());
        // keys[i] = final slot of the content currently in slot lo + i.
        let mut keys: Vec<i64> =
            (lo..=hi).map(|o| perm.image(&CubeIndex(vec![q, o])).0[1]).collect();
        let off = lift[&q];
        loop {
            let mut swapped = false;
            for i in 0..keys.len() - 1 {
                if keys[i] > keys[i + 1] {
                    keys.swap(i, i + 1);
                    let o = lo + i as i64 + off;
                    let (stage, w_used) = swap_consecutive(mesh, q, o, eta, w, clearance)?;
                    seq.push("swap_consecutive", json!({"column": q, "rows": [o - off, o - off + 1], "w": w_used}), stage)?;
                    swapped = true;
                }
            }
            if !swapped {
                break;
            }
        }
    }
    let back: Vec<(Vec<i64>, Vec<f64>)> = shifts.iter().map(|(c, s)| (c.clone(), s.iter().map(|v| -v).collect())).collect();
    seq.push("column_unspread", json!({"columns": back}), column_spread(mesh, &back, eta)?)?;
    Ok(seq)
}

fn parking_columns(mesh: &Mesh, occupied: &BTreeSet<Vec<i64>>, count: usize, sources: &[Vec<i64>]) -> Result<Vec<Vec<i64>>> {
    let d = mesh.d();
    match mesh.cells_per_turn() {
        None => {
            let top = occupied.iter().map(|c| c[0]).max().unwrap_or(0);
            Ok((0..count)
                .map(|k| {
                    let mut c = sources[k].clone();
                    c[0] = top + 2 + k as i64;
                    c
                })
                .collect())
        }
        Some(n) => {
            let total = (n as usize).pow(d as u32);
            let mut free = Vec::new();
            for flat in 0..total {
                let mut c = vec![0i64; d];
                let mut r = flat;
                for i in (0..d).rev() {
                    c[i] = (r % n as usize) as i64;
                    r /= n as usize;
                }
                if !occupied.contains(&c) {
                    free.push(c);
                }
                if free.len() == count {
                    return Ok(free);
                }
            }
            Err(Error::Geometry(format!(
                "parking needs {count} free columns on the torus, only {} available",
                free.len()
            )))
        }
    }
}

fn compile_parking(mesh: &Mesh, perm: &MeshPermutation, eta: f64, opts: &CompileOptions) -> Result<PrimitiveSeq> {
    let d = mesh.d();
    let cell = 2.0 * mesh.h;
    let mut seq = PrimitiveSeq::new(mesh, Route::Parking, eta);
    let cols = columns_of(perm);
    let shifts = spread_shifts(mesh, &cols);
    let lift: BTreeMap<Vec<i64>, f64> = shifts.iter().map(|(c, s)| (c.clone(), s[0])).collect();
    let mut occupied = cols.clone();
    for c in &opts.occupied {
        if c.len() != d {
            return input("occupied columns need length d");
        }
        occupied.insert(mesh.canonical_index(&CubeIndex::from_parts(c, &vec![0; d])).q_part().to_vec());
    }
    let moved: Vec<(CubeIndex, CubeIndex)> = perm.pairs().map(|(a, b)| (a.clone(), b.clone())).collect();
    let sources: Vec<Vec<i64>> = moved.iter().map(|(a, _)| a.q_part().to_vec()).collect();
    let parking = parking_columns(mesh, &occupied, moved.len(), &sources)?;

    let qdelta = |from: &[i64], to: &[i64]| -> Vec<f64> {
        (0..d)
            .map(|i| {
                let k = to[i] - from[i];
                match mesh.cells_per_turn() {
                    Some(n) => {
                        let k = k.rem_euclid(n);
                        let k = if k > n / 2 { k - n } else { k };
                        cell * k as f64
                    }
                    None => cell * k as f64,
                }
            })
            .collect()
    };
    let level = |n: &CubeIndex, col: &[i64]| -> Vec<f64> {
        let mut p = mesh.p_center(n.p_part());
        p[0] += lift[col];
        p
    };

    seq.push("column_spread", json!({"columns": shifts}), column_spread(mesh, &shifts, eta)?)?;

    let mut out = Vec::new();
    let mut lifts = Vec::new();
    let mut back = Vec::new();
    for (k, (src, dst)) in moved.iter().enumerate() {
        // F sends cube `src` to `dst`: the content of `src` must end in `dst`.
        let from = level(src, src.q_part());
        let to = level(dst, dst.q_part());
        out.push((from.clone(), qdelta(src.q_part(), &parking[k])));
        lifts.push((parking[k].clone(), to.iter().zip(&from).map(|(a, b)| a - b).collect::<Vec<f64>>()));
        back.push((to, qdelta(&parking[k], dst.q_part())));
    }
    seq.push("park", json!({"rows": out}), horizontal_translate(mesh, &out, eta)?)?;
    seq.push("lift", json!({"columns": lifts}), column_spread(mesh, &lifts, eta)?)?;
    seq.push("deliver", json!({"rows": back}), horizontal_translate(mesh, &back, eta)?)?;
    let unspread: Vec<(Vec<i64>, Vec<f64>)> = shifts.iter().map(|(c, s)| (c.clone(), s.iter().map(|v| -v).collect())).collect();
    seq.push("column_unspread", json!({"columns": unspread}), column_spread(mesh, &unspread, eta)?)?;
    Ok(seq)
}

/// Per-column rotations by `π` about `(q^j, 0)` emulating `(q, p) ↦ (q, −p)`
/// setwise on the listed shrunken cubes. Returns the stage and the width `w`.
pub fn emulate_symmetry(mesh: &Mesh, cubes: &[CubeIndex], eta: f64, w: Option<f64>) -> Result<(Stage, f64)> {
    check_eta(mesh, eta)?;
    let d = mesh.d();
    let mut cols = BTreeSet::new();
    let mut p_ext: f64 = 0.0;
    for n in cubes {
        if n.0.len() != 2 * d {
            return input("cube index length does not match the mesh");
        }
        cols.insert(mesh.canonical_index(n).q_part().to_vec());
        let p = mesh.p_center(n.p_part());
        p_ext = p_ext.max(p.iter().map(|v| v.abs()).fold(0.0, f64::max) + mesh.h - eta);
    }
    let cols: Vec<Vec<i64>> = cols.into_iter().collect();
    symmetry_columns(mesh, &cols, p_ext, eta, w)
}

/// Symmetry emulation on whole columns for all content with `|p|_∞ <= p_ext`
/// and configuration offset at most `h − η`.
pub fn symmetry_columns(mesh: &Mesh, cols: &[Vec<i64>], p_ext: f64, eta: f64, w: Option<f64>) -> Result<(Stage, f64)> {
    check_eta(mesh, eta)?;
    let d = mesh.d();
    let h = mesh.h;
    let e = h - eta;
    let r1 = h - 0.5 * eta;
    let r2 = h;
    // Corner (e, ..., p_ext, ...) must satisfy d·e² + w²·d·p_ext² < r1².
    let df = d as f64;
    let w_max = if p_ext > 0.0 { ((r1 * r1 - df * e * e).max(0.0) / df).sqrt() / p_ext } else { f64::INFINITY };
    if !(w_max > 0.0) {
        return Err(Error::Geometry("no admissible w: cubes do not fit the column ellipse".into()));
    }
    let w = match w {
        Some(w) if !(w > 0.0 && w < w_max) => {
            return Err(Error::Geometry(format!("w = {w} too large; max admissible w = {w_max}")))
        }
        Some(w) => w,
        None if w_max.is_finite() => 0.5 * w_max,
        None => 1.0,
    };
    let centers: Vec<PhasePoint> = cols.iter().map(|c| PhasePoint::new(mesh.q_center(c), vec![0.0; d])).collect();
    let rot = Rotation::new(&mesh.space, centers, w, PI * w, CutoffSpec::new(r1, r2)?)?;
    Ok((Stage::Rotation(Arc::new(rot)), w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SpaceSpec;

    fn mesh1() -> Mesh {
        Mesh::aligned(SpaceSpec::euclidean(1).unwrap(), 0.25, 4.0).unwrap()
    }

    fn ci(v: &[i64]) -> CubeIndex {
        CubeIndex(v.to_vec())
    }

    #[test]
    fn identity_compiles_to_nothing() {
        let seq = compile(&mesh1(), &MeshPermutation::identity(), &CompileOptions::default()).unwrap();
        assert!(seq.is_empty());
        assert_eq!(seq.total_time(), 0.0);
    }

    #[test]
    fn two_cube_swap_in_a_column() {
        let mesh = mesh1();
        let perm = MeshPermutation::new([(ci(&[0, 0]), ci(&[0, 1])), (ci(&[0, 1]), ci(&[0, 0]))]).unwrap();
        let fixed = [ci(&[0, 2]), ci(&[0, -1]), ci(&[1, 0]), ci(&[-1, 1])];
        let seq = compile(&mesh, &perm, &CompileOptions::default()).unwrap();
        assert_eq!(seq.route, Route::Swaps);
        let kinds: Vec<&str> = seq.steps.iter().map(|s| s.kind.as_str()).collect();
        assert_eq!(kinds, ["column_spread", "swap_consecutive", "column_unspread"]);
        assert!(seq.verify(&mesh, &perm, &fixed).unwrap() < 1e-9);
    }

    #[test]
    fn cyclic_permutation_across_columns() {
        let mesh = mesh1();
        let perm = MeshPermutation::new([
            (ci(&[0, 0]), ci(&[1, 0])),
            (ci(&[1, 0]), ci(&[0, 1])),
            (ci(&[0, 1]), ci(&[0, 0])),
        ])
        .unwrap();
        let fixed = [ci(&[0, 2]), ci(&[1, 1]), ci(&[2, 0]), ci(&[-1, 0])];
        let seq = compile(&mesh, &perm, &CompileOptions::default()).unwrap();
        assert_eq!(seq.route, Route::Parking);
        assert!(seq.verify(&mesh, &perm, &fixed).unwrap() < 1e-9);
        for stage in seq.flow.stages() {
            assert!(stage.is_exact() && stage.is_hamiltonian());
        }
    }

    #[test]
    fn parking_handles_in_column_cycles_in_two_dimensions() {
        let mesh = Mesh::aligned(SpaceSpec::euclidean(2).unwrap(), 0.5, 3.0).unwrap();
        let perm = MeshPermutation::new([
            (ci(&[0, 0, 0, 0]), ci(&[0, 0, 1, 0])),
            (ci(&[0, 0, 1, 0]), ci(&[1, -1, 0, 1])),
            (ci(&[1, -1, 0, 1]), ci(&[0, 0, 0, 0])),
        ])
        .unwrap();
        let fixed = [ci(&[0, 0, 0, 1]), ci(&[1, 0, 0, 0])];
        let seq = compile(&mesh, &perm, &CompileOptions::default()).unwrap();
        assert!(seq.verify(&mesh, &perm, &fixed).unwrap() < 1e-9);
    }

    #[test]
    fn parking_on_the_torus_uses_free_columns() {
        let mesh = Mesh::aligned(SpaceSpec::torus(1).unwrap(), PI / 8.0, 2.0).unwrap();
        let perm = MeshPermutation::new([(ci(&[1, 0]), ci(&[5, -1])), (ci(&[5, -1]), ci(&[1, 0]))]).unwrap();
        let opts = CompileOptions { route: Route::Parking, occupied: vec![vec![2]], ..Default::default() };
        let seq = compile(&mesh, &perm, &opts).unwrap();
        assert!(seq.verify(&mesh, &perm, &[ci(&[2, 0]), ci(&[1, 1])]).unwrap() < 1e-9);
    }

    #[test]
    fn swap_window_rejects_large_w() {
        let mesh = mesh1();
        let win = swap_window(mesh.h, mesh.h / 32.0, 2.0);
        let err = swap_consecutive(&mesh, 0, 0, mesh.h / 32.0, Some(win.w_max * 1.5), 2.0).unwrap_err();
        assert!(matches!(err, Error::Geometry(ref m) if m.contains("max admissible")));
    }

    #[test]
    fn rotation_swaps_centers_exactly() {
        let mesh = mesh1();
        let (stage, _) = swap_consecutive(&mesh, 0, 0, mesh.h / 32.0, None, 8.0 * mesh.h).unwrap();
        let flow = FlowMap::new(mesh.space, vec![stage]).unwrap();
        let a = mesh.center(&ci(&[0, 0]));
        let b = mesh.center(&ci(&[0, 1]));
        let y = flow.apply(&a).unwrap();
        assert!(sup_distance(&y, &b, &mesh.space).unwrap() < 1e-12);
    }

    #[test]
    fn symmetry_emulation_maps_cubes_to_mirrors() {
        let mesh = Mesh::aligned(SpaceSpec::torus(1).unwrap(), PI / 16.0, 2.0).unwrap();
        let cubes = [ci(&[3, 2]), ci(&[3, -1]), ci(&[7, 0]), ci(&[7, -1])];
        let eta = mesh.h / 8.0;
        let (stage, _) = emulate_symmetry(&mesh, &cubes, eta, None).unwrap();
        let flow = FlowMap::new(mesh.space, vec![stage]).unwrap();
        for n in &cubes {
            let c = mesh.center(n);
            let mirror = PhasePoint::new(c.q.clone(), vec![-c.p[0]]);
            let y = flow.apply(&c).unwrap();
            assert!(sup_distance(&y, &mirror, &mesh.space).unwrap() < 1e-12);
        }
    }

    #[test]
    fn spread_moves_only_listed_columns() {
        let mesh = mesh1();
        let stage = column_spread(&mesh, &[(vec![0], vec![3.0])], mesh.h / 32.0).unwrap();
        let flow = FlowMap::new(mesh.space, vec![stage]).unwrap();
        let inside = flow.apply(&PhasePoint::new(vec![0.3], vec![0.1])).unwrap();
        let outside = flow.apply(&PhasePoint::new(vec![0.9], vec![0.1])).unwrap();
        assert!((inside.p[0] - 3.1).abs() < 1e-12);
        assert!((outside.p[0] - 0.1).abs() < 1e-12);
    }
}
