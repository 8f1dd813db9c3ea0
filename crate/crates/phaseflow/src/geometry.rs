//! Phase-space points, sup-norm cubes, regular meshes and mesh permutations
//! on `T*R^d` and `T*T^d`.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};

/// Relative tolerance used to decide that a coordinate sits on a cube face.
const FACE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceKind {
    Euclidean,
    Torus,
}

/// Configuration space `R^d` or `T^d = R^d / 2πZ^d`; phase dimension is `2d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpaceSpec {
    pub kind: SpaceKind,
    pub d: usize,
}

impl SpaceSpec {
    pub fn new(kind: SpaceKind, d: usize) -> Result<Self> {
        if d == 0 {
            return input("configuration dimension d must be at least 1");
        }
        Ok(SpaceSpec { kind, d })
    }

    pub fn euclidean(d: usize) -> Result<Self> {
        Self::new(SpaceKind::Euclidean, d)
    }

    pub fn torus(d: usize) -> Result<Self> {
        Self::new(SpaceKind::Torus, d)
    }

    pub fn is_torus(&self) -> bool {
        self.kind == SpaceKind::Torus
    }

    /// Wraps configuration coordinates in place on the torus.
    pub fn wrap_q(&self, q: &mut [f64]) {
        if self.is_torus() {
            for x in q.iter_mut() {
                *x = wrap_angle(*x);
            }
        }
    }

    /// Difference `a - b` of configuration coordinates, reduced to the
    /// shortest representative on the torus.
    pub fn q_diff(&self, a: f64, b: f64) -> f64 {
        if self.is_torus() {
            shortest_angle(a - b)
        } else {
            a - b
        }
    }

    pub(crate) fn check_point(&self, x: &PhasePoint) -> Result<()> {
        if x.q.len() != self.d || x.p.len() != self.d {
            return input(format!(
                "point has dimensions (q: {}, p: {}) but the space has d = {}",
                x.q.len(),
                x.p.len(),
                self.d
            ));
        }
        Ok(())
    }
}

/// Canonical representative of an angle in `[0, 2π)`.
pub fn wrap_angle(x: f64) -> f64 {
    let y = x.rem_euclid(TAU);
    if y >= TAU {
        0.0
    } else {
        y
    }
}

/// Representative of an angle difference in `[-π, π)`.
pub fn shortest_angle(x: f64) -> f64 {
    let y = wrap_angle(x + PI) - PI;
    if y >= PI {
        y - TAU
    } else {
        y
    }
}

/// A point `(q, p)` of phase space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl PhasePoint {
    pub fn new(q: Vec<f64>, p: Vec<f64>) -> Self {
        PhasePoint { q, p }
    }

    pub fn zeros(d: usize) -> Self {
        PhasePoint { q: vec![0.0; d], p: vec![0.0; d] }
    }

    pub fn d(&self) -> usize {
        self.q.len()
    }

    /// Flattened coordinates `(q_1..q_d, p_1..p_d)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.q.clone();
        v.extend_from_slice(&self.p);
        v
    }

    pub fn from_slice(x: &[f64]) -> Self {
        let d = x.len() / 2;
        PhasePoint { q: x[..d].to_vec(), p: x[d..].to_vec() }
    }

    /// Copy with configuration coordinates wrapped on the torus.
    pub fn canonical(&self, space: &SpaceSpec) -> Self {
        let mut y = self.clone();
        space.wrap_q(&mut y.q);
        y
    }

    pub fn coord(&self, i: usize) -> f64 {
        let d = self.d();
        if i < d {
            self.q[i]
        } else {
            self.p[i - d]
        }
    }

    pub fn coord_mut(&mut self, i: usize) -> &mut f64 {
        let d = self.d();
        if i < d {
            &mut self.q[i]
        } else {
            &mut self.p[i - d]
        }
    }
}

/// Sup-norm distance; torus configuration differences use the shortest
/// wrapped representative.
pub fn sup_distance(x: &PhasePoint, y: &PhasePoint, space: &SpaceSpec) -> Result<f64> {
    space.check_point(x)?;
    space.check_point(y)?;
    Ok(sup_distance_unchecked(x, y, space))
}

pub(crate) fn sup_distance_unchecked(x: &PhasePoint, y: &PhasePoint, space: &SpaceSpec) -> f64 {
    let dq = x
        .q
        .iter()
        .zip(&y.q)
        .map(|(a, b)| space.q_diff(*a, *b).abs())
        .fold(0.0, f64::max);
    let dp = x.p.iter().zip(&y.p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    dq.max(dp)
}

/// Open sup-norm cube `{y : ‖y − center‖ < radius}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cube {
    pub center: PhasePoint,
    pub radius: f64,
}

impl Cube {
    pub fn contains_open(&self, x: &PhasePoint, space: &SpaceSpec) -> bool {
        sup_distance_unchecked(x, &self.center, space) < self.radius
    }

    pub fn contains_closed(&self, x: &PhasePoint, space: &SpaceSpec) -> bool {
        sup_distance_unchecked(x, &self.center, space) <= self.radius
    }

    pub fn volume(&self) -> f64 {
        (2.0 * self.radius).powi(2 * self.center.d() as i32)
    }

    /// Concentric cube of radius `radius - eta`.
    pub fn shrunk(&self, eta: f64) -> Cube {
        Cube { center: self.center.clone(), radius: self.radius - eta }
    }
}

/// Integer lattice coordinates of a mesh cube: `d` configuration entries
/// followed by `d` momentum entries. The derived order is lexicographic.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CubeIndex(pub Vec<i64>);

impl CubeIndex {
    pub fn q_part(&self) -> &[i64] {
        &self.0[..self.0.len() / 2]
    }

    pub fn p_part(&self) -> &[i64] {
        &self.0[self.0.len() / 2..]
    }

    pub fn from_parts(q: &[i64], p: &[i64]) -> Self {
        let mut v = q.to_vec();
        v.extend_from_slice(p);
        CubeIndex(v)
    }
}

/// Result of locating a point in a mesh.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CubeLocation {
    Interior(CubeIndex),
    Boundary,
}

/// Anchored cubic lattice of size `h`: centers `anchor + 2h·Z^{2d}`, truncated
/// to `|p_i| <= p_box`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub space: SpaceSpec,
    pub h: f64,
    pub anchor: Vec<f64>,
    pub p_box: f64,
}

impl Mesh {
    pub fn new(space: SpaceSpec, h: f64, anchor: Vec<f64>, p_box: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return input("mesh size h must be positive and finite");
        }
        if anchor.len() != 2 * space.d {
            return input(format!("anchor must have length 2d = {}", 2 * space.d));
        }
        if !(p_box > 0.0) {
            return input("momentum truncation p_box must be positive");
        }
        if space.is_torus() {
            let n = PI / h;
            if (n - n.round()).abs() > 1e-9 * n.max(1.0) || n.round() < 1.0 {
                return Err(Error::Geometry(format!(
                    "on the torus h must divide π exactly (π/h = {n})"
                )));
            }
        }
        let mut anchor = anchor;
        space.wrap_q(&mut anchor[..space.d]);
        Ok(Mesh { space, h, anchor, p_box })
    }

    /// Mesh anchored so that cube faces lie on multiples of `2h`.
    pub fn aligned(space: SpaceSpec, h: f64, p_box: f64) -> Result<Self> {
        Self::new(space, h, vec![h; 2 * space.d], p_box)
    }

    pub fn d(&self) -> usize {
        self.space.d
    }

    /// Number of columns per period on the torus (`π / h`).
    pub fn cells_per_turn(&self) -> Option<i64> {
        self.space.is_torus().then(|| (PI / self.h).round() as i64)
    }

    pub fn cube_volume(&self) -> f64 {
        (2.0 * self.h).powi(2 * self.d() as i32)
    }

    /// Reduces the configuration part of an index modulo the torus period.
    pub fn canonical_index(&self, idx: &CubeIndex) -> CubeIndex {
        match self.cells_per_turn() {
            Some(n) => {
                let d = self.d();
                let mut v = idx.0.clone();
                for k in v.iter_mut().take(d) {
                    *k = k.rem_euclid(n);
                }
                CubeIndex(v)
            }
            None => idx.clone(),
        }
    }

    pub fn q_center(&self, k: &[i64]) -> Vec<f64> {
        let mut q: Vec<f64> = k
            .iter()
            .zip(&self.anchor)
            .map(|(k, a)| a + 2.0 * self.h * (*k as f64))
            .collect();
        self.space.wrap_q(&mut q);
        q
    }

    pub fn p_center(&self, k: &[i64]) -> Vec<f64> {
        let d = self.d();
        k.iter()
            .zip(&self.anchor[d..])
            .map(|(k, a)| a + 2.0 * self.h * (*k as f64))
            .collect()
    }

    pub fn center(&self, idx: &CubeIndex) -> PhasePoint {
        PhasePoint::new(self.q_center(idx.q_part()), self.p_center(idx.p_part()))
    }

    pub fn cube(&self, idx: &CubeIndex) -> Cube {
        Cube { center: self.center(idx), radius: self.h }
    }

    /// Lattice coordinate of a single axis and whether it sits on a face.
    fn axis_index(&self, x: f64, axis: usize) -> (i64, bool) {
        let t = (x - self.anchor[axis]) / (2.0 * self.h);
        let k = t.round();
        let frac = (t - k).abs();
        (k as i64, frac >= 0.5 - FACE_TOL * t.abs().max(1.0))
    }

    /// Lattice column containing the configuration `q`, ignoring faces.
    pub fn q_index(&self, q: &[f64]) -> Vec<i64> {
        let mut k: Vec<i64> = (0..self.d()).map(|i| self.axis_index(q[i], i).0).collect();
        if let Some(n) = self.cells_per_turn() {
            for v in k.iter_mut() {
                *v = v.rem_euclid(n);
            }
        }
        k
    }

    /// Lattice level containing the momentum `p`, ignoring faces.
    pub fn p_index(&self, p: &[f64]) -> Vec<i64> {
        let d = self.d();
        (0..d).map(|i| self.axis_index(p[i], d + i).0).collect()
    }

    pub fn covers(&self, x: &PhasePoint) -> bool {
        x.p.iter().all(|p| p.abs() <= self.p_box)
    }

    pub fn locate(&self, x: &PhasePoint) -> Result<CubeLocation> {
        self.space.check_point(x)?;
        if !self.covers(x) {
            return Err(Error::Range(format!(
                "momentum {:?} outside the covered box |p| <= {}",
                x.p, self.p_box
            )));
        }
        let y = x.canonical(&self.space);
        let d = self.d();
        let mut v = Vec::with_capacity(2 * d);
        for i in 0..2 * d {
            let (k, face) = self.axis_index(y.coord(i), i);
            if face {
                return Ok(CubeLocation::Boundary);
            }
            v.push(k);
        }
        Ok(CubeLocation::Interior(self.canonical_index(&CubeIndex(v))))
    }

    /// All cubes whose open cube meets the box `[lo, hi]` (flattened `2d`
    /// coordinates). On the torus every column is included.
    pub fn cubes_meeting(&self, lo: &[f64], hi: &[f64]) -> Vec<CubeIndex> {
        let d = self.d();
        let mut ranges: Vec<(i64, i64)> = Vec::with_capacity(2 * d);
        for i in 0..2 * d {
            if i < d {
                if let Some(n) = self.cells_per_turn() {
                    ranges.push((0, n - 1));
                    continue;
                }
            }
            let (mut l, mut h) = (lo[i], hi[i]);
            if i >= d {
                l = l.max(-self.p_box);
                h = h.min(self.p_box);
            }
            let a = self.anchor[i];
            let kl = ((l - a - self.h) / (2.0 * self.h)).floor() as i64 + 1;
            let kh = ((h - a + self.h) / (2.0 * self.h)).ceil() as i64 - 1;
            ranges.push((kl, kh));
        }
        let mut out = Vec::new();
        if ranges.iter().any(|(a, b)| a > b) {
            return out;
        }
        let mut cur: Vec<i64> = ranges.iter().map(|r| r.0).collect();
        loop {
            out.push(CubeIndex(cur.clone()));
            let mut i = 2 * d;
            loop {
                if i == 0 {
                    return out;
                }
                i -= 1;
                if cur[i] < ranges[i].1 {
                    cur[i] += 1;
                    for (j, c) in cur.iter_mut().enumerate().skip(i + 1) {
                        *c = ranges[j].0;
                    }
                    break;
                }
            }
        }
    }
}

/// Locates `x` in `mesh`.
pub fn cube_index_of(x: &PhasePoint, mesh: &Mesh) -> Result<CubeLocation> {
    mesh.locate(x)
}

/// Finite bijection of mesh cubes, identity outside its support.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MeshPermutation {
    mapping: BTreeMap<CubeIndex, CubeIndex>,
}

impl MeshPermutation {
    pub fn identity() -> Self {
        Self::default()
    }

    /// Builds a permutation from `(n, ℓ)` pairs meaning cube `n` is sent to
    /// cube `ℓ`. Fixed pairs are dropped; the moved set must be mapped onto
    /// itself.
    pub fn new(pairs: impl IntoIterator<Item = (CubeIndex, CubeIndex)>) -> Result<Self> {
        let mut mapping = BTreeMap::new();
        for (a, b) in pairs {
            if a.0.len() != b.0.len() || a.0.len() % 2 != 0 {
                return input("cube indices must share an even length 2d");
            }
            if a == b {
                continue;
            }
            if mapping.insert(a.clone(), b).is_some() {
                return input(format!("cube {:?} listed twice", a.0));
            }
        }
        let keys: BTreeSet<&CubeIndex> = mapping.keys().collect();
        let values: BTreeSet<&CubeIndex> = mapping.values().collect();
        if values.len() != mapping.len() {
            return input("permutation is not injective");
        }
        if keys != values {
            return input("moved cubes must be mapped onto the moved set");
        }
        Ok(MeshPermutation { mapping })
    }

    /// Canonicalises all indices with respect to `mesh` (torus wrapping).
    pub fn canonical(&self, mesh: &Mesh) -> Result<Self> {
        Self::new(
            self.mapping
                .iter()
                .map(|(a, b)| (mesh.canonical_index(a), mesh.canonical_index(b))),
        )
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn image(&self, n: &CubeIndex) -> CubeIndex {
        self.mapping.get(n).cloned().unwrap_or_else(|| n.clone())
    }

    pub fn support(&self) -> impl Iterator<Item = &CubeIndex> {
        self.mapping.keys()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&CubeIndex, &CubeIndex)> {
        self.mapping.iter()
    }

    pub fn inverse(&self) -> Self {
        MeshPermutation {
            mapping: self.mapping.iter().map(|(a, b)| (b.clone(), a.clone())).collect(),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &MeshPermutation) -> Self {
        let keys: BTreeSet<CubeIndex> =
            self.mapping.keys().chain(other.mapping.keys()).cloned().collect();
        let pairs: Vec<_> = keys
            .into_iter()
            .map(|k| {
                let v = self.image(&other.image(&k));
                (k, v)
            })
            .collect();
        MeshPermutation::new(pairs).expect("composition of permutations is a permutation")
    }

    /// Point map `x ↦ x + m_ℓ − m_n` on the open cube `n`.
    pub fn apply(&self, mesh: &Mesh, x: &PhasePoint) -> Result<PhasePoint> {
        match mesh.locate(x)? {
            CubeLocation::Boundary => Err(Error::Boundary),
            CubeLocation::Interior(n) => Ok(self.translate(mesh, &n, x)),
        }
    }

    pub(crate) fn translate(&self, mesh: &Mesh, n: &CubeIndex, x: &PhasePoint) -> PhasePoint {
        match self.mapping.get(n) {
            None => x.canonical(&mesh.space),
            Some(l) => {
                let d = mesh.d();
                let mut y = x.clone();
                for i in 0..2 * d {
                    *y.coord_mut(i) += 2.0 * mesh.h * ((l.0[i] - n.0[i]) as f64);
                }
                y.canonical(&mesh.space)
            }
        }
    }
}

/// Identity-free `n → ℓ` mapping entry of the JSON document.
pub type MappingEntry = [Vec<i64>; 2];

/// JSON document for a mesh and a permutation of its cubes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MeshDocument {
    pub h: f64,
    pub anchor: Vec<f64>,
    pub kind: SpaceKind,
    pub d: usize,
    pub p_box: f64,
    pub mapping: Vec<MappingEntry>,
}

impl MeshDocument {
    pub fn from_parts(mesh: &Mesh, perm: &MeshPermutation) -> Self {
        MeshDocument {
            h: mesh.h,
            anchor: mesh.anchor.clone(),
            kind: mesh.space.kind,
            d: mesh.d(),
            p_box: mesh.p_box,
            mapping: perm.pairs().map(|(a, b)| [a.0.clone(), b.0.clone()]).collect(),
        }
    }

    pub fn into_parts(self) -> Result<(Mesh, MeshPermutation)> {
        let space = SpaceSpec::new(self.kind, self.d)?;
        let mesh = Mesh::new(space, self.h, self.anchor, self.p_box)?;
        for [a, b] in &self.mapping {
            if a.len() != 2 * self.d || b.len() != 2 * self.d {
                return input("mapping entries must have length 2d");
            }
        }
        let perm = MeshPermutation::new(
            self.mapping.into_iter().map(|[a, b]| (CubeIndex(a), CubeIndex(b))),
        )?
        .canonical(&mesh)?;
        Ok((mesh, perm))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e1() -> SpaceSpec {
        SpaceSpec::euclidean(1).unwrap()
    }

    fn pt(q: f64, p: f64) -> PhasePoint {
        PhasePoint::new(vec![q], vec![p])
    }

    #[test]
    fn sup_distance_examples() {
        assert_eq!(sup_distance(&pt(0.0, 0.0), &pt(0.0, 0.0), &e1()).unwrap(), 0.0);
        let d = sup_distance(&pt(0.1, 2.0), &pt(0.4, 1.0), &e1()).unwrap();
        assert!((d - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sup_distance_torus_matches_brute_force_over_representatives() {
        let t = SpaceSpec::torus(1).unwrap();
        let x = pt(0.1, 0.0);
        let y = pt(TAU - 0.1, 0.0);
        let brute = (-2..=2)
            .map(|k| (x.q[0] - (y.q[0] + TAU * k as f64)).abs())
            .fold(f64::INFINITY, f64::min);
        let d = sup_distance(&x, &y, &t).unwrap();
        assert!((d - brute).abs() < 1e-12);
        assert!((d - 0.2).abs() < 1e-12);
    }

    #[test]
    fn sup_distance_rejects_mismatched_dimensions() {
        let x = PhasePoint::new(vec![0.0, 0.0], vec![0.0, 0.0]);
        assert!(matches!(sup_distance(&x, &pt(0.0, 0.0), &e1()), Err(Error::Input(_))));
    }

    #[test]
    fn cube_index_examples() {
        let mesh = Mesh::new(e1(), 1.0, vec![0.0, 0.0], 10.0).unwrap();
        let loc = cube_index_of(&pt(0.5, 0.5), &mesh).unwrap();
        assert_eq!(loc, CubeLocation::Interior(CubeIndex(vec![0, 0])));
        assert_eq!(cube_index_of(&pt(1.0, 0.0), &mesh).unwrap(), CubeLocation::Boundary);
        let loc = cube_index_of(&pt(1.5, -0.5), &mesh).unwrap();
        let CubeLocation::Interior(idx) = loc else { panic!("expected interior") };
        let c = mesh.center(&idx);
        assert_eq!((c.q[0], c.p[0]), (2.0, 0.0));
        assert!(matches!(cube_index_of(&pt(0.0, 11.0), &mesh), Err(Error::Range(_))));
    }

    #[test]
    fn cube_index_agrees_with_lattice_enumeration() {
        let mesh = Mesh::new(e1(), 1.0, vec![0.0, 0.0], 10.0).unwrap();
        let x = pt(1.5, -0.5);
        let mut found = None;
        for kq in -3..=3 {
            for kp in -3..=3 {
                let idx = CubeIndex(vec![kq, kp]);
                if mesh.cube(&idx).contains_open(&x, &mesh.space) {
                    assert!(found.is_none());
                    found = Some(idx);
                }
            }
        }
        assert_eq!(cube_index_of(&x, &mesh).unwrap(), CubeLocation::Interior(found.unwrap()));
    }

    #[test]
    fn torus_mesh_requires_h_dividing_pi() {
        let t = SpaceSpec::torus(1).unwrap();
        assert!(Mesh::new(t, PI / 8.0, vec![0.0, 0.0], 2.0).is_ok());
        assert!(matches!(Mesh::new(t, 0.3, vec![0.0, 0.0], 2.0), Err(Error::Geometry(_))));
    }

    #[test]
    fn torus_indices_wrap() {
        let t = SpaceSpec::torus(1).unwrap();
        let mesh = Mesh::aligned(t, PI / 4.0, 4.0).unwrap();
        let a = mesh.locate(&pt(0.1, 0.1)).unwrap();
        let b = mesh.locate(&pt(0.1 + TAU, 0.1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(mesh.canonical_index(&CubeIndex(vec![5, 0])), CubeIndex(vec![1, 0]));
    }

    #[test]
    fn apply_permutation_examples() {
        let mesh = Mesh::new(e1(), 1.0, vec![0.0, 0.0], 10.0).unwrap();
        let x = pt(0.3, -0.2);
        assert_eq!(MeshPermutation::identity().apply(&mesh, &x).unwrap(), x);
        let swap = MeshPermutation::new([
            (CubeIndex(vec![0, 0]), CubeIndex(vec![0, 1])),
            (CubeIndex(vec![0, 1]), CubeIndex(vec![0, 0])),
        ])
        .unwrap();
        let y = swap.apply(&mesh, &x).unwrap();
        assert!((y.q[0] - 0.3).abs() < 1e-15 && (y.p[0] - 1.8).abs() < 1e-15);
        assert!(matches!(swap.apply(&mesh, &pt(1.0, 0.0)), Err(Error::Boundary)));
    }

    #[test]
    fn permutation_validation() {
        let a = CubeIndex(vec![0, 0]);
        let b = CubeIndex(vec![0, 1]);
        assert!(MeshPermutation::new([(a.clone(), b.clone())]).is_err());
        assert!(MeshPermutation::new([(a.clone(), b.clone()), (b.clone(), b.clone())]).is_err());
        let p = MeshPermutation::new([(a.clone(), a.clone())]).unwrap();
        assert!(p.is_identity());
    }

    #[test]
    fn json_round_trip() {
        let mesh = Mesh::new(e1(), 0.5, vec![0.5, 0.5], 4.0).unwrap();
        let perm = MeshPermutation::new([
            (CubeIndex(vec![0, 0]), CubeIndex(vec![2, 1])),
            (CubeIndex(vec![2, 1]), CubeIndex(vec![0, 0])),
        ])
        .unwrap();
        let doc = MeshDocument::from_parts(&mesh, &perm);
        let text = serde_json::to_string(&doc).unwrap();
        assert!(text.contains("\"mapping\":[[[0,0],[2,1]],[[2,1],[0,0]]]"));
        let back: MeshDocument = serde_json::from_str(&text).unwrap();
        let (m2, p2) = back.into_parts().unwrap();
        assert_eq!(m2, mesh);
        assert_eq!(p2, perm);
    }

    #[test]
    fn cubes_meeting_box() {
        let mesh = Mesh::aligned(e1(), 0.5, 4.0).unwrap();
        assert_eq!(mesh.cubes_meeting(&[0.0, 0.0], &[1.0, 0.9]).len(), 1);
        assert_eq!(mesh.cubes_meeting(&[0.0, 0.0], &[1.2, 0.9]).len(), 2);
        let t = Mesh::aligned(SpaceSpec::torus(1).unwrap(), PI / 2.0, 4.0).unwrap();
        assert_eq!(t.cubes_meeting(&[0.0, -0.1], &[0.0, 0.1]).len(), 4);
    }
}
