//! Phase-space densities, Liouville transport by characteristics, Lʳ
//! distances and level-set signatures.

use std::f64::consts::TAU;
use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{input, Error, Result};
use crate::exec::{map_indexed, ExecMode, CHUNK};
use crate::flow::FlowMap;
use crate::geometry::{Cube, CubeLocation, Mesh, MeshPermutation, PhasePoint, SpaceSpec};
use crate::symbolic::HamExpr;

type PointFn = dyn Fn(&PhasePoint) -> f64 + Send + Sync;

/// Indicator cube with a weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedCube {
    pub cube: Cube,
    pub weight: f64,
}

/// Piecewise-constant samples on a tensor grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub res: Vec<usize>,
    pub values: Vec<f64>,
}

/// JSON header accompanying a grid CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub space: SpaceSpec,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub res: Vec<usize>,
    pub r: f64,
}

impl GridDensity {
    fn cell_of(&self, x: &[f64]) -> Option<usize> {
        let mut flat = 0usize;
        for (a, &v) in x.iter().enumerate() {
            let t = (v - self.lo[a]) / (self.hi[a] - self.lo[a]) * self.res[a] as f64;
            if !(t >= 0.0 && t < self.res[a] as f64) {
                return None;
            }
            flat = flat * self.res[a] + t as usize;
        }
        Some(flat)
    }
}

enum Repr {
    Expr(HamExpr),
    Grid(GridDensity),
    Cubes(Vec<WeightedCube>),
    Func { f: Arc<PointFn>, label: String },
    Pushforward { base: DensityField, flow: Arc<FlowMap> },
    Permuted { base: DensityField, mesh: Mesh, perm: MeshPermutation },
    Truncated { base: DensityField, a: f64, upper: f64 },
    Quantized { base: DensityField, levels: Vec<f64> },
    Scaled { base: DensityField, s: f64 },
}

/// Compactly supported density on phase space.
///
/// Evaluation outside the support box returns zero without touching the
/// representation. Torus densities always span the full configuration period.
#[derive(Clone)]
pub struct DensityField {
    space: SpaceSpec,
    lo: Vec<f64>,
    hi: Vec<f64>,
    repr: Arc<Repr>,
}

impl fmt::Debug for DensityField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DensityField({})", self.describe())
    }
}

fn check_box(space: &SpaceSpec, lo: &[f64], hi: &[f64]) -> Result<()> {
    let n = 2 * space.d;
    if lo.len() != n || hi.len() != n {
        return input(format!("support box needs {n} bounds per side"));
    }
    if lo.iter().zip(hi).any(|(a, b)| !(a.is_finite() && b.is_finite() && a < b)) {
        return input("support box must be finite with lo < hi");
    }
    Ok(())
}

fn torus_box(space: &SpaceSpec, lo: &mut [f64], hi: &mut [f64]) {
    if space.is_torus() {
        for i in 0..space.d {
            lo[i] = 0.0;
            hi[i] = TAU;
        }
    }
}

impl DensityField {
    fn build(space: SpaceSpec, mut lo: Vec<f64>, mut hi: Vec<f64>, repr: Repr) -> Result<Self> {
        torus_box(&space, &mut lo, &mut hi);
        check_box(&space, &lo, &hi)?;
        Ok(DensityField { space, lo, hi, repr: Arc::new(repr) })
    }

    /// Symbolic density restricted to the box `[lo, hi]`.
    pub fn expr(space: SpaceSpec, e: HamExpr, lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if e.d() != space.d {
            return input("density expression dimension does not match the space");
        }
        Self::build(space, lo, hi, Repr::Expr(e))
    }

    pub fn grid(space: SpaceSpec, g: GridDensity) -> Result<Self> {
        let n: usize = g.res.iter().product();
        if g.res.len() != 2 * space.d || g.res.contains(&0) || g.values.len() != n {
            return input("grid resolution and value count are inconsistent");
        }
        let (lo, hi) = (g.lo.clone(), g.hi.clone());
        check_box(&space, &lo, &hi)?;
        Self::build(space, lo, hi, Repr::Grid(g))
    }

    /// Weighted union of open cubes; overlapping weights add.
    pub fn cubes(space: SpaceSpec, cubes: Vec<WeightedCube>) -> Result<Self> {
        if cubes.is_empty() {
            return input("cube union needs at least one cube");
        }
        let n = 2 * space.d;
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for c in &cubes {
            if c.cube.center.d() != space.d || !(c.cube.radius > 0.0) {
                return input("cube dimension or radius is invalid");
            }
            for i in 0..n {
                let x = c.cube.center.coord(i);
                lo[i] = lo[i].min(x - c.cube.radius);
                hi[i] = hi[i].max(x + c.cube.radius);
            }
        }
        let cubes = cubes
            .into_iter()
            .map(|c| WeightedCube { cube: Cube { center: c.cube.center.canonical(&space), radius: c.cube.radius }, weight: c.weight })
            .collect();
        Self::build(space, lo, hi, Repr::Cubes(cubes))
    }

    pub fn indicator(space: SpaceSpec, cube: Cube) -> Result<Self> {
        Self::cubes(space, vec![WeightedCube { cube, weight: 1.0 }])
    }

    pub fn function(
        space: SpaceSpec,
        lo: Vec<f64>,
        hi: Vec<f64>,
        label: &str,
        f: impl Fn(&PhasePoint) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        Self::build(space, lo, hi, Repr::Func { f: Arc::new(f), label: label.to_string() })
    }

    pub fn zero(space: SpaceSpec) -> Self {
        let n = 2 * space.d;
        Self::build(space, vec![-1.0; n], vec![1.0; n], Repr::Scaled {
            base: Self::build(space, vec![-1.0; n], vec![1.0; n], Repr::Expr(HamExpr::zero(space.d))).expect("unit box"),
            s: 0.0,
        })
        .expect("unit box")
    }

    /// True for the identically zero density.
    pub fn is_null(&self) -> bool {
        matches!(&*self.repr, Repr::Scaled { s, .. } if *s == 0.0)
    }

    pub fn space(&self) -> &SpaceSpec {
        &self.space
    }

    pub fn support(&self) -> (&[f64], &[f64]) {
        (&self.lo, &self.hi)
    }

    fn in_box(&self, x: &PhasePoint) -> bool {
        (0..2 * self.space.d).all(|i| {
            let v = x.coord(i);
            v >= self.lo[i] && v <= self.hi[i]
        })
    }

    pub fn eval(&self, x: &PhasePoint) -> Result<f64> {
        self.space.check_point(x)?;
        let x = x.canonical(&self.space);
        self.eval_canonical(&x)
    }

    fn eval_canonical(&self, x: &PhasePoint) -> Result<f64> {
        if !self.in_box(x) {
            return Ok(0.0);
        }
        Ok(match &*self.repr {
            Repr::Expr(e) => e.eval(x),
            Repr::Grid(g) => g.cell_of(&x.to_vec()).map_or(0.0, |i| g.values[i]),
            Repr::Cubes(cs) => cs
                .iter()
                .filter(|c| c.cube.contains_open(x, &self.space))
                .map(|c| c.weight)
                .sum(),
            Repr::Func { f, .. } => f(x),
            Repr::Pushforward { base, flow } => base.eval_canonical(&flow.apply(x)?)?,
            Repr::Permuted { base, mesh, perm } => match mesh.locate(x) {
                Ok(CubeLocation::Interior(n)) => base.eval_canonical(&perm.translate(mesh, &n, x))?,
                _ => base.eval_canonical(x)?,
            },
            Repr::Truncated { base, a, upper } => {
                let v = base.eval_canonical(x)?;
                if v.abs() > *a && v.abs() < *upper {
                    v
                } else {
                    0.0
                }
            }
            Repr::Quantized { base, levels } => quantize_value(base.eval_canonical(x)?, levels),
            Repr::Scaled { base, s } => s * base.eval_canonical(x)?,
        })
    }

    /// `ρ ∘ Φ`, evaluated by applying the forward flow to the evaluation point.
    pub fn pushforward(&self, flow: &FlowMap) -> Result<DensityField> {
        if flow.space != self.space {
            return input("flow and density live on different spaces");
        }
        let (lo, hi) = flow.preimage_box(&self.lo, &self.hi)?;
        Self::build(self.space, lo, hi, Repr::Pushforward { base: self.clone(), flow: Arc::new(flow.clone()) })
    }

    /// `ρ ∘ F` for a mesh permutation acting by cube translations.
    pub fn permuted(&self, mesh: &Mesh, perm: &MeshPermutation) -> Result<DensityField> {
        if mesh.space != self.space {
            return input("mesh and density live on different spaces");
        }
        let n = 2 * self.space.d;
        let (mut lo, mut hi) = (self.lo.clone(), self.hi.clone());
        let inv = perm.inverse();
        for (from, _) in inv.pairs() {
            let c = mesh.center(from);
            for i in 0..n {
                lo[i] = lo[i].min(c.coord(i) - mesh.h);
                hi[i] = hi[i].max(c.coord(i) + mesh.h);
            }
        }
        Self::build(self.space, lo, hi, Repr::Permuted { base: self.clone(), mesh: mesh.clone(), perm: perm.clone() })
    }

    /// `ρ · 1{a < |ρ| < upper}`.
    pub fn truncate(&self, a: f64, upper: f64) -> Result<DensityField> {
        if !(a > 0.0 && a < upper) {
            return input("truncation needs 0 < a < A");
        }
        Self::build(self.space, self.lo.clone(), self.hi.clone(), Repr::Truncated { base: self.clone(), a, upper })
    }

    /// Step function `Σ ξ_k 1{ξ_{k−1} <= ρ < ξ_k}` on `ξ_k = −A + 2Ak/N`;
    /// the zero set of `ρ` stays zero.
    pub fn quantize(&self, upper: f64, n: usize) -> Result<DensityField> {
        if !(upper > 0.0) || n == 0 {
            return input("quantization needs A > 0 and N >= 1");
        }
        let levels = quantization_levels(upper, n);
        Self::build(self.space, self.lo.clone(), self.hi.clone(), Repr::Quantized { base: self.clone(), levels })
    }

    pub fn scale(&self, s: f64) -> Result<DensityField> {
        Self::build(self.space, self.lo.clone(), self.hi.clone(), Repr::Scaled { base: self.clone(), s })
    }

    /// Samples cell midpoints into a grid density over the quadrature box.
    pub fn sample_grid(&self, quad: &Quadrature) -> Result<GridDensity> {
        quad.check(&self.space)?;
        let values = quad.values(&[self])?.remove(0);
        Ok(GridDensity { lo: quad.lo.clone(), hi: quad.hi.clone(), res: vec![quad.res; quad.lo.len()], values })
    }

    pub fn describe(&self) -> Value {
        let inner = match &*self.repr {
            Repr::Expr(e) => json!({"expr": e.to_string()}),
            Repr::Grid(g) => json!({"grid": {"res": g.res}}),
            Repr::Cubes(cs) => json!({"cubes": cs}),
            Repr::Func { label, .. } => json!({"function": label}),
            Repr::Pushforward { base, flow } => json!({"pushforward": {"base": base.describe(), "flow": flow.describe()}}),
            Repr::Permuted { base, perm, .. } => json!({"permuted": {"base": base.describe(), "moved_cubes": perm.len()}}),
            Repr::Truncated { base, a, upper } => json!({"truncated": {"base": base.describe(), "a": a, "A": upper}}),
            Repr::Quantized { base, levels } => json!({"quantized": {"base": base.describe(), "levels": levels}}),
            Repr::Scaled { base, s } => json!({"scaled": {"base": base.describe(), "s": s}}),
        };
        json!({"space": self.space, "lo": self.lo, "hi": self.hi, "repr": inner})
    }
}

/// `ξ_0..ξ_N` with `ξ_k = −A + 2Ak/N`.
pub fn quantization_levels(upper: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|k| -upper + 2.0 * upper * k as f64 / n as f64).collect()
}

fn quantize_value(v: f64, levels: &[f64]) -> f64 {
    if v == 0.0 {
        return 0.0;
    }
    for k in 1..levels.len() {
        if levels[k - 1] <= v && v < levels[k] {
            return levels[k];
        }
    }
    0.0
}

/// How quadrature points are placed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Tensor midpoint rule with boundary-cell bisection.
    Midpoint,
    /// Uniform random points from a seeded stream.
    MonteCarlo { samples: usize, seed: u64 },
}

/// Quadrature box, resolution and execution settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quadrature {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Cells per axis.
    pub res: usize,
    /// Bisection levels applied to cells on a level-set boundary.
    pub refine: u32,
    pub sampler: Sampler,
    #[serde(default)]
    pub mode: ExecMode,
}

impl Quadrature {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, res: usize) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() || !lo.len().is_multiple_of(2) {
            return input("quadrature box needs matching even-length bounds");
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a.is_finite() && b.is_finite() && a < b)) {
            return input("quadrature box must be bounded with lo < hi");
        }
        if res == 0 {
            return input("quadrature resolution must be positive");
        }
        Ok(Quadrature { lo, hi, res, refine: 2, sampler: Sampler::Midpoint, mode: ExecMode::default() })
    }

    /// Smallest box containing every support, at `res` cells per axis.
    pub fn covering(densities: &[&DensityField], res: usize) -> Result<Self> {
        let first = densities.first().ok_or_else(|| Error::Input("no densities to cover".into()))?;
        let mut lo = first.lo.clone();
        let mut hi = first.hi.clone();
        for rho in &densities[1..] {
            if rho.space != first.space {
                return input("densities live on different spaces");
            }
            for i in 0..lo.len() {
                lo[i] = lo[i].min(rho.lo[i]);
                hi[i] = hi[i].max(rho.hi[i]);
            }
        }
        Self::new(lo, hi, res)
    }

    pub fn with_mode(mut self, mode: ExecMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_refine(mut self, refine: u32) -> Self {
        self.refine = refine;
        self
    }

    pub fn with_sampler(mut self, sampler: Sampler) -> Self {
        self.sampler = sampler;
        self
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn cells(&self) -> usize {
        self.res.pow(self.dim() as u32)
    }

    pub fn cell_width(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / self.res as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.cell_width(a)).product()
    }

    pub fn box_volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    fn check(&self, space: &SpaceSpec) -> Result<()> {
        if self.dim() != 2 * space.d {
            return input("quadrature box dimension does not match the space");
        }
        if let Sampler::MonteCarlo { samples: 0, .. } = self.sampler {
            return input("Monte-Carlo quadrature needs at least one sample");
        }
        Ok(())
    }

    fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let n = self.dim();
        let mut k = vec![0; n];
        for a in (0..n).rev() {
            k[a] = flat % self.res;
            flat /= self.res;
        }
        k
    }

    fn midpoint(&self, k: &[usize]) -> PhasePoint {
        let v: Vec<f64> = k
            .iter()
            .enumerate()
            .map(|(a, &i)| self.lo[a] + (i as f64 + 0.5) * self.cell_width(a))
            .collect();
        PhasePoint::from_slice(&v)
    }

    fn sample_count(&self) -> usize {
        match self.sampler {
            Sampler::Midpoint => self.cells(),
            Sampler::MonteCarlo { samples, .. } => samples,
        }
    }

    fn sample_point(&self, i: usize) -> PhasePoint {
        match self.sampler {
            Sampler::Midpoint => self.midpoint(&self.multi_index(i)),
            Sampler::MonteCarlo { seed, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let v: Vec<f64> = (0..self.dim()).map(|a| rng.random_range(self.lo[a]..self.hi[a])).collect();
                PhasePoint::from_slice(&v)
            }
        }
    }

    fn weight(&self) -> f64 {
        self.box_volume() / self.sample_count() as f64
    }

    /// Values of each density at every sample point.
    fn values(&self, rhos: &[&DensityField]) -> Result<Vec<Vec<f64>>> {
        let n = self.sample_count();
        let chunks = try_chunks(self.mode, n, |r| {
            r.map(|i| {
                let x = self.sample_point(i);
                rhos.iter().map(|rho| rho.eval_canonical(&x)).collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()
        })?;
        let mut out = vec![Vec::with_capacity(n); rhos.len()];
        for row in chunks.into_iter().flatten() {
            for (j, v) in row.into_iter().enumerate() {
                out[j].push(v);
            }
        }
        Ok(out)
    }
}

/// Evaluates `f` on consecutive index chunks and returns the results in order.
fn try_chunks<T, F>(mode: ExecMode, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Range<usize>) -> Result<T> + Sync + Send,
{
    map_indexed(mode, n.div_ceil(CHUNK), |c| f(c * CHUNK..((c + 1) * CHUNK).min(n)))
        .into_iter()
        .collect()
}

/// Lʳ distance with a resolution-refinement estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LrReport {
    pub r: f64,
    pub value: f64,
    /// `|value − value at half resolution|`; zero for Monte-Carlo sampling.
    pub refinement_estimate: f64,
    pub res: usize,
}

fn lr_value(a: &DensityField, b: &DensityField, r: f64, quad: &Quadrature) -> Result<f64> {
    let vals = quad.values(&[a, b])?;
    let n = vals[0].len();
    let parts = try_chunks(quad.mode, n, |rg| {
        Ok(rg.map(|i| (vals[0][i] - vals[1][i]).abs().powf(r)).fold(0.0, |s, v| s + v))
    })?;
    let total: f64 = parts.into_iter().fold(0.0, |s, v| s + v);
    Ok((total * quad.weight()).powf(1.0 / r))
}

/// `(∫|ρa − ρb|^r)^{1/r}` over the quadrature box.
pub fn lr_distance(a: &DensityField, b: &DensityField, r: f64, quad: &Quadrature) -> Result<LrReport> {
    if a.space != b.space {
        return input("densities live on different spaces");
    }
    quad.check(&a.space)?;
    if !(r >= 1.0 && r.is_finite()) {
        return input("exponent r must lie in [1, ∞)");
    }
    for rho in [a, b] {
        if rho.is_null() {
            continue;
        }
        for i in 0..quad.dim() {
            if rho.lo[i] < quad.lo[i] - 1e-12 || rho.hi[i] > quad.hi[i] + 1e-12 {
                return input("density support is not contained in the quadrature box");
            }
        }
    }
    let value = lr_value(a, b, r, quad)?;
    let refinement_estimate = match quad.sampler {
        Sampler::Midpoint if quad.res >= 2 => {
            let mut coarse = quad.clone();
            coarse.res = quad.res / 2;
            (value - lr_value(a, b, r, &coarse)?).abs()
        }
        _ => 0.0,
    };
    Ok(LrReport { r, value, refinement_estimate, res: quad.res })
}

/// `L¹` distance of two nonnegative densities with known total masses whose
/// supports may leave the quadrature box: the box integral of `|ρa − ρb|`
/// plus the mass of each density outside the box.
pub fn l1_distance_with_tails(a: &DensityField, b: &DensityField, mass_a: f64, mass_b: f64, quad: &Quadrature) -> Result<f64> {
    if a.space != b.space {
        return input("densities live on different spaces");
    }
    quad.check(&a.space)?;
    let zero = DensityField::zero(a.space);
    let inside = lr_value(a, b, 1.0, quad)?;
    let tail_a = (mass_a - lr_value(a, &zero, 1.0, quad)?).max(0.0);
    let tail_b = (mass_b - lr_value(b, &zero, 1.0, quad)?).max(0.0);
    Ok(inside + tail_a + tail_b)
}

/// `‖ρ‖_{Lʳ}` over the quadrature box.
pub fn lr_norm(rho: &DensityField, r: f64, quad: &Quadrature) -> Result<LrReport> {
    lr_distance(rho, &DensityField::zero(rho.space), r, quad)
}

/// Band and level-value volumes of a density on a finite level grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSignature {
    pub levels: Vec<f64>,
    /// `Vol({μ_i < ρ < μ_{i+1}})` within the quadrature box.
    pub bands: Vec<f64>,
    /// `Vol({ρ = μ_k})`.
    pub level_masses: Vec<f64>,
    /// Half-cell error estimate per band.
    pub band_errors: Vec<f64>,
    /// Bands that contain the value 0; their volume depends on the box.
    pub contains_zero: Vec<bool>,
    pub cell_volume: f64,
}

impl LevelSignature {
    /// `Vol({μ_i < ρ < μ_j})` for `i < j`, assembled from bands and level
    /// masses.
    pub fn band_volume(&self, i: usize, j: usize) -> Result<f64> {
        if !(i < j && j < self.levels.len()) {
            return input("band indices must satisfy i < j <= L");
        }
        Ok(self.bands[i..j].iter().sum::<f64>() + self.level_masses[i + 1..j].iter().sum::<f64>())
    }

    /// `Vol({μ_i <= ρ < μ_j})`.
    pub fn closed_band_volume(&self, i: usize, j: usize) -> Result<f64> {
        Ok(self.band_volume(i, j)? + self.level_masses[i])
    }
}

/// Per-band comparison of two signatures.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignatureComparison {
    pub matched: bool,
    pub tol: f64,
    pub max_difference: f64,
    pub band_differences: Vec<f64>,
    pub mass_differences: Vec<f64>,
}

const LEVEL_TOL: f64 = 1e-12;

fn label_of(v: f64, levels: &[f64]) -> i32 {
    for (k, &m) in levels.iter().enumerate() {
        if (v - m).abs() <= LEVEL_TOL * m.abs().max(1.0) {
            return 2 * k as i32;
        }
    }
    if v < levels[0] || v > levels[levels.len() - 1] {
        return -1;
    }
    let i = levels.windows(2).position(|w| w[0] < v && v < w[1]).expect("value lies in a band");
    2 * i as i32 + 1
}

/// Volumes per label: index `2k` is the level `μ_k`, `2i + 1` the band
/// `(μ_i, μ_{i+1})`.
struct LabelVolumes {
    vol: Vec<f64>,
    err: Vec<f64>,
}

fn label_volumes(rho: &DensityField, levels: &[f64], quad: &Quadrature) -> Result<LabelVolumes> {
    let nl = 2 * levels.len() - 1;
    let add = |acc: &mut LabelVolumes, lab: i32, v: f64| {
        if lab >= 0 {
            acc.vol[lab as usize] += v;
        }
    };
    if let Sampler::MonteCarlo { .. } = quad.sampler {
        let vals = quad.values(&[rho])?.remove(0);
        let w = quad.weight();
        let mut acc = LabelVolumes { vol: vec![0.0; nl], err: vec![0.0; nl] };
        for v in vals {
            add(&mut acc, label_of(v, levels), w);
        }
        let n = quad.sample_count() as f64;
        let total = quad.box_volume();
        for (e, v) in acc.err.iter_mut().zip(&acc.vol) {
            let p = v / total;
            *e = 2.0 * total * (p * (1.0 - p) / n).sqrt();
        }
        return Ok(acc);
    }
    let dim = quad.dim();
    let n = quad.cells();
    let cell_vol = quad.cell_volume();
    let labels: Vec<i32> = quad
        .values(&[rho])?
        .remove(0)
        .into_iter()
        .map(|v| label_of(v, levels))
        .collect();
    let outside = label_of(0.0, levels);
    let s = 1usize << quad.refine;
    let sub_count = s.pow(dim as u32);
    let sub_vol = cell_vol / sub_count as f64;
    let strides: Vec<usize> = (0..dim).map(|a| quad.res.pow((dim - 1 - a) as u32)).collect();
    let sub_strides: Vec<usize> = (0..dim).map(|a| s.pow((dim - 1 - a) as u32)).collect();
    let neighbours: Vec<Vec<i64>> = crate::fields::lattice_box(&vec![-1; dim], &vec![1; dim])
        .into_iter()
        .filter(|o| o.iter().any(|&v| v != 0))
        .collect();
    let parts = try_chunks(quad.mode, n, |rg| {
        let mut acc = LabelVolumes { vol: vec![0.0; nl], err: vec![0.0; nl] };
        for i in rg {
            let k = quad.multi_index(i);
            let lab = labels[i];
            let boundary = neighbours.iter().any(|off| {
                let mut j = i as i64;
                for a in 0..dim {
                    let ka = k[a] as i64 + off[a];
                    if ka < 0 || ka >= quad.res as i64 {
                        return outside != lab;
                    }
                    j += off[a] * strides[a] as i64;
                }
                labels[j as usize] != lab
            });
            if !boundary {
                add(&mut acc, lab, cell_vol);
                continue;
            }
            let mut seen = vec![false; nl];
            let mut vals = vec![0.0; sub_count];
            let mut digits = vec![vec![0usize; dim]; sub_count];
            for j in 0..sub_count {
                let mut rem = j;
                let mut v = vec![0.0; dim];
                for a in (0..dim).rev() {
                    let sub = rem % s;
                    rem /= s;
                    digits[j][a] = sub;
                    let w = quad.cell_width(a);
                    v[a] = quad.lo[a] + k[a] as f64 * w + (sub as f64 + 0.5) * w / s as f64;
                }
                vals[j] = rho.eval_canonical(&PhasePoint::from_slice(&v))?;
            }
            for j in 0..sub_count {
                let v = vals[j];
                let sl = label_of(v, levels);
                if sl >= 0 {
                    seen[sl as usize] = true;
                }
                // Linear reconstruction from in-cell differences: the share of
                // the subcell above μ is clamp(1/2 + (v − μ)/(2R)), where R is
                // the half-range of the linear model over the subcell.
                let mut spread = 0.0;
                for a in 0..dim {
                    let step = sub_strides[a];
                    let da = digits[j][a];
                    let (lo_j, hi_j, span) = match (da > 0, da + 1 < s) {
                        (true, true) => (j - step, j + step, 2.0),
                        (false, true) => (j, j + step, 1.0),
                        (true, false) => (j - step, j, 1.0),
                        (false, false) => (j, j, 1.0),
                    };
                    spread += 0.5 * (vals[hi_j] - vals[lo_j]).abs() / span;
                }
                if sl % 2 == 0 || !(spread > 0.0) {
                    add(&mut acc, sl, sub_vol);
                    continue;
                }
                let above = |mu: f64| (0.5 + (v - mu) / (2.0 * spread)).clamp(0.0, 1.0);
                for i in 0..levels.len() - 1 {
                    let share = above(levels[i]) - above(levels[i + 1]);
                    if share > 0.0 {
                        add(&mut acc, 2 * i as i32 + 1, share * sub_vol);
                    }
                }
            }
            if lab >= 0 {
                seen[lab as usize] = true;
            }
            for (l, hit) in seen.into_iter().enumerate() {
                if hit {
                    acc.err[l] += 0.5 * cell_vol / s as f64;
                }
            }
        }
        Ok(acc)
    })?;
    let mut total = LabelVolumes { vol: vec![0.0; nl], err: vec![0.0; nl] };
    for p in parts {
        for l in 0..nl {
            total.vol[l] += p.vol[l];
            total.err[l] += p.err[l];
        }
    }
    Ok(total)
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.len() < 2 {
        return input("level grid needs at least two values");
    }
    if levels.iter().any(|v| !v.is_finite()) || levels.windows(2).any(|w| !(w[0] < w[1])) {
        return input("level grid must be finite and strictly increasing");
    }
    Ok(())
}

/// Level-set volume with its error estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VolumeReport {
    pub volume: f64,
    pub error_bound: f64,
}

/// `Vol({μ < ρ < ν})` within the quadrature box.
pub fn level_set_volume(rho: &DensityField, mu: f64, nu: f64, quad: &Quadrature) -> Result<VolumeReport> {
    if !(mu < nu) {
        return input("level band needs μ < ν");
    }
    quad.check(&rho.space)?;
    let lv = label_volumes(rho, &[mu, nu], quad)?;
    Ok(VolumeReport { volume: lv.vol[1], error_bound: lv.err[1] })
}

pub fn signature(rho: &DensityField, levels: &[f64], quad: &Quadrature) -> Result<LevelSignature> {
    check_levels(levels)?;
    quad.check(&rho.space)?;
    let lv = label_volumes(rho, levels, quad)?;
    let l = levels.len();
    Ok(LevelSignature {
        levels: levels.to_vec(),
        bands: (0..l - 1).map(|i| lv.vol[2 * i + 1]).collect(),
        level_masses: (0..l).map(|k| lv.vol[2 * k]).collect(),
        band_errors: (0..l - 1).map(|i| lv.err[2 * i + 1]).collect(),
        contains_zero: levels.windows(2).map(|w| w[0] < 0.0 && 0.0 < w[1]).collect(),
        cell_volume: quad.cell_volume(),
    })
}

/// Compares band volumes and nonzero level masses; bands containing 0 are
/// skipped because their volume depends on the quadrature box.
pub fn compare_signatures(a: &LevelSignature, b: &LevelSignature, tol: f64) -> Result<SignatureComparison> {
    if a.levels != b.levels {
        return input("signatures use different level grids");
    }
    let band_differences: Vec<f64> = a
        .bands
        .iter()
        .zip(&b.bands)
        .zip(&a.contains_zero)
        .map(|((x, y), z)| if *z { 0.0 } else { (x - y).abs() })
        .collect();
    let mass_differences: Vec<f64> = a
        .level_masses
        .iter()
        .zip(&b.level_masses)
        .zip(&a.levels)
        .map(|((x, y), m)| if *m == 0.0 { 0.0 } else { (x - y).abs() })
        .collect();
    let max_difference = band_differences.iter().chain(&mass_differences).fold(0.0, |m: f64, v| m.max(*v));
    Ok(SignatureComparison { matched: max_difference <= tol, tol, max_difference, band_differences, mass_differences })
}

pub fn signatures_match(a: &LevelSignature, b: &LevelSignature, tol: f64) -> Result<bool> {
    Ok(compare_signatures(a, b, tol)?.matched)
}

/// Writes a grid density as a JSON header plus `(i_1..i_2d, value)` CSV rows.
pub fn write_grid<W: Write, H: Write>(space: &SpaceSpec, g: &GridDensity, r: f64, header: H, csv_out: W) -> Result<()> {
    let head = GridHeader { space: *space, lo: g.lo.clone(), hi: g.hi.clone(), res: g.res.clone(), r };
    serde_json::to_writer_pretty(header, &head)?;
    let mut w = csv::Writer::from_writer(csv_out);
    let dim = g.res.len();
    let mut names: Vec<String> = (1..=dim).map(|a| format!("i{a}")).collect();
    names.push("value".into());
    w.write_record(&names)?;
    for (flat, v) in g.values.iter().enumerate() {
        let mut rem = flat;
        let mut idx = vec![0usize; dim];
        for a in (0..dim).rev() {
            idx[a] = rem % g.res[a];
            rem /= g.res[a];
        }
        let mut row: Vec<String> = idx.iter().map(usize::to_string).collect();
        row.push(format!("{v:?}"));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a grid density written by [`write_grid`]; missing cells are zero.
pub fn read_grid<R: Read, C: Read>(header: R, csv_in: C) -> Result<(DensityField, f64)> {
    let head: GridHeader = serde_json::from_reader(header)?;
    let dim = head.res.len();
    if dim != 2 * head.space.d || head.res.contains(&0) {
        return input("grid header resolution does not match the space");
    }
    let n: usize = head.res.iter().product();
    let mut values = vec![0.0; n];
    let mut rd = csv::Reader::from_reader(csv_in);
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let bad = |msg: &str| Error::Parse { pos: line + 2, msg: msg.to_string() };
        if rec.len() != dim + 1 {
            return Err(bad("row needs one index per axis and a value"));
        }
        let mut flat = 0usize;
        for a in 0..dim {
            let k: usize = rec[a].trim().parse().map_err(|_| bad("invalid cell index"))?;
            if k >= head.res[a] {
                return Err(bad("cell index out of range"));
            }
            flat = flat * head.res[a] + k;
        }
        values[flat] = rec[dim].trim().parse().map_err(|_| bad("invalid value"))?;
    }
    let g = GridDensity { lo: head.lo, hi: head.hi, res: head.res, values };
    Ok((DensityField::grid(head.space, g)?, head.r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{Profile, Stage};
    use crate::symbolic::HamExpr;

    fn e1() -> SpaceSpec {
        SpaceSpec::euclidean(1).unwrap()
    }

    fn unit_indicator(c: (f64, f64), r: f64) -> DensityField {
        DensityField::indicator(e1(), Cube { center: PhasePoint::new(vec![c.0], vec![c.1]), radius: r }).unwrap()
    }

    #[test]
    fn pushforward_shear_example() {
        let rho = unit_indicator((0.0, 0.0), 1.0);
        let f = FlowMap::new(e1(), vec![Stage::vertical_shear(Profile::q_expr(HamExpr::harmonic(1)).unwrap(), 1.0)]).unwrap();
        let pf = rho.pushforward(&f).unwrap();
        let x = PhasePoint::new(vec![0.5], vec![0.2]);
        assert_eq!(pf.eval(&x).unwrap(), rho.eval(&PhasePoint::new(vec![0.5], vec![0.2 - 0.5])).unwrap());
        assert_eq!(pf.eval(&x).unwrap(), 1.0);
        let id = rho.pushforward(&FlowMap::identity(e1())).unwrap();
        assert_eq!(id.eval(&x).unwrap(), rho.eval(&x).unwrap());
    }

    #[test]
    fn lr_distance_examples() {
        let a = unit_indicator((0.0, 0.0), 0.5);
        let b = unit_indicator((3.0, 0.0), 0.5);
        let q = Quadrature::covering(&[&a, &b], 256).unwrap();
        assert_eq!(lr_distance(&a, &a, 1.0, &q).unwrap().value, 0.0);
        assert!((lr_distance(&a, &b, 1.0, &q).unwrap().value - 2.0).abs() < 1e-9);
        let c = unit_indicator((0.0, 0.0), 1.0);
        let d = unit_indicator((1.0, 0.0), 1.0);
        let q = Quadrature::new(vec![-2.0, -2.0], vec![3.0, 2.0], 200).unwrap();
        // Symmetric difference of two 2×2 squares offset by 1: 2·(1·2).
        assert!((lr_distance(&c, &d, 1.0, &q).unwrap().value - 4.0).abs() < 1e-9);
        let e = unit_indicator((0.5, 0.0), 1.0);
        assert!((lr_distance(&c, &e, 1.0, &q).unwrap().value - 2.0).abs() < 1e-9);
    }

    #[test]
    fn drift_preserves_lr_norm_of_gaussian() {
        let g = DensityField::function(e1(), vec![-4.0, -4.0], vec![4.0, 4.0], "gaussian", |x| {
            (-(x.q[0] * x.q[0] + x.p[0] * x.p[0])).exp()
        })
        .unwrap();
        let f = FlowMap::new(e1(), vec![Stage::drift(1, 1.0)]).unwrap();
        let pf = g.pushforward(&f).unwrap();
        let q = Quadrature::covering(&[&g, &pf], 400).unwrap();
        for r in [1.0, 2.0] {
            let a = lr_norm(&g, r, &q).unwrap().value;
            let b = lr_norm(&pf, r, &q).unwrap().value;
            assert!((a - b).abs() < 1e-3, "r={r}: {a} vs {b}");
        }
    }

    #[test]
    fn level_set_volume_examples() {
        let rho = unit_indicator((0.0, 0.0), 0.5);
        let q = Quadrature::new(vec![-1.0, -1.0], vec![1.0, 1.0], 64).unwrap();
        assert!((level_set_volume(&rho, 0.5, 1.5, &q).unwrap().volume - 1.0).abs() < 1e-9);
        assert_eq!(level_set_volume(&rho, 2.0, 3.0, &q).unwrap().volume, 0.0);
        let slab = DensityField::expr(e1(), HamExpr::q(1, 0), vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let q = Quadrature::new(vec![0.0, 0.0], vec![1.0, 1.0], 37).unwrap();
        let rep = level_set_volume(&slab, 0.25, 0.75, &q).unwrap();
        assert!((rep.volume - 0.5).abs() <= rep.error_bound.max(1e-12), "{rep:?}");
        assert!(level_set_volume(&slab, 0.7, 0.2, &q).is_err());
    }

    #[test]
    fn signature_examples() {
        let rho = unit_indicator((0.0, 0.0), 0.5);
        let moved = unit_indicator((1.3, -0.7), 0.5);
        let q = Quadrature::new(vec![-2.0, -2.0], vec![2.0, 2.0], 80).unwrap();
        let levels = [0.5, 1.5, 2.5];
        let sa = signature(&rho, &levels, &q).unwrap();
        let sb = signature(&moved, &levels, &q).unwrap();
        assert!(signatures_match(&sa, &sb, 2.0 * q.cell_volume()).unwrap());
        let twice = signature(&rho.scale(2.0).unwrap(), &levels, &q).unwrap();
        assert!(!signatures_match(&sa, &twice, 2.0 * q.cell_volume()).unwrap());
        let other = signature(&rho, &[0.5, 1.0], &q).unwrap();
        assert!(signatures_match(&sa, &other, 1.0).is_err());
    }

    #[test]
    fn signature_pair_volumes_add_up() {
        let slab = DensityField::expr(e1(), HamExpr::q(1, 0), vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let q = Quadrature::new(vec![0.0, 0.0], vec![1.0, 1.0], 40).unwrap();
        let s = signature(&slab, &[0.1, 0.35, 0.6, 0.9], &q).unwrap();
        assert!((s.band_volume(0, 3).unwrap() - 0.8).abs() < 1e-2);
        assert!((s.band_volume(1, 2).unwrap() - 0.25).abs() < 1e-2);
    }

    #[test]
    fn signature_is_invariant_under_exact_shear() {
        let g = DensityField::function(e1(), vec![-3.0, -3.0], vec![3.0, 3.0], "bump", |x| {
            (-(x.q[0] * x.q[0] + 2.0 * x.p[0] * x.p[0])).exp()
        })
        .unwrap();
        let f = FlowMap::new(
            e1(),
            vec![
                Stage::vertical_shear(Profile::q_expr(HamExpr::cos(vec![1])).unwrap(), 0.6),
                Stage::drift(1, 0.5),
            ],
        )
        .unwrap();
        let pf = g.pushforward(&f).unwrap();
        let q = Quadrature::covering(&[&g, &pf], 256).unwrap();
        let levels = [0.1, 0.3, 0.5, 0.7, 0.9];
        let a = signature(&g, &levels, &q).unwrap();
        let b = signature(&pf, &levels, &q).unwrap();
        let cmp = compare_signatures(&a, &b, 2.0 * q.cell_volume()).unwrap();
        assert!(cmp.matched, "{cmp:?}");
    }

    #[test]
    fn quantization_levels_and_values() {
        let lv = quantization_levels(1.0, 4);
        assert_eq!(lv, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(quantize_value(0.3, &lv), 0.5);
        assert_eq!(quantize_value(0.5, &lv), 1.0);
        assert_eq!(quantize_value(0.0, &lv), 0.0);
        assert_eq!(quantize_value(-0.2, &lv), 0.0);
        assert_eq!(quantize_value(-0.7, &lv), -0.5);
    }

    #[test]
    fn permuted_density_moves_cubes() {
        let mesh = Mesh::aligned(e1(), 0.5, 4.0).unwrap();
        let rho = unit_indicator((0.5, 0.5), 0.5);
        let a = crate::geometry::CubeIndex(vec![0, 0]);
        let b = crate::geometry::CubeIndex(vec![2, 0]);
        let perm = MeshPermutation::new([(a.clone(), b.clone()), (b, a)]).unwrap();
        let moved = rho.permuted(&mesh, &perm).unwrap();
        assert_eq!(moved.eval(&PhasePoint::new(vec![2.5], vec![0.5])).unwrap(), 1.0);
        assert_eq!(moved.eval(&PhasePoint::new(vec![0.5], vec![0.5])).unwrap(), 0.0);
    }

    #[test]
    fn monte_carlo_and_midpoint_agree() {
        let rho = unit_indicator((0.0, 0.0), 0.5);
        let q = Quadrature::new(vec![-1.0, -1.0], vec![1.0, 1.0], 64).unwrap();
        let mc = q.clone().with_sampler(Sampler::MonteCarlo { samples: 20000, seed: 7 });
        let a = level_set_volume(&rho, 0.5, 1.5, &q).unwrap().volume;
        let b = level_set_volume(&rho, 0.5, 1.5, &mc).unwrap();
        assert!((a - b.volume).abs() <= b.error_bound, "{a} vs {b:?}");
        let again = level_set_volume(&rho, 0.5, 1.5, &mc).unwrap();
        assert_eq!(b, again);
    }

    #[test]
    fn parallel_and_sequential_quadrature_agree() {
        let g = DensityField::function(e1(), vec![-2.0, -2.0], vec![2.0, 2.0], "g", |x| (x.q[0] * x.p[0]).sin()).unwrap();
        let z = DensityField::zero(e1());
        let q = Quadrature::covering(&[&g], 300).unwrap();
        let a = lr_distance(&g, &z, 2.0, &q.clone().with_mode(ExecMode::Parallel)).unwrap();
        let b = lr_distance(&g, &z, 2.0, &q.with_mode(ExecMode::Sequential)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grid_round_trip() {
        let g = GridDensity { lo: vec![0.0, -1.0], hi: vec![1.0, 1.0], res: vec![2, 3], values: vec![0.0, 1.0, 2.0, 3.0, 4.5, 5.0] };
        let mut head = Vec::new();
        let mut body = Vec::new();
        write_grid(&e1(), &g, 2.0, &mut head, &mut body).unwrap();
        let (rho, r) = read_grid(head.as_slice(), body.as_slice()).unwrap();
        assert_eq!(r, 2.0);
        assert_eq!(rho.eval(&PhasePoint::new(vec![0.75], vec![0.0])).unwrap(), 4.5);
        let bad = "i1,i2,value\n0,9,1.0\n";
        let mut head2 = Vec::new();
        write_grid(&e1(), &g, 2.0, &mut head2, Vec::new()).unwrap();
        assert!(matches!(read_grid(head2.as_slice(), bad.as_bytes()), Err(Error::Parse { pos: 2, .. })));
    }
}
