//! Approximation of a density by a rearrangement of another.
//!
//! Both densities are truncated and quantized on the level grid
//! `ξ_k = −A + 2Ak/N`. Each nonzero band is covered by mesh cubes holding a
//! majority of the band; the covers are trimmed to equal cardinality and
//! paired lexicographically. The resulting cube permutation `F` satisfies
//! `ρ0 ∘ F ≈ ρ1`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::density::{lr_distance, lr_norm, quantization_levels, DensityField, LrReport, Quadrature};
use crate::error::{input, Error, Result};
use crate::exec::{map_indexed, ExecMode};
use crate::fields::lattice_box;
use crate::geometry::{CubeIndex, Mesh, MeshPermutation, PhasePoint};

/// Parameters of the rearrangement pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RearrangeConfig {
    /// Lower truncation threshold.
    pub a: f64,
    /// Upper truncation threshold and quantization range.
    #[serde(rename = "A")]
    pub upper: f64,
    /// Number of quantization intervals.
    #[serde(rename = "N")]
    pub n_levels: usize,
    pub h: f64,
    /// Collar width of the shrunken cubes; defaults to `h/4`.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default = "default_r")]
    pub r: f64,
    /// Target Lʳ error, also used to derive the band-volume tolerance.
    pub tol: f64,
    /// Overlap sub-grid points per axis and cube.
    #[serde(default = "default_sub")]
    pub sub: usize,
    /// Cells per axis of the error quadrature; defaults by dimension.
    #[serde(default)]
    pub quad_res: Option<usize>,
    /// Admissible band-volume mismatch; defaults to `(tol/A)^r`.
    #[serde(default)]
    pub volume_tol: Option<f64>,
    #[serde(default)]
    pub mode: ExecMode,
}

fn default_r() -> f64 {
    1.0
}

fn default_sub() -> usize {
    8
}

impl RearrangeConfig {
    pub fn new(a: f64, upper: f64, n_levels: usize, h: f64, tol: f64) -> Self {
        RearrangeConfig {
            a,
            upper,
            n_levels,
            h,
            eta: None,
            r: 1.0,
            tol,
            sub: default_sub(),
            quad_res: None,
            volume_tol: None,
            mode: ExecMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a < self.upper && self.upper.is_finite()) {
            return input("rearrangement needs 0 < a < A");
        }
        if self.n_levels == 0 {
            return input("N must be at least 1");
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return input("h must be positive");
        }
        let eta = self.eta();
        if !(eta > 0.0 && eta < self.h) {
            return input("η must satisfy 0 < η < h");
        }
        if !(self.r >= 1.0 && self.r.is_finite()) {
            return input("r must lie in [1, ∞)");
        }
        if !(self.tol > 0.0) {
            return input("tolerance must be positive");
        }
        if self.sub == 0 {
            return input("sub-grid size must be positive");
        }
        Ok(())
    }

    pub fn eta(&self) -> f64 {
        self.eta.unwrap_or(self.h / 4.0)
    }

    pub fn volume_tol(&self) -> f64 {
        self.volume_tol.unwrap_or_else(|| (self.tol / self.upper).powf(self.r))
    }

    fn quad_res(&self, d: usize) -> usize {
        self.quad_res.unwrap_or(match d {
            1 => 512,
            2 => 24,
            _ => 8,
        })
    }
}

/// `ρ · 1{a < |ρ| < A}`.
pub fn truncate(rho: &DensityField, a: f64, upper: f64) -> Result<DensityField> {
    rho.truncate(a, upper)
}

/// Quantized density with its levels and approximation error.
#[derive(Debug, Clone)]
pub struct Quantized {
    pub density: DensityField,
    pub levels: Vec<f64>,
    pub error: LrReport,
}

/// `I_N ρ` on `ξ_k = −A + 2Ak/N` together with `‖I_N ρ − ρ‖_{Lʳ}`.
pub fn quantize(rho: &DensityField, upper: f64, n: usize, r: f64, quad: &Quadrature) -> Result<Quantized> {
    let density = rho.quantize(upper, n)?;
    let error = lr_distance(&density, rho, r, quad)?;
    Ok(Quantized { density, levels: quantization_levels(upper, n), error })
}

/// Offsets of the sub-grid midpoints on `[-1, 1]`.
fn sub_offsets(sub: usize) -> Vec<f64> {
    (0..sub).map(|i| -1.0 + (2.0 * i as f64 + 1.0) / sub as f64).collect()
}

/// Per-cube band statistics from a sub-grid over the full cube.
#[derive(Debug, Clone)]
struct CubeStats {
    /// Fraction of the cube volume in each band.
    volume: Vec<f64>,
    /// Fraction of the shrunken cube `C(m, h − η)` in each band.
    overlap: Vec<f64>,
}

fn band_of(v: f64, levels: &[f64]) -> Option<usize> {
    if v == 0.0 {
        return None;
    }
    (1..levels.len()).find(|&k| levels[k - 1] <= v && v < levels[k]).map(|k| k - 1)
}

fn cube_stats(
    rho: &DensityField,
    mesh: &Mesh,
    cubes: &[CubeIndex],
    levels: &[f64],
    eta: f64,
    sub: usize,
    mode: ExecMode,
) -> Result<Vec<CubeStats>> {
    let n = 2 * mesh.d();
    let offs = sub_offsets(sub);
    let pts = lattice_box(&vec![0; n], &vec![sub as i64 - 1; n]);
    let inner = 1.0 - eta / mesh.h;
    let bands = levels.len() - 1;
    let stats = map_indexed(mode, cubes.len(), |c| -> Result<CubeStats> {
        let center = mesh.center(&cubes[c]).to_vec();
        let mut volume = vec![0.0; bands];
        let mut overlap = vec![0.0; bands];
        let mut n_inner = 0usize;
        for ix in &pts {
            let u: Vec<f64> = ix.iter().map(|&i| offs[i as usize]).collect();
            let x: Vec<f64> = (0..n).map(|i| center[i] + mesh.h * u[i]).collect();
            let is_inner = u.iter().all(|v| v.abs() < inner);
            if is_inner {
                n_inner += 1;
            }
            if let Some(k) = band_of(rho.eval(&PhasePoint::from_slice(&x))?, levels) {
                volume[k] += 1.0;
                if is_inner {
                    overlap[k] += 1.0;
                }
            }
        }
        let total = pts.len() as f64;
        volume.iter_mut().for_each(|v| *v /= total);
        if n_inner > 0 {
            overlap.iter_mut().for_each(|v| *v /= n_inner as f64);
        }
        Ok(CubeStats { volume, overlap })
    });
    stats.into_iter().collect()
}

fn candidates(rho: &DensityField, mesh: &Mesh) -> Vec<CubeIndex> {
    let (lo, hi) = rho.support();
    mesh.cubes_meeting(lo, hi)
}

/// Covers of the band `lo <= ρ < hi` (zero excluded): `J` holds every cube
/// whose shrunken cube meets the band on the sub-grid, `Ĵ` the cubes where the
/// band fills more than half of the shrunken cube.
pub fn cover_level(
    rho: &DensityField,
    band: (f64, f64),
    mesh: &Mesh,
    eta: f64,
    sub: usize,
) -> Result<(Vec<CubeIndex>, Vec<CubeIndex>)> {
    let (lo, hi) = band;
    if !(lo < hi) {
        return input("band needs lo < hi");
    }
    if lo <= 0.0 && 0.0 < hi {
        return input("band contains the value 0 and has infinite volume");
    }
    if !(eta > 0.0 && eta < mesh.h) || sub == 0 {
        return input("cover needs 0 < η < h and a positive sub-grid");
    }
    if rho.space() != &mesh.space {
        return input("density and mesh live on different spaces");
    }
    let cubes = candidates(rho, mesh);
    let stats = cube_stats(rho, mesh, &cubes, &[lo, hi], eta, sub, ExecMode::default())?;
    let mut j = Vec::new();
    let mut j_hat = Vec::new();
    for (c, s) in cubes.iter().zip(&stats) {
        if s.overlap[0] > 0.0 {
            j.push(c.clone());
        }
        if s.overlap[0] > 0.5 {
            j_hat.push(c.clone());
        }
    }
    Ok((j, j_hat))
}

/// Bookkeeping for one quantization band.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelReport {
    pub k: usize,
    pub band: (f64, f64),
    pub volume0: f64,
    pub volume1: f64,
    pub cover0: usize,
    pub cover1: usize,
    pub majority0: usize,
    pub majority1: usize,
    pub paired: usize,
    /// `max_i |Vol(band_i) − (2h)^{2d} · #J̃|`.
    pub bookkeeping_gap: f64,
}

/// Summary of a constructed rearrangement.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RearrangeReport {
    pub h: f64,
    pub eta: f64,
    #[serde(rename = "N")]
    pub n_levels: usize,
    pub a: f64,
    #[serde(rename = "A")]
    pub upper: f64,
    pub r: f64,
    pub moved_cubes: usize,
    /// `‖ρ0 ∘ F − ρ1‖_{Lʳ}`.
    pub lr_error: LrReport,
    /// `‖ρ_i − T ρ_i‖_{Lʳ}` for both densities.
    pub truncation_error: [f64; 2],
    /// `‖I_N T ρ_i − T ρ_i‖_{Lʳ}` for both densities.
    pub quantization_error: [f64; 2],
    /// Lʳ mass of `ρ0 ∘ F` on cubes filled by the bijection completion.
    pub leak: f64,
    pub per_level: Vec<LevelReport>,
}

/// Permutation together with its report.
#[derive(Debug, Clone)]
pub struct Rearrangement {
    pub perm: MeshPermutation,
    pub report: RearrangeReport,
}

/// Keeps the `m` cubes with the largest overlap (ties by index), returned in
/// lexicographic order.
fn trim(mut cubes: Vec<(CubeIndex, f64)>, m: usize) -> Vec<CubeIndex> {
    cubes.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut kept: Vec<CubeIndex> = cubes.into_iter().take(m).map(|c| c.0).collect();
    kept.sort();
    kept
}

/// Builds `F` with `ρ0 ∘ F ≈ ρ1` on the mesh of size `config.h`.
///
/// Fails with `NotEquivalent` when a band volume differs by more than the
/// volume tolerance.
pub fn build_permutation(
    rho0: &DensityField,
    rho1: &DensityField,
    mesh: &Mesh,
    config: &RearrangeConfig,
) -> Result<Rearrangement> {
    config.validate()?;
    if rho0.space() != rho1.space() || rho0.space() != &mesh.space {
        return input("densities and mesh live on different spaces");
    }
    if (mesh.h - config.h).abs() > 1e-12 * config.h {
        return input("mesh size differs from the configured h");
    }
    let eta = config.eta();
    let levels = quantization_levels(config.upper, config.n_levels);
    let bands = levels.len() - 1;
    let t0 = rho0.truncate(config.a, config.upper)?;
    let t1 = rho1.truncate(config.a, config.upper)?;

    let mut majority: [Vec<Vec<(CubeIndex, f64)>>; 2] = [vec![Vec::new(); bands], vec![Vec::new(); bands]];
    let mut covers = [vec![0usize; bands], vec![0usize; bands]];
    let mut volumes = [vec![0.0; bands], vec![0.0; bands]];
    let cube_volume = mesh.cube_volume();
    for (i, t) in [&t0, &t1].into_iter().enumerate() {
        let cubes = candidates(t, mesh);
        let stats = cube_stats(t, mesh, &cubes, &levels, eta, config.sub, config.mode)?;
        for (c, s) in cubes.iter().zip(&stats) {
            for k in 0..bands {
                volumes[i][k] += s.volume[k] * cube_volume;
                if s.overlap[k] > 0.0 {
                    covers[i][k] += 1;
                }
                if s.overlap[k] > 0.5 {
                    majority[i][k].push((c.clone(), s.overlap[k]));
                }
            }
        }
    }

    let vtol = config.volume_tol();
    for k in 0..bands {
        let diff = (volumes[0][k] - volumes[1][k]).abs();
        if diff > vtol {
            return Err(Error::NotEquivalent(format!(
                "band [{}, {}) volumes differ by {diff:.3e} (tolerance {vtol:.3e})",
                levels[k],
                levels[k + 1]
            )));
        }
    }

    let mut pairs: BTreeMap<CubeIndex, CubeIndex> = BTreeMap::new();
    let mut sources: BTreeSet<CubeIndex> = BTreeSet::new();
    let mut per_level = Vec::new();
    for k in 0..bands {
        let m = majority[0][k].len().min(majority[1][k].len());
        let (maj0, maj1) = (majority[0][k].len(), majority[1][k].len());
        let kept0 = trim(std::mem::take(&mut majority[0][k]), m);
        let kept1 = trim(std::mem::take(&mut majority[1][k]), m);
        for (dst, src) in kept1.into_iter().zip(kept0) {
            let dst = mesh.canonical_index(&dst);
            let src = mesh.canonical_index(&src);
            if pairs.insert(dst.clone(), src.clone()).is_some() || !sources.insert(src) {
                return Err(Error::Invariant(format!("cube {:?} selected in two bands", dst.0)));
            }
        }
        let paired_volume = cube_volume * m as f64;
        if maj0 + maj1 > 0 || volumes[0][k] > 0.0 || volumes[1][k] > 0.0 {
            per_level.push(LevelReport {
                k: k + 1,
                band: (levels[k], levels[k + 1]),
                volume0: volumes[0][k],
                volume1: volumes[1][k],
                cover0: covers[0][k],
                cover1: covers[1][k],
                majority0: maj0,
                majority1: maj1,
                paired: m,
                bookkeeping_gap: (volumes[0][k] - paired_volume).abs().max((volumes[1][k] - paired_volume).abs()),
            });
        }
    }

    // Complete the partial bijection: sources never used as destinations are
    // filled from destinations never used as sources.
    let dests: BTreeSet<CubeIndex> = pairs.keys().cloned().collect();
    let free_dst: Vec<CubeIndex> = sources.difference(&dests).cloned().collect();
    let free_src: Vec<CubeIndex> = dests.difference(&sources).cloned().collect();
    if free_dst.len() != free_src.len() {
        return Err(Error::Invariant("completion sets differ in size".into()));
    }
    let completion: Vec<(CubeIndex, CubeIndex)> = free_dst.into_iter().zip(free_src).collect();
    let all = pairs.clone().into_iter().chain(completion.iter().cloned());
    let perm = MeshPermutation::new(all).map_err(|e| Error::Invariant(format!("pairing is not a bijection: {e}")))?;

    let moved = rho0.permuted(mesh, &perm)?;
    let res = config.quad_res(mesh.d());
    let quad = Quadrature::covering(&[rho0, rho1, &moved], res)?.with_mode(config.mode);
    let lr_error = lr_distance(&moved, rho1, config.r, &quad)?;
    let truncation_error = [
        lr_distance(rho0, &t0, config.r, &quad)?.value,
        lr_distance(rho1, &t1, config.r, &quad)?.value,
    ];
    let quantization_error = [
        lr_distance(&t0.quantize(config.upper, config.n_levels)?, &t0, config.r, &quad)?.value,
        lr_distance(&t1.quantize(config.upper, config.n_levels)?, &t1, config.r, &quad)?.value,
    ];
    let leak = completion_leak(rho0, mesh, &completion, config)?;
    if !lr_error.value.is_finite() {
        return Err(Error::Numeric("rearrangement error is not finite".into()));
    }
    let report = RearrangeReport {
        h: mesh.h,
        eta,
        n_levels: config.n_levels,
        a: config.a,
        upper: config.upper,
        r: config.r,
        moved_cubes: perm.len(),
        lr_error,
        truncation_error,
        quantization_error,
        leak,
        per_level,
    };
    Ok(Rearrangement { perm, report })
}

/// `(Σ ∫_{C(n)} |ρ0(x + m_ℓ − m_n)|^r)^{1/r}` over completion pairs `n → ℓ`.
fn completion_leak(
    rho0: &DensityField,
    mesh: &Mesh,
    completion: &[(CubeIndex, CubeIndex)],
    config: &RearrangeConfig,
) -> Result<f64> {
    if completion.is_empty() {
        return Ok(0.0);
    }
    let n = 2 * mesh.d();
    let offs = sub_offsets(config.sub);
    let pts = lattice_box(&vec![0; n], &vec![config.sub as i64 - 1; n]);
    let weight = mesh.cube_volume() / pts.len() as f64;
    let parts = map_indexed(config.mode, completion.len(), |c| -> Result<f64> {
        let center = mesh.center(&completion[c].1).to_vec();
        let mut s = 0.0;
        for ix in &pts {
            let x: Vec<f64> = (0..n).map(|i| center[i] + mesh.h * offs[ix[i] as usize]).collect();
            s += rho0.eval(&PhasePoint::from_slice(&x))?.abs().powf(config.r);
        }
        Ok(s * weight)
    });
    let total = parts.into_iter().try_fold(0.0, |acc, v| v.map(|v| acc + v))?;
    Ok(total.powf(1.0 / config.r))
}

/// `‖ρ‖_{Lʳ}` on a covering quadrature, used for relative error reports.
pub fn density_norm(rho: &DensityField, r: f64, res: usize) -> Result<f64> {
    let quad = Quadrature::covering(&[rho], res)?;
    Ok(lr_norm(rho, r, &quad)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::WeightedCube;
    use crate::geometry::{Cube, SpaceSpec};
    use approx::assert_abs_diff_eq;

    fn space() -> SpaceSpec {
        SpaceSpec::euclidean(1).unwrap()
    }

    fn rect(q: (f64, f64), p: (f64, f64), value: f64) -> DensityField {
        DensityField::function(space(), vec![q.0, p.0], vec![q.1, p.1], "rect", move |x: &PhasePoint| {
            if x.q[0] > q.0 && x.q[0] < q.1 && x.p[0] > p.0 && x.p[0] < p.1 {
                value
            } else {
                0.0
            }
        })
        .unwrap()
    }

    fn indicator(q: f64, p: f64, r: f64) -> DensityField {
        DensityField::cubes(
            space(),
            vec![WeightedCube { cube: Cube { center: PhasePoint::new(vec![q], vec![p]), radius: r }, weight: 1.0 }],
        )
        .unwrap()
    }

    #[test]
    fn identical_densities_give_identity() {
        let rho = indicator(0.5, 0.5, 0.5);
        let mesh = Mesh::aligned(space(), 0.25, 10.0).unwrap();
        let cfg = RearrangeConfig::new(0.1, 2.0, 4, 0.25, 0.1);
        let out = build_permutation(&rho, &rho, &mesh, &cfg).unwrap();
        assert!(out.perm.is_identity());
        assert_abs_diff_eq!(out.report.lr_error.value, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn single_cube_translation() {
        let mesh = Mesh::aligned(space(), 0.5, 10.0).unwrap();
        let rho0 = indicator(0.5, 0.5, 0.5);
        let rho1 = indicator(4.5, 0.5, 0.5);
        let cfg = RearrangeConfig::new(0.1, 2.0, 4, 0.5, 0.1);
        let out = build_permutation(&rho0, &rho1, &mesh, &cfg).unwrap();
        let a = mesh.q_index(&[0.5])[0];
        let b = mesh.q_index(&[4.5])[0];
        let pk = mesh.p_index(&[0.5])[0];
        assert_eq!(out.perm.image(&CubeIndex(vec![b, pk])), CubeIndex(vec![a, pk]));
        assert_eq!(out.perm.len(), 2);
        assert_abs_diff_eq!(out.report.lr_error.value, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn disk_cover_volume() {
        let rho = DensityField::function(space(), vec![-1.0, -1.0], vec![1.0, 1.0], "disk", |x: &PhasePoint| {
            if x.q[0] * x.q[0] + x.p[0] * x.p[0] < 0.16 {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let mesh = Mesh::aligned(space(), 0.1, 10.0).unwrap();
        let (j, j_hat) = cover_level(&rho, (0.5, 1.5), &mesh, 0.025, 8).unwrap();
        let vol = j_hat.len() as f64 * mesh.cube_volume();
        let exact = std::f64::consts::PI * 0.16;
        assert!((vol - exact).abs() < 0.2 * exact, "{vol} vs {exact}");
        assert!(j.len() >= j_hat.len());
    }

    #[test]
    fn cover_rejects_zero_band() {
        let rho = indicator(0.0, 0.0, 0.5);
        let mesh = Mesh::aligned(space(), 0.25, 10.0).unwrap();
        assert!(matches!(cover_level(&rho, (-0.5, 0.5), &mesh, 0.05, 4), Err(Error::Input(_))));
    }

    #[test]
    fn staircase_refinement_is_monotone() {
        // Staircase in q against its reflection.
        let stair = |flip: bool| {
            DensityField::function(space(), vec![-1.0, -1.0], vec![1.0, 1.0], "stair", move |x: &PhasePoint| {
                let q = if flip { -x.q[0] } else { x.q[0] };
                if x.p[0].abs() < 0.67 && q.abs() < 0.63 {
                    if q < 0.02 {
                        1.0
                    } else {
                        2.0
                    }
                } else {
                    0.0
                }
            })
            .unwrap()
        };
        let (rho0, rho1) = (stair(false), stair(true));
        let mut errors = Vec::new();
        for h in [0.2, 0.1, 0.05] {
            let mesh = Mesh::aligned(space(), h, 10.0).unwrap();
            let mut cfg = RearrangeConfig::new(0.5, 2.5, 5, h, 0.5);
            cfg.quad_res = Some(400);
            let out = build_permutation(&rho0, &rho1, &mesh, &cfg).unwrap();
            errors.push(out.report.lr_error.value);
        }
        assert!(errors[1] <= errors[0] * 1.1 && errors[2] <= errors[1] * 1.1, "{errors:?}");
        assert!(errors[2] < 0.5 * errors[0], "{errors:?}");
    }

    #[test]
    fn truncation_error_of_abs() {
        let e = crate::symbolic::parse_expr("q1^2", 1).unwrap();
        let rho = DensityField::expr(space(), e, vec![-1.0, -0.5], vec![1.0, 0.5]).unwrap();
        let quad = Quadrature::new(vec![-1.0, -0.5], vec![1.0, 0.5], 400).unwrap();
        let t = truncate(&rho, 0.25, 0.81).unwrap();
        let err = lr_distance(&rho, &t, 1.0, &quad).unwrap().value;
        // ∫ q² over |q| < 1/2 and over 0.9 < |q| < 1, times the p-width 1.
        let exact = 2.0 * (0.125 / 3.0) + 2.0 * (1.0 - 0.729) / 3.0;
        assert_abs_diff_eq!(err, exact, epsilon = 1e-3);
    }

    #[test]
    fn quantized_slab_bands() {
        let e = crate::symbolic::parse_expr("q1", 1).unwrap();
        let rho = DensityField::expr(space(), e, vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let quad = Quadrature::new(vec![0.0, 0.0], vec![1.0, 1.0], 400).unwrap();
        let qz = quantize(&rho, 1.0, 8, 1.0, &quad).unwrap();
        let sig = crate::density::signature(&qz.density, &[0.25, 0.5, 0.75, 1.0], &quad).unwrap();
        for mass in &sig.level_masses {
            assert_abs_diff_eq!(*mass, 0.25, epsilon = 1e-2);
        }
        // The mean quantization offset is half a level step.
        assert_abs_diff_eq!(qz.error.value, 0.125, epsilon = 1e-3);
    }

    #[test]
    fn non_equivalent_densities_are_rejected() {
        let mesh = Mesh::aligned(space(), 0.25, 10.0).unwrap();
        let rho0 = rect((0.0, 1.0), (0.0, 1.0), 1.0);
        let rho1 = rect((0.0, 1.0), (0.0, 1.0), 2.0);
        let cfg = RearrangeConfig::new(0.5, 2.5, 5, 0.25, 0.1);
        assert!(matches!(build_permutation(&rho0, &rho1, &mesh, &cfg), Err(Error::NotEquivalent(_))));
    }

    #[test]
    fn swapped_rectangles() {
        let mesh = Mesh::aligned(space(), 0.25, 10.0).unwrap();
        let rho0 = rect((-1.5, 0.5), (-0.5, 0.5), 1.0);
        let rho1 = rect((-0.5, 1.5), (-0.5, 0.5), 1.0);
        let cfg = RearrangeConfig::new(0.5, 2.5, 5, 0.25, 0.1);
        let out = build_permutation(&rho0, &rho1, &mesh, &cfg).unwrap();
        assert!(out.report.lr_error.value < 1e-9);
        assert_eq!(out.report.per_level.len(), 1);
        assert_abs_diff_eq!(out.report.per_level[0].bookkeeping_gap, 0.0, epsilon = 1e-12);
    }
}
