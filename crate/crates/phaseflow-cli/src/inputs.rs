use std::fs::File;
use std::path::{Path, PathBuf};

use phaseflow::density::{read_grid, DensityField, WeightedCube};
use phaseflow::flow::{FlowMap, Profile, Stage};
use phaseflow::geometry::Cube;
use phaseflow::symbolic::parse_expr;
use phaseflow::{Error, PhasePoint, Result, SpaceSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

/// Weighted open cube `{‖y − (q, p)‖_∞ < radius}`.
#[derive(Debug, Clone, Deserialize)]
pub struct CubeSpec {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub radius: f64,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

/// Density literal in a config file.
#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensitySpec {
    Cubes(Vec<CubeSpec>),
    Expr { expr: String, lo: Vec<f64>, hi: Vec<f64> },
    /// JSON header plus CSV cells, as written by the grid writer.
    Grid { header: PathBuf, csv: PathBuf },
    /// `ρ ∘ Φ` for the listed exact stages.
    Pushforward { base: Box<DensitySpec>, stages: Vec<StageSpec> },
}

/// Exact stage literal; generators are parsed expressions.
#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageSpec {
    VerticalShear { f: String, s: f64 },
    HorizontalShear { g: String, s: f64 },
    Drift { tau: f64 },
    Dilation { s: f64 },
}

impl StageSpec {
    pub fn build(&self, d: usize) -> Result<Stage> {
        match self {
            StageSpec::VerticalShear { f, s } => Ok(Stage::vertical_shear(Profile::q_expr(parse_expr(f, d)?)?, *s)),
            StageSpec::HorizontalShear { g, s } => Ok(Stage::horizontal_shear(Profile::p_expr(parse_expr(g, d)?)?, *s)),
            StageSpec::Drift { tau } => Ok(Stage::drift(d, *tau)),
            StageSpec::Dilation { s } => Stage::dilation(*s),
        }
    }
}

pub fn build_flow(space: SpaceSpec, stages: &[StageSpec]) -> Result<FlowMap> {
    let stages = stages.iter().map(|s| s.build(space.d)).collect::<Result<Vec<_>>>()?;
    FlowMap::new(space, stages)
}

impl DensitySpec {
    pub fn build(&self, space: SpaceSpec, base_dir: &Path) -> Result<DensityField> {
        match self {
            DensitySpec::Cubes(cs) => {
                let cubes = cs
                    .iter()
                    .map(|c| WeightedCube {
                        cube: Cube { center: PhasePoint::new(c.q.clone(), c.p.clone()), radius: c.radius },
                        weight: c.weight,
                    })
                    .collect();
                DensityField::cubes(space, cubes)
            }
            DensitySpec::Expr { expr, lo, hi } => DensityField::expr(space, parse_expr(expr, space.d)?, lo.clone(), hi.clone()),
            DensitySpec::Grid { header, csv } => {
                let (rho, _) = read_grid(File::open(resolve(base_dir, header))?, File::open(resolve(base_dir, csv))?)?;
                if rho.space() != &space {
                    return Err(Error::Input("grid density lives on a different space".into()));
                }
                Ok(rho)
            }
            DensitySpec::Pushforward { base, stages } => base.build(space, base_dir)?.pushforward(&build_flow(space, stages)?),
        }
    }
}

pub fn resolve(base_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

/// Seeded stream shared by every command.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform point of `[−r, r]^{2d}`; torus angles are drawn from `[0, 2π)`.
pub fn random_point(rng: &mut ChaCha8Rng, space: &SpaceSpec, r: f64) -> PhasePoint {
    let d = space.d;
    let q = (0..d)
        .map(|_| if space.is_torus() { rng.random_range(0.0..std::f64::consts::TAU) } else { rng.random_range(-r..r) })
        .collect();
    let p = (0..d).map(|_| rng.random_range(-r..r)).collect();
    PhasePoint::new(q, p)
}
