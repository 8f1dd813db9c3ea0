use std::fs::{self, File};
use std::path::Path;
use std::sync::Arc;

use phaseflow::compiler::{compile, CompileOptions};
use phaseflow::density::{compare_signatures, l1_distance_with_tails, lr_norm, signature, DensityField, Quadrature};
use phaseflow::ensemble::{lie_rank_check, steer, verify_plan, EnsembleState};
use phaseflow::flow::{integrate, FlowMap, SampleBox, Stage};
use phaseflow::geometry::MeshDocument;
use phaseflow::rearrange::{build_permutation, RearrangeConfig};
use phaseflow::symbolic::parse_expr;
use phaseflow::synthesis::{
    bracket_schedule, ladder, lie_product, oscillator, potential_kick, reverse_drift_euclidean, synthesis_error, Builder,
    SynthesisResult, OSCILLATOR_PERIOD,
};
use phaseflow::systems::{euclidean_preset, torus_preset, ControlSchedule, MechanicalSystem, Potential, Segment, SystemConfig};
use phaseflow::{Error, ExecMode, Mesh, PhasePoint, Result, SpaceSpec};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;

use crate::inputs::{random_point, resolve, rng, DensitySpec};
use crate::report::{Check, Report};

/// Shared command context.
pub struct Ctx<'a> {
    pub base_dir: &'a Path,
    pub out: Option<&'a Path>,
    pub seed: u64,
    pub tol: Option<f64>,
}

impl Ctx<'_> {
    fn tol(&self, default: f64) -> f64 {
        self.tol.unwrap_or(default)
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        if let Some(dir) = self.out {
            fs::write(dir.join(name), contents)?;
        }
        Ok(())
    }

    fn create(&self, name: &str) -> Result<Option<File>> {
        Ok(match self.out {
            Some(dir) => Some(File::create(dir.join(name))?),
            None => None,
        })
    }
}

pub fn parse<T: DeserializeOwned>(text: &str) -> Result<T> {
    Ok(serde_json::from_str(text)?)
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json value serializes");
    s.push('\n');
    s
}

fn default_dt() -> f64 {
    1e-3
}

fn default_samples() -> usize {
    100
}

fn default_radius() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ScheduleSource {
    Path(String),
    Segments(Vec<Segment>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    system: SystemConfig,
    schedule: ScheduleSource,
    x0: PhasePoint,
    #[serde(default = "default_dt")]
    dt: f64,
    /// Random points for the invariant checks.
    #[serde(default = "default_samples")]
    samples: usize,
    #[serde(default = "default_radius")]
    sample_radius: f64,
    /// Energy-drift tolerance for single-segment schedules.
    #[serde(default)]
    energy_tol: Option<f64>,
}

pub fn simulate(cfg: SimulateConfig, ctx: &Ctx) -> Result<Report> {
    let sys = Arc::new(cfg.system.build()?);
    let sched = match &cfg.schedule {
        ScheduleSource::Path(p) => ControlSchedule::from_csv(File::open(resolve(ctx.base_dir, Path::new(p)))?)?,
        ScheduleSource::Segments(s) => ControlSchedule::new(s.clone())?,
    };
    sched.check_controls(sys.m())?;
    let (end, traj) = integrate(&sys, &sched, &cfg.x0, cfg.dt, true)?;
    let flow = FlowMap::new(sys.space, vec![Stage::schedule(sys.clone(), sched.clone(), cfg.dt)?])?;

    let mut r = rng(ctx.seed);
    let mut pts = vec![cfg.x0.clone()];
    pts.extend((0..cfg.samples).map(|_| random_point(&mut r, &sys.space, cfg.sample_radius)));
    let (mut det_dev, mut defect) = (0.0f64, 0.0f64);
    for x in &pts {
        det_dev = det_dev.max((flow.jacobian_det(x)? - 1.0).abs());
        defect = defect.max(flow.symplectic_defect(x)?);
    }
    let tol = ctx.tol(1e-6);
    let mut rep = Report::new("simulate", ctx.seed);
    rep.push(Check::at_most("jacobian_det_deviation", det_dev, tol));
    rep.push(Check::at_most("symplectic_defect", defect, tol));
    if let [seg] = sched.segments() {
        let h = sys.frozen_hamiltonian(&seg.u)?;
        let e0 = h.value(&traj[0].1);
        let drift = traj.iter().map(|(_, x)| (h.value(x) - e0).abs()).fold(0.0, f64::max);
        rep.push(Check::at_most("energy_drift", drift, cfg.energy_tol.unwrap_or(1e-4)));
    }
    rep.detail("final", json!(end));
    rep.detail("total_duration", json!(sched.total_duration()));
    rep.detail("samples", json!(pts.len()));

    if let Some(f) = ctx.create("trajectory.csv")? {
        let d = sys.d();
        let mut w = csv::Writer::from_writer(f);
        let mut head = vec!["t".to_string()];
        head.extend((1..=d).map(|i| format!("q{i}")));
        head.extend((1..=d).map(|i| format!("p{i}")));
        w.write_record(&head)?;
        for (t, x) in &traj {
            let mut row = vec![format!("{t:?}")];
            row.extend(x.to_vec().iter().map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    Ok(rep)
}

fn default_quad_res() -> usize {
    512
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    compile: CompileOptions,
    #[serde(default = "default_quad_res")]
    quad_res: usize,
    /// L¹ tolerance of the compiled transport.
    tol: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RearrangeCmd {
    space: SpaceSpec,
    rho0: DensitySpec,
    rho1: DensitySpec,
    p_box: f64,
    #[serde(default)]
    anchor: Option<Vec<f64>>,
    params: RearrangeConfig,
    /// Compiles the permutation and measures the transported density.
    #[serde(default)]
    pipeline: Option<PipelineConfig>,
}

/// Midpoint box over both supports, nudged off any lattice the data may be
/// aligned with.
fn offset_quadrature(a: &DensityField, b: &DensityField, res: usize, mode: ExecMode) -> Result<Quadrature> {
    let q = Quadrature::covering(&[a, b], res)?;
    let lo = q.lo.iter().zip(&q.hi).map(|(l, h)| l - 0.0137 * (h - l)).collect();
    let hi = q.lo.iter().zip(&q.hi).map(|(l, h)| h + 0.0171 * (h - l)).collect();
    Ok(Quadrature::new(lo, hi, res)?.with_mode(mode))
}

pub fn rearrange(cfg: RearrangeCmd, ctx: &Ctx) -> Result<Report> {
    let space = SpaceSpec::new(cfg.space.kind, cfg.space.d)?;
    let rho0 = cfg.rho0.build(space, ctx.base_dir)?;
    let rho1 = cfg.rho1.build(space, ctx.base_dir)?;
    let h = cfg.params.h;
    let mesh = match &cfg.anchor {
        Some(a) => Mesh::new(space, h, a.clone(), cfg.p_box)?,
        None => Mesh::aligned(space, h, cfg.p_box)?,
    };
    let found = build_permutation(&rho0, &rho1, &mesh, &cfg.params)?;
    let mut rep = Report::new("rearrange", ctx.seed);
    let doc = MeshDocument::from_parts(&mesh, &found.perm);
    ctx.write("permutation.json", &pretty(&serde_json::to_value(&doc)?))?;
    rep.detail("rearrangement", serde_json::to_value(&found.report)?);
    match &cfg.pipeline {
        None => rep.push(Check::at_most("permutation_lr_error", found.report.lr_error.value, ctx.tol(cfg.params.tol))),
        Some(p) => {
            rep.push(Check::at_most("permutation_lr_error", found.report.lr_error.value, cfg.params.tol));
            let seq = compile(&mesh, &found.perm, &p.compile)?;
            let moved = rho0.pushforward(&seq.flow)?;
            let mode = cfg.params.mode;
            let m0 = lr_norm(&rho0, 1.0, &Quadrature::covering(&[&rho0], p.quad_res)?.with_mode(mode))?.value;
            let m1 = lr_norm(&rho1, 1.0, &Quadrature::covering(&[&rho1], p.quad_res)?.with_mode(mode))?.value;
            let quad = offset_quadrature(&rho0, &rho1, p.quad_res, mode)?;
            let l1 = l1_distance_with_tails(&moved, &rho1, m0, m1, &quad)?;
            rep.push(Check::at_most("compiled_l1_error", l1, ctx.tol(p.tol)));
            rep.detail("compiled", json!({"steps": seq.len(), "eta": seq.eta, "total_time": seq.total_time()}));
            ctx.write("sequence.json", &pretty(&seq.to_json()))?;
        }
    }
    Ok(rep)
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum MeshSource {
    Path(String),
    Inline(MeshDocument),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompileCmd {
    mesh: MeshSource,
    #[serde(default)]
    options: CompileOptions,
    #[serde(default = "default_samples")]
    samples: usize,
}

pub fn compile_perm(cfg: CompileCmd, ctx: &Ctx) -> Result<Report> {
    let doc: MeshDocument = match cfg.mesh {
        MeshSource::Path(p) => serde_json::from_reader(File::open(resolve(ctx.base_dir, Path::new(&p)))?)?,
        MeshSource::Inline(d) => d,
    };
    let (mesh, perm) = doc.into_parts()?;
    let seq = compile(&mesh, &perm, &cfg.options)?;
    let fidelity = seq.verify(&mesh, &perm, &[])?;
    let extent = perm
        .support()
        .flat_map(|n| mesh.center(n).to_vec())
        .fold(mesh.p_box, |m: f64, v| m.max(v.abs()))
        + mesh.h;
    let mut r = rng(ctx.seed);
    let mut det_dev: f64 = 0.0;
    for _ in 0..cfg.samples {
        let x = random_point(&mut r, &mesh.space, extent);
        det_dev = det_dev.max((seq.flow.jacobian_det(&x)? - 1.0).abs());
    }
    let tol = ctx.tol(1e-9);
    let mut rep = Report::new("compile-perm", ctx.seed);
    rep.push(Check::at_most("cube_fidelity", fidelity, tol));
    rep.push(Check::at_most("jacobian_det_deviation", det_dev, tol));
    rep.detail("steps", json!(seq.len()));
    rep.detail("moved_cubes", json!(perm.len()));
    rep.detail("total_time", json!(seq.total_time()));
    ctx.write("sequence.json", &pretty(&seq.to_json()))?;
    Ok(rep)
}

fn default_ratio() -> f64 {
    0.6
}

fn default_d() -> usize {
    1
}

fn default_synth_samples() -> usize {
    200
}

/// Named construction with its parameters.
#[derive(Debug, Deserialize)]
#[serde(tag = "construction", rename_all = "snake_case")]
pub enum Construction {
    /// Ladder over the kick duration `σ` with step `σ/10`; `j` is 1-based.
    PotentialKick { j: usize, s: f64, ladder: Vec<f64>, system: Option<SystemConfig> },
    /// Kick by the q-expression `f` against the drift, over `n`.
    LieProduct {
        #[serde(default = "default_d")]
        d: usize,
        f: String,
        ladder: Vec<f64>,
    },
    /// `f` is `"dilation"` or a q-expression kick; `g` is a q-expression
    /// kick or the drift when absent. Ladder over `τ`.
    Bracket {
        #[serde(default = "default_d")]
        d: usize,
        f: String,
        g: Option<String>,
        ladder: Vec<f64>,
    },
    ReverseDrift {
        #[serde(default = "default_d")]
        d: usize,
        w: f64,
        tau: f64,
    },
    /// Whole oscillator periods, compared with the identity.
    Oscillator {
        #[serde(default = "default_d")]
        d: usize,
        periods: u32,
    },
}

#[derive(Debug, Deserialize)]
pub struct SynthCmd {
    #[serde(flatten)]
    construction: Construction,
    #[serde(default = "default_dt")]
    dt: f64,
    #[serde(default = "default_synth_samples")]
    samples: usize,
    #[serde(default = "default_radius")]
    box_radius: f64,
    #[serde(default = "default_ratio")]
    ratio_tol: f64,
}

fn q_kick(space: SpaceSpec, src: &str) -> Result<phaseflow::HamExpr> {
    let e = parse_expr(src, space.d)?;
    if e.depends_on_p() {
        return Err(Error::Input(format!("kick generator '{src}' depends on p")));
    }
    Ok(e)
}

pub fn synth(cfg: SynthCmd, ctx: &Ctx) -> Result<Report> {
    let mode = ExecMode::default();
    let mut rep = Report::new("synth", ctx.seed);
    let dt = cfg.dt;
    let finest: SynthesisResult = match &cfg.construction {
        Construction::PotentialKick { j, s, ladder: params, system } => {
            let sys = Arc::new(match system {
                Some(c) => c.build()?,
                None => euclidean_preset(1, Potential::zero(1))?,
            });
            if *j == 0 {
                return Err(Error::Input("control index j is 1-based".into()));
            }
            let k = SampleBox::cube(sys.d(), cfg.box_radius);
            let build = |sigma: f64| potential_kick(&sys, j - 1, *s, sigma, sigma / 10.0);
            let l = ladder(params, &build, &k, cfg.samples, dt, mode)?;
            rep.push(Check::at_most("max_ratio", l.max_ratio(), cfg.ratio_tol));
            rep.detail("ladder", serde_json::to_value(&l)?);
            build(*params.last().ok_or_else(|| Error::Input("ladder is empty".into()))?)?
        }
        Construction::LieProduct { d, f, ladder: params } => {
            let space = SpaceSpec::euclidean(*d)?;
            let fe = q_kick(space, f)?;
            let fb: &Builder = &|l| SynthesisResult::kick(space, &fe, l);
            let gb: &Builder = &|l| SynthesisResult::exact_drift(space, l);
            let build = |n: f64| lie_product(fb, gb, n as usize);
            let l = ladder(params, &build, &SampleBox::cube(*d, cfg.box_radius), cfg.samples, dt, mode)?;
            rep.push(Check::at_most("max_ratio", l.max_ratio(), cfg.ratio_tol));
            rep.detail("ladder", serde_json::to_value(&l)?);
            build(*params.last().ok_or_else(|| Error::Input("ladder is empty".into()))?)?
        }
        Construction::Bracket { d, f, g, ladder: params } => {
            let space = SpaceSpec::euclidean(*d)?;
            let fe = if f == "dilation" { None } else { Some(q_kick(space, f)?) };
            let ge = g.as_deref().map(|g| q_kick(space, g)).transpose()?;
            let fb: &Builder = &|l| match &fe {
                None => SynthesisResult::dilation(space, l),
                Some(e) => SynthesisResult::kick(space, e, l),
            };
            let gb: &Builder = &|l| match &ge {
                None => SynthesisResult::exact_drift(space, l),
                Some(e) => SynthesisResult::kick(space, e, l),
            };
            let build = |tau: f64| bracket_schedule(fb, gb, tau);
            let l = ladder(params, &build, &SampleBox::cube(*d, cfg.box_radius), cfg.samples, dt, mode)?;
            rep.push(Check::at_most("max_ratio", l.max_ratio(), cfg.ratio_tol));
            rep.detail("ladder", serde_json::to_value(&l)?);
            build(*params.last().ok_or_else(|| Error::Input("ladder is empty".into()))?)?
        }
        Construction::ReverseDrift { d, w, tau } => {
            let sys = Arc::new(euclidean_preset(*d, Potential::zero(*d))?);
            let res = reverse_drift_euclidean(&sys, *w, *tau, dt)?;
            let target = FlowMap::new(sys.space, vec![Stage::drift(*d, *w)])?;
            let e = synthesis_error(&res, &target, &SampleBox::cube(*d, cfg.box_radius), cfg.samples, mode)?;
            rep.push(Check::at_most("c0_error", e.error, ctx.tol(1e-8)));
            res
        }
        Construction::Oscillator { d, periods } => {
            let space = SpaceSpec::euclidean(*d)?;
            let res = oscillator(*d, *periods as f64 * OSCILLATOR_PERIOD, dt)?;
            let e = synthesis_error(&res, &FlowMap::identity(space), &SampleBox::cube(*d, cfg.box_radius), cfg.samples, mode)?;
            rep.push(Check::at_most("c0_error", e.error, ctx.tol(1e-8)));
            res
        }
    };
    rep.detail("result", finest.describe());
    rep.detail("total_time", json!(finest.total_time()));
    if let (Some(sched), Some(f)) = (finest.schedule_only(), ctx.create("schedule.csv")?) {
        sched.to_csv(f)?;
    }
    Ok(rep)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomEnsemble {
    n: usize,
    #[serde(default = "default_radius")]
    radius: f64,
}

fn default_tau() -> f64 {
    0.05
}

fn default_delta() -> f64 {
    0.025
}

fn default_budget() -> f64 {
    0.1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteerCmd {
    space: SpaceSpec,
    #[serde(default)]
    start: Option<Vec<PhasePoint>>,
    #[serde(default)]
    target: Option<Vec<PhasePoint>>,
    /// Seeded ensembles replacing any missing `start` or `target`.
    #[serde(default)]
    random: Option<RandomEnsemble>,
    #[serde(default = "default_tau")]
    tau: f64,
    #[serde(default = "default_delta")]
    delta_max: f64,
    #[serde(default = "default_budget")]
    time_budget: f64,
}

pub fn steer_cmd(cfg: SteerCmd, ctx: &Ctx) -> Result<Report> {
    let space = SpaceSpec::new(cfg.space.kind, cfg.space.d)?;
    let mut r = rng(ctx.seed);
    let mut draw = |given: Option<Vec<PhasePoint>>| -> Result<EnsembleState> {
        match (given, &cfg.random) {
            (Some(pts), _) => EnsembleState::new(&space, pts),
            (None, Some(re)) => EnsembleState::new(&space, (0..re.n).map(|_| random_point(&mut r, &space, re.radius)).collect()),
            (None, None) => Err(Error::Input("ensemble needs explicit points or a random spec".into())),
        }
    };
    let start = draw(cfg.start)?;
    let target = draw(cfg.target)?;
    let plan = steer(&space, &start, &target, cfg.tau, cfg.delta_max)?;
    let rows = verify_plan(&plan, &start, &target)?;
    let sys: MechanicalSystem = if space.is_torus() {
        torus_preset(space.d, Potential::zero(space.d))?
    } else {
        euclidean_preset(space.d, Potential::zero(space.d))?
    };
    let rank = lie_rank_check(&sys, &start)?;
    let worst = rows.iter().map(|row| row.error).fold(0.0, f64::max);
    let mut rep = Report::new("steer", ctx.seed);
    rep.push(Check::at_most("endpoint_error", worst, ctx.tol(1e-12)));
    rep.push(Check::at_most("total_time", plan.total_time(), cfg.time_budget));
    rep.push(Check::at_least("lie_rank", rank.rank as f64, rank.dim as f64));
    rep.push(Check::at_least("smallest_singular_value", rank.smallest, 1e-3));
    rep.detail("start", json!(start.points));
    rep.detail("target", json!(target.points));
    rep.detail("rank", serde_json::to_value(&rank)?);
    ctx.write("plan.json", &pretty(&plan.describe()))?;
    if let Some(f) = ctx.create("endpoints.csv")? {
        let d = space.d;
        let mut w = csv::Writer::from_writer(f);
        let mut head = vec!["i".to_string()];
        for tag in ["target", "achieved"] {
            head.extend((1..=d).map(|k| format!("{tag}_q{k}")));
            head.extend((1..=d).map(|k| format!("{tag}_p{k}")));
        }
        head.push("error".into());
        w.write_record(&head)?;
        for row in &rows {
            let mut rec = vec![row.i.to_string()];
            rec.extend(row.target.to_vec().iter().map(|v| format!("{v:?}")));
            rec.extend(row.achieved.to_vec().iter().map(|v| format!("{v:?}")));
            rec.push(format!("{:?}", row.error));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    Ok(rep)
}

fn default_orbit_res() -> usize {
    256
}

fn default_cells() -> f64 {
    2.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitCmd {
    space: SpaceSpec,
    a: DensitySpec,
    b: DensitySpec,
    levels: Vec<f64>,
    #[serde(default = "default_orbit_res")]
    res: usize,
    /// Tolerance in quadrature cell volumes.
    #[serde(default = "default_cells")]
    tol_cells: f64,
}

pub fn verify_orbit(cfg: OrbitCmd, ctx: &Ctx) -> Result<Report> {
    let space = SpaceSpec::new(cfg.space.kind, cfg.space.d)?;
    let a = cfg.a.build(space, ctx.base_dir)?;
    let b = cfg.b.build(space, ctx.base_dir)?;
    let quad = Quadrature::covering(&[&a, &b], cfg.res)?;
    let sa = signature(&a, &cfg.levels, &quad)?;
    let sb = signature(&b, &cfg.levels, &quad)?;
    let tol = ctx.tol(cfg.tol_cells) * quad.cell_volume();
    let cmp = compare_signatures(&sa, &sb, tol)?;
    let mut rep = Report::new("verify-orbit", ctx.seed);
    rep.push(Check::at_most("signature_difference", cmp.max_difference, tol));
    rep.verdict = if cmp.matched { "match" } else { "mismatch" }.to_string();
    rep.detail("comparison", serde_json::to_value(&cmp)?);
    rep.detail("signature_a", serde_json::to_value(&sa)?);
    rep.detail("signature_b", serde_json::to_value(&sb)?);
    Ok(rep)
}
