use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use nalgebra::DMatrix;
use phaseflow::compiler::{compile, CompileOptions};
use phaseflow::density::{lr_distance, lr_norm, DensityField, Quadrature, WeightedCube};
use phaseflow::ensemble::{steer, verify_plan, EnsembleState};
use phaseflow::flow::{FlowMap, Profile, SampleBox, Stage};
use phaseflow::geometry::{sup_distance, wrap_angle, Cube};
use phaseflow::symbolic::{grad_eval, poisson_bracket};
use phaseflow::synthesis::{potential_kick, SynthesisResult};
use phaseflow::systems::{euclidean_preset, torus_preset, ControlSchedule, Potential, Segment};
use phaseflow::{CubeIndex, ExecMode, HamExpr, Mesh, MeshPermutation, PhasePoint, SpaceSpec};
use proptest::prelude::*;

fn pt(v: &[f64]) -> PhasePoint {
    PhasePoint::from_slice(v)
}

fn term(d: usize) -> impl Strategy<Value = HamExpr> {
    (
        -2.0f64..2.0,
        prop::collection::vec(0u32..3, d),
        prop::collection::vec(0u32..3, d),
        prop::option::of((prop::collection::vec(-2i64..3, d), any::<bool>())),
    )
        .prop_map(|(c, a, b, t)| {
            let base = HamExpr::monomial(c, a, b);
            match t {
                Some((k, true)) => base.mul(&HamExpr::cos(k)),
                Some((k, false)) => base.mul(&HamExpr::sin(k)),
                None => base,
            }
        })
}

fn expr(d: usize) -> impl Strategy<Value = HamExpr> {
    prop::collection::vec(term(d), 1..4).prop_map(move |ts| ts.iter().fold(HamExpr::zero(d), |acc, t| acc.add(t)))
}

fn scale_of(es: &[&HamExpr]) -> f64 {
    es.iter().map(|e| e.terms().map(|(_, c)| c.abs()).fold(1.0, f64::max)).product()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn bracket_is_antisymmetric(f in expr(2), g in expr(2)) {
        let s = poisson_bracket(&f, &g).unwrap().add(&poisson_bracket(&g, &f).unwrap());
        prop_assert!(s.approx_eq(&HamExpr::zero(2), 1e-10 * scale_of(&[&f, &g])));
    }

    #[test]
    fn jacobi_identity(f in expr(1), g in expr(1), h in expr(1)) {
        let b = |x: &HamExpr, y: &HamExpr| poisson_bracket(x, y).unwrap();
        let s = b(&f, &b(&g, &h)).add(&b(&g, &b(&h, &f))).add(&b(&h, &b(&f, &g)));
        prop_assert!(s.approx_eq(&HamExpr::zero(1), 1e-9 * scale_of(&[&f, &g, &h])));
    }

    #[test]
    fn leibniz_rule(f in expr(2), g in expr(2), h in expr(2)) {
        let b = |x: &HamExpr, y: &HamExpr| poisson_bracket(x, y).unwrap();
        let lhs = b(&f, &g.mul(&h));
        let rhs = b(&f, &g).mul(&h).add(&g.mul(&b(&f, &h)));
        prop_assert!(lhs.approx_eq(&rhs, 1e-9 * scale_of(&[&f, &g, &h])));
    }

    #[test]
    fn gradient_matches_central_differences(f in expr(2), x in prop::collection::vec(-1.0f64..1.0, 4)) {
        let x = pt(&x);
        let (_, gq, gp) = grad_eval(&f, &x).unwrap();
        let step = 1e-5;
        let bump = |i: usize, s: f64| {
            let mut v = x.to_vec();
            v[i] += s;
            f.eval(&pt(&v))
        };
        for (i, g) in gq.iter().chain(&gp).enumerate() {
            let fd = (bump(i, step) - bump(i, -step)) / (2.0 * step);
            prop_assert!((fd - g).abs() <= 1e-6 * g.abs().max(1.0) * scale_of(&[&f]), "axis {i}: {fd} vs {g}");
        }
    }

    #[test]
    fn wrap_is_idempotent(x in -100.0f64..100.0) {
        let w = wrap_angle(x);
        prop_assert_eq!(wrap_angle(w), w);
        prop_assert!((0.0..TAU).contains(&w));
    }

    #[test]
    fn sup_distance_is_a_metric_on_the_torus(
        a in prop::collection::vec(-10.0f64..10.0, 4),
        b in prop::collection::vec(-10.0f64..10.0, 4),
        c in prop::collection::vec(-10.0f64..10.0, 4),
    ) {
        let s = SpaceSpec::torus(2).unwrap();
        let (a, b, c) = (pt(&a), pt(&b), pt(&c));
        let ab = sup_distance(&a, &b, &s).unwrap();
        prop_assert_eq!(ab, sup_distance(&b, &a, &s).unwrap());
        prop_assert!(ab <= sup_distance(&a, &c, &s).unwrap() + sup_distance(&c, &b, &s).unwrap() + 1e-12);
    }

    #[test]
    fn permutation_inverse_round_trips(shift in 1i64..4, q in -0.99f64..0.99, p in -0.99f64..0.99) {
        let mesh = Mesh::aligned(SpaceSpec::euclidean(1).unwrap(), 0.5, 4.0).unwrap();
        let cubes: Vec<CubeIndex> = (0..4).map(|k| CubeIndex(vec![k, 0])).collect();
        let perm = MeshPermutation::new((0..4).map(|k| (cubes[k].clone(), cubes[(k + shift as usize) % 4].clone()))).unwrap();
        let x = pt(&[0.5 + 0.5 * q, 0.5 + 0.5 * p]);
        let y = perm.apply(&mesh, &x).unwrap();
        let z = perm.inverse().apply(&mesh, &y).unwrap();
        prop_assert!(sup_distance(&x, &z, &mesh.space).unwrap() < 1e-12);
    }

    #[test]
    fn frozen_hamiltonian_is_affine_in_controls(
        u in prop::collection::vec(-1.0f64..1.0, 4),
        v in prop::collection::vec(-1.0f64..1.0, 4),
        x in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        let sys = torus_preset(2, Potential::expr(HamExpr::cos(vec![1, 1])).unwrap()).unwrap();
        let x = pt(&x);
        let uv: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + b).collect();
        let zero = vec![0.0; 4];
        let h = |c: &[f64]| sys.frozen_hamiltonian(c).unwrap().value(&x);
        prop_assert!((h(&zero) - sys.drift().value(&x)).abs() < 1e-14);
        prop_assert!(((h(&uv) - h(&u)) - (h(&v) - h(&zero))).abs() < 1e-12);
    }

    #[test]
    fn schedule_durations_add(a in prop::collection::vec(0.01f64..1.0, 1..5), b in prop::collection::vec(0.01f64..1.0, 1..5)) {
        let mk = |t: &[f64]| ControlSchedule::new(t.iter().map(|&tau| Segment { tau, u: vec![0.0] }).collect()).unwrap();
        let (sa, sb) = (mk(&a), mk(&b));
        prop_assert!((sa.concat(&sb).unwrap().total_duration() - sa.total_duration() - sb.total_duration()).abs() < 1e-12);
    }

    #[test]
    fn shear_and_dilation_group_laws(s in -2.0f64..2.0, t in -2.0f64..2.0, a in 0.2f64..3.0, b in 0.2f64..3.0, x in prop::collection::vec(-1.0f64..1.0, 2)) {
        let space = SpaceSpec::euclidean(1).unwrap();
        let f = Profile::q_expr(HamExpr::monomial(1.0, vec![3], vec![0])).unwrap();
        let x = pt(&x);
        let two = FlowMap::new(space, vec![Stage::vertical_shear(f.clone(), s), Stage::vertical_shear(f.clone(), t)]).unwrap();
        let one = FlowMap::new(space, vec![Stage::vertical_shear(f, s + t)]).unwrap();
        prop_assert!(sup_distance(&two.apply(&x).unwrap(), &one.apply(&x).unwrap(), &space).unwrap() < 1e-12);
        let two = FlowMap::new(space, vec![Stage::dilation(a).unwrap(), Stage::dilation(b).unwrap()]).unwrap();
        let one = FlowMap::new(space, vec![Stage::dilation(a * b).unwrap()]).unwrap();
        prop_assert!(sup_distance(&two.apply(&x).unwrap(), &one.apply(&x).unwrap(), &space).unwrap() < 1e-12);
    }

    #[test]
    fn full_turn_rotation_is_identity_on_certified_points(w in 0.2f64..2.0, r in 0.0f64..0.99, th in 0.0f64..TAU) {
        let space = SpaceSpec::euclidean(1).unwrap();
        let cutoff = phaseflow::fields::CutoffSpec::new(1.0, 1.5).unwrap();
        let st = Stage::harmonic_rotation(&space, pt(&[0.3, -0.2]), w, TAU * w, cutoff).unwrap();
        let x = pt(&[0.3 + r * th.cos(), -0.2 + r * th.sin() / w]);
        let y = FlowMap::new(space, vec![st]).unwrap().apply(&x).unwrap();
        prop_assert!(sup_distance(&x, &y, &space).unwrap() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn schedule_flows_are_symplectic(u in prop::collection::vec(-1.0f64..1.0, 3), x in prop::collection::vec(-1.0f64..1.0, 2)) {
        let sys = Arc::new(euclidean_preset(1, Potential::zero(1)).unwrap());
        let sched = ControlSchedule::new(vec![
            Segment { tau: 0.5, u: vec![u[0], u[1]] },
            Segment { tau: 0.5, u: vec![u[2], -u[0]] },
        ]).unwrap();
        let flow = FlowMap::new(sys.space, vec![Stage::schedule(sys.clone(), sched, 1e-3).unwrap()]).unwrap();
        let (_, j) = flow.tangent(&pt(&x)).unwrap();
        let omega = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        prop_assert!((j.transpose() * &omega * &j - &omega).norm() <= 1e-6);
    }

    #[test]
    fn exact_stages_preserve_lr_norm(c in -0.5f64..0.5, s in -1.0f64..1.0, w in 0.5f64..2.0) {
        let space = SpaceSpec::euclidean(1).unwrap();
        let rho = DensityField::cubes(space, vec![
            WeightedCube { cube: Cube { center: pt(&[c, 0.0]), radius: 0.5 }, weight: w },
            WeightedCube { cube: Cube { center: pt(&[c + 1.0, 0.5]), radius: 0.25 }, weight: 1.0 },
        ]).unwrap();
        let f = Profile::q_expr(HamExpr::harmonic(1)).unwrap();
        let flow = FlowMap::new(space, vec![Stage::vertical_shear(f, s), Stage::drift(1, 0.5)]).unwrap();
        let moved = rho.pushforward(&flow).unwrap();
        let quad = Quadrature::covering(&[&rho, &moved], 256).unwrap();
        let a = lr_norm(&rho, 1.0, &quad).unwrap();
        let b = lr_norm(&moved, 1.0, &quad).unwrap();
        let exact = w + 0.25;
        prop_assert!((a.value - exact).abs() < 0.02 * exact, "{} vs {exact}", a.value);
        prop_assert!((b.value - exact).abs() < 0.02 * exact, "{} vs {exact}", b.value);
    }

    #[test]
    fn lr_distance_triangle_inequality(a in -0.5f64..0.5, b in -0.5f64..0.5, c in -0.5f64..0.5) {
        let space = SpaceSpec::euclidean(1).unwrap();
        let mk = |x: f64| DensityField::cubes(space, vec![WeightedCube { cube: Cube { center: pt(&[x, 0.0]), radius: 0.4 }, weight: 1.0 }]).unwrap();
        let (ra, rb, rc) = (mk(a), mk(b), mk(c));
        let quad = Quadrature::new(vec![-1.0, -1.0], vec![1.0, 1.0], 64).unwrap();
        let d = |x: &DensityField, y: &DensityField| lr_distance(x, y, 1.0, &quad).unwrap().value;
        prop_assert!(d(&ra, &rb) <= d(&ra, &rc) + d(&rc, &rb) + 1e-12);
    }

    #[test]
    fn compiled_permutations_preserve_volume(seed in 0u64..1000, x in prop::collection::vec(-2.0f64..2.0, 2)) {
        let mesh = Mesh::aligned(SpaceSpec::euclidean(1).unwrap(), 0.25, 4.0).unwrap();
        let cubes: Vec<CubeIndex> = (0..3).flat_map(|a| (0..2).map(move |b| CubeIndex(vec![a, b]))).collect();
        let n = cubes.len();
        let shift = 1 + (seed as usize % (n - 1));
        let perm = MeshPermutation::new((0..n).map(|k| (cubes[k].clone(), cubes[(k + shift) % n].clone()))).unwrap();
        let seq = compile(&mesh, &perm, &CompileOptions::default()).unwrap();
        prop_assert!(seq.flow.stages().iter().all(Stage::is_exact));
        prop_assert!((seq.flow.jacobian_det(&pt(&x)).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn concatenated_kicks_obey_the_semigroup_bound(s1 in -1.0f64..1.0, s2 in -1.0f64..1.0, sigma in 1e-3f64..1e-2) {
        let sys = Arc::new(euclidean_preset(1, Potential::zero(1)).unwrap());
        let r1 = potential_kick(&sys, 0, s1, sigma, sigma / 4.0).unwrap();
        let r2 = potential_kick(&sys, 1, s2, sigma, sigma / 4.0).unwrap();
        let (t1, t2) = (r1.exact_target().unwrap(), r2.exact_target().unwrap());
        let both = r1.then(&r2).unwrap().flow().unwrap();
        let exact = t1.then(&t2).unwrap();
        let lip = 1.0 + s2.abs();
        let k = SampleBox::cube(1, 1.0);
        let mut bound: f64 = 0.0;
        let mut e1: f64 = 0.0;
        let mut e2: f64 = 0.0;
        let mut total: f64 = 0.0;
        let f1 = r1.flow().unwrap();
        let f2 = r2.flow().unwrap();
        for x in k.halton(64) {
            let y = f1.apply(&x).unwrap();
            e1 = e1.max(sup_distance(&y, &t1.apply(&x).unwrap(), &sys.space).unwrap());
            e2 = e2.max(sup_distance(&f2.apply(&y).unwrap(), &t2.apply(&y).unwrap(), &sys.space).unwrap());
            total = total.max(sup_distance(&both.apply(&x).unwrap(), &exact.apply(&x).unwrap(), &sys.space).unwrap());
            bound = e1 * lip + e2;
        }
        prop_assert!(total <= bound + 1e-12, "{total} > {bound}");
    }

    #[test]
    fn steering_is_exact_and_relabeling_invariant(
        torus in any::<bool>(),
        raw in prop::collection::vec(-3.0f64..3.0, 24),
        tau in 0.01f64..0.05,
    ) {
        let d = if torus { 1 } else { 2 };
        let space = if torus { SpaceSpec::torus(1).unwrap() } else { SpaceSpec::euclidean(2).unwrap() };
        let take = |o: usize| -> Vec<PhasePoint> {
            (0..3).map(|i| PhasePoint::new(raw[o + 2 * d * i..o + 2 * d * i + d].to_vec(), raw[o + 2 * d * i + d..o + 2 * d * (i + 1)].to_vec())).collect()
        };
        let (a, b) = (EnsembleState::new(&space, take(0)), EnsembleState::new(&space, take(12)));
        prop_assume!(a.is_ok() && b.is_ok(), "ensembles need distinct points");
        let (a, b) = (a.unwrap(), b.unwrap());
        let plan = steer(&space, &a, &b, tau, 0.04).unwrap();
        prop_assert!(plan.total_time() <= 0.1);
        for row in verify_plan(&plan, &a, &b).unwrap() {
            prop_assert!(row.error <= 1e-12, "{row:?}");
        }
        let order = [2, 0, 1];
        let a2 = EnsembleState::new(&space, order.iter().map(|&i| a.points[i].clone()).collect()).unwrap();
        let b2 = EnsembleState::new(&space, order.iter().map(|&i| b.points[i].clone()).collect()).unwrap();
        let plan2 = steer(&space, &a2, &b2, tau, 0.04).unwrap();
        for x in a.points.iter().chain(&SampleBox::cube(d, 2.0).halton(16)) {
            let y1 = plan.flow.apply(x).unwrap();
            let y2 = plan2.flow.apply(x).unwrap();
            prop_assert!(sup_distance(&y1, &y2, &space).unwrap() <= 1e-12);
        }
    }
}

#[test]
fn exact_kick_result_matches_its_oracle() {
    let space = SpaceSpec::torus(1).unwrap();
    let r = SynthesisResult::kick(space, &HamExpr::cos(vec![1]), 0.3).unwrap();
    let e = phaseflow::synthesis::synthesis_error(&r, &r.exact_target().unwrap(), &SampleBox::cube(1, PI), 50, ExecMode::Sequential).unwrap();
    assert_eq!(e.error, 0.0);
}
