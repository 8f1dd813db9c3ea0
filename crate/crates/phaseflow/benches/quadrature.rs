use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use phaseflow::density::{lr_distance, DensityField, Quadrature};
use phaseflow::flow::{c0_distance, FlowMap, Profile, SampleBox, Stage};
use phaseflow::{ExecMode, HamExpr, SpaceSpec};

const MODES: [ExecMode; 2] = [ExecMode::Sequential, ExecMode::Parallel];

fn setup() -> (DensityField, DensityField, FlowMap) {
    let space = SpaceSpec::euclidean(1).unwrap();
    let rho = DensityField::function(space, vec![-3.0, -3.0], vec![3.0, 3.0], "gaussian", |x| {
        (-(x.q[0] * x.q[0] + 2.0 * x.p[0] * x.p[0])).exp()
    })
    .unwrap();
    let flow = FlowMap::new(
        space,
        vec![Stage::vertical_shear(Profile::q_expr(HamExpr::cos(vec![1])).unwrap(), 0.6), Stage::drift(1, 0.5)],
    )
    .unwrap();
    let moved = rho.pushforward(&flow).unwrap();
    (rho, moved, flow)
}

fn bench_lr_distance(c: &mut Criterion) {
    let (rho, moved, _) = setup();
    let mut group = c.benchmark_group("lr_distance_512sq");
    for mode in MODES {
        let quad = Quadrature::covering(&[&rho, &moved], 512).unwrap().with_mode(mode);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &quad, |b, q| {
            b.iter(|| black_box(lr_distance(&rho, &moved, 1.0, q).unwrap().value))
        });
    }
    group.finish();
}

fn bench_c0_distance(c: &mut Criterion) {
    let (_, _, flow) = setup();
    let other = flow.inverse();
    let k = SampleBox::cube(1, 2.0);
    let mut group = c.benchmark_group("c0_distance_100k");
    for mode in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &m| {
            b.iter(|| black_box(c0_distance(&flow, &other, &k, 100_000, m).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_lr_distance, bench_c0_distance);
criterion_main!(benches);
