use cardiorecon::mesh::marching_cubes;
use cardiorecon::metrics::hausdorff;
use cardiorecon::phantom::{generate, PhantomSpec};
use cardiorecon::registration::{loss_a2s, register, Mode, RegistrationConfig};
use cardiorecon::slicer::{extract_stack, plan_slices, rasterize_stack, SlicePlanConfig};
use cardiorecon::ssa::{correct, SsaConfig};
use cardiorecon::transform::{exp_svf, DeformationField, FieldKind, VelocityField};
use cardiorecon::{build_cardiac_frame, Grid3, Vec3};
use criterion::{criterion_group, criterion_main, Criterion};

fn coarse() -> Grid3 {
    Grid3::centered([48, 48, 48], 4.0, Vec3::zeros()).unwrap()
}

fn field_kernels(c: &mut Criterion) {
    let g = coarse();
    let v = VelocityField::from_fn(g.clone(), |p| Vec3::new((p.y * 0.05).sin() * 3.0, (p.z * 0.04).cos(), 0.0));
    c.bench_function("exp_svf 48^3, 6 squarings", |b| b.iter(|| exp_svf(&v, 6)));

    let atlas = generate(&PhantomSpec::canonical(g.clone())).unwrap().volume;
    let target = generate(&PhantomSpec::from_seed(g.clone(), 5)).unwrap().volume;
    let id = DeformationField::identity(g, FieldKind::Inverse);
    c.bench_function("loss_a2s 48^3", |b| b.iter(|| loss_a2s(&target, &atlas, &id, None).unwrap()));
    c.bench_function("hausdorff LV 48^3", |b| b.iter(|| hausdorff(&target, &atlas, 2).unwrap()));

    let lv: Vec<f32> = atlas.channel(2).to_vec();
    c.bench_function("marching cubes LV 48^3", |b| b.iter(|| marching_cubes(&atlas.grid, &lv, 0.5).unwrap()));
}

fn pipeline_kernels(c: &mut Criterion) {
    let fine = generate(&PhantomSpec::from_seed(Grid3::default_heart(), 4)).unwrap();
    let lm = fine.landmarks;
    let planes = plan_slices(&build_cardiac_frame(lm.mv, lm.tv, lm.apex).unwrap(), &SlicePlanConfig::default()).unwrap();
    let stack = extract_stack(&fine.volume, &planes);
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("ssa correct, 13 slices at 1.25 mm", |b| b.iter(|| correct(&stack, &SsaConfig::default()).unwrap()));

    let g = coarse();
    let atlas = generate(&PhantomSpec::canonical(g.clone())).unwrap().volume;
    let (sparse, mask) = rasterize_stack(&stack, &g);
    let cfg = RegistrationConfig { lambda: 1.0, max_steps: 20, affine_steps: 20, ..Default::default() };
    group.bench_function("sparse registration 48^3, 20+20 steps", |b| {
        b.iter(|| register(&sparse, &atlas, Mode::Sparse, Some(&mask), &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, field_kernels, pipeline_kernels);
criterion_main!(benches);
