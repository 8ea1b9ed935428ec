use std::hint::black_box;

use capdma_bench::shipped;
use capdma_core::kernel::TaskRole;
use capdma_core::policy::validate_request;
use capdma_core::report::metrics_document;
use capdma_core::sim::{boot_specs, simulate};
use capdma_core::{
    build_mpu_configuration, check_access, create_task, AccessKind, AccessQuery, AddressRange, DmaOperation,
    DmaRequest, Ear, Kernel, Mode, TaskId,
};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn booted(name: &str) -> Kernel {
    let s = shipped(name);
    let mut k = Kernel::new(s.profile.clone(), s.layout);
    for (spec, role) in boot_specs(&s) {
        k.spawn(spec, role, 0);
    }
    k
}

fn mpu(c: &mut Criterion) {
    let k = booted("plc");
    let plc = k.tasks().iter().find(|t| t.name == "plc").unwrap();
    let cfg = build_mpu_configuration(plc, &k.layout, &k.profile).unwrap();
    let mut g = c.benchmark_group("check_access");
    for width in [4u32, 256, 4096] {
        let q = AccessQuery::new(plc.stack_region.base(), width, AccessKind::Write, false);
        g.bench_with_input(BenchmarkId::from_parameter(width), &q, |b, q| {
            b.iter(|| check_access(black_box(&cfg), black_box(q), &k.profile))
        });
    }
    g.finish();
}

fn policy(c: &mut Criterion) {
    let k = booted("plc");
    let modbus = k.tasks().iter().find(|t| t.name == "modbus").unwrap();
    let req = DmaRequest {
        requester: modbus.id,
        peripheral_id: "USART2".into(),
        operation: DmaOperation::Write {
            from: AddressRange::new(modbus.stack_region.base(), 64).unwrap(),
        },
        ear: Ear::None,
    };
    c.bench_function("validate_request", |b| {
        b.iter(|| validate_request(black_box(&req), modbus, &k.profile))
    });
}

fn creation(c: &mut Criterion) {
    let s = shipped("microbench_creation");
    let mut g = c.benchmark_group("create_task");
    for n in [0usize, 4, 8] {
        let mut k = Kernel::new(s.profile.clone(), s.layout);
        for spec in s.tasks.iter().take(n) {
            k.spawn(spec.clone(), TaskRole::User, 0);
        }
        let spec = s.tasks[n.min(s.tasks.len() - 1)].clone();
        let id = TaskId(k.tasks().len() as u32);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| create_task(id, spec.clone(), k.tasks(), &k.profile, &k.layout))
        });
    }
    g.finish();
}

fn runs(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulate");
    g.sample_size(20);
    for mode in [Mode::Dbox, Mode::FmpuCompat] {
        let s = shipped("plc").with_mode(mode);
        g.bench_with_input(BenchmarkId::new("plc", mode), &s, |b, s| b.iter(|| simulate(s.clone(), None)));
    }
    g.finish();

    let t3 = shipped("table3_reconstruction");
    let mut g = c.benchmark_group("metrics");
    g.sample_size(10);
    g.bench_function("table3", |b| b.iter(|| metrics_document(black_box(&t3)).unwrap()));
    g.finish();
}

criterion_group!(benches, mpu, policy, creation, runs);
criterion_main!(benches);
