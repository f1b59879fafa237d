use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use weakloc_bench::cosine;
use weakloc_core::expansion::{cell_eigenvalue, expand};
use weakloc_core::spectral::{dense_eigenvalues, smallest_eigenpairs};

fn cell_problems(c: &mut Criterion) {
    let mut g = c.benchmark_group("cell");
    for mesh in [32, 128] {
        let f = cosine(mesh);
        g.bench_with_input(BenchmarkId::new("expand", mesh), &f, |b, f| {
            b.iter(|| expand(&f.model, &f.cell, &f.v0, 0.0).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("cell_eigenvalue", mesh), &f, |b, f| {
            b.iter(|| cell_eigenvalue(&f.model, &f.cell, &f.v0, black_box(0.05)).unwrap())
        });
    }
    g.finish();
}

fn box_problems(c: &mut Criterion) {
    let f = cosine(16);
    let mut g = c.benchmark_group("box");
    for n in [4, 8, 16] {
        let grid = f.mezincescu_box(0.1, n);
        g.bench_with_input(BenchmarkId::new("assemble", n), &grid, |b, grid| b.iter(|| f.operator(grid, 0.1, 0)));
        let op = f.operator(&grid, 0.1, 0);
        g.bench_with_input(BenchmarkId::new("dense_spectrum", n), &op, |b, op| b.iter(|| dense_eigenvalues(&op.matrix)));
        g.bench_with_input(BenchmarkId::new("ground_pair", n), &op, |b, op| {
            b.iter(|| smallest_eigenpairs(&op.matrix, 1, 1e-10).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, cell_problems, box_problems);
criterion_main!(benches);
