//! End-to-end and component benchmarks for the runtime. Sample counts and
//! measurement windows are kept small so the suite stays quick on modest
//! hardware; raise them locally when hunting regressions.

use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use taskfabric::{placement, BuddyAllocator, Executor, HostBuffer, KernelArg, TaskGraph};
use taskfabric_cli::workloads::{gen_random_dag, gen_saxpy};

fn bench_allocator(c: &mut Criterion) {
    c.bench_function("allocator/churn_64_blocks", |b| {
        b.iter_batched(
            || BuddyAllocator::new(1 << 22).unwrap(),
            |mut pool| {
                let mut offsets = Vec::with_capacity(64);
                for i in 0..64usize {
                    offsets.push(pool.allocate(256 << (i % 5)).unwrap().offset);
                }
                for offset in offsets.into_iter().rev() {
                    pool.deallocate(offset).unwrap();
                }
                black_box(pool.free_blocks().len())
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_graph(c: &mut Criterion) {
    c.bench_function("graph/build_validate_chain_1000", |b| {
        b.iter(|| {
            let graph = TaskGraph::new("chain");
            let mut prev = graph.host(|| {});
            for _ in 1..1000 {
                let next = graph.host(|| {});
                prev.precede([&next]).unwrap();
                prev = next;
            }
            black_box(graph.validate().is_ok())
        })
    });

    let workload = gen_random_dag(400, 0.01, 7, true);
    c.bench_function("graph/dump_dot_random_400", |b| {
        b.iter(|| black_box(workload.graph.dump_dot().len()))
    });
}

fn bench_placement(c: &mut Criterion) {
    let workload = gen_random_dag(400, 0.01, 11, true);
    c.bench_function("placement/place_random_400_on_4", |b| {
        b.iter(|| black_box(placement::place(&workload.graph, 4).unwrap().placed_count()))
    });
}

fn bench_executor(c: &mut Criterion) {
    let mut group = c.benchmark_group("executor");

    let fanout = TaskGraph::new("fanout");
    for _ in 0..256 {
        fanout.host(|| {});
    }
    let cpu_executor = Executor::new(4, 0).unwrap();
    group.bench_function("fanout_256_hosts_4_workers", |b| {
        b.iter(|| cpu_executor.run(&fanout).wait().unwrap())
    });

    let data = HostBuffer::<f32>::filled(1024, 1.0);
    let chain = TaskGraph::new("device_chain");
    let host = chain.host(|| {});
    let pull = chain.pull(&data);
    let kernel = chain
        .kernel(
            |_, args| {
                let view = args.buffer(0);
                let first: f32 = view.read(0);
                view.write(0, first + 1.0);
            },
            [KernelArg::from(&pull)],
        )
        .unwrap();
    let push = chain.push(&pull, &data).unwrap();
    host.precede([&pull]).unwrap();
    pull.precede([&kernel]).unwrap();
    kernel.precede([&push]).unwrap();

    let device_executor = Executor::new(2, 1).unwrap();
    group.bench_function("device_chain_run_n_10", |b| {
        b.iter(|| device_executor.run_n(&chain, 10).wait().unwrap())
    });

    let saxpy = gen_saxpy(4096, 0);
    group.bench_function("saxpy_4096", |b| {
        b.iter(|| device_executor.run(&saxpy.graph).wait().unwrap())
    });
    group.finish();
}

fn short_runs() -> Criterion {
    Criterion::default()
        .sample_size(10)
        .warm_up_time(Duration::from_millis(200))
        .measurement_time(Duration::from_millis(600))
}

criterion_group! {
    name = benches;
    config = short_runs();
    targets = bench_allocator, bench_graph, bench_placement, bench_executor
}
criterion_main!(benches);
