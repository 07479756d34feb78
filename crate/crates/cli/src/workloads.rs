//! Synthetic workload generators.
//!
//! Each generator returns a [`Workload`]: a task graph plus an independent
//! correctness oracle (closed-form arithmetic or a sequential reference run
//! of the same stage functions). A report counts as a success only when the
//! oracle passes after every run.

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use taskfabric::{HostBuffer, KernelArg, TaskGraph, TaskKind};

/// Which synthetic workload to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkloadKind {
    Saxpy,
    Views,
    Iterative,
    RandomDag,
}

/// Full description of a workload. Identical specs produce identical graphs:
/// same node names, same edges, same payload shapes.
#[derive(Debug, Clone, Serialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    /// Vector length for `saxpy`.
    pub n: usize,
    /// Branch count for `views`.
    pub views: usize,
    /// Stage count for `iterative`.
    pub iterations: usize,
    /// Node count for `random-dag`.
    pub nodes: usize,
    /// Edge density in [0,1] for `random-dag`.
    pub density: f64,
    pub seed: u64,
    /// Simulated device busy time per kernel, in microseconds.
    pub work_units: u64,
    /// Whether `random-dag` may generate device tasks; disabled when the
    /// executor has no devices.
    pub gpu_tasks: bool,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            kind: WorkloadKind::Saxpy,
            n: 65536,
            views: 64,
            iterations: 5,
            nodes: 1000,
            density: 0.01,
            seed: 42,
            work_units: 0,
            gpu_tasks: true,
        }
    }
}

/// A generated graph together with its correctness oracle.
pub struct Workload {
    pub graph: TaskGraph,
    oracle: Box<dyn Fn() -> Result<(), String> + Send>,
}

impl Workload {
    /// Checks the workload-specific oracle against the state left by the
    /// most recent completed run.
    pub fn verify(&self) -> Result<(), String> {
        (self.oracle)()
    }
}

pub fn build(spec: &WorkloadSpec) -> Workload {
    match spec.kind {
        WorkloadKind::Saxpy => gen_saxpy(spec.n, spec.work_units),
        WorkloadKind::Views => gen_views(spec.views, spec.work_units),
        WorkloadKind::Iterative => gen_iterative(spec.iterations, spec.work_units),
        WorkloadKind::RandomDag => {
            gen_random_dag(spec.nodes, spec.density, spec.seed, spec.gpu_tasks)
        }
    }
}

fn busy(work_units: u64) {
    if work_units > 0 {
        std::thread::sleep(Duration::from_micros(work_units));
    }
}

/// The classic seven-task example: two host fills feed two pulls, one kernel
/// computes `y[i] = a·x[i] + y[i]` with `a = 2` over `x = 1, y = 2`, and two
/// pushes copy both vectors back. Expected outcome: every `y` is 4 and every
/// `x` is untouched at 1.
pub fn gen_saxpy(n: usize, work_units: u64) -> Workload {
    let x = HostBuffer::<i32>::new();
    let y = HostBuffer::<i32>::new();

    let graph = TaskGraph::new("saxpy");
    let host_x = {
        let x = x.clone();
        graph
            .host(move || {
                x.update(|v| {
                    v.clear();
                    v.resize(n, 1);
                })
            })
            .named("host_x")
    };
    let host_y = {
        let y = y.clone();
        graph
            .host(move || {
                y.update(|v| {
                    v.clear();
                    v.resize(n, 2);
                })
            })
            .named("host_y")
    };
    let pull_x = graph.pull(&x).named("pull_x");
    let pull_y = graph.pull(&y).named("pull_y");
    let kernel = graph
        .kernel(
            move |_, args| {
                let n = args.value(0).as_usize();
                let a = args.value(1).as_i64() as i32;
                let x = args.buffer(2);
                let y = args.buffer(3);
                for i in 0..n {
                    y.write::<i32>(i, a * x.read::<i32>(i) + y.read::<i32>(i));
                }
                busy(work_units);
            },
            [
                KernelArg::from(n),
                KernelArg::from(2i64),
                KernelArg::from(&pull_x),
                KernelArg::from(&pull_y),
            ],
        )
        .unwrap()
        .named("saxpy");
    kernel.block_x(256).unwrap().grid_x(((n as u32).max(1) + 255) / 256).unwrap();
    let push_x = graph.push(&pull_x, &x).unwrap().named("push_x");
    let push_y = graph.push(&pull_y, &y).unwrap().named("push_y");

    host_x.precede([&pull_x]).unwrap();
    host_y.precede([&pull_y]).unwrap();
    kernel.succeed([&pull_x, &pull_y]).unwrap();
    kernel.precede([&push_x, &push_y]).unwrap();

    let oracle = move || {
        let xs = x.to_vec();
        let ys = y.to_vec();
        if xs.len() != n || ys.len() != n {
            return Err(format!("expected {} elements, found x={} y={}", n, xs.len(), ys.len()));
        }
        if let Some(i) = xs.iter().position(|&v| v != 1) {
            return Err(format!("x[{i}] = {} (expected 1)", xs[i]));
        }
        if let Some(i) = ys.iter().position(|&v| v != 4) {
            return Err(format!("y[{i}] = {} (expected 4)", ys[i]));
        }
        Ok(())
    };
    Workload { graph, oracle: Box::new(oracle) }
}

/// Elements per view buffer in [`gen_views`].
const VIEW_LEN: usize = 256;

/// Closed-form per-view statistic: Σ (3·((i mod 5)+1) + 7) for i in 0..256.
pub const VIEW_SUM: i64 = 4090;

/// `V` independent branches — host prepare → pull → kernel → push → host
/// reduce — joined by one final combiner that sums every per-view statistic.
/// The kernel applies `y = 3·x + 7` element-wise, so the combined value has
/// the closed form `V × 4090`.
pub fn gen_views(v: usize, work_units: u64) -> Workload {
    let graph = TaskGraph::new("views");
    let stats: Arc<Vec<AtomicI64>> = Arc::new((0..v).map(|_| AtomicI64::new(0)).collect());
    let total = Arc::new(AtomicI64::new(0));

    let combine = {
        let stats = Arc::clone(&stats);
        let total = Arc::clone(&total);
        graph
            .host(move || {
                let sum = stats.iter().map(|s| s.load(Ordering::Acquire)).sum();
                total.store(sum, Ordering::Release);
            })
            .named("combine")
    };

    for view in 0..v {
        let data = HostBuffer::<i64>::new();
        let prepare = {
            let data = data.clone();
            graph
                .host(move || {
                    data.update(|vec| {
                        vec.clear();
                        vec.extend((0..VIEW_LEN).map(|i| (i % 5) as i64 + 1));
                    })
                })
                .named(format!("prepare_{view}"))
        };
        let pull = graph.pull(&data).named(format!("pull_{view}"));
        let kernel = graph
            .kernel(
                move |_, args| {
                    let buf = args.buffer(0);
                    for i in 0..buf.len_as::<i64>() {
                        buf.write::<i64>(i, 3 * buf.read::<i64>(i) + 7);
                    }
                    busy(work_units);
                },
                [KernelArg::from(&pull)],
            )
            .unwrap()
            .named(format!("assess_{view}"));
        let push = graph.push(&pull, &data).unwrap().named(format!("push_{view}"));
        let reduce = {
            let data = data.clone();
            let stats = Arc::clone(&stats);
            graph
                .host(move || {
                    let sum = data.read(|vec| vec.iter().sum());
                    stats[view].store(sum, Ordering::Release);
                })
                .named(format!("reduce_{view}"))
        };

        prepare.precede([&pull]).unwrap();
        pull.precede([&kernel]).unwrap();
        kernel.precede([&push]).unwrap();
        push.precede([&reduce]).unwrap();
        reduce.precede([&combine]).unwrap();
    }

    let expected = v as i64 * VIEW_SUM;
    let oracle = move || {
        let got = total.load(Ordering::Acquire);
        if got == expected {
            Ok(())
        } else {
            Err(format!("combined statistic {got}, expected {expected}"))
        }
    };
    Workload { graph, oracle: Box::new(oracle) }
}

/// State size for [`gen_iterative`].
const ITER_LEN: usize = 512;

// The three stage transforms, shared verbatim by the parallel graph and the
// sequential reference oracle. `mark` is element-wise so the kernel variant
// over a device view is the same arithmetic.

fn mark_value(value: i64, index: usize, stage: i64) -> i64 {
    if value % (stage + 2) == 0 {
        value + 1 + (index as i64 & 3)
    } else {
        value
    }
}

fn partition_stage(vals: &mut [i64]) {
    let len = vals.len();
    for i in 0..len {
        vals[i] = (vals[i] + vals[(i + 1) % len]) % 9973;
    }
}

fn match_stage(vals: &mut [i64], stage: i64) {
    for v in vals.iter_mut() {
        *v = (*v ^ (*v >> 3)).rem_euclid(9973) + stage % 5;
    }
}

fn initial_state() -> Vec<i64> {
    (0..ITER_LEN).map(|i| ((i * i + 3) % 101) as i64).collect()
}

/// `I` chained stages, each: device kernel marking (pull → kernel → push)
/// feeding two host transforms (partition, then match) whose output seeds
/// the next stage's pull. A final host task records the checksum; the oracle
/// replays the same stage functions sequentially.
pub fn gen_iterative(stages: usize, work_units: u64) -> Workload {
    let state = HostBuffer::<i64>::new();
    let checksum = Arc::new(AtomicI64::new(0));

    let graph = TaskGraph::new("iterative");
    let init = {
        let state = state.clone();
        graph
            .host(move || {
                state.update(|vec| *vec = initial_state());
            })
            .named("init")
    };

    let mut tail = init;
    for stage in 0..stages {
        let s = stage as i64;
        let pull = graph.pull(&state).named(format!("pull_{stage}"));
        let kernel = graph
            .kernel(
                move |_, args| {
                    let buf = args.buffer(0);
                    for i in 0..buf.len_as::<i64>() {
                        buf.write::<i64>(i, mark_value(buf.read::<i64>(i), i, s));
                    }
                    busy(work_units);
                },
                [KernelArg::from(&pull)],
            )
            .unwrap()
            .named(format!("mark_{stage}"));
        let push = graph.push(&pull, &state).unwrap().named(format!("push_{stage}"));
        let partition = {
            let state = state.clone();
            graph
                .host(move || state.update(|vec| partition_stage(vec)))
                .named(format!("partition_{stage}"))
        };
        let matcher = {
            let state = state.clone();
            graph
                .host(move || state.update(|vec| match_stage(vec, s)))
                .named(format!("match_{stage}"))
        };

        tail.precede([&pull]).unwrap();
        pull.precede([&kernel]).unwrap();
        kernel.precede([&push]).unwrap();
        push.precede([&partition, &matcher]).unwrap();
        partition.precede([&matcher]).unwrap();
        tail = matcher;
    }
    let verify = {
        let state = state.clone();
        let checksum = Arc::clone(&checksum);
        graph
            .host(move || {
                let sum = state.read(|vec| vec.iter().sum());
                checksum.store(sum, Ordering::Release);
            })
            .named("verify")
    };
    tail.precede([&verify]).unwrap();

    // Sequential reference: the same functions, single-threaded.
    let mut reference = initial_state();
    for stage in 0..stages {
        let s = stage as i64;
        for (i, v) in reference.iter_mut().enumerate() {
            *v = mark_value(*v, i, s);
        }
        partition_stage(&mut reference);
        match_stage(&mut reference, s);
    }
    let expected_sum: i64 = reference.iter().sum();

    let oracle = move || {
        let got = checksum.load(Ordering::Acquire);
        if got != expected_sum {
            return Err(format!("checksum {got}, sequential reference {expected_sum}"));
        }
        let final_state = state.to_vec();
        if final_state != reference {
            return Err("final state diverges from the sequential reference".into());
        }
        Ok(())
    };
    Workload { graph, oracle: Box::new(oracle) }
}

/// Layered random DAG over all four task kinds with valid wiring: every
/// kernel is explicitly preceded by its source pulls and every push by its
/// source pull, plus `density`-scaled random forward edges. Host and kernel
/// payloads append their node index to a shared log; the oracle checks the
/// log against every direct edge between logging nodes.
pub fn gen_random_dag(nodes: usize, density: f64, seed: u64, gpu_tasks: bool) -> Workload {
    assert!((0.0..=1.0).contains(&density), "density must lie in [0, 1]");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let graph = TaskGraph::new("random_dag");
    let log: Arc<Mutex<Vec<usize>>> = Arc::new(Mutex::new(Vec::new()));

    let mut handles = Vec::with_capacity(nodes);
    let mut pulls = Vec::new();
    let mut kinds = Vec::with_capacity(nodes);
    for index in 0..nodes {
        // Node 0 is always a host task so every graph has a loggable root.
        let choice = if index == 0 || !gpu_tasks { 0 } else { rng.random_range(0..100u32) };
        let handle = match choice {
            // 40% host, 25% pull, 20% kernel, 15% push.
            0..40 => {
                let log = Arc::clone(&log);
                kinds.push(TaskKind::Host);
                graph.host(move || log.lock().unwrap().push(index))
            }
            40..65 => {
                let data = HostBuffer::<i64>::filled(16, index as i64);
                kinds.push(TaskKind::Pull);
                let pull = graph.pull(&data);
                pulls.push((pull.clone(), data));
                pull
            }
            65..85 => {
                let sources: Vec<_> = match pulls.len() {
                    0 => Vec::new(),
                    available => {
                        let count = rng.random_range(1..=2usize.min(available));
                        (0..count)
                            .map(|_| pulls[rng.random_range(0..available)].0.clone())
                            .collect()
                    }
                };
                let log = Arc::clone(&log);
                kinds.push(TaskKind::Kernel);
                let kernel = graph
                    .kernel(
                        move |_, _| log.lock().unwrap().push(index),
                        sources.iter().map(KernelArg::from).collect::<Vec<_>>(),
                    )
                    .unwrap();
                // Data-validity wiring: sources must land before the kernel.
                kernel.succeed(sources.iter()).unwrap();
                kernel
            }
            _ if !pulls.is_empty() => {
                let (pull, data) = &pulls[rng.random_range(0..pulls.len())];
                kinds.push(TaskKind::Push);
                let push = graph.push(pull, data).unwrap();
                push.succeed([pull]).unwrap();
                push
            }
            _ => {
                let log = Arc::clone(&log);
                kinds.push(TaskKind::Host);
                graph.host(move || log.lock().unwrap().push(index))
            }
        };
        handles.push(handle);
    }

    // Random forward edges: sample the expected count for the density rather
    // than flipping a coin per pair, so large sparse graphs stay cheap.
    if nodes > 1 {
        let pairs = nodes as f64 * (nodes - 1) as f64 / 2.0;
        let target = (density * pairs).round() as usize;
        for _ in 0..target {
            let a = rng.random_range(0..nodes);
            let b = rng.random_range(0..nodes);
            if a != b {
                let (lo, hi) = (a.min(b), a.max(b));
                handles[lo].precede([&handles[hi]]).unwrap();
            }
        }
    }

    let loggable: Vec<usize> = (0..nodes)
        .filter(|&i| matches!(kinds[i], TaskKind::Host | TaskKind::Kernel))
        .collect();
    let edges = graph.edges();
    let oracle = move || {
        let run_log: Vec<usize> = {
            let mut guard = log.lock().unwrap();
            guard.split_off(0)
        };
        if run_log.len() != loggable.len() {
            return Err(format!(
                "log has {} entries, expected {} host/kernel executions",
                run_log.len(),
                loggable.len()
            ));
        }
        let mut position = vec![usize::MAX; nodes];
        for (at, &node) in run_log.iter().enumerate() {
            if position[node] != usize::MAX {
                return Err(format!("node {node} logged twice"));
            }
            position[node] = at;
        }
        for &(a, b) in &edges {
            if position[a] != usize::MAX
                && position[b] != usize::MAX
                && position[a] >= position[b]
            {
                return Err(format!(
                    "edge {a}->{b} violated: logged at {} and {}",
                    position[a], position[b]
                ));
            }
        }
        Ok(())
    };
    Workload { graph, oracle: Box::new(oracle) }
}
