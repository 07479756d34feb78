//! Device placement: group every kernel with its source pull tasks using a
//! disjoint set, then bin-pack the groups onto devices with balanced load.
//!
//! Placement runs once per submission. Only PULL and KERNEL nodes are placed;
//! HOST tasks run on any CPU worker and a PUSH implicitly uses its source
//! pull's device. A group's load is the byte volume its pulls would transfer
//! (sizes re-read at execution; placement uses the submission-time estimate).

use std::cmp::Reverse;
use std::collections::BTreeMap;

use crate::error::PlacementError;
use crate::graph::{TaskGraph, TaskKind, Work};

/// Union-find over node indices with path compression and union by rank.
#[derive(Debug, Clone)]
pub struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    pub fn new(len: usize) -> Self {
        DisjointSet { parent: (0..len).collect(), rank: vec![0; len] }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut x = x;
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }

    /// Merges the sets of `a` and `b`; returns false if already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

/// One set of device tasks that must share a device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GpuGroup {
    /// Smallest node index in the group; the deterministic tie-break key.
    pub root: usize,
    /// Node indices, ascending. Only PULL and KERNEL nodes appear.
    pub members: Vec<usize>,
    /// Estimated bytes this group pulls to its device.
    pub load: u64,
}

/// Device assignment for every PULL and KERNEL node of one graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacementResult {
    assignment: BTreeMap<usize, usize>,
    /// Estimated load per device, indexed by device id.
    pub device_loads: Vec<u64>,
}

impl PlacementResult {
    pub fn empty(device_count: usize) -> Self {
        PlacementResult { assignment: BTreeMap::new(), device_loads: vec![0; device_count] }
    }

    /// Device assigned to `node`, if it is a placed (PULL/KERNEL) node.
    pub fn device_of(&self, node: usize) -> Option<usize> {
        self.assignment.get(&node).copied()
    }

    /// `(node index, device id)` pairs in ascending node order.
    pub fn assignments(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.assignment.iter().map(|(&n, &d)| (n, d))
    }

    pub fn placed_count(&self) -> usize {
        self.assignment.len()
    }
}

/// Unions every KERNEL with each of its source pulls. HOST and PUSH nodes are
/// never unioned with anything.
pub fn group_gpu_tasks(graph: &TaskGraph) -> DisjointSet {
    let state = graph.core().read();
    let mut sets = DisjointSet::new(state.nodes.len());
    for (i, node) in state.nodes.iter().enumerate() {
        if node.kind == TaskKind::Kernel {
            for &source in &node.sources {
                sets.union(i, source);
            }
        }
    }
    sets
}

/// Buckets all PULL and KERNEL nodes by their disjoint-set class, with loads
/// from [`estimate_group_load`].
pub fn collect_groups(graph: &TaskGraph, sets: &mut DisjointSet) -> Vec<GpuGroup> {
    let kinds: Vec<TaskKind> = {
        let state = graph.core().read();
        state.nodes.iter().map(|n| n.kind).collect()
    };
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, kind) in kinds.iter().enumerate() {
        if matches!(kind, TaskKind::Pull | TaskKind::Kernel) {
            buckets.entry(sets.find(i)).or_default().push(i);
        }
    }
    buckets
        .into_values()
        .map(|members| {
            let load = estimate_group_load(graph, &members);
            GpuGroup { root: members[0], members, load }
        })
        .collect()
}

/// Default cost: sum of the current byte sizes of the group's pull spans.
/// A span that fails to resolve counts as zero; its real size is re-read when
/// the pull executes.
pub fn estimate_group_load(graph: &TaskGraph, members: &[usize]) -> u64 {
    let state = graph.core().read();
    let mut total = 0u64;
    for &m in members {
        let node = &state.nodes[m];
        let work = node.work.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(Work::Pull(span)) = &*work {
            if let Ok(info) = span.resolve() {
                total += info.byte_len() as u64;
            }
        }
    }
    total
}

/// Longest-processing-time greedy packing: groups in descending load order
/// (ties by lowest root) each go to the least-loaded device (ties by lowest
/// device id).
pub fn pack_groups(
    groups: &[GpuGroup],
    device_count: usize,
) -> Result<PlacementResult, PlacementError> {
    if groups.is_empty() {
        return Ok(PlacementResult::empty(device_count));
    }
    if device_count == 0 {
        return Err(PlacementError::NoDevices {
            gpu_tasks: groups.iter().map(|g| g.members.len()).sum(),
        });
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by_key(|&i| (Reverse(groups[i].load), groups[i].root));

    let mut device_loads = vec![0u64; device_count];
    let mut assignment = BTreeMap::new();
    for i in order {
        let device = device_loads
            .iter()
            .enumerate()
            .min_by_key(|&(id, &load)| (load, id))
            .map(|(id, _)| id)
            .expect("device_count >= 1");
        device_loads[device] += groups[i].load;
        for &m in &groups[i].members {
            assignment.insert(m, device);
        }
    }
    Ok(PlacementResult { assignment, device_loads })
}

/// Full placement with the default byte-volume cost.
pub fn place(graph: &TaskGraph, device_count: usize) -> Result<PlacementResult, PlacementError> {
    place_with_cost(graph, device_count, estimate_group_load)
}

/// Full placement with a caller-supplied group cost function.
pub fn place_with_cost(
    graph: &TaskGraph,
    device_count: usize,
    cost: impl Fn(&TaskGraph, &[usize]) -> u64,
) -> Result<PlacementResult, PlacementError> {
    let mut sets = group_gpu_tasks(graph);
    let mut groups = collect_groups(graph, &mut sets);
    for g in &mut groups {
        g.load = cost(graph, &g.members);
    }
    pack_groups(&groups, device_count)
}
