//! Random near-uniform partitions of the face surface into patches, computed
//! as a centroidal Voronoi tessellation on the triangle dual graph.
//!
//! Distances are shortest paths in the dual graph with edges weighted by the
//! distance between adjacent triangle centroids. Lloyd iterations alternate a
//! multi-source Dijkstra assignment with a generator update that moves each
//! generator to the patch triangle minimizing the patch energy among the
//! current generator and the triangles closest to the patch's area-weighted
//! centroid, so the energy never increases.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use log::debug;
use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::face_model::FaceMesh;

const MAX_ITERATIONS: usize = 50;
const RECENTER_CANDIDATES: usize = 6;

/// Per-triangle patch labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    pub patch_of: Vec<u32>,
    pub k: usize,
    pub seed: u64,
}

impl Segmentation {
    pub fn single_patch(triangles: usize) -> Self {
        Self {
            patch_of: vec![0; triangles],
            k: 1,
            seed: 0,
        }
    }

    pub fn patch_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &p in &self.patch_of {
            sizes[p as usize] += 1;
        }
        sizes
    }
}

/// Lloyd trace for diagnostics and tests.
#[derive(Debug, Clone)]
pub struct CvtReport {
    pub segmentation: Segmentation,
    /// Energy after each assignment step, before any repair.
    pub energies: Vec<f64>,
    pub iterations: usize,
    pub repairs: usize,
    pub generators: Vec<usize>,
    pub final_energy: f64,
}

/// Triangle dual graph: neighbors across shared edges with centroid
/// distances.
#[derive(Debug, Clone)]
pub struct DualGraph {
    pub adjacency: Vec<Vec<(usize, f64)>>,
    pub centroids: Vec<Vector3<f64>>,
    pub areas: Vec<f64>,
}

impl DualGraph {
    pub fn new(mesh: &FaceMesh) -> Self {
        let centroids = mesh.triangle_centroids();
        let areas = mesh.triangle_areas();
        let mut edges: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (t, tri) in mesh.triangles.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                edges.entry((a.min(b), a.max(b))).or_default().push(t);
            }
        }
        let mut adjacency = vec![Vec::new(); mesh.triangles.len()];
        let mut keys: Vec<_> = edges.keys().copied().collect();
        keys.sort_unstable();
        for key in keys {
            let ts = &edges[&key];
            for (i, &a) in ts.iter().enumerate() {
                for &b in &ts[i + 1..] {
                    let d = (centroids[a] - centroids[b]).norm();
                    adjacency[a].push((b, d));
                    adjacency[b].push((a, d));
                }
            }
        }
        Self {
            adjacency,
            centroids,
            areas,
        }
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    /// Number of connected components among the triangles selected by `keep`.
    pub fn components(&self, keep: impl Fn(usize) -> bool) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.len()];
        let mut out = Vec::new();
        for start in 0..self.len() {
            if seen[start] || !keep(start) {
                continue;
            }
            let mut comp = vec![start];
            seen[start] = true;
            let mut i = 0;
            while i < comp.len() {
                for &(nb, _) in &self.adjacency[comp[i]] {
                    if !seen[nb] && keep(nb) {
                        seen[nb] = true;
                        comp.push(nb);
                    }
                }
                i += 1;
            }
            out.push(comp);
        }
        out
    }
}

#[derive(PartialEq)]
struct Entry {
    dist: f64,
    source: usize,
    node: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then(other.source.cmp(&self.source))
            .then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Multi-source Dijkstra. Returns `(label, distance)` per triangle; ties go
/// to the lower generator index. Unreached triangles keep `usize::MAX`.
fn assign(graph: &DualGraph, generators: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let n = graph.len();
    let mut label = vec![usize::MAX; n];
    let mut dist = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    for (g, &t) in generators.iter().enumerate() {
        heap.push(Entry {
            dist: 0.0,
            source: g,
            node: t,
        });
    }
    while let Some(Entry { dist: d, source, node }) = heap.pop() {
        if label[node] != usize::MAX {
            continue;
        }
        label[node] = source;
        dist[node] = d;
        for &(nb, w) in &graph.adjacency[node] {
            if label[nb] == usize::MAX {
                heap.push(Entry {
                    dist: d + w,
                    source,
                    node: nb,
                });
            }
        }
    }
    (label, dist)
}

/// Area-weighted sum of squared graph distances from each triangle in
/// `members` to `center`.
fn patch_energy(graph: &DualGraph, center: usize, members: &[usize], in_patch: &[bool]) -> f64 {
    let mut remaining = members.len();
    let mut dist = HashMap::new();
    let mut heap = BinaryHeap::new();
    heap.push(Entry {
        dist: 0.0,
        source: 0,
        node: center,
    });
    let mut energy = 0.0;
    while let Some(Entry { dist: d, node, .. }) = heap.pop() {
        if dist.contains_key(&node) {
            continue;
        }
        dist.insert(node, d);
        if in_patch[node] {
            energy += graph.areas[node] * d * d;
            remaining -= 1;
            if remaining == 0 {
                break;
            }
        }
        for &(nb, w) in &graph.adjacency[node] {
            if !dist.contains_key(&nb) {
                heap.push(Entry {
                    dist: d + w,
                    source: 0,
                    node: nb,
                });
            }
        }
    }
    energy
}

fn total_energy(graph: &DualGraph, dist: &[f64]) -> f64 {
    dist.iter().zip(&graph.areas).map(|(d, a)| a * d * d).sum()
}

fn members_by_patch(label: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); k];
    for (t, &l) in label.iter().enumerate() {
        members[l].push(t);
    }
    members
}

/// Lloyd iterations from explicit initial generators (distinct triangle ids).
pub fn cvt_from_generators(graph: &DualGraph, generators: &[usize], seed: u64) -> Result<CvtReport> {
    let n = graph.len();
    let k = generators.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "patch count {k} must be in 1..={n}"
        )));
    }
    if let Some(&g) = generators.iter().find(|&&g| g >= n) {
        return Err(Error::OutOfRange {
            what: "triangles",
            index: g,
            len: n,
        });
    }
    let mut gens = generators.to_vec();
    let (mut label, mut dist) = assign(graph, &gens);
    if label.contains(&usize::MAX) {
        return Err(Error::InvalidArgument(
            "mesh dual graph is disconnected; some triangles are unreachable".into(),
        ));
    }
    let mut energies = vec![total_energy(graph, &dist)];
    let mut iterations = 0;
    for _ in 0..MAX_ITERATIONS {
        iterations += 1;
        let members = members_by_patch(&label, k);
        let mut in_patch = vec![false; n];
        let mut moved = false;
        for (g, patch) in members.iter().enumerate() {
            if patch.is_empty() {
                continue;
            }
            for &t in patch {
                in_patch[t] = true;
            }
            let area: f64 = patch.iter().map(|&t| graph.areas[t]).sum();
            let centroid = patch
                .iter()
                .fold(Vector3::zeros(), |acc, &t| acc + graph.areas[t] * graph.centroids[t])
                / area.max(f64::MIN_POSITIVE);
            let mut near: Vec<usize> = patch.clone();
            near.sort_by(|&a, &b| {
                (graph.centroids[a] - centroid)
                    .norm_squared()
                    .total_cmp(&(graph.centroids[b] - centroid).norm_squared())
                    .then(a.cmp(&b))
            });
            near.truncate(RECENTER_CANDIDATES);
            let mut best = gens[g];
            let mut best_energy = patch_energy(graph, best, patch, &in_patch);
            for &c in &near {
                if c == gens[g] {
                    continue;
                }
                let e = patch_energy(graph, c, patch, &in_patch);
                if e < best_energy * (1.0 - 1e-12) {
                    best = c;
                    best_energy = e;
                }
            }
            if best != gens[g] {
                gens[g] = best;
                moved = true;
            }
            for &t in patch {
                in_patch[t] = false;
            }
        }
        let (new_label, new_dist) = assign(graph, &gens);
        let stable = new_label == label;
        label = new_label;
        dist = new_dist;
        energies.push(total_energy(graph, &dist));
        if stable && !moved {
            break;
        }
    }

    let repairs = repair(graph, &mut label, &mut gens);
    if repairs > 0 {
        debug!("cvt: {repairs} repair operations");
    }
    let patch_of: Vec<u32> = label.iter().map(|&l| l as u32).collect();
    let final_energy = {
        let (_, d) = assign(graph, &gens);
        total_energy(graph, &d)
    };
    Ok(CvtReport {
        segmentation: Segmentation { patch_of, k, seed },
        energies,
        iterations,
        repairs,
        generators: gens,
        final_energy,
    })
}

/// Makes every patch non-empty and connected. Returns the number of repairs.
fn repair(graph: &DualGraph, label: &mut [usize], gens: &mut [usize]) -> usize {
    let k = gens.len();
    let mut repairs = 0;
    for _round in 0..4 * k + 4 {
        let mut changed = false;
        // split off minor components to the neighboring patch sharing the
        // most edges with them
        for p in 0..k {
            let comps = graph.components(|t| label[t] == p);
            if comps.len() <= 1 {
                continue;
            }
            let main = comps
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            for (ci, comp) in comps.iter().enumerate() {
                if ci == main {
                    continue;
                }
                let mut votes: HashMap<usize, usize> = HashMap::new();
                for &t in comp {
                    for &(nb, _) in &graph.adjacency[t] {
                        if label[nb] != p {
                            *votes.entry(label[nb]).or_default() += 1;
                        }
                    }
                }
                if let Some((&target, _)) = votes.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) {
                    for &t in comp {
                        label[t] = target;
                    }
                    repairs += 1;
                    changed = true;
                }
            }
            if !comps[main].contains(&gens[p]) {
                gens[p] = comps[main][0];
            }
        }
        // reseed empty patches from the largest one
        let mut sizes = vec![0usize; k];
        for &l in label.iter() {
            sizes[l] += 1;
        }
        for p in 0..k {
            if sizes[p] > 0 {
                continue;
            }
            let largest = (0..k).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))).unwrap();
            let members: Vec<usize> = (0..label.len()).filter(|&t| label[t] == largest).collect();
            // split the largest patch between its generator and its farthest
            // member by restricted Dijkstra
            let far = farthest_within(graph, gens[largest], |t| label[t] == largest);
            gens[p] = far;
            let sub = [gens[largest], far];
            let (sub_label, _) = assign_restricted(graph, &sub, |t| label[t] == largest);
            for &t in &members {
                if sub_label[t] == 1 {
                    label[t] = p;
                }
            }
            sizes[p] = members.iter().filter(|&&t| label[t] == p).count();
            sizes[largest] -= sizes[p];
            repairs += 1;
            changed = true;
        }
        if !changed {
            break;
        }
    }
    repairs
}

fn farthest_within(graph: &DualGraph, start: usize, keep: impl Fn(usize) -> bool) -> usize {
    let (_, dist) = assign_restricted(graph, &[start], keep);
    dist.iter()
        .enumerate()
        .filter(|(_, d)| d.is_finite())
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(t, _)| t)
        .unwrap_or(start)
}

fn assign_restricted(graph: &DualGraph, sources: &[usize], keep: impl Fn(usize) -> bool) -> (Vec<usize>, Vec<f64>) {
    let n = graph.len();
    let mut label = vec![usize::MAX; n];
    let mut dist = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    for (g, &t) in sources.iter().enumerate() {
        heap.push(Entry {
            dist: 0.0,
            source: g,
            node: t,
        });
    }
    while let Some(Entry { dist: d, source, node }) = heap.pop() {
        if label[node] != usize::MAX {
            continue;
        }
        label[node] = source;
        dist[node] = d;
        for &(nb, w) in &graph.adjacency[node] {
            if label[nb] == usize::MAX && keep(nb) {
                heap.push(Entry {
                    dist: d + w,
                    source,
                    node: nb,
                });
            }
        }
    }
    (label, dist)
}

/// Full CVT with random initial generators and diagnostics.
pub fn cvt_segment_report(mesh: &FaceMesh, k: usize, seed: u64) -> Result<CvtReport> {
    let n = mesh.triangles.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "patch count {k} must be in 1..={n} (triangle count)"
        )));
    }
    let graph = DualGraph::new(mesh);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gens = sample(&mut rng, n, k).into_vec();
    gens.sort_unstable();
    cvt_from_generators(&graph, &gens, seed)
}

/// Random CVT partition of the mesh surface into `k` patches.
pub fn cvt_segment(mesh: &FaceMesh, k: usize, seed: u64) -> Result<Segmentation> {
    Ok(cvt_segment_report(mesh, k, seed)?.segmentation)
}

/// `count` independent segmentations whose seeds derive from `seed`.
pub fn generate_segmentation_bank(mesh: &FaceMesh, count: usize, k: usize, seed: u64) -> Result<Vec<Segmentation>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..count).map(|_| rng.next_u64()).collect();
    seeds.into_iter().map(|s| cvt_segment(mesh, k, s)).collect()
}

/// Checks the partition invariants: labels in range, no empty patch, every
/// patch connected in the dual graph.
pub fn validate_segmentation(mesh: &FaceMesh, seg: &Segmentation) -> Result<()> {
    if seg.patch_of.len() != mesh.triangles.len() {
        return Err(Error::DimensionMismatch {
            what: "segmentation labels",
            expected: mesh.triangles.len(),
            got: seg.patch_of.len(),
        });
    }
    if let Some(&bad) = seg.patch_of.iter().find(|&&p| p as usize >= seg.k) {
        return Err(Error::OutOfRange {
            what: "patches",
            index: bad as usize,
            len: seg.k,
        });
    }
    let sizes = seg.patch_sizes();
    if let Some(p) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::InvalidArgument(format!("patch {p} is empty")));
    }
    let graph = DualGraph::new(mesh);
    for p in 0..seg.k as u32 {
        let comps = graph.components(|t| seg.patch_of[t] == p).len();
        if comps != 1 {
            return Err(Error::InvalidArgument(format!(
                "patch {p} has {comps} connected components"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::face_model::generate_synthetic_model;

    /// Flat strip of 2 x 2n unit squares along x, each split into two
    /// triangles with diagonals mirrored about the middle.
    fn strip(n: usize) -> FaceMesh {
        let cols = 2 * n + 1;
        let mut vertices = Vec::new();
        for r in 0..3 {
            for c in 0..cols {
                vertices.push(Vector3::new(c as f64, r as f64, 0.0));
            }
        }
        let mut triangles = Vec::new();
        for r in 0..2 {
            for c in 0..2 * n {
                let v00 = r * cols + c;
                let (v01, v10, v11) = (v00 + 1, v00 + cols, v00 + cols + 1);
                if c < n {
                    triangles.push([v00, v01, v11]);
                    triangles.push([v00, v11, v10]);
                } else {
                    triangles.push([v00, v01, v10]);
                    triangles.push([v01, v11, v10]);
                }
            }
        }
        FaceMesh {
            vertices,
            triangles,
        }
    }

    fn brute_force_assign(graph: &DualGraph, gens: &[usize]) -> Vec<usize> {
        // Bellman-Ford style relaxation per generator, then argmin
        let n = graph.len();
        let mut best = vec![(f64::INFINITY, usize::MAX); n];
        for (g, &s) in gens.iter().enumerate() {
            let mut d = vec![f64::INFINITY; n];
            d[s] = 0.0;
            for _ in 0..n {
                let mut changed = false;
                for u in 0..n {
                    for &(v, w) in &graph.adjacency[u] {
                        if d[u] + w < d[v] - 1e-12 {
                            d[v] = d[u] + w;
                            changed = true;
                        }
                    }
                }
                if !changed {
                    break;
                }
            }
            for t in 0..n {
                if d[t] < best[t].0 - 1e-12 {
                    best[t] = (d[t], g);
                }
            }
        }
        best.into_iter().map(|(_, g)| g).collect()
    }

    #[test]
    fn single_patch() {
        let model = generate_synthetic_model(0, 300, 2, 2).unwrap();
        let seg = cvt_segment(&model.mean_mesh(), 1, 3).unwrap();
        assert!(seg.patch_of.iter().all(|&p| p == 0));
        assert_eq!(seg.k, 1);
    }

    #[test]
    fn mirrored_strip_splits_in_halves() {
        let n = 4;
        let mesh = strip(n);
        let graph = DualGraph::new(&mesh);
        // first triangle of the middle row on the far left and its mirror
        let left = 2 * 2 * n;
        let right = left + 4 * n - 1;
        let report = cvt_from_generators(&graph, &[left, right], 0).unwrap();
        let seg = &report.segmentation;
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let cx = tri.iter().map(|&v| mesh.vertices[v].x).sum::<f64>() / 3.0;
            let want = if cx < n as f64 { 0 } else { 1 };
            assert_eq!(seg.patch_of[t], want, "triangle {t}");
        }
        // converged assignment agrees with an independent brute-force oracle
        let oracle = brute_force_assign(&graph, &report.generators);
        let got: Vec<usize> = seg.patch_of.iter().map(|&p| p as usize).collect();
        assert_eq!(got, oracle);
        assert_eq!(report.repairs, 0);
    }

    #[test]
    fn converged_labels_match_brute_force_nearest_generator() {
        let model = generate_synthetic_model(1, 300, 2, 2).unwrap();
        let mesh = model.mean_mesh();
        let graph = DualGraph::new(&mesh);
        let gens = [5, 100, 200, 333];
        let (label, _) = assign(&graph, &gens);
        assert_eq!(label, brute_force_assign(&graph, &gens));
    }

    #[test]
    fn energy_is_monotone_and_partition_valid() {
        let model = generate_synthetic_model(0, 900, 2, 2).unwrap();
        let mesh = model.mean_mesh();
        let report = cvt_segment_report(&mesh, 32, 17).unwrap();
        for w in report.energies.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", report.energies);
        }
        validate_segmentation(&mesh, &report.segmentation).unwrap();
        assert_eq!(report.segmentation.patch_sizes().iter().sum::<usize>(), mesh.triangles.len());
    }

    #[test]
    fn bank_is_reproducible() {
        let model = generate_synthetic_model(0, 400, 2, 2).unwrap();
        let mesh = model.mean_mesh();
        let a = generate_segmentation_bank(&mesh, 2, 8, 99).unwrap();
        let b = generate_segmentation_bank(&mesh, 2, 8, 99).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn too_many_patches() {
        let mesh = strip(2);
        assert!(cvt_segment(&mesh, mesh.triangles.len() + 1, 0).is_err());
        assert!(cvt_segment(&mesh, 0, 0).is_err());
    }

    #[test]
    fn repair_reconnects_and_fills() {
        let mesh = strip(4);
        let graph = DualGraph::new(&mesh);
        let n = graph.len();
        // patch 0 split in two pieces, patch 2 empty
        let mut label: Vec<usize> = (0..n).map(|t| if t < 4 || t >= n - 4 { 0 } else { 1 }).collect();
        let mut gens = vec![0, 10, 20];
        let repairs = repair(&graph, &mut label, &mut gens);
        assert!(repairs >= 2);
        let seg = Segmentation {
            patch_of: label.iter().map(|&l| l as u32).collect(),
            k: 3,
            seed: 0,
        };
        validate_segmentation(&mesh, &seg).unwrap();
    }
}
