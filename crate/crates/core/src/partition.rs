//! Splitting a network into disjoint client subnetworks.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::netgraph::Graph;
use crate::{seeds, Error, Result};

/// Largest graph handled by the dense Laplacian eigensolver; bigger graphs use
/// deflated power iteration.
pub const DENSE_EIGEN_LIMIT: usize = 2_000;
const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITER: usize = 100;
const KL_MAX_PASSES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PartitionMethod {
    EvenIndex,
    Spectral,
    KernighanLin,
}

impl fmt::Display for PartitionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PartitionMethod::EvenIndex => "even-index",
            PartitionMethod::Spectral => "spectral",
            PartitionMethod::KernighanLin => "kernighan-lin",
        })
    }
}

impl FromStr for PartitionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "even-index" | "even" => Ok(PartitionMethod::EvenIndex),
            "spectral" => Ok(PartitionMethod::Spectral),
            "kernighan-lin" | "kl" => Ok(PartitionMethod::KernighanLin),
            other => Err(Error::invalid(format!("unknown partition method `{other}`"))),
        }
    }
}

/// Client index per node. Every client owns at least one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionAssignment {
    assignment: Vec<usize>,
    method: PartitionMethod,
    n_clients: usize,
}

impl PartitionAssignment {
    pub fn new(assignment: Vec<usize>, method: PartitionMethod) -> Result<Self> {
        let n_clients = assignment.iter().max().map_or(0, |m| m + 1);
        if n_clients == 0 {
            return Err(Error::Empty("partition over zero nodes".into()));
        }
        let mut sizes = vec![0usize; n_clients];
        for &c in &assignment {
            sizes[c] += 1;
        }
        if let Some(c) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::invalid(format!("client {c} owns no nodes")));
        }
        Ok(PartitionAssignment { assignment, method, n_clients })
    }

    /// One client holding every node.
    pub fn whole(n_nodes: usize) -> Result<Self> {
        Self::new(vec![0; n_nodes], PartitionMethod::EvenIndex)
    }

    pub fn client_of(&self, node: usize) -> usize {
        self.assignment[node]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn method(&self) -> PartitionMethod {
        self.method
    }

    pub fn n_clients(&self) -> usize {
        self.n_clients
    }

    pub fn n_nodes(&self) -> usize {
        self.assignment.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clients];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }

    /// Global node indices owned by `client`, ascending.
    pub fn members(&self, client: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&v| self.assignment[v] == client)
            .collect()
    }

    /// `node,client` CSV with a header row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "node,client")?;
        for (v, c) in self.assignment.iter().enumerate() {
            writeln!(out, "{v},{c}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(reader: R, method: PartitionMethod) -> Result<Self> {
        let mut pairs = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') || t == "node,client" {
                continue;
            }
            let parse = |s: Option<&str>| -> Result<usize> {
                s.and_then(|x| x.trim().parse().ok()).ok_or(Error::Parse {
                    line: idx + 1,
                    msg: format!("expected `node,client`, got {t:?}"),
                })
            };
            let mut it = t.split(',');
            pairs.push((parse(it.next())?, parse(it.next())?));
        }
        pairs.sort_unstable();
        if pairs.iter().enumerate().any(|(i, &(v, _))| v != i) {
            return Err(Error::invalid("partition file must list nodes 0..N exactly once"));
        }
        Self::new(pairs.into_iter().map(|(_, c)| c).collect(), method)
    }
}

fn check_client_count(g: &Graph, m: usize) -> Result<()> {
    if m < 2 || m > g.n_nodes() {
        return Err(Error::invalid(format!(
            "client count {m} outside 2..={}",
            g.n_nodes()
        )));
    }
    Ok(())
}

/// Contiguous index blocks: the first `N mod M` clients take `ceil(N/M)` nodes,
/// the rest `floor(N/M)`.
pub fn even_by_index(g: &Graph, m: usize) -> Result<PartitionAssignment> {
    check_client_count(g, m)?;
    let n = g.n_nodes();
    let (base, extra) = (n / m, n % m);
    let mut assignment = Vec::with_capacity(n);
    for c in 0..m {
        let size = base + usize::from(c < extra);
        assignment.extend(std::iter::repeat_n(c, size));
    }
    PartitionAssignment::new(assignment, PartitionMethod::EvenIndex)
}

/// Number of edges whose endpoints sit in different clients.
pub fn edge_cut(g: &Graph, p: &PartitionAssignment) -> usize {
    g.edges()
        .iter()
        .filter(|&&(a, b)| p.client_of(a) != p.client_of(b))
        .count()
}

/// One client's view: the induced subgraph and its local-to-global node map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientSubnet {
    pub graph: Graph,
    /// `nodes[local] = global`, ascending.
    pub nodes: Vec<usize>,
}

impl ClientSubnet {
    pub fn to_local(&self, global: usize) -> Option<usize> {
        self.nodes.binary_search(&global).ok()
    }
}

/// Induced subgraph per client; edges between clients are dropped.
pub fn induced_subnetworks(g: &Graph, p: &PartitionAssignment) -> Result<Vec<ClientSubnet>> {
    if p.n_nodes() != g.n_nodes() {
        return Err(Error::shape(format!(
            "partition covers {} nodes, graph has {}",
            p.n_nodes(),
            g.n_nodes()
        )));
    }
    (0..p.n_clients())
        .map(|c| {
            let nodes = p.members(c);
            Ok(ClientSubnet { graph: g.induced_subgraph(&nodes)?, nodes })
        })
        .collect()
}

/// Spectral clustering on the unnormalized Laplacian `L = D - A`.
///
/// Nodes are embedded with the eigenvectors of the `m` smallest eigenvalues and
/// grouped by k-means (k-means++ seeding, best of several restarts). Clusters
/// left empty are refilled with the point of the largest cluster farthest from
/// its centroid.
pub fn spectral_clustering(g: &Graph, m: usize, seed: u64) -> Result<PartitionAssignment> {
    check_client_count(g, m)?;
    let embedding = if g.n_nodes() <= DENSE_EIGEN_LIMIT {
        dense_laplacian_embedding(g, m)
    } else {
        power_laplacian_embedding(g, m)?
    };
    let mut rng = seeds::rng(seed, &[seeds::tag::PARTITION]);
    let assignment = kmeans(&embedding, m, &mut rng);
    PartitionAssignment::new(assignment, PartitionMethod::Spectral)
}

/// Row-major `n x m` embedding from a dense symmetric eigensolve.
fn dense_laplacian_embedding(g: &Graph, m: usize) -> Vec<Vec<f64>> {
    let n = g.n_nodes();
    let mut lap = DMatrix::<f64>::zeros(n, n);
    for v in 0..n {
        lap[(v, v)] = g.degree(v) as f64;
    }
    for &(a, b) in g.edges() {
        lap[(a, b)] = -1.0;
        lap[(b, a)] = -1.0;
    }
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    (0..n)
        .map(|v| order[..m].iter().map(|&k| eig.eigenvectors[(v, k)]).collect())
        .collect()
}

/// Smallest Laplacian eigenvectors via power iteration on `c I - L`, where
/// `c = 2 * max_degree + 1` bounds the spectrum, deflating each found vector.
fn power_laplacian_embedding(g: &Graph, m: usize) -> Result<Vec<Vec<f64>>> {
    let n = g.n_nodes();
    let shift = 2.0 * g.max_degree() as f64 + 1.0;
    let apply = |x: &[f64], out: &mut [f64]| {
        for v in 0..n {
            let lx = g.degree(v) as f64 * x[v] - g.neighbors(v).iter().map(|&u| x[u]).sum::<f64>();
            out[v] = shift * x[v] - lx;
        }
    };
    let mut found: Vec<Vec<f64>> = Vec::with_capacity(m);
    let max_iter = 20_000;
    for k in 0..m {
        // deterministic non-degenerate start
        let mut x: Vec<f64> = (0..n).map(|v| 1.0 + ((v * (k + 3)) % 17) as f64 / 17.0).collect();
        let mut y = vec![0.0; n];
        let mut prev = f64::NAN;
        let mut converged = false;
        for _ in 0..max_iter {
            for q in &found {
                let dot: f64 = x.iter().zip(q).map(|(a, b)| a * b).sum();
                x.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            x.iter_mut().for_each(|a| *a /= norm);
            apply(&x, &mut y);
            let rq: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
            std::mem::swap(&mut x, &mut y);
            if (rq - prev).abs() < 1e-12 * rq.abs() {
                converged = true;
                break;
            }
            prev = rq;
        }
        if !converged {
            return Err(Error::NoConvergence { what: "Laplacian power iteration", iterations: max_iter });
        }
        for q in &found {
            let dot: f64 = x.iter().zip(q).map(|(a, b)| a * b).sum();
            x.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        x.iter_mut().for_each(|a| *a /= norm);
        found.push(x);
    }
    Ok((0..n).map(|v| found.iter().map(|q| q[v]).collect()).collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

fn centroids_of(points: &[Vec<f64>], labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(labels) {
        counts[c] += 1;
        sums[c].iter_mut().zip(p).for_each(|(s, x)| *s += x);
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|x| *x /= c as f64);
        }
    }
    sums
}

/// Move the farthest member of the largest cluster into each empty cluster.
fn repair_empty(points: &[Vec<f64>], labels: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&c| counts[c] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let largest = (0..k).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).expect("k > 0");
        let centroid = &centroids_of(points, labels, k)[largest];
        let far = (0..points.len())
            .filter(|&i| labels[i] == largest)
            .max_by(|&a, &b| {
                sq_dist(&points[a], centroid)
                    .total_cmp(&sq_dist(&points[b], centroid))
                    .then(b.cmp(&a))
            })
            .expect("largest cluster is non-empty");
        labels[far] = empty;
    }
}

fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let mut centroids = kmeans_pp_init(points, k, rng);
        let mut labels = vec![usize::MAX; points.len()];
        for _ in 0..KMEANS_MAX_ITER {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let c = (0..k)
                    .min_by(|&a, &b| sq_dist(p, &centroids[a]).total_cmp(&sq_dist(p, &centroids[b])))
                    .expect("k > 0");
                if labels[i] != c {
                    labels[i] = c;
                    changed = true;
                }
            }
            repair_empty(points, &mut labels, k);
            centroids = centroids_of(points, &labels, k);
            if !changed {
                break;
            }
        }
        let inertia: f64 = points
            .iter()
            .zip(&labels)
            .map(|(p, &c)| sq_dist(p, &centroids[c]))
            .sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    best.expect("at least one restart").1
}

/// Recursive Kernighan-Lin bisection into `m` clients.
///
/// Each level splits its node set in proportion to the number of clients on
/// each side (an exact halving when `m` is a power of two), starting from a
/// seeded random split and applying gain-ordered swap passes until no pass has
/// positive gain.
pub fn kernighan_lin(g: &Graph, m: usize, seed: u64) -> Result<PartitionAssignment> {
    check_client_count(g, m)?;
    let mut rng = seeds::rng(seed, &[seeds::tag::PARTITION]);
    let mut assignment = vec![0usize; g.n_nodes()];
    let all: Vec<usize> = (0..g.n_nodes()).collect();
    recurse(g, all, m, 0, &mut rng, &mut assignment);
    PartitionAssignment::new(assignment, PartitionMethod::KernighanLin)
}

fn recurse(
    g: &Graph,
    nodes: Vec<usize>,
    parts: usize,
    first: usize,
    rng: &mut ChaCha8Rng,
    out: &mut [usize],
) {
    if parts == 1 {
        nodes.iter().for_each(|&v| out[v] = first);
        return;
    }
    let left_parts = parts / 2;
    let right_parts = parts - left_parts;
    let target = (nodes.len() * left_parts + parts / 2) / parts;
    let target = target.clamp(left_parts, nodes.len() - right_parts);
    let bisection = kl_bisect(g, &nodes, target, rng);
    log::debug!(
        "kl bisection of {} nodes: cut {} -> {}",
        nodes.len(),
        bisection.initial_cut,
        bisection.final_cut
    );
    let mut left = Vec::with_capacity(target);
    let mut right = Vec::with_capacity(nodes.len() - target);
    for (&v, &is_left) in nodes.iter().zip(&bisection.left) {
        if is_left {
            left.push(v);
        } else {
            right.push(v);
        }
    }
    recurse(g, left, left_parts, first, rng, out);
    recurse(g, right, right_parts, first + left_parts, rng, out);
}

/// Result of one KL bisection over a node subset.
#[derive(Debug, Clone)]
pub(crate) struct Bisection {
    /// Membership of `nodes[i]` in the left half.
    pub left: Vec<bool>,
    pub initial_cut: usize,
    pub final_cut: usize,
}

/// Bisect the subgraph induced by `nodes` into `n_left` and the rest.
pub(crate) fn kl_bisect(g: &Graph, nodes: &[usize], n_left: usize, rng: &mut ChaCha8Rng) -> Bisection {
    let n = nodes.len();
    let sub = g.induced_subgraph(nodes).expect("distinct in-range nodes");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut left = vec![false; n];
    for &v in &order[..n_left] {
        left[v] = true;
    }
    let cut = |left: &[bool]| sub.edges().iter().filter(|&&(a, b)| left[a] != left[b]).count();
    let initial_cut = cut(&left);

    for _ in 0..KL_MAX_PASSES {
        // D = external - internal cost
        let mut d: Vec<i64> = (0..n)
            .map(|v| {
                sub.neighbors(v)
                    .iter()
                    .map(|&u| if left[u] != left[v] { 1 } else { -1 })
                    .sum()
            })
            .collect();
        let mut locked = vec![false; n];
        let mut swaps: Vec<(usize, usize, i64)> = Vec::new();
        let pairs = n_left.min(n - n_left);
        for _ in 0..pairs {
            let mut a_side: Vec<usize> = (0..n).filter(|&v| left[v] && !locked[v]).collect();
            let mut b_side: Vec<usize> = (0..n).filter(|&v| !left[v] && !locked[v]).collect();
            a_side.sort_by_key(|&v| (std::cmp::Reverse(d[v]), v));
            b_side.sort_by_key(|&v| (std::cmp::Reverse(d[v]), v));
            let mut best: Option<(i64, usize, usize)> = None;
            for &a in &a_side {
                if let Some((bg, _, _)) = best {
                    if d[a] + d[b_side[0]] <= bg {
                        break;
                    }
                }
                for &b in &b_side {
                    let upper = d[a] + d[b];
                    if let Some((bg, _, _)) = best {
                        if upper <= bg {
                            break;
                        }
                    }
                    let gain = upper - 2 * i64::from(sub.has_edge(a, b));
                    if best.is_none_or(|(bg, _, _)| gain > bg) {
                        best = Some((gain, a, b));
                    }
                }
            }
            let (gain, a, b) = best.expect("both sides have unlocked nodes");
            locked[a] = true;
            locked[b] = true;
            swaps.push((a, b, gain));
            // pretend a and b have swapped sides when updating D
            for (moved, was_left) in [(a, true), (b, false)] {
                for &u in sub.neighbors(moved) {
                    if locked[u] {
                        continue;
                    }
                    // u on the side `moved` left: edge turns external (+2); otherwise internal (-2)
                    if left[u] == was_left {
                        d[u] += 2;
                    } else {
                        d[u] -= 2;
                    }
                }
            }
        }
        let mut best_k = 0;
        let mut best_gain = 0i64;
        let mut running = 0i64;
        for (k, &(_, _, gain)) in swaps.iter().enumerate() {
            running += gain;
            if running > best_gain {
                best_gain = running;
                best_k = k + 1;
            }
        }
        if best_gain <= 0 {
            break;
        }
        for &(a, b, _) in &swaps[..best_k] {
            left[a] = false;
            left[b] = true;
        }
    }
    let final_cut = cut(&left);
    Bisection { left, initial_cut, final_cut }
}
