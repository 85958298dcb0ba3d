//! Undirected contact networks.
//!
//! A [`Graph`] is immutable once built: node indices are dense `0..n`, edges are
//! stored once as `(u, v)` with `u < v`, and every node carries a sorted neighbour
//! list. Edge lists are read from and written to a plain `src,dst` CSV format
//! where `#` starts a comment line.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::seq::IndexedRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::{seeds, Error, Result};

/// Power iteration gives up after this many matrix-vector products.
pub const POWER_ITERATION_MAX: usize = 10_000;
pub const DEFAULT_SPECTRAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n_nodes: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    labels: Option<Vec<String>>,
}

/// Counters collected while reading an edge list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub lines_read: usize,
    pub self_loops_dropped: usize,
    pub duplicates_collapsed: usize,
}

impl Graph {
    /// Build a graph over `n_nodes` nodes. Self-loops are dropped and repeated
    /// or reversed edges collapse into one.
    pub fn from_edges<I>(n_nodes: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= n_nodes || b >= n_nodes {
                return Err(Error::invalid(format!(
                    "edge ({a},{b}) out of range for {n_nodes} nodes"
                )));
            }
            if a != b {
                set.insert((a.min(b), a.max(b)));
            }
        }
        Ok(Self::from_sorted_set(n_nodes, set))
    }

    fn from_sorted_set(n_nodes: usize, set: BTreeSet<(usize, usize)>) -> Self {
        let mut adjacency = vec![Vec::new(); n_nodes];
        for &(a, b) in &set {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for nbrs in &mut adjacency {
            nbrs.sort_unstable();
        }
        Graph {
            n_nodes,
            edges: set.into_iter().collect(),
            adjacency,
            labels: None,
        }
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n_nodes {
            return Err(Error::invalid(format!(
                "{} labels for {} nodes",
                labels.len(),
                self.n_nodes
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edges as `(u, v)` pairs with `u < v`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Display name of a node: its external label if present, else its index.
    pub fn label(&self, node: usize) -> String {
        match &self.labels {
            Some(l) => l[node].clone(),
            None => node.to_string(),
        }
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency
            .get(a)
            .is_some_and(|n| n.binary_search(&b).is_ok())
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn mean_degree(&self) -> f64 {
        if self.n_nodes == 0 {
            0.0
        } else {
            2.0 * self.edges.len() as f64 / self.n_nodes as f64
        }
    }

    /// Connected component id per node, numbered in order of smallest member.
    pub fn component_ids(&self) -> Vec<usize> {
        let mut comp = vec![usize::MAX; self.n_nodes];
        let mut next = 0;
        let mut stack = Vec::new();
        for start in 0..self.n_nodes {
            if comp[start] != usize::MAX {
                continue;
            }
            comp[start] = next;
            stack.push(start);
            while let Some(u) = stack.pop() {
                for &v in &self.adjacency[u] {
                    if comp[v] == usize::MAX {
                        comp[v] = next;
                        stack.push(v);
                    }
                }
            }
            next += 1;
        }
        comp
    }

    pub fn component_count(&self) -> usize {
        self.component_ids().into_iter().max().map_or(0, |m| m + 1)
    }

    /// Subgraph induced by `nodes`, reindexed in the order given. Labels carry over.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<Graph> {
        let mut local = HashMap::with_capacity(nodes.len());
        for (i, &g) in nodes.iter().enumerate() {
            if g >= self.n_nodes {
                return Err(Error::invalid(format!("node {g} out of range")));
            }
            if local.insert(g, i).is_some() {
                return Err(Error::invalid(format!("node {g} listed twice")));
            }
        }
        let mut set = BTreeSet::new();
        for (i, &g) in nodes.iter().enumerate() {
            for nb in &self.adjacency[g] {
                if let Some(&j) = local.get(nb) {
                    if i < j {
                        set.insert((i, j));
                    } else {
                        set.insert((j, i));
                    }
                }
            }
        }
        let mut sub = Self::from_sorted_set(nodes.len(), set);
        if let Some(labels) = &self.labels {
            sub.labels = Some(nodes.iter().map(|&g| labels[g].clone()).collect());
        }
        Ok(sub)
    }

    /// Stable content hash over node count and edge set (labels excluded).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_nodes as u64).to_le_bytes());
        for &(a, b) in &self.edges {
            h.update((a as u64).to_le_bytes());
            h.update((b as u64).to_le_bytes());
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Read a `src,dst` edge list.
///
/// Node identifiers may be integers or arbitrary strings. When every identifier
/// parses as an integer the dense indices follow numeric order, otherwise they
/// follow lexicographic order; the original identifiers are kept as labels.
pub fn load_edge_list<R: BufRead>(reader: R) -> Result<(Graph, LoadReport)> {
    let mut report = LoadReport::default();
    let mut raw: Vec<(String, String)> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        report.lines_read += 1;
        let mut parts = trimmed.split(',');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("expected `src,dst`, got {trimmed:?}"),
            });
        };
        let (a, b) = (a.trim(), b.trim());
        if a.is_empty() || b.is_empty() {
            return Err(Error::Parse {
                line: idx + 1,
                msg: "empty node identifier".into(),
            });
        }
        raw.push((a.to_string(), b.to_string()));
    }
    if raw.is_empty() {
        return Err(Error::Empty("edge list has no edges".into()));
    }

    let mut ids: Vec<&str> = raw
        .iter()
        .flat_map(|(a, b)| [a.as_str(), b.as_str()])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let numeric: Option<Vec<i64>> = ids.iter().map(|s| s.parse::<i64>().ok()).collect();
    if let Some(values) = numeric {
        let mut paired: Vec<(i64, &str)> = values.into_iter().zip(ids.iter().copied()).collect();
        paired.sort();
        ids = paired.into_iter().map(|(_, s)| s).collect();
    }
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (*s, i)).collect();

    let mut set = BTreeSet::new();
    for (a, b) in &raw {
        let (u, v) = (index[a.as_str()], index[b.as_str()]);
        if u == v {
            report.self_loops_dropped += 1;
            continue;
        }
        if !set.insert((u.min(v), u.max(v))) {
            report.duplicates_collapsed += 1;
        }
    }
    if report.self_loops_dropped > 0 {
        log::warn!("dropped {} self-loops", report.self_loops_dropped);
    }
    let labels = ids.into_iter().map(str::to_string).collect();
    let graph = Graph::from_sorted_set(index.len(), set).with_labels(labels)?;
    Ok((graph, report))
}

/// Write the edge list, using node labels when present.
pub fn save_edge_list<W: Write>(g: &Graph, mut out: W) -> Result<()> {
    writeln!(out, "# nodes={} edges={}", g.n_nodes(), g.n_edges())?;
    for &(a, b) in g.edges() {
        writeln!(out, "{},{}", g.label(a), g.label(b))?;
    }
    Ok(())
}

/// Induced subgraph on the `k` highest-degree nodes. Ties go to the smaller
/// index; retained nodes keep their relative order.
pub fn top_k_by_degree(g: &Graph, k: usize) -> Result<Graph> {
    if k == 0 || k > g.n_nodes() {
        return Err(Error::invalid(format!(
            "k={k} outside 1..={}",
            g.n_nodes()
        )));
    }
    let mut order: Vec<usize> = (0..g.n_nodes()).collect();
    order.sort_by(|&a, &b| g.degree(b).cmp(&g.degree(a)).then(a.cmp(&b)));
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    g.induced_subgraph(&keep)
}

/// Largest eigenvalue of the adjacency matrix.
///
/// Power iteration from the all-ones vector on `A + I`: the unit shift keeps
/// `lambda_1 + 1` strictly dominant on bipartite graphs, where `A` alone has
/// `-lambda_1` as a competing eigenvalue. Stops once successive Rayleigh
/// quotients of `A` differ by less than `tol` relative.
pub fn spectral_radius(g: &Graph, tol: f64) -> Result<f64> {
    if g.n_edges() == 0 {
        return Err(Error::invalid(
            "spectral radius of an edgeless graph is 0; threshold undefined",
        ));
    }
    let n = g.n_nodes();
    let mut x = vec![1.0 / (n as f64).sqrt(); n];
    let mut ax = vec![0.0; n];
    let mut previous = f64::NAN;
    for _ in 0..POWER_ITERATION_MAX {
        for (i, out) in ax.iter_mut().enumerate() {
            *out = g.neighbors(i).iter().map(|&j| x[j]).sum();
        }
        let rayleigh: f64 = x.iter().zip(&ax).map(|(a, b)| a * b).sum();
        if (rayleigh - previous).abs() < tol * rayleigh.abs() {
            return Ok(rayleigh);
        }
        previous = rayleigh;
        let mut norm = 0.0;
        for (xi, &ai) in x.iter_mut().zip(&ax) {
            *xi += ai;
            norm += *xi * *xi;
        }
        let norm = norm.sqrt();
        x.iter_mut().for_each(|v| *v /= norm);
    }
    Err(Error::NoConvergence {
        what: "power iteration",
        iterations: POWER_ITERATION_MAX,
    })
}

/// First-order mean-field epidemic threshold `1 / lambda_1(A)`.
pub fn epidemic_threshold(g: &Graph) -> Result<f64> {
    Ok(1.0 / spectral_radius(g, DEFAULT_SPECTRAL_TOL)?)
}

/// Synthetic graph families used for fixtures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Synthetic {
    ErdosRenyi { n: usize, p: f64 },
    /// Preferential attachment: each new node links to `m` distinct existing nodes.
    BarabasiAlbert { n: usize, m: usize },
    Complete { n: usize },
    /// Node 0 is the centre.
    Star { n: usize },
    Ring { n: usize },
}

pub fn generate_synthetic(kind: Synthetic, seed: u64) -> Result<Graph> {
    let mut rng = seeds::rng(seed, &[]);
    match kind {
        Synthetic::ErdosRenyi { n, p } => {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("edge probability {p} not in [0,1]")));
            }
            let mut edges = Vec::new();
            for a in 0..n {
                for b in a + 1..n {
                    if rng.random::<f64>() < p {
                        edges.push((a, b));
                    }
                }
            }
            Graph::from_edges(n, edges)
        }
        Synthetic::BarabasiAlbert { n, m } => {
            if m == 0 || m >= n {
                return Err(Error::invalid(format!(
                    "attachment m={m} must satisfy 1 <= m < n={n}"
                )));
            }
            let mut edges = Vec::with_capacity((n - m) * m);
            let mut repeated: Vec<usize> = Vec::with_capacity(2 * (n - m) * m);
            let mut targets: Vec<usize> = (0..m).collect();
            for source in m..n {
                for &t in &targets {
                    edges.push((source, t));
                }
                repeated.extend_from_slice(&targets);
                repeated.extend(std::iter::repeat_n(source, m));
                let mut chosen = BTreeSet::new();
                while chosen.len() < m {
                    chosen.insert(*repeated.choose(&mut rng).expect("non-empty"));
                }
                targets = chosen.into_iter().collect();
            }
            Graph::from_edges(n, edges)
        }
        Synthetic::Complete { n } => {
            Graph::from_edges(n, (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))))
        }
        Synthetic::Star { n } => {
            if n == 0 {
                return Err(Error::invalid("star needs at least one node"));
            }
            Graph::from_edges(n, (1..n).map(|b| (0, b)))
        }
        Synthetic::Ring { n } => {
            if n < 3 {
                return Err(Error::invalid(format!("ring needs n >= 3, got {n}")));
            }
            Graph::from_edges(n, (0..n).map(|a| (a, (a + 1) % n)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn load(text: &str) -> Result<(Graph, LoadReport)> {
        load_edge_list(Cursor::new(text))
    }

    fn path(n: usize) -> Graph {
        Graph::from_edges(n, (1..n).map(|i| (i - 1, i))).unwrap()
    }

    #[test]
    fn load_collapses_duplicates_and_self_loops() {
        let (g, rep) = load("0,1\n1,0\n1,1\n1,2\n").unwrap();
        assert_eq!(g.n_nodes(), 3);
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
        assert_eq!(rep.self_loops_dropped, 1);
        assert_eq!(rep.duplicates_collapsed, 1);
    }

    #[test]
    fn load_string_ids() {
        let (g, _) = load("# airports\na,b\nb,c\n").unwrap();
        assert_eq!(g.n_nodes(), 3);
        assert_eq!(g.n_edges(), 2);
        assert_eq!(g.labels().unwrap(), &["a", "b", "c"]);
    }

    #[test]
    fn numeric_ids_sorted_numerically() {
        let (g, _) = load("10,2\n2,9\n").unwrap();
        assert_eq!(g.labels().unwrap(), &["2", "9", "10"]);
        assert!(g.has_edge(0, 2));
        assert!(g.has_edge(0, 1));
    }

    #[test]
    fn load_errors() {
        assert!(matches!(load(""), Err(Error::Empty(_))));
        assert!(matches!(load("# only\n"), Err(Error::Empty(_))));
        match load("0,1\n0;1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(load("0,1,2\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn save_then_load_round_trips() {
        let g = generate_synthetic(Synthetic::ErdosRenyi { n: 40, p: 0.2 }, 3).unwrap();
        let g = g.induced_subgraph(
            &(0..40).filter(|&i| g.degree(i) > 0).collect::<Vec<_>>(),
        )
        .unwrap();
        let mut buf = Vec::new();
        save_edge_list(&g, &mut buf).unwrap();
        let (back, _) = load_edge_list(Cursor::new(buf.clone())).unwrap();
        assert_eq!(back.edges(), g.edges());
        let mut buf2 = Vec::new();
        save_edge_list(&back, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn top_k_examples() {
        let star = generate_synthetic(Synthetic::Star { n: 5 }, 0).unwrap();
        let center = top_k_by_degree(&star, 1).unwrap();
        assert_eq!(center.n_nodes(), 1);
        assert_eq!(center.n_edges(), 0);

        let tri = generate_synthetic(Synthetic::Complete { n: 3 }, 0).unwrap();
        assert_eq!(top_k_by_degree(&tri, 3).unwrap().edges(), tri.edges());

        // degrees of 0-1-2-3 are (1,2,2,1): nodes 1 and 2 win.
        let labelled = path(4)
            .with_labels((0..4).map(|i| i.to_string()).collect())
            .unwrap();
        let top = top_k_by_degree(&labelled, 2).unwrap();
        assert_eq!(top.labels().unwrap(), &["1", "2"]);
        assert_eq!(top.edges(), &[(0, 1)]);

        assert!(top_k_by_degree(&tri, 0).is_err());
        assert!(top_k_by_degree(&tri, 4).is_err());
    }

    #[test]
    fn top_k_tie_break_prefers_small_index() {
        // ring: all degrees equal, keep 0..k
        let ring = generate_synthetic(Synthetic::Ring { n: 6 }, 0).unwrap();
        let top = ring.clone().with_labels((0..6).map(|i| i.to_string()).collect()).unwrap();
        let sub = top_k_by_degree(&top, 3).unwrap();
        assert_eq!(sub.labels().unwrap(), &["0", "1", "2"]);
    }

    #[test]
    fn spectral_radius_examples() {
        let tol = 1e-10;
        let k4 = generate_synthetic(Synthetic::Complete { n: 4 }, 0).unwrap();
        assert!((spectral_radius(&k4, tol).unwrap() - 3.0).abs() < 1e-8);
        let star = generate_synthetic(Synthetic::Star { n: 5 }, 0).unwrap();
        assert!((spectral_radius(&star, tol).unwrap() - 2.0).abs() < 1e-8);
        // dense 3x3 eigensolve of the path gives sqrt(2)
        assert!((spectral_radius(&path(3), tol).unwrap() - 1.414_213_562).abs() < 1e-8);

        assert!((epidemic_threshold(&k4).unwrap() - 1.0 / 3.0).abs() < 1e-9);
        assert!((epidemic_threshold(&star).unwrap() - 0.5).abs() < 1e-9);

        let empty = Graph::from_edges(3, []).unwrap();
        assert!(spectral_radius(&empty, tol).is_err());
        assert!(epidemic_threshold(&empty).is_err());
    }

    #[test]
    fn spectral_radius_matches_dense_eigensolve() {
        for seed in 0..5 {
            let g = generate_synthetic(Synthetic::ErdosRenyi { n: 30, p: 0.15 }, seed).unwrap();
            let a = nalgebra::DMatrix::from_fn(30, 30, |i, j| f64::from(u8::from(g.has_edge(i, j))));
            let dense = a.symmetric_eigen().eigenvalues.max();
            assert!((spectral_radius(&g, 1e-12).unwrap() - dense).abs() < 1e-7);
        }
    }

    #[test]
    fn synthetic_examples() {
        let k4 = generate_synthetic(Synthetic::Complete { n: 4 }, 0).unwrap();
        assert_eq!(k4.n_edges(), 6);
        let star = generate_synthetic(Synthetic::Star { n: 5 }, 0).unwrap();
        assert_eq!(star.n_edges(), 4);
        assert_eq!(star.degree(0), 4);
        let a = generate_synthetic(Synthetic::ErdosRenyi { n: 50, p: 0.1 }, 7).unwrap();
        let b = generate_synthetic(Synthetic::ErdosRenyi { n: 50, p: 0.1 }, 7).unwrap();
        assert_eq!(a.edges(), b.edges());
        let ba = generate_synthetic(Synthetic::BarabasiAlbert { n: 100, m: 3 }, 1).unwrap();
        assert_eq!(ba.n_edges(), 97 * 3);
        assert_eq!(ba.component_count(), 1);

        assert!(generate_synthetic(Synthetic::ErdosRenyi { n: 5, p: 1.5 }, 0).is_err());
        assert!(generate_synthetic(Synthetic::BarabasiAlbert { n: 5, m: 0 }, 0).is_err());
        assert!(generate_synthetic(Synthetic::Ring { n: 2 }, 0).is_err());
    }

    #[test]
    fn components() {
        let g = Graph::from_edges(6, [(0, 1), (1, 2), (3, 4)]).unwrap();
        assert_eq!(g.component_ids(), vec![0, 0, 0, 1, 1, 2]);
        assert_eq!(g.component_count(), 3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_graph() -> impl Strategy<Value = Graph> {
            (2usize..25, 0.05f64..0.9, any::<u64>()).prop_map(|(n, p, seed)| {
                generate_synthetic(Synthetic::ErdosRenyi { n, p }, seed).unwrap()
            })
        }

        proptest! {
            #[test]
            fn radius_between_mean_and_max_degree(g in arb_graph()) {
                prop_assume!(g.n_edges() > 0);
                let r = spectral_radius(&g, DEFAULT_SPECTRAL_TOL).unwrap();
                prop_assert!(r >= g.mean_degree() - 1e-8);
                prop_assert!(r <= g.max_degree() as f64 + 1e-8);
                let t = epidemic_threshold(&g).unwrap();
                prop_assert!((t * r - 1.0).abs() < 1e-9);
            }

            #[test]
            fn adjacency_symmetric(g in arb_graph()) {
                for u in 0..g.n_nodes() {
                    prop_assert!(!g.has_edge(u, u));
                    for &v in g.neighbors(u) {
                        prop_assert!(g.has_edge(v, u));
                    }
                }
            }

            #[test]
            fn top_k_is_induced(g in arb_graph(), frac in 0.0f64..1.0) {
                let k = 1 + ((g.n_nodes() - 1) as f64 * frac) as usize;
                let labelled = g.clone().with_labels((0..g.n_nodes()).map(|i| i.to_string()).collect()).unwrap();
                let sub = top_k_by_degree(&labelled, k).unwrap();
                prop_assert_eq!(sub.n_nodes(), k);
                let orig: Vec<usize> = sub.labels().unwrap().iter().map(|s| s.parse().unwrap()).collect();
                for &(a, b) in sub.edges() {
                    prop_assert!(g.has_edge(orig[a], orig[b]));
                }
            }
        }
    }
}
