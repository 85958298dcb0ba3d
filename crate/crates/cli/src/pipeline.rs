//! Stages shared by the subcommands: graph, trajectory, partition, and a
//! full train-and-score scenario.

use std::fs;
use std::io::{BufReader, Cursor};
use std::path::Path;

use epifed::dataset::{
    build_client_datasets, inject_missing, susceptible_infected_classes, ClientDataset, MissingConfig,
    MissingReport,
};
use epifed::epidemics::{simulate, truncate_dynamic, ModelSpec, Trajectory, TruncateConfig};
use epifed::fedlearn::{run_centralized, run_federated, run_solo, TrainingOutcome};
use epifed::metrics::{classification_metrics, prevalence_errors};
use epifed::models::{evaluate, Architecture, ModelState};
use epifed::netgraph::{self, generate_synthetic, load_edge_list, top_k_by_degree, Graph, Synthetic};
use epifed::nncore::GatGraph;
use epifed::partition::{
    even_by_index, induced_subnetworks, kernighan_lin, spectral_clustering, PartitionAssignment,
    PartitionMethod,
};
use sha2::{Digest, Sha256};

use crate::config::{Config, Regime, Resolved};
use crate::error::{CliError, CliResult};
use crate::output::write_atomic;

pub fn load_graph(cfg: &Config, seed: u64) -> CliResult<Graph> {
    let gs = &cfg.graph;
    let g = match gs.kind.as_str() {
        "file" => {
            let f = fs::File::open(&gs.path)
                .map_err(|e| CliError::Runtime(format!("cannot open {}: {e}", gs.path)))?;
            let (g, report) = load_edge_list(BufReader::new(f))?;
            if report.self_loops_dropped > 0 {
                log::warn!("{}: dropped {} self-loops", gs.path, report.self_loops_dropped);
            }
            g
        }
        kind => {
            let synth = match kind {
                "erdos-renyi" => Synthetic::ErdosRenyi { n: gs.n, p: gs.p },
                "barabasi-albert" => Synthetic::BarabasiAlbert { n: gs.n, m: gs.m },
                "complete" => Synthetic::Complete { n: gs.n },
                "star" => Synthetic::Star { n: gs.n },
                "ring" => Synthetic::Ring { n: gs.n },
                other => return Err(CliError::Config(format!("unknown graph.kind `{other}`"))),
            };
            generate_synthetic(synth, seed).map_err(|e| CliError::Config(e.to_string()))?
        }
    };
    if gs.top_k > 0 {
        return top_k_by_degree(&g, gs.top_k).map_err(|e| CliError::Config(e.to_string()));
    }
    Ok(g)
}

/// Rescales the infection rate so that `spec.tau()` becomes `tau`.
pub fn with_tau(spec: ModelSpec, tau: f64) -> ModelSpec {
    let f = tau / spec.tau();
    match spec {
        ModelSpec::Sis { beta, delta } => ModelSpec::Sis { beta: beta * f, delta },
        ModelSpec::Sir { beta, delta } => ModelSpec::Sir { beta: beta * f, delta },
        ModelSpec::Seir { beta1, beta2, delta } => ModelSpec::Seir { beta1: beta1 * f, beta2, delta },
        ModelSpec::NmSis { scale, shape, delta } => ModelSpec::NmSis { scale: scale / f, shape, delta },
        ModelSpec::Sirs { beta, delta, omega } => ModelSpec::Sirs { beta: beta * f, delta, omega },
        ModelSpec::Sirvs { beta, delta, omega, v1, v2 } => {
            ModelSpec::Sirvs { beta: beta * f, delta, omega, v1, v2 }
        }
        ModelSpec::SisTv { a, b, c, delta } => ModelSpec::SisTv { a: a * f, b: b * f, c, delta },
    }
}

/// The configured model, rescaled to `factor x tau_c` when requested.
pub fn effective_spec(res: &Resolved, cfg: &Config, g: &Graph) -> CliResult<ModelSpec> {
    match cfg.epidemic.tau_over_threshold {
        Some(factor) => Ok(with_tau(res.spec, factor * netgraph::epidemic_threshold(g)?)),
        None => Ok(res.spec),
    }
}

fn cache_key(cfg: &Config, g: &Graph, spec: &ModelSpec, seed: u64) -> String {
    let e = &cfg.epidemic;
    let mut h = Sha256::new();
    h.update(g.fingerprint().as_bytes());
    h.update(spec.name().as_bytes());
    for (k, v) in spec.params() {
        h.update(k.as_bytes());
        h.update(v.to_le_bytes());
    }
    h.update(seed.to_le_bytes());
    h.update(e.dt.to_le_bytes());
    h.update(e.t_max.to_le_bytes());
    h.update(e.initial_fraction.to_le_bytes());
    for &v in &e.initial_nodes {
        h.update((v as u64).to_le_bytes());
    }
    h.update([e.truncate as u8]);
    h.finalize().iter().take(12).map(|b| format!("{b:02x}")).collect()
}

/// Reads `epidemic.trajectory` if given, otherwise simulates, going through
/// the on-disk cache when `cache_dir` is set.
pub fn trajectory(cfg: &Config, res: &Resolved, g: &Graph, spec: &ModelSpec, seed: u64) -> CliResult<Trajectory> {
    if !cfg.epidemic.trajectory.is_empty() {
        let f = fs::File::open(&cfg.epidemic.trajectory)
            .map_err(|e| CliError::Runtime(format!("cannot open {}: {e}", cfg.epidemic.trajectory)))?;
        let tr = Trajectory::read(BufReader::new(f))?;
        if tr.n_nodes() != g.n_nodes() {
            return Err(CliError::Runtime(format!(
                "trajectory has {} nodes but the graph has {}",
                tr.n_nodes(),
                g.n_nodes()
            )));
        }
        return Ok(tr);
    }
    let cached = (!cfg.cache_dir.is_empty())
        .then(|| Path::new(&cfg.cache_dir).join(format!("traj-{}.csv", cache_key(cfg, g, spec, seed))));
    if let Some(path) = &cached {
        if let Ok(bytes) = fs::read(path) {
            log::info!("trajectory cache hit {}", path.display());
            return Ok(Trajectory::read(Cursor::new(bytes))?);
        }
    }
    let e = &cfg.epidemic;
    let mut tr = simulate(g, spec, &res.initial, e.dt, e.t_max, seed)?;
    if e.truncate {
        let min_len = 2 * (res.model.t_h + res.model.t_f);
        tr = truncate_dynamic(&tr, &TruncateConfig { min_len, ..TruncateConfig::default() })?;
    }
    if let Some(path) = &cached {
        let mut buf = Vec::new();
        tr.write(&mut buf)?;
        write_atomic(path, &buf)?;
    }
    Ok(tr)
}

pub fn partition(cfg: &Config, res: &Resolved, g: &Graph, m: usize, seed: u64) -> CliResult<PartitionAssignment> {
    if !cfg.partition.file.is_empty() {
        let f = fs::File::open(&cfg.partition.file)
            .map_err(|e| CliError::Runtime(format!("cannot open {}: {e}", cfg.partition.file)))?;
        let p = PartitionAssignment::read_csv(BufReader::new(f), res.partition_method)?;
        if p.n_nodes() != g.n_nodes() {
            return Err(CliError::Runtime(format!(
                "partition covers {} nodes but the graph has {}",
                p.n_nodes(),
                g.n_nodes()
            )));
        }
        return Ok(p);
    }
    if m == 1 {
        return Ok(PartitionAssignment::whole(g.n_nodes())?);
    }
    let p = match res.partition_method {
        PartitionMethod::EvenIndex => even_by_index(g, m),
        PartitionMethod::Spectral => spectral_clustering(g, m, seed),
        PartitionMethod::KernighanLin => kernighan_lin(g, m, seed),
    };
    p.map_err(|e| CliError::Config(e.to_string()))
}

/// Test-split scores of one client.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientScore {
    pub acc: f64,
    pub f1: f64,
    pub ce: f64,
    /// Prevalence errors in percentage points.
    pub rmse: f64,
    pub mae: f64,
}

impl ClientScore {
    /// `(name, value)` in output order; `inv_ce` is `1 / ce`.
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("acc", self.acc),
            ("f1", self.f1),
            ("ce", self.ce),
            ("inv_ce", 1.0 / self.ce),
            ("rmse", self.rmse),
            ("mae", self.mae),
        ]
    }
}

pub fn score(state: &ModelState, ds: &ClientDataset, infected: u8) -> CliResult<ClientScore> {
    let gg = (state.config.arch == Architecture::Stgat).then(|| GatGraph::from_graph(&ds.subnet.graph));
    let ev = evaluate(state, &ds.splits.test, gg.as_ref())?;
    let cm = classification_metrics(&ev.predictions, &ev.targets)?;
    let pe = prevalence_errors(&ev.predictions, &ev.targets, ds.n_nodes(), state.config.t_f, infected)?;
    Ok(ClientScore { acc: cm.accuracy, f1: cm.macro_f1, ce: ev.ce, rmse: pe.rmse, mae: pe.mae })
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    /// One entry per client; a single entry for centralized training.
    pub scores: Vec<ClientScore>,
    /// One outcome for federated or centralized runs, one per client for solo.
    pub training: Vec<TrainingOutcome>,
    pub missing: MissingReport,
}

/// Windows, corrupts, trains and scores one configuration.
pub fn run_scenario(
    res: &Resolved,
    tr: &Trajectory,
    g: &Graph,
    part: &PartitionAssignment,
    missing: &MissingConfig,
    seeds: (u64, u64),
) -> CliResult<ScenarioOutcome> {
    let (train_seed, missing_seed) = seeds;
    let part = match res.regime {
        Regime::Centralized => PartitionAssignment::whole(g.n_nodes())?,
        _ => part.clone(),
    };
    let subnets = induced_subnetworks(g, &part)?;
    let mut data = build_client_datasets(tr, &subnets, res.model.t_h, res.model.t_f, res.fractions)?;
    let (s_class, i_class) = susceptible_infected_classes(tr);
    let report = inject_missing(&mut data, missing, i_class, s_class, missing_seed)?;
    let fed = &res.federation;
    let training = match res.regime {
        Regime::Federated => vec![run_federated(&res.model, &data, fed, train_seed)?],
        Regime::Solo => run_solo(&res.model, &data, fed, train_seed)?,
        Regime::Centralized => vec![run_centralized(&res.model, &data[0], fed, train_seed)?],
    };
    let scores = data
        .iter()
        .enumerate()
        .map(|(i, ds)| {
            let model = if training.len() == 1 { &training[0].model } else { &training[i].model };
            score(model, ds, i_class)
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(ScenarioOutcome { scores, training, missing: report })
}
