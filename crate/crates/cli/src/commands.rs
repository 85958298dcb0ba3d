//! The six subcommands. Each returns the text it wants printed.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use epifed::dataset::MissingConfig;
use epifed::epidemics::{prevalence, Compartment, Trajectory};
use epifed::fedlearn::write_round_log;
use epifed::metrics::{efficacy_energy, mean_client_metric};
use epifed::netgraph::{self, Graph};
use epifed::partition::edge_cut;

use crate::config::{Config, Regime, Resolved, Seeds, SweepKind};
use crate::error::{CliError, CliResult};
use crate::output::{metric_table, provenance, read_metric_table, scenario_fields, write_atomic, MetricRow};
use crate::pipeline::{self, ClientScore, ScenarioOutcome};

fn out_path(cfg: &Config, name: &str) -> PathBuf {
    Path::new(&cfg.out_dir).join(name)
}

fn prevalence_summary(tr: &Trajectory) -> CliResult<String> {
    let y = prevalence(tr, Compartment::I)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let peak = y.iter().cloned().fold(0.0, f64::max);
    Ok(format!(
        "prevalence of I: initial {:.4}, final {:.4}, mean {:.4}, peak {:.4} over {} samples",
        y[0],
        y[y.len() - 1],
        mean,
        peak,
        y.len()
    ))
}

pub fn simulate(cfg: &Config, out: Option<&Path>) -> CliResult<String> {
    let res = cfg.resolve()?;
    let seeds = res.seeds;
    let g = pipeline::load_graph(cfg, seeds.graph)?;
    let spec = pipeline::effective_spec(&res, cfg, &g)?;
    let tr = pipeline::trajectory(cfg, &res, &g, &spec, seeds.simulation)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| out_path(cfg, "trajectory.csv"));

    let mut body = Vec::new();
    tr.write(&mut body)?;
    let split = body.iter().position(|&b| b == b'\n').map_or(body.len(), |i| i + 1);
    let mut extra = vec![("model", format!("{} {:?}", spec.name(), spec.params())), ("tau", spec.tau().to_string())];
    if let Ok(tc) = netgraph::epidemic_threshold(&g) {
        extra.push(("tau_c", tc.to_string()));
    }
    let header = provenance("simulate", cfg, &seeds, &extra);
    let mut bytes = body[..split].to_vec();
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend_from_slice(&body[split..]);
    write_atomic(&path, &bytes)?;

    Ok(format!(
        "wrote {} ({} nodes, {} samples, {} tau={:.6})\n{}",
        path.display(),
        tr.n_nodes(),
        tr.len(),
        spec.name(),
        spec.tau(),
        prevalence_summary(&tr)?
    ))
}

pub fn partition(cfg: &Config, out: Option<&Path>) -> CliResult<String> {
    let res = cfg.resolve()?;
    let g = pipeline::load_graph(cfg, res.seeds.graph)?;
    let p = pipeline::partition(cfg, &res, &g, cfg.partition.clients, res.seeds.partition)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| out_path(cfg, "partition.csv"));
    let cut = edge_cut(&g, &p);
    let mut bytes = provenance("partition", cfg, &res.seeds, &[("edge_cut", cut.to_string())]).into_bytes();
    p.write_csv(&mut bytes)?;
    write_atomic(&path, &bytes)?;
    Ok(format!(
        "wrote {} ({} clients, method {}, sizes {:?}, edge cut {cut} of {})",
        path.display(),
        p.n_clients(),
        p.method(),
        p.sizes(),
        g.n_edges()
    ))
}

/// Per-client and mean rows for every metric of a scenario.
fn scenario_rows(res: &Resolved, cfg: &Config, scenario: &str, epidemic: &str, scores: &[ClientScore]) -> Vec<MetricRow> {
    let m = scores.len();
    let base = MetricRow {
        scenario: scenario.to_string(),
        model: res.model.arch.to_string(),
        aggregation: res.regime.label(res.federation.method),
        partition: if res.regime == Regime::Centralized { "whole".into() } else { cfg.partition.method.clone() },
        epidemic: epidemic.to_string(),
        m,
        metric: String::new(),
        value: 0.0,
    };
    let mut rows = Vec::new();
    for (j, (name, _)) in scores[0].named().iter().enumerate() {
        let values: Vec<f64> = scores.iter().map(|s| s.named()[j].1).collect();
        for (k, &v) in values.iter().enumerate() {
            rows.push(MetricRow { metric: format!("{name}.client{k}"), value: v, ..base.clone() });
        }
        let mean = values.iter().sum::<f64>() / m as f64;
        rows.push(MetricRow { metric: format!("{name}.mean"), value: mean, ..base.clone() });
    }
    rows
}

fn checkpoint_bytes(header: &str, state: &epifed::models::ModelState) -> CliResult<Vec<u8>> {
    let mut bytes = header.as_bytes().to_vec();
    state.write_checkpoint(&mut bytes)?;
    Ok(bytes)
}

pub fn train(cfg: &Config) -> CliResult<String> {
    let res = cfg.resolve()?;
    let seeds = res.seeds;
    let g = pipeline::load_graph(cfg, seeds.graph)?;
    let spec = pipeline::effective_spec(&res, cfg, &g)?;
    let tr = pipeline::trajectory(cfg, &res, &g, &spec, seeds.simulation)?;
    let part = pipeline::partition(cfg, &res, &g, cfg.partition.clients, seeds.partition)?;
    let outcome = pipeline::run_scenario(&res, &tr, &g, &part, &res.missing, (seeds.training, seeds.missing))?;

    let header = provenance("train", cfg, &seeds, &[("tau", spec.tau().to_string())]);
    let rows = scenario_rows(&res, cfg, "train", spec.name(), &outcome.scores);
    write_atomic(&out_path(cfg, "metrics.csv"), &metric_table(&header, &rows)?)?;
    let solo = outcome.training.len() > 1;
    for (k, t) in outcome.training.iter().enumerate() {
        let suffix = if solo { format!(".client{k}") } else { String::new() };
        let mut log = header.clone().into_bytes();
        write_round_log(&t.log, &mut log)?;
        write_atomic(&out_path(cfg, &format!("round_log{suffix}.csv")), &log)?;
        write_atomic(&out_path(cfg, &format!("model{suffix}.ckpt")), &checkpoint_bytes(&header, &t.model)?)?;
    }

    let mut s = format!(
        "{} {} on {} clients, {} tau={:.6}\n",
        res.regime.label(res.federation.method),
        res.model.arch,
        outcome.scores.len(),
        spec.name(),
        spec.tau()
    );
    if !outcome.missing.clients.is_empty() {
        let _ = writeln!(s, "missing reports injected into clients {:?}, flipped {:?}", outcome.missing.clients, outcome.missing.flipped);
    }
    for t in &outcome.training {
        let _ = writeln!(s, "rounds run {}, best round {} (val CE {:.6})", t.rounds_run, t.best_round, t.best_val_ce);
    }
    for (k, c) in outcome.scores.iter().enumerate() {
        let _ = writeln!(s, "client {k}: acc {:.4} f1 {:.4} ce {:.4} rmse {:.4} mae {:.4}", c.acc, c.f1, c.ce, c.rmse, c.mae);
    }
    let accs: Vec<f64> = outcome.scores.iter().map(|c| c.acc).collect();
    let _ = write!(s, "mean acc {:.4}; outputs in {}", mean_client_metric(&accs)?, cfg.out_dir);
    Ok(s)
}

#[derive(Debug, Clone)]
struct Point {
    label: String,
    seed: u64,
    m: usize,
    tau_factor: Option<f64>,
    missing: MissingConfig,
}

fn sweep_points(cfg: &Config, res: &Resolved) -> CliResult<Vec<Point>> {
    let s = &cfg.sweep;
    let seeds = if s.seeds.is_empty() { vec![cfg.seed] } else { s.seeds.clone() };
    let m0 = cfg.partition.clients;
    let mut points = Vec::new();
    for &seed in &seeds {
        let base = Point { label: String::new(), seed, m: m0, tau_factor: cfg.epidemic.tau_over_threshold, missing: res.missing };
        match res.sweep_kind {
            SweepKind::Clients => {
                if res.regime == Regime::Centralized {
                    return Err(CliError::Config("a client-count sweep needs federated or solo training".into()));
                }
                if s.m_max < 3 {
                    return Err(CliError::Config(format!("sweep.m_max={} must be >= 3", s.m_max)));
                }
                for m in 2..=s.m_max {
                    points.push(Point { label: format!("M={m};seed={seed}"), m, ..base.clone() });
                }
            }
            SweepKind::Tau => {
                if s.taus.is_empty() {
                    return Err(CliError::Config("sweep.taus is empty".into()));
                }
                for &t in &s.taus {
                    points.push(Point { label: format!("tau={t};seed={seed}"), tau_factor: Some(t), ..base.clone() });
                }
            }
            SweepKind::Missing => {
                if s.client_ratios.is_empty() || s.node_missing_ratios.is_empty() {
                    return Err(CliError::Config("missing-ratio sweep needs both ratio lists".into()));
                }
                for &cr in &s.client_ratios {
                    for &nmr in &s.node_missing_ratios {
                        let missing = MissingConfig { client_ratio: cr, node_missing_ratio: nmr, ..res.missing };
                        points.push(Point { label: format!("cr={cr};nmr={nmr};seed={seed}"), missing, ..base.clone() });
                    }
                }
            }
        }
    }
    Ok(points)
}

fn sanitize(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

pub fn sweep(cfg: &Config) -> CliResult<String> {
    let res = cfg.resolve()?;
    let points = sweep_points(cfg, &res)?;

    // graphs and trajectories are built up front, in grid order, and shared
    let mut graphs: BTreeMap<u64, Arc<Graph>> = BTreeMap::new();
    let mut trajectories: HashMap<(u64, Option<u64>), (Arc<Trajectory>, String)> = HashMap::new();
    let mut extra: Vec<(String, String)> = Vec::new();
    for p in &points {
        let seeds = Seeds::from_master(cfg, p.seed);
        if !graphs.contains_key(&p.seed) {
            let g = pipeline::load_graph(cfg, seeds.graph)?;
            if res.sweep_kind == SweepKind::Tau {
                extra.push((format!("tau_c.seed{}", p.seed), netgraph::epidemic_threshold(&g)?.to_string()));
            }
            graphs.insert(p.seed, Arc::new(g));
        }
        let key = (p.seed, p.tau_factor.map(f64::to_bits));
        if !trajectories.contains_key(&key) {
            let g = &graphs[&p.seed];
            let spec = match p.tau_factor {
                Some(f) => pipeline::with_tau(res.spec, f * netgraph::epidemic_threshold(g)?),
                None => res.spec,
            };
            let tr = pipeline::trajectory(cfg, &res, g, &spec, seeds.simulation)?;
            trajectories.insert(key, (Arc::new(tr), spec.name().to_string()));
        }
    }

    let run_point = |idx: usize, p: &Point| -> CliResult<Vec<MetricRow>> {
        let seeds = Seeds::from_master(cfg, p.seed);
        let g = &graphs[&p.seed];
        let (tr, epidemic) = &trajectories[&(p.seed, p.tau_factor.map(f64::to_bits))];
        let part = pipeline::partition(cfg, &res, g, p.m, seeds.partition)?;
        let outcome: ScenarioOutcome =
            pipeline::run_scenario(&res, tr, g, &part, &p.missing, (seeds.training, seeds.missing))?;
        let rows = scenario_rows(&res, cfg, &p.label, epidemic, &outcome.scores);
        let header = provenance("sweep", cfg, &seeds, &[("point", p.label.clone())]);
        let file = out_path(cfg, &format!("points/{idx:03}_{}.csv", sanitize(&p.label)));
        write_atomic(&file, &metric_table(&header, &rows)?)?;
        log::info!("sweep point {} done", p.label);
        Ok(rows)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.sweep.workers.max(1))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let per_point: Vec<CliResult<Vec<MetricRow>>> = pool.install(|| {
        use rayon::prelude::*;
        points.par_iter().enumerate().map(|(i, p)| run_point(i, p)).collect()
    });
    let mut rows = Vec::new();
    for r in per_point {
        rows.extend(r?);
    }

    if res.sweep_kind == SweepKind::Clients {
        rows.extend(eta_rows(&rows, cfg, &res)?);
    }
    let extra_refs: Vec<(&str, String)> = extra.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    let header = provenance("sweep", cfg, &res.seeds, &extra_refs);
    let path = out_path(cfg, "results.csv");
    write_atomic(&path, &metric_table(&header, &rows)?)?;
    Ok(format!("wrote {} ({} grid points, {} rows)", path.display(), points.len(), rows.len()))
}

/// One efficacy-energy row per (seed, metric) from the `.mean` rows.
fn eta_rows(rows: &[MetricRow], cfg: &Config, res: &Resolved) -> CliResult<Vec<MetricRow>> {
    let mut by_seed_metric: BTreeMap<(String, String), Vec<(usize, f64)>> = BTreeMap::new();
    let mut template: BTreeMap<(String, String), MetricRow> = BTreeMap::new();
    let mut order = Vec::new();
    for r in rows {
        let Some(name) = r.metric.strip_suffix(".mean") else { continue };
        let seed = scenario_fields(&r.scenario)
            .into_iter()
            .find(|(k, _)| *k == "seed")
            .map(|(_, v)| v.to_string())
            .unwrap_or_default();
        let key = (seed, name.to_string());
        if !by_seed_metric.contains_key(&key) {
            order.push(key.clone());
            template.insert(key.clone(), r.clone());
        }
        by_seed_metric.entry(key).or_default().push((r.m, r.value));
    }
    let mut out = Vec::new();
    for key in order {
        let eta = efficacy_energy(&by_seed_metric[&key], res.eta_mode)?;
        out.push(MetricRow {
            scenario: format!("eta;seed={}", key.0),
            m: cfg.sweep.m_max,
            metric: format!("{}.eta", key.1),
            value: eta,
            ..template[&key].clone()
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Family {
    /// Raw per-client values for each client count.
    Violin,
    /// Mean, min and max over clients against the swept variable.
    Line,
}

pub fn plotdata(cfg: &Config, results: &Path, family: Family, metric: &str) -> CliResult<String> {
    let res = cfg.resolve()?;
    let f = std::fs::File::open(results)
        .map_err(|e| CliError::Runtime(format!("cannot open {}: {e}", results.display())))?;
    let rows = read_metric_table(std::io::BufReader::new(f))?;
    if rows.is_empty() {
        return Err(CliError::Runtime(format!("{} holds no results", results.display())));
    }
    let prefix = format!("{metric}.client");
    let client_rows: Vec<&MetricRow> = rows.iter().filter(|r| r.metric.starts_with(&prefix)).collect();
    if client_rows.is_empty() {
        return Err(CliError::Runtime(format!("no `{prefix}<k>` rows in {}", results.display())));
    }
    let header = provenance("plotdata", cfg, &res.seeds, &[("results", results.display().to_string())]);
    let mut text = header;
    let name = match family {
        Family::Violin => {
            text.push_str("scenario,M,client,value\n");
            for r in &client_rows {
                let client = &r.metric[prefix.len()..];
                let _ = writeln!(text, "{},{},{client},{}", r.scenario, r.m, r.value);
            }
            format!("violin_{metric}.csv")
        }
        Family::Line => {
            let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
            for r in &client_rows {
                match groups.iter_mut().find(|(s, _)| *s == r.scenario) {
                    Some((_, v)) => v.push(r.value),
                    None => groups.push((r.scenario.clone(), vec![r.value])),
                }
            }
            text.push_str("series,x,mean,min,max\n");
            for (scenario, values) in &groups {
                let fields = scenario_fields(scenario);
                let x_key = ["tau", "nmr", "M"].into_iter().find(|k| fields.iter().any(|(f, _)| f == k));
                let (x, series) = match x_key {
                    Some(k) => (
                        fields.iter().find(|(f, _)| *f == k).map(|(_, v)| v.to_string()).unwrap_or_default(),
                        fields.iter().filter(|(f, _)| *f != k).map(|(f, v)| format!("{f}={v}")).collect::<Vec<_>>().join(";"),
                    ),
                    None => (String::new(), scenario.clone()),
                };
                let mean = mean_client_metric(values)?;
                let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let _ = writeln!(text, "{series},{x},{mean},{min},{max}");
            }
            format!("line_{metric}.csv")
        }
    };
    let path = out_path(cfg, &name);
    write_atomic(&path, text.as_bytes())?;
    Ok(format!("wrote {}", path.display()))
}

pub fn graph_info(cfg: &Config) -> CliResult<String> {
    let res = cfg.resolve()?;
    let g = pipeline::load_graph(cfg, res.seeds.graph)?;
    let mut s = format!(
        "nodes {}\nedges {}\nmean degree {:.4}\nmax degree {}\ncomponents {}\nfingerprint {}\n",
        g.n_nodes(),
        g.n_edges(),
        g.mean_degree(),
        g.max_degree(),
        g.component_count(),
        g.fingerprint()
    );
    match netgraph::spectral_radius(&g, netgraph::DEFAULT_SPECTRAL_TOL) {
        Ok(l1) => {
            let _ = write!(s, "spectral radius {l1:.6}\nepidemic threshold {:.6}", 1.0 / l1);
        }
        Err(e) => {
            let _ = write!(s, "spectral radius undefined ({e})");
        }
    }
    Ok(s)
}
