//! TOML experiment configuration, `--set` overrides and resolution into
//! library types.

use std::collections::BTreeMap;
use std::path::Path;

use epifed::dataset::{MissingConfig, DEFAULT_FRACTIONS};
use epifed::epidemics::{InitialCondition, ModelSpec};
use epifed::fedlearn::{Aggregation, FederationConfig};
use epifed::metrics::EtaMode;
use epifed::models::{Architecture, ModelConfig, TrainConfig};
use epifed::nncore::AdamConfig;
use epifed::partition::PartitionMethod;
use epifed::seeds;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Master seed. Every other seed defaults to a value derived from it.
    pub seed: u64,
    pub out_dir: String,
    /// Trajectory cache directory; empty disables the on-disk cache.
    pub cache_dir: String,
    pub graph: GraphSection,
    pub epidemic: EpidemicSection,
    pub partition: PartitionSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub missing: MissingSection,
    pub sweep: SweepSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 1,
            out_dir: "out".into(),
            cache_dir: String::new(),
            graph: GraphSection::default(),
            epidemic: EpidemicSection::default(),
            partition: PartitionSection::default(),
            model: ModelSection::default(),
            training: TrainingSection::default(),
            missing: MissingSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    /// erdos-renyi | barabasi-albert | complete | star | ring | file
    pub kind: String,
    pub n: usize,
    /// Edges per new node for barabasi-albert.
    pub m: usize,
    /// Edge probability for erdos-renyi.
    pub p: f64,
    /// Edge list for `kind = "file"`.
    pub path: String,
    /// Keep only the `top_k` highest-degree nodes; 0 keeps all.
    pub top_k: usize,
    pub seed: Option<u64>,
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection {
            kind: "barabasi-albert".into(),
            n: 200,
            m: 2,
            p: 0.05,
            path: String::new(),
            top_k: 0,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpidemicSection {
    /// SIS | SIR | SEIR | nmSIS | SIRS | SIRVS | SIStv
    pub model: String,
    pub params: BTreeMap<String, f64>,
    /// When set, the infection rate is rescaled so that tau equals this
    /// multiple of the graph's epidemic threshold.
    pub tau_over_threshold: Option<f64>,
    pub initial_fraction: f64,
    /// Explicit initially infected nodes; overrides `initial_fraction`.
    pub initial_nodes: Vec<usize>,
    pub dt: f64,
    pub t_max: f64,
    /// Cut the trajectory once the dynamics go quiet.
    pub truncate: bool,
    pub seed: Option<u64>,
    /// Read this trajectory file instead of simulating.
    pub trajectory: String,
}

impl Default for EpidemicSection {
    fn default() -> Self {
        EpidemicSection {
            model: "SIS".into(),
            params: BTreeMap::from([("beta".into(), 0.6), ("delta".into(), 1.0)]),
            tau_over_threshold: None,
            initial_fraction: 0.05,
            initial_nodes: Vec::new(),
            dt: 0.1,
            t_max: 40.0,
            truncate: false,
            seed: None,
            trajectory: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    /// even-index | spectral | kernighan-lin
    pub method: String,
    pub clients: usize,
    /// Read the assignment from a `node,client` file instead of computing it.
    pub file: String,
    pub seed: Option<u64>,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection { method: "even-index".into(), clients: 4, file: String::new(), seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// lstm | stgat
    pub architecture: String,
    pub d_embed: usize,
    pub lstm_hidden: usize,
    pub stgat_hidden: [usize; 2],
    pub gat_heads: usize,
    pub gat_head_dim: usize,
    pub t_h: usize,
    pub t_f: usize,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::new(Architecture::Lstm, 2);
        ModelSection {
            architecture: "lstm".into(),
            d_embed: d.d_embed,
            lstm_hidden: d.lstm_hidden,
            stgat_hidden: [d.stgat_hidden.0, d.stgat_hidden.1],
            gat_heads: d.gat_heads,
            gat_head_dim: d.gat_head_dim,
            t_h: d.t_h,
            t_f: d.t_f,
            dropout: d.dropout_p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    /// federated | solo | centralized
    pub regime: String,
    /// fedavg | fedprox
    pub aggregation: String,
    pub rounds: usize,
    pub local_epochs: usize,
    pub mu: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Concurrent client trainers, 0 = all cores. Does not change results.
    pub workers: usize,
    /// train / val / test fractions.
    pub splits: [f64; 3],
    pub seed: Option<u64>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let f = FederationConfig::default();
        TrainingSection {
            regime: "federated".into(),
            aggregation: "fedavg".into(),
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            mu: f.mu,
            patience: f.patience,
            min_delta: f.min_delta,
            batch_size: f.train.batch_size,
            lr: f.train.adam.lr,
            weight_decay: f.train.adam.weight_decay,
            workers: f.workers,
            splits: [DEFAULT_FRACTIONS.0, DEFAULT_FRACTIONS.1, DEFAULT_FRACTIONS.2],
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissingSection {
    pub client_ratio: f64,
    pub node_missing_ratio: f64,
    pub corrupt_targets: bool,
    pub seed: Option<u64>,
}

impl Default for MissingSection {
    fn default() -> Self {
        let d = MissingConfig::default();
        MissingSection {
            client_ratio: d.client_ratio,
            node_missing_ratio: d.node_missing_ratio,
            corrupt_targets: d.corrupt_targets,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// clients | tau | missing
    pub kind: String,
    /// Client-count sweep covers M = 2..=m_max.
    pub m_max: usize,
    /// Tau values as multiples of the epidemic threshold.
    pub taus: Vec<f64>,
    pub client_ratios: Vec<f64>,
    pub node_missing_ratios: Vec<f64>,
    /// Master seeds to repeat every grid point with; empty means `[seed]`.
    pub seeds: Vec<u64>,
    /// mean | compat
    pub eta_mode: String,
    /// Grid points trained concurrently.
    pub workers: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            kind: "clients".into(),
            m_max: 16,
            taus: vec![0.5, 1.0, 2.0, 4.0, 8.0],
            client_ratios: vec![1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0],
            node_missing_ratios: vec![0.0, 0.3, 0.6, 0.9],
            seeds: Vec::new(),
            eta_mode: "mean".into(),
            workers: 1,
        }
    }
}

impl Config {
    /// Parses a TOML document, applies `key.path=value` overrides, and
    /// checks the result.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> CliResult<Config> {
        let mut doc: toml::Table =
            toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Config = toml::Value::Table(doc)
            .try_into()
            .map_err(|e| CliError::Config(format!("config: {e}")))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Config> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Config::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve(&self) -> CliResult<Resolved> {
        Resolved::new(self)
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a
/// bare string.
fn apply_override(doc: &mut toml::Table, spec: &str) -> CliResult<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("bad override key {path:?}")));
    }
    let mut table = doc;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {path:?}: `{k}` is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Federated,
    Solo,
    Centralized,
}

impl Regime {
    pub fn label(&self, agg: Aggregation) -> String {
        match self {
            Regime::Federated => agg.to_string(),
            Regime::Solo => "solo".into(),
            Regime::Centralized => "centralized".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Clients,
    Tau,
    Missing,
}

/// The seeds every stage uses, after defaults are filled in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub master: u64,
    pub graph: u64,
    pub simulation: u64,
    pub partition: u64,
    pub training: u64,
    pub missing: u64,
}

impl Seeds {
    pub fn from_master(cfg: &Config, master: u64) -> Seeds {
        Seeds {
            master,
            graph: cfg.graph.seed.unwrap_or(master),
            simulation: cfg.epidemic.seed.unwrap_or(master),
            partition: cfg
                .partition
                .seed
                .unwrap_or_else(|| seeds::derive(master, &[seeds::tag::PARTITION])),
            training: cfg.training.seed.unwrap_or(master),
            missing: cfg.missing.seed.unwrap_or(master),
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "master={} graph={} simulation={} partition={} training={} missing={}",
            self.master, self.graph, self.simulation, self.partition, self.training, self.missing
        )
    }
}

/// Typed view of a validated [`Config`].
#[derive(Debug, Clone)]
pub struct Resolved {
    /// Model with the configured rates, before any threshold rescaling.
    pub spec: ModelSpec,
    pub initial: InitialCondition,
    pub partition_method: PartitionMethod,
    pub model: ModelConfig,
    pub regime: Regime,
    pub federation: FederationConfig,
    pub fractions: (f64, f64, f64),
    pub missing: MissingConfig,
    pub sweep_kind: SweepKind,
    pub eta_mode: EtaMode,
    pub seeds: Seeds,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl Resolved {
    fn new(cfg: &Config) -> CliResult<Resolved> {
        match cfg.graph.kind.as_str() {
            "erdos-renyi" | "barabasi-albert" | "complete" | "star" | "ring" => {}
            "file" if !cfg.graph.path.is_empty() => {}
            "file" => return Err(bad("graph.kind = \"file\" needs graph.path")),
            other => return Err(bad(format!("unknown graph.kind `{other}`"))),
        }
        let e = &cfg.epidemic;
        let params: Vec<(String, f64)> = e.params.iter().map(|(k, v)| (k.clone(), *v)).collect();
        let spec = ModelSpec::from_parts(&e.model, &params).map_err(|x| bad(x.to_string()))?;
        spec.validate().map_err(|x| bad(x.to_string()))?;
        if let Some(f) = e.tau_over_threshold {
            if !(f > 0.0 && f.is_finite()) {
                return Err(bad(format!("epidemic.tau_over_threshold={f} must be positive")));
            }
        }
        if !(e.dt > 0.0) || !(e.t_max > e.dt) {
            return Err(bad(format!("need 0 < dt < t_max, got dt={} t_max={}", e.dt, e.t_max)));
        }
        let initial = if e.initial_nodes.is_empty() {
            if !(e.initial_fraction > 0.0 && e.initial_fraction <= 1.0) {
                return Err(bad(format!("initial_fraction={} not in (0, 1]", e.initial_fraction)));
            }
            InitialCondition::Fraction(e.initial_fraction)
        } else {
            InitialCondition::Nodes(e.initial_nodes.clone())
        };

        let partition_method: PartitionMethod =
            cfg.partition.method.parse().map_err(|x: epifed::Error| bad(x.to_string()))?;
        if cfg.partition.clients == 0 {
            return Err(bad("partition.clients must be positive"));
        }

        let m = &cfg.model;
        let arch: Architecture = m.architecture.parse().map_err(|x: epifed::Error| bad(x.to_string()))?;
        let model = ModelConfig {
            arch,
            n_classes: spec.n_classes(),
            d_embed: m.d_embed,
            lstm_hidden: m.lstm_hidden,
            stgat_hidden: (m.stgat_hidden[0], m.stgat_hidden[1]),
            gat_heads: m.gat_heads,
            gat_head_dim: m.gat_head_dim,
            t_h: m.t_h,
            t_f: m.t_f,
            dropout_p: m.dropout,
        };
        model.validate().map_err(|x| bad(x.to_string()))?;

        let t = &cfg.training;
        let regime = match t.regime.as_str() {
            "federated" => Regime::Federated,
            "solo" => Regime::Solo,
            "centralized" => Regime::Centralized,
            other => return Err(bad(format!("unknown training.regime `{other}`"))),
        };
        let method: Aggregation = t.aggregation.parse().map_err(|x: epifed::Error| bad(x.to_string()))?;
        if t.batch_size == 0 {
            return Err(bad("training.batch_size must be positive"));
        }
        let federation = FederationConfig {
            method,
            rounds: t.rounds,
            local_epochs: t.local_epochs,
            mu: t.mu,
            patience: t.patience,
            min_delta: t.min_delta,
            train: TrainConfig {
                epochs: t.local_epochs,
                batch_size: t.batch_size,
                adam: AdamConfig { lr: t.lr, weight_decay: t.weight_decay, ..AdamConfig::default() },
            },
            workers: t.workers,
        };
        federation.validate().map_err(|x| bad(x.to_string()))?;
        let [a, b, c] = t.splits;
        if [a, b, c].iter().any(|f| !(*f > 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(bad(format!("training.splits {:?} must be positive and sum to 1", t.splits)));
        }

        let ms = &cfg.missing;
        for (name, r) in [("client_ratio", ms.client_ratio), ("node_missing_ratio", ms.node_missing_ratio)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(bad(format!("missing.{name}={r} outside [0, 1]")));
            }
        }
        let missing = MissingConfig {
            client_ratio: ms.client_ratio,
            node_missing_ratio: ms.node_missing_ratio,
            corrupt_targets: ms.corrupt_targets,
        };

        let s = &cfg.sweep;
        let sweep_kind = match s.kind.as_str() {
            "clients" => SweepKind::Clients,
            "tau" => SweepKind::Tau,
            "missing" => SweepKind::Missing,
            other => return Err(bad(format!("unknown sweep.kind `{other}`"))),
        };
        let eta_mode = match s.eta_mode.as_str() {
            "mean" => EtaMode::Mean,
            "compat" => EtaMode::Compat,
            other => return Err(bad(format!("unknown sweep.eta_mode `{other}`"))),
        };
        if s.taus.iter().any(|t| !(*t > 0.0)) {
            return Err(bad("sweep.taus must be positive"));
        }
        if s.client_ratios.iter().chain(&s.node_missing_ratios).any(|r| !(0.0..=1.0).contains(r)) {
            return Err(bad("sweep ratios must lie in [0, 1]"));
        }

        Ok(Resolved {
            spec,
            initial,
            partition_method,
            model,
            regime,
            federation,
            fractions: (a, b, c),
            missing,
            sweep_kind,
            eta_mode,
            seeds: Seeds::from_master(cfg, cfg.seed),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = Config::from_toml_str("", &[]).unwrap();
        assert_eq!(cfg, Config::default());
        let r = cfg.resolve().unwrap();
        assert_eq!(r.regime, Regime::Federated);
        assert_eq!(r.federation, FederationConfig::default());
        assert_eq!(r.model, ModelConfig::new(Architecture::Lstm, 2));
    }

    #[test]
    fn overrides_win_over_file() {
        let text = "seed = 3\n[training]\nrounds = 7\n[epidemic.params]\nbeta = 0.1\ndelta = 1.0\n";
        let cfg = Config::from_toml_str(
            text,
            &["training.rounds=9".into(), "model.architecture=stgat".into(), "epidemic.params.beta=0.25".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.training.rounds, 9);
        assert_eq!(cfg.model.architecture, "stgat");
        assert_eq!(cfg.epidemic.params["beta"], 0.25);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = Config::default();
        cfg.epidemic.tau_over_threshold = Some(4.0);
        cfg.sweep.seeds = vec![1, 2];
        let back = Config::from_toml_str(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for (text, ov) in [
            ("[graph]\nkind = \"torus\"", vec![]),
            ("", vec!["epidemic.params.beta=-1".to_string()]),
            ("", vec!["training.splits=[0.5, 0.5, 0.5]".to_string()]),
            ("[training]\nregime = \"gossip\"", vec![]),
            ("unknown_key = 1", vec![]),
            ("", vec!["epidemic.model=SIStv".into(), "epidemic.params={a=0.1,b=0.5,c=1.0,delta=1.0}".into()]),
        ] {
            let err = Config::from_toml_str(text, &ov).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text} {ov:?}: {err}");
        }
    }

    #[test]
    fn seeds_default_to_master_and_can_be_pinned() {
        let cfg = Config::from_toml_str("seed = 5\n[epidemic]\nseed = 11", &[]).unwrap();
        let s = cfg.resolve().unwrap().seeds;
        assert_eq!((s.master, s.graph, s.simulation, s.training), (5, 5, 11, 5));
        assert_eq!(s.partition, seeds::derive(5, &[seeds::tag::PARTITION]));
    }
}
