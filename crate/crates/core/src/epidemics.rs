//! Stochastic compartmental epidemics on a [`Graph`].
//!
//! Markovian variants run a direct Gillespie loop over per-node rates held in a
//! sum tree. The non-Markovian SIS variant uses a next-reaction event queue with
//! Weibull transmission delays, and the seasonal SIS variant uses thinning
//! against the constant envelope `a + |b|`.
//!
//! States are sampled on the fixed grid `t_k = k * dt`, each sample holding the
//! configuration after the last event at or before `t_k`.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Weibull};

use crate::netgraph::Graph;
use crate::{seeds, Error, Result};

/// Compartment codes, stable across every model and file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Compartment {
    S = 0,
    I = 1,
    R = 2,
    E = 3,
    V = 4,
}

impl Compartment {
    pub const fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Compartment::S),
            1 => Some(Compartment::I),
            2 => Some(Compartment::R),
            3 => Some(Compartment::E),
            4 => Some(Compartment::V),
            _ => None,
        }
    }
}

impl fmt::Display for Compartment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Compartment::S => "S",
            Compartment::I => "I",
            Compartment::R => "R",
            Compartment::E => "E",
            Compartment::V => "V",
        };
        f.write_str(s)
    }
}

use Compartment::{E, I, R, S, V};

/// One of the seven compartmental processes with its rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelSpec {
    Sis { beta: f64, delta: f64 },
    Sir { beta: f64, delta: f64 },
    /// `beta1` infects S into E, `beta2` is the E -> I incubation rate.
    Seir { beta1: f64, beta2: f64, delta: f64 },
    /// Weibull transmission delay (`scale`, `shape`), exponential recovery.
    NmSis { scale: f64, shape: f64, delta: f64 },
    Sirs { beta: f64, delta: f64, omega: f64 },
    /// S -> V at `v1`, V -> S at `v2`; vaccinated nodes cannot be infected.
    Sirvs { beta: f64, delta: f64, omega: f64, v1: f64, v2: f64 },
    /// Infection rate `a + b sin(t / c)`.
    SisTv { a: f64, b: f64, c: f64, delta: f64 },
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Sis { .. } => "SIS",
            ModelSpec::Sir { .. } => "SIR",
            ModelSpec::Seir { .. } => "SEIR",
            ModelSpec::NmSis { .. } => "nmSIS",
            ModelSpec::Sirs { .. } => "SIRS",
            ModelSpec::Sirvs { .. } => "SIRVS",
            ModelSpec::SisTv { .. } => "SIStv",
        }
    }

    pub fn params(&self) -> Vec<(&'static str, f64)> {
        match *self {
            ModelSpec::Sis { beta, delta } | ModelSpec::Sir { beta, delta } => {
                vec![("beta", beta), ("delta", delta)]
            }
            ModelSpec::Seir { beta1, beta2, delta } => {
                vec![("beta1", beta1), ("beta2", beta2), ("delta", delta)]
            }
            ModelSpec::NmSis { scale, shape, delta } => {
                vec![("scale", scale), ("shape", shape), ("delta", delta)]
            }
            ModelSpec::Sirs { beta, delta, omega } => {
                vec![("beta", beta), ("delta", delta), ("omega", omega)]
            }
            ModelSpec::Sirvs { beta, delta, omega, v1, v2 } => vec![
                ("beta", beta),
                ("delta", delta),
                ("omega", omega),
                ("v1", v1),
                ("v2", v2),
            ],
            ModelSpec::SisTv { a, b, c, delta } => {
                vec![("a", a), ("b", b), ("c", c), ("delta", delta)]
            }
        }
    }

    /// Build from a model name and `key=value` parameters.
    pub fn from_parts(name: &str, params: &[(String, f64)]) -> Result<Self> {
        let get = |key: &str| -> Result<f64> {
            params
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::invalid(format!("{name}: missing parameter `{key}`")))
        };
        let spec = match name.to_ascii_lowercase().as_str() {
            "sis" => ModelSpec::Sis { beta: get("beta")?, delta: get("delta")? },
            "sir" => ModelSpec::Sir { beta: get("beta")?, delta: get("delta")? },
            "seir" => ModelSpec::Seir {
                beta1: get("beta1")?,
                beta2: get("beta2")?,
                delta: get("delta")?,
            },
            "nmsis" => ModelSpec::NmSis {
                scale: get("scale")?,
                shape: get("shape")?,
                delta: get("delta")?,
            },
            "sirs" => ModelSpec::Sirs {
                beta: get("beta")?,
                delta: get("delta")?,
                omega: get("omega")?,
            },
            "sirvs" => ModelSpec::Sirvs {
                beta: get("beta")?,
                delta: get("delta")?,
                omega: get("omega")?,
                v1: get("v1")?,
                v2: get("v2")?,
            },
            "sistv" => ModelSpec::SisTv {
                a: get("a")?,
                b: get("b")?,
                c: get("c")?,
                delta: get("delta")?,
            },
            other => return Err(Error::invalid(format!("unknown epidemic model `{other}`"))),
        };
        let known: Vec<&str> = spec.params().iter().map(|(k, _)| *k).collect();
        if let Some((k, _)) = params.iter().find(|(k, _)| !known.contains(&k.as_str())) {
            return Err(Error::invalid(format!("{name}: unknown parameter `{k}`")));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in self.params() {
            if !v.is_finite() {
                return Err(Error::invalid(format!("{}: {k}={v} not finite", self.name())));
            }
            // b is a signed amplitude, every other parameter is a positive rate
            if k != "b" && v <= 0.0 {
                return Err(Error::invalid(format!("{}: {k}={v} must be > 0", self.name())));
            }
        }
        if let ModelSpec::SisTv { a, b, .. } = *self {
            if a - b.abs() < 0.0 {
                return Err(Error::invalid(format!(
                    "SIStv: a - |b| = {} < 0 gives a negative infection rate",
                    a - b.abs()
                )));
            }
        }
        Ok(())
    }

    /// Compartments the model can produce. The position of a compartment in
    /// this list is its class index for the predictors.
    pub fn compartments(&self) -> &'static [Compartment] {
        match self {
            ModelSpec::Sis { .. } | ModelSpec::NmSis { .. } | ModelSpec::SisTv { .. } => &[S, I],
            ModelSpec::Sir { .. } | ModelSpec::Sirs { .. } => &[S, I, R],
            ModelSpec::Seir { .. } => &[S, I, R, E],
            ModelSpec::Sirvs { .. } => &[S, I, R, V],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.compartments().len()
    }

    pub fn is_legal(&self, c: Compartment) -> bool {
        self.compartments().contains(&c)
    }

    /// Class index of a compartment code, or `None` if the model never produces it.
    pub fn class_of(&self, code: u8) -> Option<u8> {
        self.compartments()
            .iter()
            .position(|c| c.code() == code)
            .map(|p| p as u8)
    }

    /// Effective infection rate tau used for phase sweeps.
    pub fn tau(&self) -> f64 {
        match *self {
            ModelSpec::Sis { beta, delta } | ModelSpec::Sir { beta, delta } => beta / delta,
            ModelSpec::Seir { beta1, delta, .. } => beta1 / delta,
            ModelSpec::NmSis { scale, delta, .. } => 1.0 / (scale * delta),
            ModelSpec::Sirs { beta, delta, omega } => beta / (delta + omega),
            ModelSpec::Sirvs { beta, delta, omega, .. } => beta / (delta + omega),
            ModelSpec::SisTv { a, delta, .. } => a / delta,
        }
    }

    fn params_string(&self) -> String {
        self.params()
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// Which nodes start infected.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    /// `ceil(rho * N)` distinct nodes drawn uniformly with the run's seed.
    Fraction(f64),
    Nodes(Vec<usize>),
}

impl Default for InitialCondition {
    fn default() -> Self {
        InitialCondition::Fraction(0.05)
    }
}

impl InitialCondition {
    fn resolve(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        match self {
            InitialCondition::Fraction(rho) => {
                if !(*rho > 0.0 && *rho <= 1.0) {
                    return Err(Error::invalid(format!("initial fraction {rho} not in (0,1]")));
                }
                if n == 0 {
                    return Err(Error::Empty("graph has no nodes".into()));
                }
                let k = ((rho * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
                let mut nodes = index::sample(rng, n, k).into_vec();
                nodes.sort_unstable();
                Ok(nodes)
            }
            InitialCondition::Nodes(nodes) => {
                if nodes.is_empty() {
                    return Err(Error::Empty("initial infected set".into()));
                }
                if let Some(&bad) = nodes.iter().find(|&&v| v >= n) {
                    return Err(Error::invalid(format!("initial node {bad} out of range")));
                }
                Ok(nodes.clone())
            }
        }
    }
}

/// Node states sampled every `dt`, row-major `T x N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub model: ModelSpec,
    pub graph_hash: String,
    pub dt: f64,
    pub seed: u64,
    n_nodes: usize,
    states: Vec<u8>,
}

impl Trajectory {
    pub fn new(
        model: ModelSpec,
        graph_hash: String,
        dt: f64,
        seed: u64,
        n_nodes: usize,
        states: Vec<u8>,
    ) -> Result<Self> {
        if n_nodes == 0 || states.len() % n_nodes != 0 {
            return Err(Error::shape(format!(
                "{} states do not tile {n_nodes} nodes",
                states.len()
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::invalid(format!("dt={dt} must be > 0")));
        }
        for &code in &states {
            match Compartment::from_code(code) {
                Some(c) if model.is_legal(c) => {}
                _ => {
                    return Err(Error::invalid(format!(
                        "state code {code} illegal for {}",
                        model.name()
                    )))
                }
            }
        }
        Ok(Trajectory { model, graph_hash, dt, seed, n_nodes, states })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.n_nodes
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.time(k)).collect()
    }

    /// States of all nodes at sample `k`.
    pub fn sample(&self, k: usize) -> &[u8] {
        &self.states[k * self.n_nodes..(k + 1) * self.n_nodes]
    }

    pub fn states(&self) -> &[u8] {
        &self.states
    }

    /// Keep the first `len` samples.
    pub fn truncated(&self, len: usize) -> Trajectory {
        let len = len.min(self.len());
        Trajectory {
            states: self.states[..len * self.n_nodes].to_vec(),
            ..self.clone()
        }
    }

    /// Restrict to a subset of nodes (columns) in the order given.
    pub fn restrict(&self, nodes: &[usize]) -> Result<Trajectory> {
        if let Some(&bad) = nodes.iter().find(|&&v| v >= self.n_nodes) {
            return Err(Error::invalid(format!("node {bad} out of range")));
        }
        if nodes.is_empty() {
            return Err(Error::Empty("node subset".into()));
        }
        let mut states = Vec::with_capacity(self.len() * nodes.len());
        for k in 0..self.len() {
            let row = self.sample(k);
            states.extend(nodes.iter().map(|&v| row[v]));
        }
        Ok(Trajectory {
            n_nodes: nodes.len(),
            states,
            ..self.clone()
        })
    }

    /// Per-compartment counts at sample `k`, indexed by compartment code.
    pub fn counts(&self, k: usize) -> [usize; 5] {
        let mut c = [0; 5];
        for &s in self.sample(k) {
            c[s as usize] += 1;
        }
        c
    }

    /// Write the trajectory file: a `#meta` line followed by `t,s_1,...,s_N` rows.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "#meta model={} params={} n={} dt={} seed={} graph={}",
            self.model.name(),
            self.model.params_string(),
            self.n_nodes,
            self.dt,
            self.seed,
            self.graph_hash
        )?;
        let mut line = String::with_capacity(self.n_nodes * 2 + 16);
        for k in 0..self.len() {
            line.clear();
            line.push_str(&format!("{:.6}", self.time(k)));
            for &s in self.sample(k) {
                line.push(',');
                line.push(char::from(b'0' + s));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Trajectory> {
        let mut lines = reader.lines().enumerate();
        let (_, meta) = lines
            .next()
            .ok_or_else(|| Error::Empty("trajectory file".into()))?;
        let meta = meta?;
        let body = meta.strip_prefix("#meta ").ok_or_else(|| Error::Parse {
            line: 1,
            msg: "missing `#meta` header".into(),
        })?;
        let mut fields = std::collections::HashMap::new();
        for token in body.split_whitespace() {
            let (k, v) = token.split_once('=').ok_or_else(|| Error::Parse {
                line: 1,
                msg: format!("bad meta token {token:?}"),
            })?;
            fields.insert(k, v);
        }
        let field = |k: &str| {
            fields.get(k).copied().ok_or_else(|| Error::Parse {
                line: 1,
                msg: format!("meta field `{k}` missing"),
            })
        };
        let parse_err = |what: &str| Error::Parse { line: 1, msg: format!("bad {what}") };
        let params: Vec<(String, f64)> = field("params")?
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|kv| {
                let (k, v) = kv.split_once('=').ok_or_else(|| parse_err("params"))?;
                Ok((k.to_string(), v.parse::<f64>().map_err(|_| parse_err("params"))?))
            })
            .collect::<Result<_>>()?;
        let model = ModelSpec::from_parts(field("model")?, &params)?;
        let n: usize = field("n")?.parse().map_err(|_| parse_err("n"))?;
        let dt: f64 = field("dt")?.parse().map_err(|_| parse_err("dt"))?;
        let seed: u64 = field("seed")?.parse().map_err(|_| parse_err("seed"))?;
        let graph_hash = field("graph")?.to_string();

        let mut states = Vec::new();
        let mut k = 0usize;
        for (idx, line) in lines {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = idx + 1;
            let mut parts = line.split(',');
            let t: f64 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or(Error::Parse { line: lineno, msg: "bad time".into() })?;
            if (t - k as f64 * dt).abs() > 1e-6 * (1.0 + t.abs()) {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("time {t} off the dt={dt} grid"),
                });
            }
            let before = states.len();
            for p in parts {
                let code: u8 = p.trim().parse().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("bad state {p:?}"),
                })?;
                states.push(code);
            }
            if states.len() - before != n {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {n} states, got {}", states.len() - before),
                });
            }
            k += 1;
        }
        Trajectory::new(model, graph_hash, dt, seed, n, states)
    }
}

/// Binary sum tree over non-negative per-node rates. Every update recomputes
/// the path to the root from its children, so totals never drift.
struct RateTree {
    size: usize,
    tree: Vec<f64>,
}

impl RateTree {
    fn new(n: usize) -> Self {
        let size = n.next_power_of_two().max(1);
        RateTree { size, tree: vec![0.0; 2 * size] }
    }

    fn set(&mut self, i: usize, rate: f64) {
        let mut pos = self.size + i;
        self.tree[pos] = rate;
        while pos > 1 {
            pos /= 2;
            self.tree[pos] = self.tree[2 * pos] + self.tree[2 * pos + 1];
        }
    }

    fn get(&self, i: usize) -> f64 {
        self.tree[self.size + i]
    }

    fn total(&self) -> f64 {
        self.tree[1]
    }

    /// Leaf whose cumulative interval contains `target`.
    fn find(&self, mut target: f64) -> usize {
        let mut pos = 1;
        while pos < self.size {
            let left = self.tree[2 * pos];
            if target < left {
                pos *= 2;
            } else {
                target -= left;
                pos = 2 * pos + 1;
            }
        }
        pos - self.size
    }
}

/// Fills the sample grid as simulated time advances.
struct Recorder {
    dt: f64,
    n_samples: usize,
    states: Vec<u8>,
}

impl Recorder {
    fn new(dt: f64, t_max: f64, n: usize) -> Self {
        let n_samples = (t_max / dt + 1e-9).floor() as usize + 1;
        Recorder { dt, n_samples, states: Vec::with_capacity(n_samples * n) }
    }

    fn recorded(&self, n: usize) -> usize {
        self.states.len() / n
    }

    /// Record `x` at every grid time strictly before `t_event`. Returns true once
    /// the grid is full.
    fn advance(&mut self, t_event: f64, x: &[u8]) -> bool {
        let n = x.len();
        loop {
            let k = self.recorded(n);
            if k >= self.n_samples {
                return true;
            }
            if k as f64 * self.dt < t_event {
                self.states.extend_from_slice(x);
            } else {
                return false;
            }
        }
    }

    fn finish(mut self, x: &[u8]) -> Vec<u8> {
        while self.recorded(x.len()) < self.n_samples {
            self.states.extend_from_slice(x);
        }
        self.states
    }
}

fn exp_sample(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    -(1.0 - rng.random::<f64>()).ln() / rate
}

/// Run one realisation of `model` on `g`.
///
/// If no transition remains enabled before `t_max`, the final configuration is
/// replicated to the end of the grid so every run has `floor(t_max/dt) + 1`
/// samples.
pub fn simulate(
    g: &Graph,
    model: &ModelSpec,
    init: &InitialCondition,
    dt: f64,
    t_max: f64,
    seed: u64,
) -> Result<Trajectory> {
    model.validate()?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid(format!("dt={dt} must be a positive number")));
    }
    if !(t_max > dt && t_max.is_finite()) {
        return Err(Error::invalid(format!("t_max={t_max} must exceed dt={dt}")));
    }
    let n = g.n_nodes();
    let mut rng = seeds::rng(seed, &[]);
    let infected = init.resolve(n, &mut rng)?;
    let mut x = vec![S.code(); n];
    for &v in &infected {
        x[v] = I.code();
    }
    let states = match model {
        ModelSpec::NmSis { scale, shape, delta } => {
            run_next_reaction(g, *scale, *shape, *delta, x, dt, t_max, &mut rng)?
        }
        _ => run_gillespie(g, model, x, dt, t_max, &mut rng),
    };
    Trajectory::new(*model, g.fingerprint(), dt, seed, n, states)
}

/// Rates entering the direct method. For the seasonal model `infection` is
/// the thinning envelope `a + |b|`.
struct MarkovRates {
    infection: f64,
    recovery: f64,
    incubation: f64,
    immunity_loss: f64,
    vaccination: f64,
    waning: f64,
    recover_to: Compartment,
    infect_to: Compartment,
}

impl MarkovRates {
    fn of(model: &ModelSpec) -> Self {
        let base = MarkovRates {
            infection: 0.0,
            recovery: 0.0,
            incubation: 0.0,
            immunity_loss: 0.0,
            vaccination: 0.0,
            waning: 0.0,
            recover_to: R,
            infect_to: I,
        };
        match *model {
            ModelSpec::Sis { beta, delta } => MarkovRates {
                infection: beta,
                recovery: delta,
                recover_to: S,
                ..base
            },
            ModelSpec::Sir { beta, delta } => MarkovRates { infection: beta, recovery: delta, ..base },
            ModelSpec::Seir { beta1, beta2, delta } => MarkovRates {
                infection: beta1,
                recovery: delta,
                incubation: beta2,
                infect_to: E,
                ..base
            },
            ModelSpec::Sirs { beta, delta, omega } => MarkovRates {
                infection: beta,
                recovery: delta,
                immunity_loss: omega,
                ..base
            },
            ModelSpec::Sirvs { beta, delta, omega, v1, v2 } => MarkovRates {
                infection: beta,
                recovery: delta,
                immunity_loss: omega,
                vaccination: v1,
                waning: v2,
                ..base
            },
            ModelSpec::SisTv { a, b, delta, .. } => MarkovRates {
                infection: a + b.abs(),
                recovery: delta,
                recover_to: S,
                ..base
            },
            ModelSpec::NmSis { .. } => unreachable!("nmSIS uses the next-reaction kernel"),
        }
    }

    fn node_rate(&self, state: u8, infected_nbrs: u32) -> f64 {
        match Compartment::from_code(state) {
            Some(S) => self.infection * f64::from(infected_nbrs) + self.vaccination,
            Some(I) => self.recovery,
            Some(E) => self.incubation,
            Some(R) => self.immunity_loss,
            Some(V) => self.waning,
            None => 0.0,
        }
    }
}

fn run_gillespie(
    g: &Graph,
    model: &ModelSpec,
    mut x: Vec<u8>,
    dt: f64,
    t_max: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<u8> {
    let n = g.n_nodes();
    let rates = MarkovRates::of(model);
    let seasonal = match *model {
        ModelSpec::SisTv { a, b, c, .. } => Some((a, b, c)),
        _ => None,
    };
    let mut infected_nbrs = vec![0u32; n];
    for v in 0..n {
        if x[v] == I.code() {
            for &u in g.neighbors(v) {
                infected_nbrs[u] += 1;
            }
        }
    }
    let mut tree = RateTree::new(n);
    for v in 0..n {
        tree.set(v, rates.node_rate(x[v], infected_nbrs[v]));
    }

    let mut rec = Recorder::new(dt, t_max, n);
    let mut t = 0.0;
    loop {
        let total = tree.total();
        if total <= 0.0 {
            break;
        }
        t += exp_sample(rng, total);
        if rec.advance(t, &x) {
            break;
        }
        let v = loop {
            let v = tree.find(rng.random::<f64>() * total);
            if v < n && tree.get(v) > 0.0 {
                break v;
            }
        };
        let from = x[v];
        let to = match Compartment::from_code(from).expect("valid state") {
            S => {
                let infect = rates.infection * f64::from(infected_nbrs[v]);
                if rng.random::<f64>() * (infect + rates.vaccination) < infect {
                    if let Some((a, b, c)) = seasonal {
                        let accept = (a + b * (t / c).sin()) / rates.infection;
                        if rng.random::<f64>() >= accept {
                            continue;
                        }
                    }
                    rates.infect_to
                } else {
                    V
                }
            }
            I => rates.recover_to,
            E => I,
            R | V => S,
        };
        x[v] = to.code();
        tree.set(v, rates.node_rate(x[v], infected_nbrs[v]));
        let delta: i64 = match (from == I.code(), to == I) {
            (false, true) => 1,
            (true, false) => -1,
            _ => 0,
        };
        if delta != 0 {
            for &u in g.neighbors(v) {
                infected_nbrs[u] = (i64::from(infected_nbrs[u]) + delta) as u32;
                tree.set(u, rates.node_rate(x[u], infected_nbrs[u]));
            }
        }
    }
    rec.finish(&x)
}

#[derive(Debug, Clone, Copy)]
enum Pending {
    Recover { node: usize, episode: u64 },
    Transmit { src: usize, episode: u64, dst: usize },
}

#[derive(Debug)]
struct Scheduled {
    time: f64,
    seq: u64,
    event: Pending,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time.total_cmp(&other.time).then(self.seq.cmp(&other.seq))
    }
}

/// Next-reaction loop for non-Markovian SIS. Each infection schedules one
/// exponential recovery and one Weibull transmission per neighbour that is
/// susceptible at that moment; events whose preconditions no longer hold when
/// popped are discarded.
#[allow(clippy::too_many_arguments)]
fn run_next_reaction(
    g: &Graph,
    scale: f64,
    shape: f64,
    delta: f64,
    mut x: Vec<u8>,
    dt: f64,
    t_max: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u8>> {
    let n = g.n_nodes();
    let weibull = Weibull::new(scale, shape)
        .map_err(|e| Error::invalid(format!("nmSIS Weibull({scale}, {shape}): {e}")))?;
    let mut episode = vec![0u64; n];
    let mut queue: BinaryHeap<Reverse<Scheduled>> = BinaryHeap::new();
    let mut seq = 0u64;

    let mut infect = |v: usize,
                      t: f64,
                      x: &[u8],
                      episode: &mut [u64],
                      queue: &mut BinaryHeap<Reverse<Scheduled>>,
                      rng: &mut ChaCha8Rng| {
        episode[v] += 1;
        let ep = episode[v];
        let mut push = |time: f64, event: Pending| {
            queue.push(Reverse(Scheduled { time, seq, event }));
            seq += 1;
        };
        push(t + exp_sample(rng, delta), Pending::Recover { node: v, episode: ep });
        for &u in g.neighbors(v) {
            if x[u] == S.code() {
                let delay = weibull.sample(rng);
                push(t + delay, Pending::Transmit { src: v, episode: ep, dst: u });
            }
        }
    };

    for v in 0..n {
        if x[v] == I.code() {
            infect(v, 0.0, &x, &mut episode, &mut queue, rng);
        }
    }

    let mut rec = Recorder::new(dt, t_max, n);
    while let Some(Reverse(ev)) = queue.pop() {
        let valid = match ev.event {
            Pending::Recover { node, episode: ep } => x[node] == I.code() && episode[node] == ep,
            Pending::Transmit { src, episode: ep, dst } => {
                x[src] == I.code() && episode[src] == ep && x[dst] == S.code()
            }
        };
        if !valid {
            continue;
        }
        if rec.advance(ev.time, &x) {
            break;
        }
        match ev.event {
            Pending::Recover { node, .. } => x[node] = S.code(),
            Pending::Transmit { dst, .. } => {
                x[dst] = I.code();
                infect(dst, ev.time, &x, &mut episode, &mut queue, rng);
            }
        }
    }
    Ok(rec.finish(&x))
}

/// Fraction of nodes in `state` at every sample.
pub fn prevalence(tr: &Trajectory, state: Compartment) -> Result<Vec<f64>> {
    if !tr.model.is_legal(state) {
        return Err(Error::invalid(format!(
            "compartment {state} does not occur in {}",
            tr.model.name()
        )));
    }
    let n = tr.n_nodes() as f64;
    Ok((0..tr.len())
        .map(|k| tr.sample(k).iter().filter(|&&s| s == state.code()).count() as f64 / n)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncateConfig {
    /// Consecutive quiet steps that mark the end of the dynamic stage.
    pub window: usize,
    /// A step is quiet when fewer than this fraction of nodes change state.
    pub min_change_fraction: f64,
    /// Never keep fewer samples than this, normally `2 * (t_H + t_F)`.
    pub min_len: usize,
}

impl Default for TruncateConfig {
    fn default() -> Self {
        TruncateConfig { window: 20, min_change_fraction: 0.001, min_len: 40 }
    }
}

/// Number of nodes whose state differs between samples `k - 1` and `k`, for k >= 1.
pub fn step_changes(tr: &Trajectory) -> Vec<usize> {
    (1..tr.len())
        .map(|k| {
            tr.sample(k - 1)
                .iter()
                .zip(tr.sample(k))
                .filter(|(a, b)| a != b)
                .count()
        })
        .collect()
}

/// Cut the trajectory where the dynamics go quiet.
///
/// The cut is placed at the first sample `k` such that each of the following
/// `window` steps changes fewer than `min_change_fraction * N` nodes; samples
/// `0..=k` are kept, but never fewer than `min_len`. Without such a stretch the
/// trajectory is returned unchanged.
pub fn truncate_dynamic(tr: &Trajectory, cfg: &TruncateConfig) -> Result<Trajectory> {
    if cfg.window < 2 {
        return Err(Error::invalid(format!("window={} must be >= 2", cfg.window)));
    }
    let threshold = cfg.min_change_fraction * tr.n_nodes() as f64;
    let quiet: Vec<bool> = step_changes(tr)
        .into_iter()
        .map(|c| (c as f64) < threshold)
        .collect();
    // quiet[j] describes the step from sample j to j + 1
    let mut run = 0usize;
    for (j, &q) in quiet.iter().enumerate() {
        run = if q { run + 1 } else { 0 };
        if run == cfg.window {
            let cut = j + 1 - cfg.window;
            let keep = (cut + 1).max(cfg.min_len);
            return Ok(tr.truncated(keep));
        }
    }
    Ok(tr.clone())
}

/// Largest graph the exact solver accepts.
pub const EXACT_MAX_NODES: usize = 10;

/// Per-node infection probabilities at time `t` from the full `2^N`-state SIS
/// master equation, solved by uniformization.
pub fn exact_markov_sis(
    g: &Graph,
    beta: f64,
    delta: f64,
    init: &[usize],
    t: f64,
) -> Result<Vec<f64>> {
    let n = g.n_nodes();
    if n > EXACT_MAX_NODES {
        return Err(Error::invalid(format!(
            "exact solver limited to {EXACT_MAX_NODES} nodes, got {n}"
        )));
    }
    if n == 0 {
        return Err(Error::Empty("graph has no nodes".into()));
    }
    if !(beta >= 0.0 && delta > 0.0 && t >= 0.0) {
        return Err(Error::invalid("need beta >= 0, delta > 0, t >= 0"));
    }
    if let Some(&bad) = init.iter().find(|&&v| v >= n) {
        return Err(Error::invalid(format!("initial node {bad} out of range")));
    }
    let n_states = 1usize << n;
    let masks: Vec<usize> = (0..n)
        .map(|i| g.neighbors(i).iter().fold(0usize, |m, &j| m | (1 << j)))
        .collect();
    let out_rate = |s: usize| -> f64 {
        (0..n)
            .map(|i| {
                if s >> i & 1 == 1 {
                    delta
                } else {
                    beta * f64::from((s & masks[i]).count_ones())
                }
            })
            .sum()
    };
    let lambda = (0..n_states).map(out_rate).fold(0.0f64, f64::max).max(1e-300);

    let start = init.iter().fold(0usize, |s, &v| s | (1 << v));
    let mut v = vec![0.0; n_states];
    v[start] = 1.0;
    let mut next = vec![0.0; n_states];
    let mut result = vec![0.0; n_states];

    let lt = lambda * t;
    let mut log_w = -lt;
    let mut mass = 0.0;
    let mut k = 0usize;
    loop {
        let w = log_w.exp();
        mass += w;
        for (r, p) in result.iter_mut().zip(&v) {
            *r += w * p;
        }
        if (k as f64 > lt && 1.0 - mass < 1e-14) || k > 100_000 {
            break;
        }
        // v <- v (I + Q / lambda)
        for (s, &p) in v.iter().enumerate() {
            next[s] += p * (1.0 - out_rate(s) / lambda);
            if p == 0.0 {
                continue;
            }
            for i in 0..n {
                let bit = 1 << i;
                if s & bit != 0 {
                    next[s ^ bit] += p * delta / lambda;
                } else {
                    let r = beta * f64::from((s & masks[i]).count_ones());
                    if r > 0.0 {
                        next[s | bit] += p * r / lambda;
                    }
                }
            }
        }
        std::mem::swap(&mut v, &mut next);
        next.iter_mut().for_each(|p| *p = 0.0);
        k += 1;
        log_w += lt.ln() - (k as f64).ln();
    }
    Ok((0..n)
        .map(|i| {
            result
                .iter()
                .enumerate()
                .filter(|(s, _)| s >> i & 1 == 1)
                .map(|(_, p)| p)
                .sum()
        })
        .collect())
}

impl FromStr for Compartment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" | "s" => Ok(S),
            "I" | "i" => Ok(I),
            "R" | "r" => Ok(R),
            "E" | "e" => Ok(E),
            "V" | "v" => Ok(V),
            other => Err(Error::invalid(format!("unknown compartment `{other}`"))),
        }
    }
}
