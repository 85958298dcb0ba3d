//! In-process federated training (FedAvg / FedProx) and the solo and
//! centralized baselines, all driven by the same round loop.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::dataset::ClientDataset;
use crate::metrics::classification_metrics;
use crate::models::{evaluate, train_local, ModelConfig, ModelState, Proximal, TrainConfig};
use crate::nncore::{AdamState, GatGraph, ParamSet};
use crate::{seeds, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Aggregation {
    FedAvg,
    FedProx,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::FedAvg => "fedavg",
            Aggregation::FedProx => "fedprox",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fedavg" => Ok(Aggregation::FedAvg),
            "fedprox" => Ok(Aggregation::FedProx),
            other => Err(Error::invalid(format!("unknown aggregation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub method: Aggregation,
    pub rounds: usize,
    pub local_epochs: usize,
    /// Proximal weight; ignored by FedAvg.
    pub mu: f64,
    /// Rounds without a val-CE improvement larger than `min_delta` before stopping.
    pub patience: usize,
    pub min_delta: f64,
    /// Batch size and optimizer; `epochs` is replaced by `local_epochs`.
    pub train: TrainConfig,
    /// Concurrent client trainers; 0 lets rayon decide. Results do not depend on it.
    pub workers: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            method: Aggregation::FedAvg,
            rounds: 200,
            local_epochs: 5,
            mu: 0.01,
            patience: 20,
            min_delta: 1e-5,
            train: TrainConfig::default(),
            workers: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.local_epochs == 0 {
            return Err(Error::invalid("rounds and local_epochs must be positive"));
        }
        if !(self.mu >= 0.0) {
            return Err(Error::invalid(format!("mu={} must be >= 0", self.mu)));
        }
        if !(self.train.adam.lr >= 0.0) || !(self.train.adam.weight_decay >= 0.0) {
            return Err(Error::invalid("learning rate and weight decay must be >= 0"));
        }
        Ok(())
    }

    fn proximal_mu(&self) -> Option<f64> {
        (self.method == Aggregation::FedProx).then_some(self.mu)
    }
}

/// One line of the round log: a client's validation scores under the
/// aggregated model of that round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub client: usize,
    pub ce: f64,
    pub acc: f64,
    pub f1: f64,
    /// Client-weighted mean validation CE of the round's global model.
    pub val_ce_global: f64,
    pub wall_secs: f64,
}

pub fn write_round_log<W: Write>(records: &[RoundRecord], mut out: W) -> Result<()> {
    writeln!(out, "round,client,ce,acc,f1,val_ce_global")?;
    for r in records {
        writeln!(
            out,
            "{},{},{:.10},{:.10},{:.10},{:.10}",
            r.round, r.client, r.ce, r.acc, r.f1, r.val_ce_global
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    /// Global model of the round with the lowest validation CE.
    pub model: ModelState,
    pub best_round: usize,
    pub best_val_ce: f64,
    pub rounds_run: usize,
    pub log: Vec<RoundRecord>,
    /// Clients that took part, in order.
    pub clients: Vec<usize>,
}

/// `Σ (w_i / Σw) θ_i`, summed in client order.
pub fn aggregate(locals: &[&ParamSet], weights: &[f64]) -> Result<ParamSet> {
    let first = locals.first().ok_or_else(|| Error::Empty("nothing to aggregate".into()))?;
    if locals.len() != weights.len() {
        return Err(Error::shape(format!("{} models but {} weights", locals.len(), weights.len())));
    }
    if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(Error::invalid("aggregation weights must be positive and finite"));
    }
    let total: f64 = weights.iter().sum();
    let mut out = first.zeros_like();
    for (p, &w) in locals.iter().zip(weights) {
        out.add_scaled(p, w / total)?;
    }
    Ok(out)
}

struct ClientSlot<'a> {
    data: &'a ClientDataset,
    graph: GatGraph,
    seed: u64,
    weight: f64,
    adam: Option<AdamState>,
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

/// The round loop shared by every training scenario. With `aggregate_models`
/// false there must be exactly one client and its model is kept as is.
fn run_rounds(
    config: &ModelConfig,
    clients: &[ClientDataset],
    cfg: &FederationConfig,
    seed: u64,
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    config.validate()?;
    let mut slots: Vec<ClientSlot> = Vec::new();
    for c in clients {
        if c.splits.train.is_empty() || c.splits.val.is_empty() {
            log::warn!("client {} has an empty train or validation split; excluded", c.client);
            continue;
        }
        slots.push(ClientSlot {
            data: c,
            graph: GatGraph::from_graph(&c.subnet.graph),
            seed: seeds::derive(seed, &[seeds::tag::CLIENT, c.client as u64]),
            weight: (c.splits.train.len() * c.n_nodes()) as f64,
            adam: None,
        });
    }
    if slots.is_empty() {
        return Err(Error::Empty("no client has training data".into()));
    }
    let weights: Vec<f64> = slots.iter().map(|s| s.weight).collect();
    let pool = build_pool(cfg.workers)?;
    let local_cfg = TrainConfig { epochs: cfg.local_epochs, ..cfg.train.clone() };
    let mut global = ModelState::init(config.clone(), seeds::derive(seed, &[seeds::tag::INIT]))?;
    let mut best = (f64::INFINITY, global.clone(), 0usize);
    let mut since_best = 0usize;
    let mut log = Vec::new();
    let started = Instant::now();
    let mut rounds_run = 0;

    for round in 0..cfg.rounds {
        rounds_run = round + 1;
        let broadcast = &global;
        let mu = cfg.proximal_mu();
        let first_epoch = (round * cfg.local_epochs) as u64;
        let locals: Vec<ModelState> = pool.install(|| {
            slots
                .par_iter_mut()
                .map(|slot| -> Result<ModelState> {
                    let mut state = broadcast.clone();
                    let adam = slot
                        .adam
                        .get_or_insert_with(|| AdamState::new(&state.params, local_cfg.adam.clone()));
                    let prox = mu.map(|mu| Proximal { global: &broadcast.params, mu });
                    train_local(
                        &mut state,
                        adam,
                        &slot.data.splits.train,
                        Some(&slot.graph),
                        &local_cfg,
                        prox,
                        slot.seed,
                        first_epoch,
                    )?;
                    Ok(state)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let params: Vec<&ParamSet> = locals.iter().map(|s| &s.params).collect();
        let buffers: Vec<&ParamSet> = locals.iter().map(|s| &s.buffers).collect();
        global = ModelState {
            config: config.clone(),
            params: aggregate(&params, &weights)?,
            buffers: if global.buffers.is_empty() {
                global.buffers.clone()
            } else {
                aggregate(&buffers, &weights)?
            },
        };

        let evals = pool.install(|| {
            slots
                .par_iter()
                .map(|slot| evaluate(&global, &slot.data.splits.val, Some(&slot.graph)))
                .collect::<Result<Vec<_>>>()
        })?;
        let total_w: f64 = weights.iter().sum();
        let val_ce: f64 = evals.iter().zip(&weights).map(|(e, w)| e.ce * w / total_w).sum();
        let wall_secs = started.elapsed().as_secs_f64();
        for (slot, e) in slots.iter().zip(&evals) {
            let m = classification_metrics(&e.predictions, &e.targets)?;
            log.push(RoundRecord {
                round,
                client: slot.data.client,
                ce: e.ce,
                acc: m.accuracy,
                f1: m.macro_f1,
                val_ce_global: val_ce,
                wall_secs,
            });
        }
        log::debug!("round {round}: val CE {val_ce:.6}");
        if val_ce < best.0 - cfg.min_delta {
            best = (val_ce, global.clone(), round);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::info!("early stop after round {round}; best round {}", best.2);
                break;
            }
        }
    }
    Ok(TrainingOutcome {
        model: best.1,
        best_round: best.2,
        best_val_ce: best.0,
        rounds_run,
        log,
        clients: slots.iter().map(|s| s.data.client).collect(),
    })
}

/// Federated training over all clients with per-round weighted averaging,
/// weights `n_i = train windows x client nodes`.
pub fn run_federated(
    config: &ModelConfig,
    clients: &[ClientDataset],
    cfg: &FederationConfig,
    seed: u64,
) -> Result<TrainingOutcome> {
    run_rounds(config, clients, cfg, seed)
}

/// Each client trains alone on its own data; validation every
/// `local_epochs` epochs, as a round of one.
pub fn run_solo(
    config: &ModelConfig,
    clients: &[ClientDataset],
    cfg: &FederationConfig,
    seed: u64,
) -> Result<Vec<TrainingOutcome>> {
    let solo_cfg = FederationConfig { method: Aggregation::FedAvg, workers: 1, ..cfg.clone() };
    build_pool(cfg.workers)?.install(|| {
        clients
            .par_iter()
            .map(|c| run_rounds(config, std::slice::from_ref(c), &solo_cfg, seed))
            .collect()
    })
}

/// One model trained on the whole-network dataset.
pub fn run_centralized(
    config: &ModelConfig,
    whole: &ClientDataset,
    cfg: &FederationConfig,
    seed: u64,
) -> Result<TrainingOutcome> {
    let central = FederationConfig { method: Aggregation::FedAvg, ..cfg.clone() };
    run_rounds(config, std::slice::from_ref(whole), &central, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_client_datasets, DEFAULT_FRACTIONS};
    use crate::epidemics::{simulate, InitialCondition, ModelSpec};
    use crate::models::Architecture;
    use crate::netgraph::{generate_synthetic, Synthetic};
    use crate::nncore::{AdamConfig, Tensor};
    use crate::partition::{even_by_index, induced_subnetworks, PartitionAssignment};

    fn scalar(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        p
    }

    #[test]
    fn aggregate_examples() {
        let x = |p: &ParamSet| p.get("x").unwrap().data()[0];
        assert_eq!(x(&aggregate(&[&scalar(0.0), &scalar(2.0)], &[1.0, 1.0]).unwrap()), 1.0);
        assert_eq!(x(&aggregate(&[&scalar(0.0), &scalar(4.0)], &[1.0, 3.0]).unwrap()), 3.0);
        let same = scalar(0.3);
        assert_eq!(aggregate(&[&same], &[5.0]).unwrap(), same);
        assert_eq!(x(&aggregate(&[&same, &same], &[1.0, 1.0]).unwrap()), 0.3);
        let mut other = ParamSet::new();
        other.insert("y", Tensor::zeros(&[1])).unwrap();
        assert!(aggregate(&[&same, &other], &[1.0, 1.0]).is_err());
        assert!(aggregate(&[&same], &[0.0]).is_err());
        assert!(aggregate(&[], &[]).is_err());
    }

    fn fixture(m: usize) -> (Vec<ClientDataset>, ClientDataset) {
        let g = generate_synthetic(Synthetic::BarabasiAlbert { n: 24, m: 2 }, 5).unwrap();
        let tr = simulate(&g, &ModelSpec::Sis { beta: 0.5, delta: 1.0 }, &InitialCondition::Fraction(0.3), 0.25, 30.0, 2).unwrap();
        let subs = induced_subnetworks(&g, &even_by_index(&g, m).unwrap()).unwrap();
        let clients = build_client_datasets(&tr, &subs, 10, 10, DEFAULT_FRACTIONS).unwrap();
        let whole = induced_subnetworks(&g, &PartitionAssignment::whole(24).unwrap()).unwrap();
        let whole = build_client_datasets(&tr, &whole, 10, 10, DEFAULT_FRACTIONS).unwrap().remove(0);
        (clients, whole)
    }

    fn quick_cfg(method: Aggregation, mu: f64, workers: usize) -> FederationConfig {
        FederationConfig {
            method,
            rounds: 3,
            local_epochs: 1,
            mu,
            workers,
            train: TrainConfig { adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() }, ..TrainConfig::default() },
            ..FederationConfig::default()
        }
    }

    #[test]
    fn single_client_federation_is_centralized_training() {
        let (_, whole) = fixture(2);
        let model = ModelConfig::new(Architecture::Stgat, 2);
        let cfg = quick_cfg(Aggregation::FedAvg, 0.0, 1);
        let fed = run_federated(&model, std::slice::from_ref(&whole), &cfg, 9).unwrap();
        let cen = run_centralized(&model, &whole, &cfg, 9).unwrap();
        assert_eq!(fed.model, cen.model);
        assert_eq!(fed.log.len(), cen.log.len());
        for (a, b) in fed.log.iter().zip(&cen.log) {
            assert!((a.ce - b.ce).abs() <= 1e-9);
            assert_eq!((a.acc, a.f1, a.val_ce_global), (b.acc, b.f1, b.val_ce_global));
        }
        let solo = run_solo(&model, std::slice::from_ref(&whole), &cfg, 9).unwrap();
        assert_eq!(solo[0].model, cen.model);
    }

    #[test]
    fn fedprox_with_zero_mu_is_fedavg_and_workers_do_not_matter() {
        let (clients, _) = fixture(3);
        let model = ModelConfig::new(Architecture::Lstm, 2);
        let strip = |o: &TrainingOutcome| o.log.iter().map(|r| (r.round, r.client, r.ce.to_bits(), r.acc.to_bits(), r.val_ce_global.to_bits())).collect::<Vec<_>>();
        let avg = run_federated(&model, &clients, &quick_cfg(Aggregation::FedAvg, 0.0, 1), 4).unwrap();
        let prox0 = run_federated(&model, &clients, &quick_cfg(Aggregation::FedProx, 0.0, 1), 4).unwrap();
        assert_eq!(avg.model, prox0.model);
        assert_eq!(strip(&avg), strip(&prox0));
        let par = run_federated(&model, &clients, &quick_cfg(Aggregation::FedAvg, 0.0, 4), 4).unwrap();
        assert_eq!(avg.model, par.model);
        assert_eq!(strip(&avg), strip(&par));
        let prox = run_federated(&model, &clients, &quick_cfg(Aggregation::FedProx, 0.5, 2), 4).unwrap();
        assert_ne!(prox.model, avg.model);
        assert_eq!(avg.log.len(), 3 * 3);
    }

    #[test]
    fn early_stopping_returns_best_round() {
        let (clients, _) = fixture(2);
        let model = ModelConfig::new(Architecture::Lstm, 2);
        let mut cfg = quick_cfg(Aggregation::FedAvg, 0.0, 1);
        cfg.rounds = 50;
        cfg.patience = 2;
        cfg.train.adam.lr = 0.0;
        let out = run_federated(&model, &clients, &cfg, 1).unwrap();
        // nothing changes with lr = 0, so the first round stays best
        assert_eq!(out.best_round, 0);
        assert_eq!(out.rounds_run, 3);
        let mut buf = Vec::new();
        write_round_log(&out.log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("round,client,ce,acc,f1,val_ce_global\n0,0,"));
        assert_eq!(text.lines().count(), 1 + 3 * 2);
    }

    #[test]
    fn config_validation() {
        let (clients, _) = fixture(2);
        let model = ModelConfig::new(Architecture::Lstm, 2);
        let bad = FederationConfig { mu: -1.0, ..quick_cfg(Aggregation::FedProx, 0.0, 1) };
        assert!(run_federated(&model, &clients, &bad, 0).is_err());
        assert!(run_federated(&model, &[], &quick_cfg(Aggregation::FedAvg, 0.0, 1), 0).is_err());
        assert_eq!("FedProx".parse::<Aggregation>().unwrap(), Aggregation::FedProx);
    }
}
