//! Sliding windows over trajectories, chronological splits, per-epoch
//! shuffling and simulated missing infection reports.

use rand::seq::{index, SliceRandom};

use crate::epidemics::{Compartment, Trajectory};
use crate::partition::ClientSubnet;
use crate::{seeds, Error, Result};

/// Default train/val/test fractions, taken from the start of the trajectory.
pub const DEFAULT_FRACTIONS: (f64, f64, f64) = (0.2, 0.1, 0.7);

/// One supervised example. States are class indices (see
/// `ModelSpec::class_of`), stored node-major: `input[v * t_h + s]`,
/// `target[v * t_f + k]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    /// Sample index of the first input step.
    pub start: usize,
    pub n_nodes: usize,
    pub t_h: usize,
    pub t_f: usize,
    pub input: Vec<u8>,
    pub target: Vec<u8>,
}

/// Window `k` reads samples `[k, k + t_h)` as input and `[k + t_h, k + t_h + t_f)`
/// as target, for `T - t_h - t_f + 1` windows.
pub fn make_windows(tr: &Trajectory, t_h: usize, t_f: usize) -> Result<Vec<Window>> {
    if t_h == 0 || t_f == 0 {
        return Err(Error::invalid("window lengths must be positive"));
    }
    let t = tr.len();
    if t < t_h + t_f {
        return Err(Error::invalid(format!(
            "trajectory of {t} samples is shorter than t_h + t_f = {}",
            t_h + t_f
        )));
    }
    let n = tr.n_nodes();
    let classes: Vec<u8> = tr
        .states()
        .iter()
        .map(|&code| tr.model.class_of(code).expect("trajectory states are legal"))
        .collect();
    let cell = |k: usize, v: usize| classes[k * n + v];
    Ok((0..=t - t_h - t_f)
        .map(|k| {
            let mut input = Vec::with_capacity(n * t_h);
            let mut target = Vec::with_capacity(n * t_f);
            for v in 0..n {
                input.extend((k..k + t_h).map(|s| cell(s, v)));
                target.extend((k + t_h..k + t_h + t_f).map(|s| cell(s, v)));
            }
            Window { start: k, n_nodes: n, t_h, t_f, input, target }
        })
        .collect())
}

/// `(floor(f_train W), floor(f_val W), rest)`; errors if any part is empty.
pub fn split_sizes(w: usize, fractions: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let train = (a * w as f64 + 1e-9).floor() as usize;
    let val = (b * w as f64 + 1e-9).floor() as usize;
    let test = w.saturating_sub(train + val);
    if train == 0 || val == 0 || test == 0 {
        return Err(Error::Empty(format!(
            "{w} windows split into train={train}, val={val}, test={test}"
        )));
    }
    Ok((train, val, test))
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
}

/// Consecutive chronological split; no window is shuffled across parts.
pub fn chrono_split(mut windows: Vec<Window>, fractions: (f64, f64, f64)) -> Result<Splits> {
    let (train, val, _) = split_sizes(windows.len(), fractions)?;
    let test = windows.split_off(train + val);
    let val_part = windows.split_off(train);
    Ok(Splits { train: windows, val: val_part, test })
}

/// Fisher-Yates permutation of `0..n` for one training epoch.
pub fn shuffle_train(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::rng(seed, &[seeds::tag::SHUFFLE, epoch]));
    order
}

/// A client's subnetwork together with its windowed data.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub client: usize,
    pub subnet: ClientSubnet,
    pub splits: Splits,
}

impl ClientDataset {
    pub fn n_nodes(&self) -> usize {
        self.subnet.nodes.len()
    }
}

/// Windows each client's slice of the trajectory and splits it.
pub fn build_client_datasets(
    tr: &Trajectory,
    subnets: &[ClientSubnet],
    t_h: usize,
    t_f: usize,
    fractions: (f64, f64, f64),
) -> Result<Vec<ClientDataset>> {
    subnets
        .iter()
        .enumerate()
        .map(|(client, subnet)| {
            let local = tr.restrict(&subnet.nodes)?;
            let splits = chrono_split(make_windows(&local, t_h, t_f)?, fractions)?;
            Ok(ClientDataset { client, subnet: subnet.clone(), splits })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MissingConfig {
    pub client_ratio: f64,
    pub node_missing_ratio: f64,
    /// Also overwrite target cells, not just inputs.
    pub corrupt_targets: bool,
}

impl Default for MissingConfig {
    fn default() -> Self {
        MissingConfig { client_ratio: 0.0, node_missing_ratio: 0.0, corrupt_targets: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MissingReport {
    /// Corrupted client indices, ascending.
    pub clients: Vec<usize>,
    /// Infected cells seen and flipped, per corrupted client.
    pub infected_cells: Vec<usize>,
    pub flipped: Vec<usize>,
}

/// Hides infection reports: picks `ceil(client_ratio * M)` clients and, in
/// each, turns `round(node_missing_ratio * #I)` of the infected train/val
/// cells into susceptible ones. Test windows are never touched.
pub fn inject_missing(
    datasets: &mut [ClientDataset],
    cfg: &MissingConfig,
    infected: u8,
    susceptible: u8,
    seed: u64,
) -> Result<MissingReport> {
    for (name, r) in [("client_ratio", cfg.client_ratio), ("node_missing_ratio", cfg.node_missing_ratio)] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::invalid(format!("{name}={r} outside [0, 1]")));
        }
    }
    let m = datasets.len();
    let mut report = MissingReport::default();
    if m == 0 || cfg.node_missing_ratio == 0.0 {
        return Ok(report);
    }
    let n_corrupt = ((cfg.client_ratio * m as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut rng = seeds::rng(seed, &[seeds::tag::MISSING]);
    let mut chosen = index::sample(&mut rng, m, n_corrupt.min(m)).into_vec();
    chosen.sort_unstable();
    for &c in &chosen {
        let mut crng = seeds::rng(seed, &[seeds::tag::MISSING, c as u64]);
        let ds = &mut datasets[c];
        // (split, window, is_target, offset) of every infected cell
        let mut cells = Vec::new();
        for (si, split) in [&ds.splits.train, &ds.splits.val].into_iter().enumerate() {
            for (wi, w) in split.iter().enumerate() {
                cells.extend(
                    w.input.iter().enumerate().filter(|(_, &x)| x == infected).map(|(o, _)| (si, wi, false, o)),
                );
                if cfg.corrupt_targets {
                    cells.extend(
                        w.target.iter().enumerate().filter(|(_, &x)| x == infected).map(|(o, _)| (si, wi, true, o)),
                    );
                }
            }
        }
        let k = (cfg.node_missing_ratio * cells.len() as f64).round() as usize;
        for idx in index::sample(&mut crng, cells.len(), k.min(cells.len())) {
            let (si, wi, is_target, o) = cells[idx];
            let split = if si == 0 { &mut ds.splits.train } else { &mut ds.splits.val };
            let w = &mut split[wi];
            if is_target {
                w.target[o] = susceptible;
            } else {
                w.input[o] = susceptible;
            }
        }
        report.clients.push(c);
        report.infected_cells.push(cells.len());
        report.flipped.push(k.min(cells.len()));
    }
    Ok(report)
}

/// Class indices of S and I for a trajectory's model.
pub fn susceptible_infected_classes(tr: &Trajectory) -> (u8, u8) {
    let s = tr.model.class_of(Compartment::S.code()).expect("every model has S");
    let i = tr.model.class_of(Compartment::I.code()).expect("every model has I");
    (s, i)
}
