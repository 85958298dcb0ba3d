//! Evaluation metrics and the efficacy-energy summary over client counts.

use crate::nncore::softmax_cross_entropy;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    /// Unweighted mean of per-class F1 over classes seen in either input.
    pub macro_f1: f64,
}

fn check_same_len(a: &[u8], b: &[u8]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} predictions vs {} labels", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Empty("no cells to score".into()));
    }
    Ok(())
}

pub fn classification_metrics(pred: &[u8], truth: &[u8]) -> Result<ClassificationMetrics> {
    check_same_len(pred, truth)?;
    let mut tp = [0usize; 256];
    let mut in_pred = [0usize; 256];
    let mut in_true = [0usize; 256];
    for (&p, &t) in pred.iter().zip(truth) {
        in_pred[p as usize] += 1;
        in_true[t as usize] += 1;
        if p == t {
            tp[p as usize] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let f1s: Vec<f64> = (0..256)
        .filter(|&c| in_pred[c] + in_true[c] > 0)
        .map(|c| 2.0 * tp[c] as f64 / (in_pred[c] + in_true[c]) as f64)
        .collect();
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / pred.len() as f64,
        macro_f1: f1s.iter().sum::<f64>() / f1s.len() as f64,
    })
}

/// Mean cross-entropy of `logits` (`cells x n_classes`) against `labels`.
pub fn cross_entropy(logits: &[f64], n_classes: usize, labels: &[u8]) -> Result<f64> {
    Ok(softmax_cross_entropy(logits, n_classes, labels)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrevalenceErrors {
    /// Percentage points.
    pub rmse: f64,
    /// Percentage points.
    pub mae: f64,
}

/// Compares predicted and true prevalence of `infected` at every evaluated
/// (window, horizon step). Cells are laid out per window as `[node][t_f]`.
pub fn prevalence_errors(
    pred: &[u8],
    truth: &[u8],
    n_nodes: usize,
    t_f: usize,
    infected: u8,
) -> Result<PrevalenceErrors> {
    check_same_len(pred, truth)?;
    let per_window = n_nodes * t_f;
    if per_window == 0 || pred.len() % per_window != 0 {
        return Err(Error::shape(format!(
            "{} cells do not tile windows of {n_nodes} nodes x {t_f} steps",
            pred.len()
        )));
    }
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut count = 0usize;
    for (pw, tw) in pred.chunks(per_window).zip(truth.chunks(per_window)) {
        for k in 0..t_f {
            let frac = |cells: &[u8]| {
                (0..n_nodes).filter(|&v| cells[v * t_f + k] == infected).count() as f64 / n_nodes as f64
            };
            let d = 100.0 * (frac(pw) - frac(tw));
            sq += d * d;
            abs += d.abs();
            count += 1;
        }
    }
    Ok(PrevalenceErrors { rmse: (sq / count as f64).sqrt(), mae: abs / count as f64 })
}

/// Arithmetic mean of per-client values.
pub fn mean_client_metric(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("no client metrics".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EtaMode {
    /// Sum divided by the number of terms (`M_0 - 1`).
    #[default]
    Mean,
    /// Sum divided by `M_0 - 2`.
    Compat,
}

/// Efficacy energy from `(M, mean client metric)` pairs covering every
/// `M = 2..=M_0` exactly once, `M_0 >= 3`.
pub fn efficacy_energy(per_m: &[(usize, f64)], mode: EtaMode) -> Result<f64> {
    let mut sorted = per_m.to_vec();
    sorted.sort_by_key(|&(m, _)| m);
    let m0 = sorted.last().map_or(0, |&(m, _)| m);
    if m0 < 3 {
        return Err(Error::invalid(format!("efficacy energy needs M_0 >= 3, got {m0}")));
    }
    if sorted.len() != m0 - 1 || sorted.iter().enumerate().any(|(i, &(m, _))| m != i + 2) {
        let have: Vec<usize> = sorted.iter().map(|&(m, _)| m).collect();
        return Err(Error::invalid(format!("need one value for each M in 2..={m0}, have {have:?}")));
    }
    let sum: f64 = sorted.iter().map(|&(_, a)| a).sum();
    Ok(match mode {
        EtaMode::Mean => sum / (m0 - 1) as f64,
        EtaMode::Compat => sum / (m0 - 2) as f64,
    })
}
