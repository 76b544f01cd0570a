use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::numerics::{matmul, AdamConfig, AdamState, Gradients, ParameterStore, Tensor};
use crate::seed::{rng_for, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    /// Softmax over classes.
    SingleLabel,
    /// Independent sigmoid per class.
    MultiLabel,
    /// Per-species sigmoid encounter rates.
    EncounterRate,
}

impl FromStr for ProbeTask {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cls" | "single_label" => Ok(Self::SingleLabel),
            "multilabel" | "multi_label" => Ok(Self::MultiLabel),
            "encounter" | "encounter_rate" => Ok(Self::EncounterRate),
            other => Err(EvalError::Task(format!("unknown task '{other}'"))),
        }
    }
}

impl fmt::Display for ProbeTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SingleLabel => "cls",
            Self::MultiLabel => "multilabel",
            Self::EncounterRate => "encounter",
        })
    }
}

/// Training targets; the variant must agree with the task.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbeTargets {
    Classes {
        labels: Vec<usize>,
        classes: usize,
    },
    Sets {
        sets: Vec<BTreeSet<usize>>,
        classes: usize,
    },
    /// `n` rows of per-species values in `[0, 1]`.
    Rates(Vec<Vec<f64>>),
}

impl ProbeTargets {
    fn len(&self) -> usize {
        match self {
            Self::Classes { labels, .. } => labels.len(),
            Self::Sets { sets, .. } => sets.len(),
            Self::Rates(r) => r.len(),
        }
    }

    fn classes(&self) -> usize {
        match self {
            Self::Classes { classes, .. } | Self::Sets { classes, .. } => *classes,
            Self::Rates(r) => r.first().map_or(0, Vec::len),
        }
    }

    /// Dense `n x K` target matrix.
    fn dense(&self) -> Result<Vec<f64>, EvalError> {
        let k = self.classes();
        let mut y = vec![0.0; self.len() * k];
        match self {
            Self::Classes { labels, .. } => {
                for (i, &l) in labels.iter().enumerate() {
                    if l >= k {
                        return Err(EvalError::Label(l, k));
                    }
                    y[i * k + l] = 1.0;
                }
            }
            Self::Sets { sets, .. } => {
                for (i, s) in sets.iter().enumerate() {
                    for &l in s {
                        if l >= k {
                            return Err(EvalError::Label(l, k));
                        }
                        y[i * k + l] = 1.0;
                    }
                }
            }
            Self::Rates(rows) => {
                for (i, r) in rows.iter().enumerate() {
                    if r.len() != k {
                        return Err(EvalError::Length {
                            left: r.len(),
                            right: k,
                        });
                    }
                    if r.iter().any(|v| !(0.0..=1.0).contains(v)) {
                        return Err(EvalError::Task(format!("rate row {i} leaves [0, 1]")));
                    }
                    y[i * k..(i + 1) * k].copy_from_slice(r);
                }
            }
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr: f64,
    /// Full-batch Adam steps.
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 200,
            seed: 0,
        }
    }
}

/// Linear decoder on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeHead {
    pub task: ProbeTask,
    /// `d x K`
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

/// Initial weights are uniform in `±PROBE_INIT_BOUND`.
pub const PROBE_INIT_BOUND: f64 = 1e-3;

const WEIGHT: &str = "probe.weight";
const BIAS: &str = "probe.bias";

fn standardize(x: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let d = mean.len();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - mean[i % d]) / std[i % d])
        .collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

fn logits(x: &Tensor, w: &Tensor, b: &[f64]) -> Tensor {
    let mut z = matmul(x, w).expect("probe shapes checked");
    let k = b.len();
    for (i, v) in z.data_mut().iter_mut().enumerate() {
        *v += b[i % k];
    }
    z
}

fn softmax_rows(z: &mut Tensor, k: usize) {
    for row in z.data_mut().chunks_exact_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl ProbeHead {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    /// Class probabilities (softmax) or per-class sigmoids, `n x K`.
    pub fn predict_proba(&self, features: &Tensor) -> Result<Tensor, EvalError> {
        let (_, d) = features
            .dims2()
            .ok_or(EvalError::Shape(features.shape().to_vec()))?;
        if d != self.feature_mean.len() {
            return Err(EvalError::Length {
                left: d,
                right: self.feature_mean.len(),
            });
        }
        let x = standardize(features, &self.feature_mean, &self.feature_std);
        let mut z = logits(&x, &self.weight, &self.bias);
        match self.task {
            ProbeTask::SingleLabel => softmax_rows(&mut z, self.classes()),
            _ => z.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v)),
        }
        Ok(z)
    }

    /// Argmax class per row, ties to the lower index.
    pub fn predict_classes(&self, features: &Tensor) -> Result<Vec<usize>, EvalError> {
        let p = self.predict_proba(features)?;
        Ok(p.data()
            .chunks_exact(self.classes())
            .map(|row| super::metrics::top_k_indices(row, 1)[0])
            .collect())
    }

    /// Classes whose sigmoid output is at least `threshold`.
    pub fn predict_sets(
        &self,
        features: &Tensor,
        threshold: f64,
    ) -> Result<Vec<BTreeSet<usize>>, EvalError> {
        let p = self.predict_proba(features)?;
        Ok(p.data()
            .chunks_exact(self.classes())
            .map(|row| (0..row.len()).filter(|&c| row[c] >= threshold).collect())
            .collect())
    }
}

/// Fits a linear head on frozen features by full-batch Adam on softmax
/// cross-entropy or per-class binary cross-entropy.
pub fn fit_linear_probe(
    features: &Tensor,
    targets: &ProbeTargets,
    task: ProbeTask,
    config: &ProbeConfig,
) -> Result<ProbeHead, EvalError> {
    let (n, d) = features
        .dims2()
        .ok_or(EvalError::Shape(features.shape().to_vec()))?;
    if n == 0 || d == 0 {
        return Err(EvalError::Empty);
    }
    if n != targets.len() {
        return Err(EvalError::Length {
            left: n,
            right: targets.len(),
        });
    }
    match (task, targets) {
        (ProbeTask::SingleLabel, ProbeTargets::Classes { labels, classes }) => {
            let mut counts = vec![0usize; *classes];
            for &l in labels {
                if l >= *classes {
                    return Err(EvalError::Label(l, *classes));
                }
                counts[l] += 1;
            }
            if let Some(c) = counts.iter().position(|&c| c == 0) {
                return Err(EvalError::EmptyClass(c));
            }
        }
        (ProbeTask::MultiLabel, ProbeTargets::Sets { .. }) => {}
        (ProbeTask::EncounterRate, ProbeTargets::Rates(_)) => {}
        _ => {
            return Err(EvalError::Task(format!("targets do not match task {task}")));
        }
    }
    let k = targets.classes();
    if k == 0 {
        return Err(EvalError::Task("no classes".into()));
    }
    if !(config.lr > 0.0) || config.epochs == 0 {
        return Err(EvalError::Task(
            "probe lr and epochs must be positive".into(),
        ));
    }
    let y = targets.dense()?;

    let mut mean = vec![0.0; d];
    for row in features.data().chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut std = vec![0.0; d];
    for row in features.data().chunks_exact(d) {
        std.iter_mut()
            .zip(row)
            .zip(&mean)
            .for_each(|((s, v), m)| *s += (v - m) * (v - m));
    }
    // near-constant features are centered but not scaled up
    std.iter_mut()
        .for_each(|s| *s = (*s / n as f64).sqrt().max(1e-6));
    let x = standardize(features, &mean, &std);
    let xt = x.transpose2();

    // small enough that 200 steps at lr 1e-3 can overturn any initial ordering
    let bound = PROBE_INIT_BOUND;
    let mut rng = rng_for(config.seed, &[stream::PROBE]);
    let w0: Vec<f64> = (0..d * k)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    let mut params = ParameterStore::new();
    params.insert(WEIGHT, Tensor::new(vec![d, k], w0)?, true)?;
    params.insert(BIAS, Tensor::zeros(&[k]), true)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr));

    for _ in 0..config.epochs {
        let w = params.get(WEIGHT).unwrap();
        let b = params.get(BIAS).unwrap().data();
        let mut z = logits(&x, w, b);
        match task {
            ProbeTask::SingleLabel => softmax_rows(&mut z, k),
            _ => z.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v)),
        }
        // d loss / d logits = (p - y) / n for both losses
        let dz: Vec<f64> = z
            .data()
            .iter()
            .zip(&y)
            .map(|(p, t)| (p - t) / n as f64)
            .collect();
        let dz = Tensor::new(vec![n, k], dz)?;
        let gw = matmul(&xt, &dz)?;
        let mut gb = vec![0.0; k];
        for row in dz.data().chunks_exact(k) {
            gb.iter_mut().zip(row).for_each(|(g, v)| *g += v);
        }
        let mut grads = Gradients::new();
        grads.insert(WEIGHT.into(), gw);
        grads.insert(BIAS.into(), Tensor::new(vec![k], gb)?);
        adam.step(&mut params, &grads)?;
    }

    Ok(ProbeHead {
        task,
        weight: params.get(WEIGHT).unwrap().clone(),
        bias: params.get(BIAS).unwrap().data().to_vec(),
        feature_mean: mean,
        feature_std: std,
    })
}
