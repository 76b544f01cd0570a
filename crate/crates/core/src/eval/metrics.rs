use std::collections::BTreeSet;

use super::EvalError;

fn check_aligned(a: usize, b: usize) -> Result<(), EvalError> {
    if a != b {
        return Err(EvalError::Length { left: a, right: b });
    }
    if a == 0 {
        return Err(EvalError::Empty);
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64, EvalError> {
    check_aligned(preds.len(), labels.len())?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// `K x K` counts; rows are true labels, columns predictions.
pub fn confusion_matrix(
    preds: &[usize],
    labels: &[usize],
    k: usize,
) -> Result<Vec<Vec<usize>>, EvalError> {
    check_aligned(preds.len(), labels.len())?;
    let mut m = vec![vec![0; k]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= k || l >= k {
            return Err(EvalError::Label(p.max(l), k));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// `2 TP / (2 TP + FP + FN)` pooled over all samples and classes.
/// When there are neither labels nor predictions the score is 1.0.
pub fn micro_f1(preds: &[BTreeSet<usize>], truth: &[BTreeSet<usize>]) -> Result<f64, EvalError> {
    check_aligned(preds.len(), truth.len())?;
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (p, t) in preds.iter().zip(truth) {
        let hit = p.intersection(t).count();
        tp += hit;
        fp += p.len() - hit;
        fne += t.len() - hit;
    }
    let denom = 2 * tp + fp + fne;
    Ok(if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    })
}

/// Mean over classes present in truth or prediction of
/// `|pred ∩ truth| / |pred ∪ truth|`.
pub fn mean_iou(preds: &[usize], truth: &[usize], k: usize) -> Result<f64, EvalError> {
    check_aligned(preds.len(), truth.len())?;
    let mut inter = vec![0usize; k];
    let mut union = vec![0usize; k];
    for (&p, &t) in preds.iter().zip(truth) {
        if p >= k || t >= k {
            return Err(EvalError::Label(p.max(t), k));
        }
        if p == t {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    let present: Vec<f64> = (0..k)
        .filter(|&c| union[c] > 0)
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Indices of the `k` largest entries; ties go to the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `|top-k(rates) ∩ observed| / k` with `k = |observed|`. `None` when
/// nothing was observed.
pub fn top_k_accuracy(rates: &[f64], observed: &BTreeSet<usize>) -> Option<f64> {
    if observed.is_empty() {
        return None;
    }
    let k = observed.len();
    let hits = top_k_indices(rates, k)
        .iter()
        .filter(|i| observed.contains(i))
        .count();
    Some(hits as f64 / k as f64)
}

/// Mean top-k accuracy over samples with at least one observed species,
/// plus the number of samples skipped for having none.
pub fn mean_top_k_accuracy(
    rates: &[Vec<f64>],
    observed: &[BTreeSet<usize>],
) -> Result<(f64, usize), EvalError> {
    check_aligned(rates.len(), observed.len())?;
    let scores: Vec<f64> = rates
        .iter()
        .zip(observed)
        .filter_map(|(r, o)| top_k_accuracy(r, o))
        .collect();
    let skipped = rates.len() - scores.len();
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok((scores.iter().sum::<f64>() / scores.len() as f64, skipped))
}
