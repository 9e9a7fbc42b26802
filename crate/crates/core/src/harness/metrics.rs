use crate::error::{Error, Result};

/// Area under the ROC curve via the Mann-Whitney statistic with midranks for ties.
///
/// Labels must be 0 or 1 and both classes must be present.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "auc: {} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidInput(format!("auc: label {bad} is not binary")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("auc: NaN score".into()));
    }
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("auc needs both classes present".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k] == 1.0).count() as f64 * midrank;
        i = j + 1;
    }
    let (np, nn) = (positives as f64, negatives as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::InvalidInput(format!(
            "rmse: need equal non-empty lengths, got {} and {}",
            preds.len(),
            targets.len()
        )));
    }
    let sse: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / preds.len() as f64).sqrt())
}

/// Fraction of rows whose argmax class equals the label.
pub fn accuracy(probs: &[Vec<f64>], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "accuracy: need equal non-empty lengths, got {} and {}",
            probs.len(),
            labels.len()
        )));
    }
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i);
            best == Some(y as usize)
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Each method's RMSE divided by the worst one on the same dataset.
pub fn normalized_rmse(rmses: &[f64]) -> Result<Vec<f64>> {
    if rmses.is_empty() {
        return Err(Error::InvalidInput("normalized_rmse: no methods".into()));
    }
    if let Some(bad) = rmses.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
        return Err(Error::InvalidInput(format!("normalized_rmse: invalid RMSE {bad}")));
    }
    let worst = rmses.iter().cloned().fold(0.0, f64::max);
    if worst == 0.0 {
        return Err(Error::DegenerateNormalization);
    }
    Ok(rmses.iter().map(|r| r / worst).collect())
}
