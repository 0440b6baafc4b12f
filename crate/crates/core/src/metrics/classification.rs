use serde::{Deserialize, Serialize};

use crate::error::{HistGenError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScores {
    pub accuracy: f64,
    pub auc: f64,
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
        .0
}

pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(HistGenError::invalid(format!(
            "{} predictions for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(p, &l)| argmax(p) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mann–Whitney AUC with average ranks for tied scores.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(HistGenError::invalid("scores and labels differ in length"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(HistGenError::MetricUndefined(
            "AUC needs both positive and negative samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let n_pos = n_pos as f64;
    Ok((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg as f64))
}

/// Accuracy from the argmax class and AUC: binary uses the class-1
/// probability, more classes use the one-vs-rest macro average over the
/// classes present in `labels`.
pub fn binary_and_multiclass_scores(probs: &[Vec<f64>], labels: &[usize]) -> Result<ClassificationScores> {
    let accuracy = accuracy(probs, labels)?;
    let classes = probs[0].len();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(HistGenError::invalid(format!("label {bad} outside {classes} classes")));
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(HistGenError::MetricUndefined(
            "AUC is undefined for a single-class label set".into(),
        ));
    }
    let auc = if classes == 2 {
        let s: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        auc_binary(&s, &pos)?
    } else {
        let mut total = 0.0;
        for &c in &present {
            let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            total += auc_binary(&s, &pos)?;
        }
        total / present.len() as f64
    };
    Ok(ClassificationScores { accuracy, auc })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        let probs = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.6, 0.4], vec![0.3, 0.7]];
        let s = binary_and_multiclass_scores(&probs, &[0, 1, 0, 1]).unwrap();
        assert_eq!(s.accuracy, 1.0);
        assert_eq!(s.auc, 1.0);
    }

    #[test]
    fn ties_count_half() {
        assert_eq!(auc_binary(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        let probs = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        assert!(binary_and_multiclass_scores(&probs, &[1, 1]).is_err());
    }

    #[test]
    fn multiclass_macro() {
        let probs = vec![
            vec![0.8, 0.1, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.1, 0.1, 0.8],
            vec![0.6, 0.3, 0.1],
        ];
        let s = binary_and_multiclass_scores(&probs, &[0, 1, 2, 0]).unwrap();
        assert_eq!(s.accuracy, 1.0);
        assert_eq!(s.auc, 1.0);
    }
}
