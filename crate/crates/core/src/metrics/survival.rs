use serde::{Deserialize, Serialize};

use crate::error::{HistGenError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub risk_score: f64,
    pub event_time: f64,
    pub censored: bool,
}

/// Binary indexed tree of counts over risk ranks.
struct Fenwick(Vec<u64>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Fenwick(vec![0; n + 1])
    }

    fn add(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< rank`.
    fn below(&self, rank: usize) -> u64 {
        let mut i = rank;
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Harrell's concordance index. A pair `(i, j)` is comparable when `i` had an
/// event and `tᵢ < tⱼ`; it is concordant when `riskᵢ > riskⱼ`, and a risk tie
/// counts one half. Runs in `O(n log n)`.
pub fn c_index(records: &[SurvivalRecord]) -> Result<f64> {
    if let Some(r) = records
        .iter()
        .find(|r| !r.risk_score.is_finite() || !r.event_time.is_finite())
    {
        return Err(HistGenError::invalid(format!("non-finite survival record {r:?}")));
    }
    let mut risks: Vec<f64> = records.iter().map(|r| r.risk_score).collect();
    risks.sort_by(f64::total_cmp);
    risks.dedup();
    let rank_of = |x: f64| risks.partition_point(|&v| v < x);

    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[b].event_time.total_cmp(&records[a].event_time));

    // Walk from the latest time down; the tree holds every record with a
    // strictly later time than the current group.
    let mut tree = Fenwick::new(risks.len());
    let mut inserted: u64 = 0;
    let (mut concordant, mut tied, mut comparable) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let t = records[order[i]].event_time;
        let mut j = i;
        while j < order.len() && records[order[j]].event_time == t {
            j += 1;
        }
        for &k in &order[i..j] {
            let r = &records[k];
            if r.censored {
                continue;
            }
            let rank = rank_of(r.risk_score);
            let below = tree.below(rank);
            let equal = tree.below(rank + 1) - below;
            concordant += below;
            tied += equal;
            comparable += inserted;
        }
        for &k in &order[i..j] {
            tree.add(rank_of(records[k].risk_score));
            inserted += 1;
        }
        i = j;
    }
    if comparable == 0 {
        return Err(HistGenError::MetricUndefined("no comparable pairs".into()));
    }
    Ok((concordant as f64 + 0.5 * tied as f64) / comparable as f64)
}
