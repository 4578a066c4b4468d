//! Nomination rank CDFs for comparing two policies' retrieval behavior.

use serde::Serialize;

use super::ProbeSet;
use crate::error::{Error, Result};
use crate::policy::{self, PolicyParameters};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankCdfRow {
    /// 1-based rank of the action by control nomination count.
    pub rank: usize,
    pub action: usize,
    pub control_cdf: f64,
    pub test_cdf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankCdfTable {
    pub rows: Vec<RankCdfRow>,
    pub control_total: usize,
    pub test_total: usize,
}

impl RankCdfTable {
    /// Number of ranks in the head, `ceil(fraction · |A|)`.
    pub fn head_size(&self, fraction: f64) -> usize {
        ((fraction * self.rows.len() as f64).ceil() as usize).clamp(1, self.rows.len())
    }

    /// Share of nominations falling outside the first `head` ranks, as
    /// `(control, test)`.
    pub fn share_outside_head(&self, head: usize) -> (f64, f64) {
        match self.rows.get(head.saturating_sub(1)) {
            Some(row) if head > 0 => (1.0 - row.control_cdf, 1.0 - row.test_cdf),
            _ => (1.0, 1.0),
        }
    }
}

/// How often each action appears in the top-`m` nominations over the probe
/// states.
pub fn nomination_counts(params: &PolicyParameters, probes: &ProbeSet, m: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; params.num_actions()];
    for s in probes.states(params)? {
        for a in policy::topk_retrieve(&s, params, m)? {
            counts[a] += 1;
        }
    }
    Ok(counts)
}

/// Ranks actions by how often the control policy nominates them (most
/// first, ties by id) and tabulates the cumulative nomination share of
/// both policies along that ordering.
pub fn nomination_rank_cdf(
    control: &PolicyParameters,
    test: &PolicyParameters,
    probes: &ProbeSet,
    m: usize,
) -> Result<RankCdfTable> {
    if control.num_actions() != test.num_actions() {
        return Err(Error::mismatch(
            "nomination_rank_cdf",
            control.num_actions(),
            test.num_actions(),
        ));
    }
    let control_counts = nomination_counts(control, probes, m)?;
    let test_counts = nomination_counts(test, probes, m)?;
    let control_total: usize = control_counts.iter().sum();
    let test_total: usize = test_counts.iter().sum();
    if control_total == 0 {
        return Err(Error::invalid("probe set produced no nominations"));
    }
    let mut order: Vec<usize> = (0..control_counts.len()).collect();
    order.sort_by(|&a, &b| control_counts[b].cmp(&control_counts[a]).then(a.cmp(&b)));
    let (mut c_cum, mut t_cum) = (0usize, 0usize);
    let rows = order
        .into_iter()
        .enumerate()
        .map(|(i, action)| {
            c_cum += control_counts[action];
            t_cum += test_counts[action];
            RankCdfRow {
                rank: i + 1,
                action,
                control_cdf: c_cum as f64 / control_total as f64,
                test_cdf: t_cum as f64 / test_total as f64,
            }
        })
        .collect();
    Ok(RankCdfTable {
        rows,
        control_total,
        test_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_policies_give_identical_cdfs() {
        let params = PolicyParameters::fixed_preference(&[0.3, 2.0, -1.0, 0.5]).unwrap();
        let probes = ProbeSet {
            sequences: vec![vec![0, 1], vec![2]],
        };
        let table = nomination_rank_cdf(&params, &params, &probes, 2).unwrap();
        assert_eq!(table.rows.len(), 4);
        for row in &table.rows {
            assert_eq!(row.control_cdf, row.test_cdf);
        }
        assert_eq!(table.rows[0].action, 1);
        assert_eq!(table.rows[1].action, 3);
        assert_eq!(table.rows.last().unwrap().control_cdf, 1.0);
    }

    #[test]
    fn flatter_policy_spreads_nominations() {
        let control = PolicyParameters::fixed_preference(&[3.0, 2.0, 1.0, 0.0]).unwrap();
        let test = PolicyParameters::fixed_preference(&[0.0, 1.0, 2.0, 3.0]).unwrap();
        let probes = ProbeSet {
            sequences: vec![vec![0; 5]],
        };
        let table = nomination_rank_cdf(&control, &test, &probes, 1).unwrap();
        assert_eq!(table.share_outside_head(1), (0.0, 1.0));
        assert_eq!(table.head_size(0.1), 1);
    }
}
