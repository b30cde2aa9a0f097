//! Ranked-retrieval metrics: CMC, mAP, and instruction-thresholded mAP.
//!
//! Under mAP-τ a retrieved item counts as correct only if its identity
//! matches and its instruction is at least `τ`-similar to the query's. The
//! filtered item is treated as a negative everywhere, including the
//! denominator `n_q`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Depth, EmptyQueryPolicy, RankEvalConfig, RankList};

/// Thresholds evaluated when no explicit list is given.
pub const DEFAULT_TAUS: [f64; 4] = [-1.0, 0.25, 0.5, 0.75];

/// CMC cut-offs reported by default.
pub const DEFAULT_CMC_KS: [usize; 3] = [1, 5, 10];

/// The matching evaluator. A missing instruction similarity passes only the
/// trivial threshold `τ = −1`.
pub fn psi_tau(identity_match: bool, instr_cos: Option<f64>, tau: f64) -> bool {
    identity_match
        && match instr_cos {
            Some(c) => c >= tau,
            None => tau <= -1.0,
        }
}

/// Average precision over the first `depth` entries given per-rank
/// correctness flags. Zero when nothing is correct.
fn average_precision(hits: impl Iterator<Item = bool>) -> (f64, usize) {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (k, hit) in hits.enumerate() {
        if hit {
            found += 1;
            sum += found as f64 / (k + 1) as f64;
        }
    }
    if found == 0 {
        (0.0, 0)
    } else {
        (sum / found as f64, found)
    }
}

pub fn average_precision_tau(rank: &RankList, cfg: &RankEvalConfig) -> f64 {
    ap_tau_with_count(rank, cfg).0
}

fn ap_tau_with_count(rank: &RankList, cfg: &RankEvalConfig) -> (f64, usize) {
    let depth = cfg.depth.resolve(rank.ranked.len());
    average_precision(
        rank.ranked[..depth]
            .iter()
            .map(|e| psi_tau(e.identity_match, e.instr_cos, cfg.tau)),
    )
}

/// Identity-only average precision.
pub fn average_precision_classic(rank: &RankList, depth: Depth) -> f64 {
    let depth = depth.resolve(rank.ranked.len());
    average_precision(rank.ranked[..depth].iter().map(|e| e.identity_match)).0
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn map_tau(ranks: &[RankList], cfg: &RankEvalConfig) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::InvalidArgument("no queries to evaluate".into()));
    }
    let per_query: Vec<(f64, usize)> = ranks.iter().map(|r| ap_tau_with_count(r, cfg)).collect();
    let kept: Vec<f64> = match cfg.empty_query_policy {
        EmptyQueryPolicy::CountAsZero => per_query.iter().map(|p| p.0).collect(),
        EmptyQueryPolicy::Exclude => per_query
            .iter()
            .filter(|p| p.1 > 0)
            .map(|p| p.0)
            .collect(),
    };
    if kept.is_empty() {
        return Ok(0.0);
    }
    Ok(mean(&kept))
}

/// Identity-only mAP; queries without a positive count as zero.
pub fn map_classic(ranks: &[RankList], depth: Depth) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::InvalidArgument("no queries to evaluate".into()));
    }
    let aps: Vec<f64> = ranks
        .iter()
        .map(|r| average_precision_classic(r, depth))
        .collect();
    Ok(mean(&aps))
}

/// Fraction of queries whose first identity match is within rank `k`.
pub fn cmc_topk(ranks: &[RankList], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if ranks.is_empty() {
        return Err(Error::InvalidArgument("no queries to evaluate".into()));
    }
    if ks.contains(&0) {
        return Err(Error::InvalidArgument("CMC rank must be at least 1".into()));
    }
    let first: Vec<Option<usize>> = ranks
        .iter()
        .map(|r| r.ranked.iter().position(|e| e.identity_match))
        .collect();
    let q = ranks.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = first.iter().filter(|p| matches!(p, Some(i) if *i < k)).count();
            (k, hits as f64 / q)
        })
        .collect())
}

/// mAP-τ at each threshold.
pub fn sweep_tau(ranks: &[RankList], taus: &[f64], base: &RankEvalConfig) -> Result<Vec<(f64, f64)>> {
    if taus.is_empty() {
        return Err(Error::InvalidArgument("empty threshold list".into()));
    }
    taus.iter()
        .map(|&tau| Ok((tau, map_tau(ranks, &RankEvalConfig { tau, ..*base })?)))
        .collect()
}

/// Threshold rendered the way it appears as a JSON key.
pub fn tau_key(tau: f64) -> String {
    format!("{tau}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub map: f64,
    pub map_tau: BTreeMap<String, f64>,
    pub cmc: BTreeMap<String, f64>,
    pub n_queries: usize,
    pub config: RankEvalConfig,
    #[serde(skip)]
    pub per_query_ap: Vec<f64>,
}

impl MetricReport {
    pub fn compute(ranks: &[RankList], taus: &[f64], ks: &[usize], config: RankEvalConfig) -> Result<Self> {
        let map = map_classic(ranks, config.depth)?;
        let map_tau = sweep_tau(ranks, taus, &config)?
            .into_iter()
            .map(|(t, v)| (tau_key(t), v))
            .collect();
        let max_len = ranks.iter().map(|r| r.ranked.len()).max().unwrap_or(0);
        let ks: Vec<usize> = ks.iter().copied().filter(|&k| k <= max_len.max(1)).collect();
        let cmc = cmc_topk(ranks, &ks)?
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Ok(Self {
            map,
            map_tau,
            cmc,
            n_queries: ranks.len(),
            config,
            per_query_ap: ranks
                .iter()
                .map(|r| average_precision_classic(r, config.depth))
                .collect(),
        })
    }

    pub fn map_at(&self, tau: f64) -> Option<f64> {
        self.map_tau.get(&tau_key(tau)).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(flags: &[(bool, Option<f64>)]) -> RankList {
        RankList::from_flags(0, flags)
    }

    #[test]
    fn psi_examples() {
        assert!(psi_tau(true, Some(0.8), 0.5));
        assert!(!psi_tau(true, Some(0.3), 0.5));
        assert!(!psi_tau(false, Some(0.99), 0.5));
        assert!(psi_tau(true, None, -1.0));
        assert!(!psi_tau(true, None, 0.0));
    }

    #[test]
    fn ap_examples() {
        let cfg = RankEvalConfig::with_tau(0.5);
        let perfect = list(&[(true, Some(1.0)); 5]);
        assert_eq!(average_precision_tau(&perfect, &cfg), 1.0);

        let fig3 = list(&[
            (true, Some(0.9)),
            (false, Some(0.1)),
            (true, Some(0.3)),
            (false, Some(0.2)),
            (true, Some(0.7)),
        ]);
        assert_eq!(average_precision_tau(&fig3, &cfg), 0.7);

        let late = list(&[(false, Some(0.0)), (true, Some(0.0))]);
        assert_eq!(average_precision_tau(&late, &RankEvalConfig::with_tau(-1.0)), 0.5);

        let none = list(&[(false, Some(1.0)), (true, Some(0.1))]);
        assert_eq!(average_precision_tau(&none, &cfg), 0.0);
    }

    #[test]
    fn depth_truncates() {
        let l = list(&[(false, None), (false, None), (true, None)]);
        let cfg = RankEvalConfig {
            depth: Depth::Top(2),
            ..RankEvalConfig::default()
        };
        assert_eq!(average_precision_tau(&l, &cfg), 0.0);
    }

    #[test]
    fn map_examples() {
        let a = list(&[(true, Some(1.0))]);
        let b = list(&[(false, Some(1.0)), (true, Some(1.0))]);
        let cfg = RankEvalConfig::with_tau(0.5);
        assert_eq!(map_tau(&[a.clone(), b.clone()], &cfg).unwrap(), 0.75);
        assert!(map_tau(&[], &cfg).is_err());

        let empty = list(&[(true, Some(0.0))]);
        assert_eq!(map_tau(&[a.clone(), empty.clone()], &cfg).unwrap(), 0.5);
        let excl = RankEvalConfig {
            empty_query_policy: EmptyQueryPolicy::Exclude,
            ..cfg
        };
        assert_eq!(map_tau(&[a, empty], &excl).unwrap(), 1.0);
    }

    #[test]
    fn cmc_examples() {
        let at = |p: Option<usize>| {
            let mut flags = vec![(false, None); 8];
            if let Some(p) = p {
                flags[p - 1] = (true, None);
            }
            list(&flags)
        };
        let single = cmc_topk(&[at(Some(3))], &[1, 5]).unwrap();
        assert_eq!(single[&1], 0.0);
        assert_eq!(single[&5], 1.0);

        let all_first = cmc_topk(&[at(Some(1)), at(Some(1))], &[1, 3, 8]).unwrap();
        assert!(all_first.values().all(|&v| v == 1.0));

        let mixed = cmc_topk(&[at(Some(1)), at(Some(2)), at(Some(6)), at(None)], &[1, 5]).unwrap();
        assert_eq!(mixed[&1], 0.25);
        assert_eq!(mixed[&5], 0.5);
        assert!(cmc_topk(&[], &[1]).is_err());
    }

    #[test]
    fn sweep_examples() {
        let fig3 = list(&[
            (true, Some(0.9)),
            (false, Some(0.1)),
            (true, Some(0.3)),
            (false, Some(0.2)),
            (true, Some(0.7)),
        ]);
        let base = RankEvalConfig::default();
        let classic = map_classic(std::slice::from_ref(&fig3), Depth::Full).unwrap();
        let s = sweep_tau(std::slice::from_ref(&fig3), &[-1.0], &base).unwrap();
        assert_eq!(s, vec![(-1.0, classic)]);

        // τ = 0.25 keeps ranks {1,3,5}: (1/3)(1 + 2/3 + 3/5)
        // τ = 0.50 keeps ranks {1,5}:   (1/2)(1 + 2/5)
        // τ = 0.75 keeps rank  {1}:     1
        let s = sweep_tau(std::slice::from_ref(&fig3), &[0.25, 0.5, 0.75], &base).unwrap();
        assert!((s[0].1 - (1.0 + 2.0 / 3.0 + 0.6) / 3.0).abs() < 1e-15);
        assert_eq!(s[1].1, 0.7);
        assert_eq!(s[2].1, 1.0);

        let flat = list(&[(true, Some(1.0)), (false, Some(1.0)), (true, Some(1.0))]);
        let s = sweep_tau(&[flat], &[-1.0, 0.25, 0.5, 0.75, 1.0], &base).unwrap();
        assert!(s.iter().all(|&(_, v)| v == s[0].1));
        assert!(sweep_tau(&[fig3], &[], &base).is_err());
    }

    #[test]
    fn report_json_shape() {
        let l = list(&[(true, Some(0.9)), (false, None)]);
        let r = MetricReport::compute(&[l], &DEFAULT_TAUS, &DEFAULT_CMC_KS, RankEvalConfig::default()).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in ["map", "map_tau", "cmc", "n_queries", "config"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["map_tau"]["-1"], 1.0);
        assert_eq!(v["map_tau"]["0.5"], 1.0);
        assert!(v["cmc"].get("10").is_none());
        assert_eq!(r.map_at(0.25), Some(1.0));
    }
}
