//! Token-level ROUGE, per-client evaluation and the KD token-class report.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenClass, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{PreparedInstance, Summarizer};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::selective_kd::{kd_usage_stats, KdUsage, TokenTrace};

/// Precision, recall and F1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub p: f64,
    pub r: f64,
    pub f: f64,
}

impl Prf {
    pub fn from_counts(overlap: usize, hyp_total: usize, ref_total: usize) -> Prf {
        if hyp_total == 0 || ref_total == 0 {
            return Prf::default();
        }
        let p = overlap as f64 / hyp_total as f64;
        let r = overlap as f64 / ref_total as f64;
        let f = if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
        Prf { p, r, f }
    }
}

pub fn rouge_n(hyp: &[usize], reference: &[usize], n: usize) -> Prf {
    if n == 0 || hyp.len() < n || reference.len() < n {
        return Prf::default();
    }
    let mut counts: HashMap<&[usize], usize> = HashMap::new();
    for g in reference.windows(n) {
        *counts.entry(g).or_default() += 1;
    }
    let mut overlap = 0;
    for g in hyp.windows(n) {
        if let Some(c) = counts.get_mut(g) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    Prf::from_counts(overlap, hyp.len() + 1 - n, reference.len() + 1 - n)
}

pub fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(hyp: &[usize], reference: &[usize]) -> Prf {
    Prf::from_counts(lcs_len(hyp, reference), hyp.len(), reference.len())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub r1: Prf,
    pub r2: Prf,
    pub rl: Prf,
}

impl RougeScore {
    pub fn score(hyp: &[usize], reference: &[usize]) -> RougeScore {
        RougeScore {
            r1: rouge_n(hyp, reference, 1),
            r2: rouge_n(hyp, reference, 2),
            rl: rouge_l(hyp, reference),
        }
    }

    pub fn mean(scores: &[RougeScore]) -> RougeScore {
        let n = scores.len().max(1) as f64;
        let avg = |get: fn(&RougeScore) -> Prf| {
            let mut acc = Prf::default();
            for s in scores {
                let x = get(s);
                acc.p += x.p;
                acc.r += x.r;
                acc.f += x.f;
            }
            Prf {
                p: acc.p / n,
                r: acc.r / n,
                f: acc.f / n,
            }
        };
        RougeScore {
            r1: avg(|s| s.r1),
            r2: avg(|s| s.r2),
            rl: avg(|s| s.rl),
        }
    }
}

/// Cuts a generated sequence at its first EOS and drops padding.
pub fn strip_specials(tokens: &[usize]) -> Vec<usize> {
    tokens
        .iter()
        .copied()
        .take_while(|&t| t != EOS)
        .filter(|&t| t != PAD)
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientEval {
    pub rouge: RougeScore,
    /// Mean over instances of the per-token teacher-forced cross-entropy.
    pub ce: f64,
}

/// Mean teacher-forced CE over `data` under `local`.
pub fn mean_ce<S: Scalar>(
    model: &Summarizer<S>,
    local: &ParamSet<S>,
    data: &[PreparedInstance<S>],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut total = 0.0;
    for p in data {
        total += model.instance_ce(p, local)?;
    }
    Ok(total / data.len() as f64)
}

/// Greedy-decodes every instance and scores it against its reference.
pub fn evaluate_client<S: Scalar>(
    model: &Summarizer<S>,
    local: &ParamSet<S>,
    test: &[PreparedInstance<S>],
) -> Result<ClientEval> {
    let ce = mean_ce(model, local, test)?;
    let max_len = model.config().max_tgt_len;
    let mut scores = Vec::with_capacity(test.len());
    for p in test {
        let out = model.generate_prepared(p, local, max_len)?;
        scores.push(RougeScore::score(
            &strip_specials(&out),
            &strip_specials(&p.reference),
        ));
    }
    Ok(ClientEval {
        rouge: RougeScore::mean(&scores),
        ce,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KdClassReport {
    pub usage: KdUsage,
    /// Share of each class among KD-applied events; empty when no
    /// distillation occurred.
    pub kd_shares: BTreeMap<TokenClass, f64>,
    /// Share of each class among events trained without distillation.
    pub ce_only_shares: BTreeMap<TokenClass, f64>,
    pub no_distillation: bool,
}

pub fn kd_class_report(traces: &[TokenTrace]) -> Result<KdClassReport> {
    let usage = kd_usage_stats(traces)?;
    let plain_events = usage.events - usage.kd_events;
    let shares = |count: fn(&crate::selective_kd::ClassUsage) -> usize,
                  total: usize|
     -> BTreeMap<TokenClass, f64> {
        if total == 0 {
            return BTreeMap::new();
        }
        usage
            .per_class
            .iter()
            .map(|(&c, u)| (c, count(u) as f64 / total as f64))
            .collect()
    };
    Ok(KdClassReport {
        kd_shares: shares(|u| u.kd_events, usage.kd_events),
        ce_only_shares: shares(|u| u.events - u.kd_events, plain_events),
        no_distillation: usage.kd_events == 0,
        usage,
    })
}
