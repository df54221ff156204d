//! Entropy-gated selective distillation and the local training loop.
//!
//! Each target token is trained with plain cross-entropy unless the teacher
//! (the global adapter path) is confident about it, i.e. its output
//! entropy is below `tau`; confident tokens also pull the student towards
//! the teacher distribution with weight `lambda`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenClass;
use crate::error::{Error, Result};
use crate::model::{bind_adapters, BoundAdapters, BoundBackbone, PreparedInstance, Summarizer};
use crate::params::ParamSet;
use crate::rng::StreamRng;
use crate::scalar::{Scalar, PROB_FLOOR};
use crate::tensor::{AdamW, Graph, KlDirection, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub lambda: f64,
    /// Entropy threshold in nats. Serialized as `"inf"` when unbounded.
    #[serde(with = "threshold")]
    pub tau: f64,
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub kl_direction: KlDirection,
}

/// Fraction of `ln|V|` used as the default entropy threshold.
pub const DEFAULT_TAU_FRACTION: f64 = 0.5;

impl KdConfig {
    /// Default threshold for a vocabulary of `vocab_size` tokens.
    pub fn default_tau(vocab_size: usize) -> f64 {
        DEFAULT_TAU_FRACTION * (vocab_size as f64).ln()
    }

    pub fn for_vocab(vocab_size: usize) -> Self {
        KdConfig {
            tau: Self::default_tau(vocab_size),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(
                "lambda",
                format!("must lie in [0, 1], got {}", self.lambda),
            ));
        }
        if self.tau.is_nan() || self.tau < 0.0 {
            return Err(Error::config(
                "tau",
                format!("must be >= 0, got {}", self.tau),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(
                "lr",
                format!("must be positive, got {}", self.lr),
            ));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        Ok(())
    }

    pub fn gate(&self, entropy: f64) -> bool {
        entropy < self.tau
    }
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            lambda: 0.2,
            tau: Self::default_tau(96),
            epochs_per_round: 1,
            batch_size: 16,
            lr: 2e-4,
            weight_decay: 0.01,
            kl_direction: KlDirection::TeacherTarget,
        }
    }
}

mod threshold {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) if t == "inf" || t == "infinity" => Ok(f64::INFINITY),
            Raw::Text(t) => Err(de::Error::custom(format!(
                "expected a number or \"inf\", got {t:?}"
            ))),
        }
    }
}

/// Shannon entropy in nats with `0·ln 0 = 0`.
///
/// The normalization tolerance is 1e-9, widened to the rounding error of
/// the summation for low-precision scalars.
pub fn entropy<S: Scalar>(q: &[S]) -> Result<f64> {
    let total: f64 = q.iter().map(|x| x.as_f64()).sum();
    let tol = 1e-9_f64.max(S::epsilon().as_f64() * q.len() as f64);
    if q.is_empty() || (total - 1.0).abs() > tol || q.iter().any(|x| x.as_f64() < 0.0) {
        return Err(Error::Unnormalized(total));
    }
    Ok(q.iter()
        .map(|x| x.as_f64())
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum())
}

/// `-ln q[target]`, floored like the graph op.
pub fn cross_entropy<S: Scalar>(q: &[S], target: usize) -> f64 {
    -q[target].as_f64().max(PROB_FLOOR).ln()
}

/// KL divergence between teacher and student rows, floored like the graph op.
pub fn kl_divergence<S: Scalar>(teacher: &[S], student: &[S], direction: KlDirection) -> f64 {
    let (p, q) = match direction {
        KlDirection::TeacherTarget => (teacher, student),
        KlDirection::StudentTarget => (student, teacher),
    };
    p.iter()
        .zip(q)
        .map(|(&a, &b)| (a.as_f64(), b.as_f64()))
        .filter(|&(a, _)| a > 0.0)
        .map(|(a, b)| a * (a.max(PROB_FLOOR) / b.max(PROB_FLOOR)).ln())
        .sum()
}

/// Loss of one target token and whether the distillation branch ran.
pub fn token_loss<S: Scalar>(
    q_l: &[S],
    q_g: &[S],
    target: usize,
    cfg: &KdConfig,
) -> Result<(f64, bool)> {
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(Error::config(
            "lambda",
            format!("must lie in [0, 1], got {}", cfg.lambda),
        ));
    }
    entropy(q_l)?;
    let h = entropy(q_g)?;
    let ce = cross_entropy(q_l, target);
    if cfg.gate(h) {
        let kl = kl_divergence(q_g, q_l, cfg.kl_direction);
        Ok(((1.0 - cfg.lambda) * ce + cfg.lambda * kl, true))
    } else {
        Ok((ce, false))
    }
}

/// One token-learning event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenTrace {
    pub round: usize,
    pub client: usize,
    pub instance: usize,
    pub position: usize,
    pub entropy: f64,
    pub kd_applied: bool,
    pub class: TokenClass,
    pub ce: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub steps: usize,
    pub tokens: usize,
    /// Token-weighted mean of the optimized loss.
    pub mean_loss: f64,
}

/// Mean selective loss over the target tokens of one batch.
pub struct BatchLoss {
    pub loss: Var,
    /// The loss as computed outside the graph, for reporting.
    pub value: f64,
    pub tokens: usize,
    pub traces: Vec<TokenTrace>,
}

/// Builds the batch loss: per token `(1−λ)·CE + λ·KL` when the teacher's
/// entropy is below `tau`, plain CE otherwise, averaged over all target
/// tokens in `batch`. The KL node is only built when some token uses it.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<S: Scalar>(
    model: &Summarizer<S>,
    g: &mut Graph<S>,
    bb: &BoundBackbone,
    teacher: &BoundAdapters,
    student: &BoundAdapters,
    data: &[PreparedInstance<S>],
    batch: &[usize],
    cfg: &KdConfig,
) -> Result<BatchLoss> {
    let lambda = S::lit(cfg.lambda);
    let tokens: usize = batch.iter().map(|&i| data[i].target_len()).sum();
    let w = S::one() / S::from_count(tokens.max(1));
    let mut terms = Vec::with_capacity(2 * batch.len());
    let mut traces = Vec::with_capacity(tokens);
    let mut value = 0.0;
    for &i in batch {
        let p = &data[i];
        let out = model.decode_dual_prepared(g, bb, p, teacher, student)?;
        let (qg, ql) = (g.value(out.q_g), g.value(out.q_l));
        let mut w_ce = Vec::with_capacity(p.target_len());
        let mut w_kl = Vec::with_capacity(p.target_len());
        for (t, &target) in p.target.iter().enumerate() {
            let h = entropy(qg.row(t))?;
            let on = cfg.gate(h);
            let ce = cross_entropy(ql.row(t), target);
            let kl = kl_divergence(qg.row(t), ql.row(t), cfg.kl_direction);
            let lam = if on { cfg.lambda } else { 0.0 };
            value += (1.0 - lam) * ce + lam * kl;
            w_ce.push(if on { (S::one() - lambda) * w } else { w });
            w_kl.push(if on { lambda * w } else { S::zero() });
            traces.push(TokenTrace {
                round: 0,
                client: 0,
                instance: i,
                position: t,
                entropy: h,
                kd_applied: on,
                class: p.target_classes[t],
                ce,
                kl,
            });
        }
        let ce_rows = g.cross_entropy_rows(out.q_l, &p.target)?;
        terms.push(g.weighted_sum(ce_rows, w_ce)?);
        if w_kl.iter().any(|&x| x != S::zero()) {
            let kl_rows = g.kl_rows(out.q_g, out.q_l, cfg.kl_direction)?;
            terms.push(g.weighted_sum(kl_rows, w_kl)?);
        }
    }
    let mut loss = *terms.first().ok_or(Error::Empty("batch"))?;
    for &t in &terms[1..] {
        loss = g.add(loss, t)?;
    }
    Ok(BatchLoss {
        loss,
        value: value / tokens.max(1) as f64,
        tokens,
        traces,
    })
}

/// One pass over `data` in seeded-shuffled order, one AdamW step per batch.
/// `global` is only read; the optimizer updates `local` in place.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<S: Scalar>(
    model: &Summarizer<S>,
    data: &[PreparedInstance<S>],
    local: &mut ParamSet<S>,
    global: &ParamSet<S>,
    opt: &mut AdamW<S>,
    cfg: &KdConfig,
    rng: &mut StreamRng,
    traces: &mut Vec<TokenTrace>,
) -> Result<EpochStats> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("local training set"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);

    let mut stats = EpochStats::default();
    let mut loss_total = 0.0;
    for batch in order.chunks(cfg.batch_size) {
        let mut g = Graph::new();
        let bb = model.bind_backbone(&mut g);
        let teacher = bind_adapters(model.config(), &mut g, global, false)?;
        let student = bind_adapters(model.config(), &mut g, local, true)?;
        let out = batch_loss(model, &mut g, &bb, &teacher, &student, data, batch, cfg)?;
        g.backward(out.loss)?;
        let mut grads = student.params().collect_grads(&mut g)?;
        opt.step(local, &mut grads)?;
        stats.steps += 1;
        stats.tokens += out.tokens;
        loss_total += out.value * out.tokens as f64;
        traces.extend(out.traces);
    }
    stats.mean_loss = loss_total / stats.tokens.max(1) as f64;
    Ok(stats)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassUsage {
    pub events: usize,
    pub kd_events: usize,
    pub fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KdUsage {
    pub events: usize,
    pub kd_events: usize,
    /// KD events over all token-learning events (tokens × rounds seen).
    pub overall: f64,
    pub per_class: BTreeMap<TokenClass, ClassUsage>,
}

pub fn kd_usage_stats(traces: &[TokenTrace]) -> Result<KdUsage> {
    if traces.is_empty() {
        return Err(Error::Empty("token traces"));
    }
    let mut usage = KdUsage::default();
    for t in traces {
        let c = usage.per_class.entry(t.class).or_default();
        c.events += 1;
        usage.events += 1;
        if t.kd_applied {
            c.kd_events += 1;
            usage.kd_events += 1;
        }
    }
    for c in usage.per_class.values_mut() {
        c.fraction = c.kd_events as f64 / c.events as f64;
    }
    usage.overall = usage.kd_events as f64 / usage.events as f64;
    Ok(usage)
}
