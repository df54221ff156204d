//! Server loop: sampling, broadcast, local training, FedAvg, ledger.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClientData, Domain};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_client, mean_ce, ClientEval};
use crate::model::{init_adapters, PreparedInstance, Summarizer};
use crate::params::ParamSet;
use crate::rng::{derive_seed, stream};
use crate::scalar::Scalar;
use crate::selective_kd::{train_epoch, KdConfig, TokenTrace};
use crate::tensor::{AdamW, AdamWConfig};

/// Bytes per exchanged value (32-bit wire floats).
pub const WIRE_BYTES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Local adapter replaced by the server parameters every round, pure CE.
    FedAvg,
    /// Persistent local adapter, always distilled.
    FedKd,
    /// Persistent local adapter, entropy-gated distillation.
    FedSelectKd,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::FedAvg, Strategy::FedKd, Strategy::FedSelectKd];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedKd => "fedkd",
            Strategy::FedSelectKd => "fedselectkd",
        }
    }

    pub fn parse(s: &str) -> Result<Strategy> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "strategy",
                    format!("unknown strategy `{s}` (fedavg, fedkd, fedselectkd)"),
                )
            })
    }

    /// The gate configuration a strategy actually trains with.
    pub fn effective_kd(self, kd: &KdConfig) -> KdConfig {
        let tau = match self {
            Strategy::FedAvg => 0.0,
            Strategy::FedKd => f64::INFINITY,
            Strategy::FedSelectKd => kd.tau,
        };
        KdConfig { tau, ..kd.clone() }
    }

    pub fn overwrites_local(self) -> bool {
        self == Strategy::FedAvg
    }
}

/// One client: its private data and its two adapter sets. Only parameter
/// sets and scalar metrics ever leave it.
#[derive(Clone, Debug)]
pub struct ClientState<S> {
    pub id: usize,
    pub name: String,
    pub domain: Option<Domain>,
    pub local: ParamSet<S>,
    pub global: ParamSet<S>,
    seed: u64,
    train: Vec<PreparedInstance<S>>,
    valid: Vec<PreparedInstance<S>>,
    test: Vec<PreparedInstance<S>>,
}

impl<S: Scalar> ClientState<S> {
    pub fn new(
        id: usize,
        data: &ClientData,
        model: &Summarizer<S>,
        init: &ParamSet<S>,
        master_seed: u64,
    ) -> Result<Self> {
        let prep = |set: &[crate::corpus::Instance]| {
            set.iter()
                .map(|i| model.prepare(i))
                .collect::<Result<Vec<_>>>()
        };
        Ok(ClientState {
            id,
            name: data.name.clone(),
            domain: data.domain,
            local: init.clone(),
            global: init.clone(),
            seed: derive_seed(master_seed, "client", &[id as u64]),
            train: prep(&data.train)?,
            valid: prep(&data.valid)?,
            test: prep(&data.test)?,
        })
    }

    pub fn train_size(&self) -> usize {
        self.train.len()
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.valid.len(), self.test.len())
    }

    pub fn train_target_tokens(&self) -> usize {
        self.train.iter().map(|p| p.target_len()).sum()
    }

    pub fn validation_ce(&self, model: &Summarizer<S>, params: &ParamSet<S>) -> Result<f64> {
        mean_ce(model, params, &self.valid)
    }

    pub fn test_eval(&self, model: &Summarizer<S>, params: &ParamSet<S>) -> Result<ClientEval> {
        evaluate_client(model, params, &self.test)
    }

    fn local_update(
        &mut self,
        model: &Summarizer<S>,
        kd: &KdConfig,
        round: usize,
        keep_traces: bool,
    ) -> Result<(f64, Vec<TokenTrace>)> {
        if self.train.is_empty() {
            return Err(Error::Client {
                client: self.id,
                message: "empty training split".into(),
            });
        }
        let mut opt = AdamW::new(AdamWConfig {
            lr: kd.lr,
            weight_decay: kd.weight_decay,
            ..Default::default()
        });
        let mut traces = Vec::new();
        let (mut loss, mut tokens) = (0.0, 0);
        for epoch in 0..kd.epochs_per_round {
            let mut rng = stream(self.seed, "shuffle", &[round as u64, epoch as u64]);
            let stats = train_epoch(
                model,
                &self.train,
                &mut self.local,
                &self.global,
                &mut opt,
                kd,
                &mut rng,
                &mut traces,
            )?;
            loss += stats.mean_loss * stats.tokens as f64;
            tokens += stats.tokens;
        }
        if keep_traces {
            for t in &mut traces {
                t.round = round;
                t.client = self.id;
            }
        } else {
            traces.clear();
        }
        Ok((loss / tokens.max(1) as f64, traces))
    }
}

/// Ledger row of one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    pub bytes_up: Vec<usize>,
    pub bytes_down: Vec<usize>,
    pub train_loss: Vec<f64>,
    pub checksum: String,
}

/// Dataset-size weighted mean of the participants' parameter sets.
///
/// Evaluated as `w₀ + Σᵢ (|Dᵢ|/|D|)·(wᵢ − w₀)`, which equals the weighted
/// mean and returns identical inputs bit-for-bit.
pub fn aggregate<S: Scalar>(updates: &[(&ParamSet<S>, usize)]) -> Result<ParamSet<S>> {
    let (first, _) = updates.first().ok_or(Error::Empty("aggregation input"))?;
    for (p, _) in &updates[1..] {
        first.check_same_structure(p)?;
    }
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::Empty("aggregation weights"));
    }
    let weights: Vec<S> = updates
        .iter()
        .map(|(_, n)| S::lit(*n as f64 / total as f64))
        .collect();
    let mut out = (*first).clone();
    for (name, t) in out.iter_mut() {
        let base: Vec<S> = t.data().to_vec();
        for ((p, _), &w) in updates.iter().zip(&weights).skip(1) {
            let other = p.require(name)?;
            for ((o, &x), &b) in t.data_mut().iter_mut().zip(other.data()).zip(&base) {
                *o = *o + w * (x - b);
            }
        }
    }
    Ok(out)
}

/// `max(1, round(rate·n))` distinct clients, in ascending order.
pub fn sample_clients(n: usize, rate: f64, rng: &mut crate::rng::StreamRng) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Empty("client list"));
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::config(
            "participation_rate",
            format!("must lie in (0, 1], got {rate}"),
        ));
    }
    let k = ((rate * n as f64).round() as usize).clamp(1, n);
    if k == n {
        return Ok((0..n).collect());
    }
    let mut picked = rand::seq::index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Round-1 server parameters.
pub fn init<S: Scalar>(model: &Summarizer<S>, seed: u64) -> ParamSet<S> {
    init_adapters(model.config(), &mut stream(seed, "adapter-init", &[]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub strategy: Strategy,
    pub kd: KdConfig,
    pub rounds: usize,
    pub participation_rate: f64,
    pub reset_local_each_round: bool,
    pub seed: u64,
    pub keep_traces: bool,
}

/// One synchronous round: sample, broadcast, train, aggregate.
pub fn run_round<S: Scalar>(
    model: &Summarizer<S>,
    server: &ParamSet<S>,
    clients: &mut [ClientState<S>],
    cfg: &FederationConfig,
    round: usize,
) -> Result<(ParamSet<S>, RoundRecord, Vec<TokenTrace>)> {
    let mut rng = stream(cfg.seed, "sampling", &[round as u64]);
    let participants = sample_clients(clients.len(), cfg.participation_rate, &mut rng)?;
    let kd = cfg.strategy.effective_kd(&cfg.kd);
    let reset = cfg.strategy.overwrites_local() || cfg.reset_local_each_round;

    let mut chosen: Vec<&mut ClientState<S>> = clients
        .iter_mut()
        .enumerate()
        .filter(|(i, _)| participants.binary_search(i).is_ok())
        .map(|(_, c)| c)
        .collect();
    let results: Vec<Result<(f64, Vec<TokenTrace>)>> = chosen
        .par_iter_mut()
        .map(|c| {
            c.global = server.clone();
            if reset {
                c.local = server.clone();
            }
            c.local_update(model, &kd, round, cfg.keep_traces)
        })
        .collect();

    let mut losses = Vec::with_capacity(results.len());
    let mut traces = Vec::new();
    for r in results {
        let (loss, t) = r?;
        losses.push(loss);
        traces.extend(t);
    }
    let updates: Vec<(&ParamSet<S>, usize)> =
        chosen.iter().map(|c| (&c.local, c.train_size())).collect();
    let next = aggregate(&updates)?;
    let bytes = model.config().payload_size() * WIRE_BYTES;
    let record = RoundRecord {
        round,
        bytes_up: vec![bytes; participants.len()],
        bytes_down: vec![bytes; participants.len()],
        participants,
        train_loss: losses,
        checksum: next.checksum(),
    };
    Ok((next, record, traces))
}

/// Per-round summary including validation of every client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub record: RoundRecord,
    /// Own-domain validation CE per client, on evaluation rounds.
    pub valid_ce: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct BestCheckpoint<S> {
    pub round: usize,
    pub valid_ce: f64,
    pub params: ParamSet<S>,
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainingOutcome<S> {
    pub history: Vec<RoundMetrics>,
    pub server: ParamSet<S>,
    pub best: Vec<BestCheckpoint<S>>,
    pub test: Vec<ClientEval>,
    pub traces: Vec<TokenTrace>,
}

/// Mutable state of a run between rounds.
#[derive(Clone, Debug)]
pub struct Federation<S> {
    pub server: ParamSet<S>,
    pub clients: Vec<ClientState<S>>,
    pub best: Vec<BestCheckpoint<S>>,
    pub rounds_done: usize,
}

impl<S: Scalar> Federation<S> {
    /// Fresh run: server init, every client starting from it. The round-0
    /// parameters stand in as the best checkpoint until the first validated
    /// round replaces them.
    pub fn new(model: &Summarizer<S>, data: &[ClientData], seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("client list"));
        }
        let server = init(model, seed);
        let clients: Vec<ClientState<S>> = data
            .par_iter()
            .enumerate()
            .map(|(i, d)| ClientState::new(i, d, model, &server, seed))
            .collect::<Result<_>>()?;
        let best = clients
            .iter()
            .map(|c| {
                Ok(BestCheckpoint {
                    round: 0,
                    valid_ce: c.validation_ce(model, &c.local)?,
                    params: c.local.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Federation {
            server,
            clients,
            best,
            rounds_done: 0,
        })
    }

    /// Resumes from saved parameters.
    pub fn restore(
        model: &Summarizer<S>,
        data: &[ClientData],
        seed: u64,
        server: ParamSet<S>,
        locals: Vec<ParamSet<S>>,
        best: Vec<BestCheckpoint<S>>,
        rounds_done: usize,
    ) -> Result<Self> {
        if locals.len() != data.len() || best.len() != data.len() {
            return Err(Error::Checkpoint(format!(
                "saved state holds {} clients, the preset has {}",
                locals.len(),
                data.len()
            )));
        }
        let mut clients: Vec<ClientState<S>> = data
            .par_iter()
            .enumerate()
            .map(|(i, d)| ClientState::new(i, d, model, &server, seed))
            .collect::<Result<_>>()?;
        for (c, local) in clients.iter_mut().zip(locals) {
            server.check_same_structure(&local)?;
            c.local = local;
        }
        Ok(Federation {
            server,
            clients,
            best,
            rounds_done,
        })
    }

    /// Runs the next round; with `validate`, scores every client on its own
    /// validation split and updates its best checkpoint.
    pub fn step(
        &mut self,
        model: &Summarizer<S>,
        cfg: &FederationConfig,
        validate: bool,
    ) -> Result<(RoundMetrics, Vec<TokenTrace>)> {
        let round = self.rounds_done + 1;
        let (server, record, traces) =
            run_round(model, &self.server, &mut self.clients, cfg, round)?;
        self.server = server;
        self.rounds_done = round;
        if !validate {
            return Ok((
                RoundMetrics {
                    record,
                    valid_ce: None,
                },
                traces,
            ));
        }
        // A client whose adapters are replaced by the aggregate every round
        // deploys the aggregate, not its last local update.
        let deployed = cfg.strategy.overwrites_local() || cfg.reset_local_each_round;
        let server = &self.server;
        fn pick<'a, S>(
            deployed: bool,
            server: &'a ParamSet<S>,
            c: &'a ClientState<S>,
        ) -> &'a ParamSet<S> {
            if deployed {
                server
            } else {
                &c.local
            }
        }
        let valid_ce: Vec<f64> = self
            .clients
            .par_iter()
            .map(|c| c.validation_ce(model, pick(deployed, server, c)))
            .collect::<Result<_>>()?;
        for ((best, c), &ce) in self.best.iter_mut().zip(&self.clients).zip(&valid_ce) {
            if best.round == 0 || ce < best.valid_ce {
                *best = BestCheckpoint {
                    round,
                    valid_ce: ce,
                    params: pick(deployed, server, c).clone(),
                };
            }
        }
        Ok((
            RoundMetrics {
                record,
                valid_ce: Some(valid_ce),
            },
            traces,
        ))
    }

    /// Test evaluation of each client's best checkpoint.
    pub fn test(&self, model: &Summarizer<S>) -> Result<Vec<ClientEval>> {
        self.clients
            .par_iter()
            .zip(&self.best)
            .map(|(c, b)| c.test_eval(model, &b.params))
            .collect()
    }
}

/// Full run: `cfg.rounds` rounds, then test evaluation.
pub fn run_training<S: Scalar>(
    model: &Summarizer<S>,
    data: &[ClientData],
    cfg: &FederationConfig,
) -> Result<TrainingOutcome<S>> {
    cfg.kd.validate()?;
    let mut fed = Federation::new(model, data, cfg.seed)?;
    let mut history = Vec::with_capacity(cfg.rounds);
    let mut traces = Vec::new();
    for _ in 0..cfg.rounds {
        let (m, t) = fed.step(model, cfg, true)?;
        history.push(m);
        traces.extend(t);
    }
    let test = fed.test(model)?;
    Ok(TrainingOutcome {
        history,
        server: fed.server,
        best: fed.best,
        test,
        traces,
    })
}
