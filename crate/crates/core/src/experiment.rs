//! Run configuration, orchestration and on-disk artifacts.
//!
//! A run directory holds:
//!
//! * `config.resolved.json` — the configuration with every default filled in
//! * `metrics.jsonl` — one row per round
//! * `traces.jsonl` — one row per token-learning event (optional)
//! * `state.ckpt` — server and client adapters after the latest round
//! * `best_<client>.ckpt` — each client's best adapters by validation CE
//! * `report.json` — final per-client test scores and KD usage

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, ConfigHash};
use crate::corpus::{
    generic_corpus, make_setting, ClientData, CorpusConfig, Domain, Preset, Vocab,
};
use crate::error::{Error, Result};
use crate::evaluation::{kd_class_report, KdClassReport, RougeScore};
use crate::federation::{BestCheckpoint, Federation, FederationConfig, Strategy, WIRE_BYTES};
use crate::model::{ModelConfig, PretrainConfig, Summarizer};
use crate::params::ParamSet;
use crate::selective_kd::{kd_usage_stats, KdConfig, TokenTrace};
use crate::tensor::KlDirection;

pub const SEED_ENV: &str = "FSKD_SEED";

/// Flat run configuration. Optional fields are filled by [`RunConfig::resolve`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub rounds: usize,
    pub participation_rate: f64,
    /// Validate every `eval_every` rounds (and always after the last one).
    pub eval_every: usize,
    pub output_dir: String,

    pub scale: f64,
    pub skew: f64,
    pub keywords: usize,

    pub vocab_size: usize,
    pub content_fraction: f64,
    pub model_dim: usize,
    pub bottleneck_dim: usize,
    pub ffn_dim: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub n_heads: usize,
    /// 1-based decoder layers carrying adapters; default: the top three.
    pub adapter_layers: Option<Vec<usize>>,
    pub max_src_len: usize,
    pub max_tgt_len: usize,

    pub lambda: f64,
    /// Entropy threshold in nats, or `"inf"`; default scales with `ln|V|`.
    #[serde(with = "opt_threshold")]
    pub tau: Option<f64>,
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub kl_direction: KlDirection,
    pub reset_local_each_round: bool,
    pub persist_traces: bool,

    /// Seed of the shared "public" backbone and vocabulary; deliberately
    /// independent of `seed`.
    pub backbone_seed: u64,
    pub backbone_steps: usize,
    pub backbone_batch: usize,
    pub backbone_lr: f64,
    pub backbone_corpus: usize,
    /// Directory where pretrained backbones are cached between runs.
    pub backbone_cache: Option<String>,
}

/// Default adapter placement: this many top decoder layers.
pub const DEFAULT_ADAPTER_DEPTH: usize = 3;

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunConfig {
            preset: Preset::NoniidUnbalanced.name().into(),
            strategy: Strategy::FedSelectKd,
            seed: 0,
            rounds: 10,
            participation_rate: 1.0,
            eval_every: 1,
            output_dir: "runs/default".into(),
            scale: CorpusConfig::default().scale,
            skew: CorpusConfig::default().skew,
            keywords: 1,
            vocab_size: model.vocab_size,
            content_fraction: 0.7,
            model_dim: model.model_dim,
            bottleneck_dim: model.bottleneck_dim,
            ffn_dim: model.ffn_dim,
            n_encoder_layers: model.n_encoder_layers,
            n_decoder_layers: model.n_decoder_layers,
            n_heads: model.n_heads,
            adapter_layers: None,
            max_src_len: model.max_src_len,
            max_tgt_len: model.max_tgt_len,
            lambda: 0.2,
            tau: None,
            epochs_per_round: 1,
            batch_size: 16,
            lr: 2e-3,
            weight_decay: 0.01,
            kl_direction: KlDirection::TeacherTarget,
            reset_local_each_round: false,
            persist_traces: true,
            backbone_seed: 1234,
            backbone_steps: 3000,
            backbone_batch: 16,
            backbone_lr: 2e-3,
            backbone_corpus: 24_000,
            backbone_cache: None,
        }
    }
}

mod opt_threshold {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if x.is_infinite() && *x > 0.0 => s.serialize_str("inf"),
            Some(x) => s.serialize_f64(*x),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Option::<Raw>::deserialize(d)? {
            None => Ok(None),
            Some(Raw::Num(v)) => Ok(Some(v)),
            Some(Raw::Text(t)) if t == "inf" || t == "infinity" => Ok(Some(f64::INFINITY)),
            Some(Raw::Text(t)) => Err(de::Error::custom(format!(
                "expected a number or \"inf\", got {t:?}"
            ))),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::config(json_field(&e.to_string()), e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Artifact {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    /// Applies `FSKD_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| {
                Error::config(
                    "seed",
                    format!("{SEED_ENV}={v:?} is not an unsigned integer"),
                )
            })?;
        }
        Ok(())
    }

    /// Fills every optional field and validates the result.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut r = self.clone();
        if r.tau.is_none() {
            r.tau = Some(KdConfig::default_tau(r.vocab_size));
        }
        if r.adapter_layers.is_none() {
            r.adapter_layers = Some(ModelConfig::top_layers(
                r.n_decoder_layers,
                DEFAULT_ADAPTER_DEPTH,
            ));
        }
        r.validate()?;
        Ok(r)
    }

    fn validate(&self) -> Result<()> {
        Preset::parse(&self.preset)?;
        self.model_config().validate()?;
        self.kd_config().validate()?;
        let rate = self.participation_rate;
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::config(
                "participation_rate",
                format!("must lie in (0, 1], got {rate}"),
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be positive"));
        }
        if !(self.scale > 0.0) {
            return Err(Error::config("scale", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.skew) {
            return Err(Error::config("skew", "must lie in [0, 1]"));
        }
        if self.keywords == 0 {
            return Err(Error::config("keywords", "must be positive"));
        }
        if !(self.content_fraction > 0.0 && self.content_fraction < 1.0) {
            return Err(Error::config("content_fraction", "must lie in (0, 1)"));
        }
        if self.backbone_corpus == 0 || self.backbone_batch == 0 {
            return Err(Error::config(
                "backbone_corpus",
                "pretraining corpus and batch must be non-empty",
            ));
        }
        if self.output_dir.is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        Ok(())
    }

    pub fn preset(&self) -> Result<Preset> {
        Preset::parse(&self.preset)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            model_dim: self.model_dim,
            bottleneck_dim: self.bottleneck_dim,
            ffn_dim: self.ffn_dim,
            n_encoder_layers: self.n_encoder_layers,
            n_decoder_layers: self.n_decoder_layers,
            n_heads: self.n_heads,
            adapter_layers: self.adapter_layers.clone().unwrap_or_else(|| {
                ModelConfig::top_layers(self.n_decoder_layers, DEFAULT_ADAPTER_DEPTH)
            }),
            max_src_len: self.max_src_len,
            max_tgt_len: self.max_tgt_len,
        }
    }

    pub fn kd_config(&self) -> KdConfig {
        KdConfig {
            lambda: self.lambda,
            tau: self
                .tau
                .unwrap_or_else(|| KdConfig::default_tau(self.vocab_size)),
            epochs_per_round: self.epochs_per_round,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            kl_direction: self.kl_direction,
        }
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            skew: self.skew,
            scale: self.scale,
            keywords: self.keywords,
            max_src_len: self.max_src_len,
        }
    }

    pub fn federation_config(&self) -> FederationConfig {
        FederationConfig {
            strategy: self.strategy,
            kd: self.kd_config(),
            rounds: self.rounds,
            participation_rate: self.participation_rate,
            reset_local_each_round: self.reset_local_each_round,
            seed: self.seed,
            keep_traces: true,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.backbone_steps,
            batch_size: self.backbone_batch,
            lr: self.backbone_lr,
            ..Default::default()
        }
    }

    /// Identity of a run for resumption: everything except the round
    /// budget and where artifacts go.
    pub fn hash(&self) -> ConfigHash {
        let mut c = self.clone();
        c.rounds = 0;
        c.output_dir.clear();
        c.backbone_cache = None;
        sha256_json(&c)
    }

    /// Identity modulo the master seed, for grouping repeated runs.
    pub fn hash_modulo_seed(&self) -> ConfigHash {
        let mut c = self.clone();
        c.seed = 0;
        c.output_dir.clear();
        c.backbone_cache = None;
        sha256_json(&c)
    }

    /// Identity of the pretrained backbone. Adapter shape and placement
    /// are not part of it.
    pub fn backbone_hash(&self) -> ConfigHash {
        let mut model = self.model_config();
        model.adapter_layers.clear();
        model.bottleneck_dim = 0;
        let key = (
            model,
            self.content_fraction,
            self.backbone_seed,
            self.backbone_steps,
            self.backbone_batch,
            self.backbone_lr.to_bits(),
            self.backbone_corpus,
        );
        sha256_json(&key)
    }
}

fn json_field(message: &str) -> String {
    message
        .split('`')
        .nth(1)
        .filter(|_| message.contains("field"))
        .unwrap_or("config")
        .to_string()
}

fn sha256_json<T: Serialize>(value: &T) -> ConfigHash {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&bytes).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// The vocabulary and frozen backbone a configuration trains on.
#[derive(Clone, Debug)]
pub struct Foundation {
    pub vocab: Vocab,
    pub model: Arc<Summarizer<f64>>,
}

impl Foundation {
    /// Builds the vocabulary and pretrains (or loads from the cache) the
    /// backbone described by `cfg`.
    pub fn build(cfg: &RunConfig) -> Result<Foundation> {
        let vocab = Vocab::build(cfg.vocab_size, cfg.content_fraction, cfg.backbone_seed)?;
        let model_cfg = cfg.model_config();
        let cache = cfg.backbone_cache.as_ref().map(|d| {
            Path::new(d).join(format!(
                "backbone-{}.ckpt",
                &hex(&cfg.backbone_hash())[..16]
            ))
        });
        if let Some(path) = cache.as_ref().filter(|p| p.exists()) {
            let ck = Checkpoint::load(path)?;
            if ck.config_hash != cfg.backbone_hash() {
                return Err(Error::Checkpoint(format!(
                    "{} belongs to a different backbone",
                    path.display()
                )));
            }
            let weights = crate::model::BackboneWeights::from_params(ck.params(""));
            let model = Summarizer::new(model_cfg, weights)?;
            return Ok(Foundation {
                vocab,
                model: Arc::new(model),
            });
        }
        let corpus = generic_corpus(
            &vocab,
            cfg.backbone_corpus,
            cfg.max_src_len,
            cfg.backbone_seed,
        )?;
        let model = Summarizer::pretrain(
            model_cfg,
            &corpus,
            &cfg.pretrain_config(),
            cfg.backbone_seed,
        )?;
        if let Some(path) = cache {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            let mut ck = Checkpoint::new(cfg.backbone_hash());
            ck.insert_params("", &model.backbone().to_params());
            ck.save(&path)?;
        }
        Ok(Foundation {
            vocab,
            model: Arc::new(model),
        })
    }

    /// Same backbone, different adapter placement.
    pub fn with_adapters(&self, adapter_layers: Vec<usize>) -> Result<Foundation> {
        let mut cfg = self.model.config().clone();
        cfg.adapter_layers = adapter_layers;
        Ok(Foundation {
            vocab: self.vocab.clone(),
            model: Arc::new(Summarizer::new(cfg, self.model.backbone().clone())?),
        })
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub strategy: Strategy,
    pub participants: Vec<usize>,
    pub bytes_up: Vec<usize>,
    pub bytes_down: Vec<usize>,
    pub train_loss: Vec<f64>,
    pub aggregate_checksum: String,
    pub valid_ce: Option<Vec<f64>>,
    /// Share of this round's token-learning events that were distilled.
    pub kd_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub name: String,
    pub domain: Option<Domain>,
    pub train_size: usize,
    pub best_round: usize,
    pub best_valid_ce: f64,
    pub test_ce: f64,
    pub rouge: RougeScore,
}

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub preset: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub rounds: usize,
    pub config_hash: String,
    pub payload_values: usize,
    pub bytes_per_participant: usize,
    pub clients: Vec<ClientReport>,
    /// Over every persisted token-learning event; absent when none exist.
    pub kd: Option<KdClassReport>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from `state.ckpt` in the output directory.
    pub resume: bool,
    /// Reuse an already built backbone instead of building one.
    pub foundation: Option<Foundation>,
}

fn artifact_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Artifact {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| artifact_err(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| artifact_err(path, e))?;
    BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(|e| artifact_err(path, e))?;
            serde_json::from_str(&l).map_err(|e| artifact_err(path, e))
        })
        .collect()
}

fn state_checkpoint(hash: ConfigHash, fed: &Federation<f64>) -> Checkpoint {
    let mut ck = Checkpoint::new(hash);
    ck.insert_params("server/", &fed.server);
    for (i, (c, b)) in fed.clients.iter().zip(&fed.best).enumerate() {
        ck.insert_params(&format!("client.{i}/"), &c.local);
        ck.insert_params(&format!("best.{i}/"), &b.params);
        ck.tensors
            .insert(format!("meta/best.{i}.round"), scalar(b.round as f32));
        ck.tensors
            .insert(format!("meta/best.{i}.valid_ce"), scalar(b.valid_ce as f32));
    }
    ck.tensors
        .insert("meta/rounds_done".into(), scalar(fed.rounds_done as f32));
    ck
}

fn scalar(v: f32) -> crate::tensor::Tensor<f32> {
    crate::tensor::Tensor::vector(vec![v]).expect("one element")
}

fn restore_state(
    ck: &Checkpoint,
    model: &Summarizer<f64>,
    data: &[ClientData],
    seed: u64,
) -> Result<Federation<f64>> {
    let mut locals = Vec::new();
    let mut best = Vec::new();
    for i in 0..data.len() {
        locals.push(ck.params::<f64>(&format!("client.{i}/")));
        best.push(BestCheckpoint {
            round: ck.scalar(&format!("meta/best.{i}.round"))? as usize,
            valid_ce: ck.scalar(&format!("meta/best.{i}.valid_ce"))? as f64,
            params: ck.params(&format!("best.{i}/")),
        });
    }
    let rounds_done = ck.scalar("meta/rounds_done")? as usize;
    Federation::restore(
        model,
        data,
        seed,
        ck.params("server/"),
        locals,
        best,
        rounds_done,
    )
}

/// Executes a run and writes all artifacts into `cfg.output_dir`.
pub fn run(cfg: &RunConfig, opts: RunOptions) -> Result<RunReport> {
    let cfg = cfg.resolve()?;
    let out = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&out).map_err(|e| artifact_err(&out, e))?;
    let hash = cfg.hash();
    let state_path = out.join("state.ckpt");

    let saved = if opts.resume {
        let ck = Checkpoint::load(&state_path)?;
        if ck.config_hash != hash {
            return Err(Error::Checkpoint(format!(
                "{} was written by a different configuration; refusing to resume",
                state_path.display()
            )));
        }
        Some(ck)
    } else {
        None
    };

    let foundation = match opts.foundation {
        Some(f) => f,
        None => Foundation::build(&cfg)?,
    };
    let model = foundation.model.as_ref();
    if model.config() != &cfg.model_config() {
        return Err(Error::config(
            "model",
            "supplied backbone does not match the configured model",
        ));
    }
    let data = make_setting(
        cfg.preset()?,
        &cfg.corpus_config(),
        &foundation.vocab,
        cfg.seed,
    )?;
    let fed_cfg = cfg.federation_config();

    let mut fed = match &saved {
        Some(ck) => restore_state(ck, model, &data, cfg.seed)?,
        None => Federation::new(model, &data, cfg.seed)?,
    };
    write_json(&out.join("config.resolved.json"), &cfg)?;

    let open = |name: &str| -> Result<BufWriter<File>> {
        let path = out.join(name);
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(opts.resume)
            .truncate(!opts.resume)
            .open(&path)
            .map_err(|e| artifact_err(&path, e))?;
        Ok(BufWriter::new(f))
    };
    let mut metrics = open("metrics.jsonl")?;
    let traces_path = out.join("traces.jsonl");
    let mut traces_out = if cfg.persist_traces {
        Some(open("traces.jsonl")?)
    } else {
        if !opts.resume && traces_path.exists() {
            fs::remove_file(&traces_path).map_err(|e| artifact_err(&traces_path, e))?;
        }
        None
    };
    let mut all_traces: Vec<TokenTrace> =
        if opts.resume && cfg.persist_traces && traces_path.exists() {
            read_jsonl(&traces_path)?
        } else {
            Vec::new()
        };

    while fed.rounds_done < cfg.rounds {
        let round = fed.rounds_done + 1;
        let validate = round % cfg.eval_every == 0 || round == cfg.rounds;
        let (m, traces) = fed.step(model, &fed_cfg, validate)?;
        let kd_fraction = kd_usage_stats(&traces).map(|u| u.overall).unwrap_or(0.0);
        let row = MetricsRow {
            round,
            strategy: cfg.strategy,
            participants: m.record.participants,
            bytes_up: m.record.bytes_up,
            bytes_down: m.record.bytes_down,
            train_loss: m.record.train_loss,
            aggregate_checksum: m.record.checksum,
            valid_ce: m.valid_ce,
            kd_fraction,
        };
        serde_json::to_writer(&mut metrics, &row)?;
        metrics.write_all(b"\n")?;
        metrics.flush()?;
        if let Some(w) = traces_out.as_mut() {
            for t in &traces {
                serde_json::to_writer(&mut *w, t)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        all_traces.extend(traces);
        state_checkpoint(hash, &fed).save(&state_path)?;
    }
    if fed.rounds_done == 0 {
        state_checkpoint(hash, &fed).save(&state_path)?;
    }

    let tests = fed.test(model)?;
    let mut clients = Vec::new();
    for ((c, b), t) in fed.clients.iter().zip(&fed.best).zip(&tests) {
        let mut ck = Checkpoint::new(hash);
        ck.insert_params("", &b.params);
        ck.save(&out.join(format!("best_{}.ckpt", c.name)))?;
        clients.push(ClientReport {
            name: c.name.clone(),
            domain: c.domain,
            train_size: c.train_size(),
            best_round: b.round,
            best_valid_ce: b.valid_ce,
            test_ce: t.ce,
            rouge: t.rouge,
        });
    }
    let payload = model.config().payload_size();
    let report = RunReport {
        preset: cfg.preset.clone(),
        strategy: cfg.strategy,
        seed: cfg.seed,
        rounds: fed.rounds_done,
        config_hash: hex(&hash),
        payload_values: payload,
        bytes_per_participant: payload * WIRE_BYTES,
        clients,
        kd: kd_class_report(&all_traces).ok(),
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

pub fn read_report(dir: &Path) -> Result<RunReport> {
    let path = dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| artifact_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| artifact_err(&path, e))
}

pub fn read_resolved_config(dir: &Path) -> Result<RunConfig> {
    let path = dir.join("config.resolved.json");
    RunConfig::load(&path)
}

pub fn read_metrics(dir: &Path) -> Result<Vec<MetricsRow>> {
    read_jsonl(&dir.join("metrics.jsonl"))
}

/// Loads a `best_<client>.ckpt` (or any adapter checkpoint).
pub fn load_adapters(path: &Path) -> Result<ParamSet<f64>> {
    Ok(Checkpoint::load(path)?.params(""))
}

/// Streams the run's token traces to `sink`; returns the record count.
pub fn export_traces(dir: &Path, sink: &mut dyn Write) -> Result<usize> {
    let path = dir.join("traces.jsonl");
    if !path.exists() {
        let cfg = read_resolved_config(dir)?;
        if !cfg.persist_traces {
            return Err(Error::config(
                "persist_traces",
                format!("run {} was executed with traces disabled", dir.display()),
            ));
        }
        return Err(artifact_err(&path, "trace file missing"));
    }
    let traces: Vec<TokenTrace> = read_jsonl(&path)?;
    for t in &traces {
        serde_json::to_writer(&mut *sink, t)?;
        sink.write_all(b"\n")?;
    }
    Ok(traces.len())
}

/// One record of a dataset dump.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataRecord {
    pub domain: Domain,
    pub query: Vec<usize>,
    pub transcript: Vec<usize>,
    pub summary: Vec<usize>,
    pub classes: Vec<crate::corpus::TokenClass>,
}

/// Writes `<client>.<split>.jsonl` for every client of the configured
/// preset; returns the written paths.
pub fn make_data(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let cfg = cfg.resolve()?;
    let vocab = Vocab::build(cfg.vocab_size, cfg.content_fraction, cfg.backbone_seed)?;
    let data = make_setting(cfg.preset()?, &cfg.corpus_config(), &vocab, cfg.seed)?;
    fs::create_dir_all(dir).map_err(|e| artifact_err(dir, e))?;
    let mut paths = Vec::new();
    for client in &data {
        for (split, set) in [
            ("train", &client.train),
            ("valid", &client.valid),
            ("test", &client.test),
        ] {
            let path = dir.join(format!("{}.{split}.jsonl", client.name));
            let mut w = BufWriter::new(File::create(&path).map_err(|e| artifact_err(&path, e))?);
            for inst in set {
                let rec = DataRecord {
                    domain: inst.domain,
                    query: inst.query.clone(),
                    transcript: inst.transcript.clone(),
                    summary: inst.summary.clone(),
                    classes: inst.classes.clone(),
                };
                serde_json::to_writer(&mut w, &rec)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Spread {
    pub fn of(xs: &[f64]) -> Spread {
        let n = xs.len();
        if n == 0 {
            return Spread::default();
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Spread {
            mean,
            std: var.sqrt(),
            n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRow {
    pub client: String,
    pub test_ce: f64,
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    /// Differences to the same client of the first run.
    pub delta_ce: f64,
    pub delta_r1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub dir: String,
    pub preset: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub kd_overall: Option<f64>,
    pub clients: Vec<ClientRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub strategy: Strategy,
    pub preset: String,
    pub runs: Vec<String>,
    /// Per client: (name, test CE spread, R-1 F1 spread).
    pub clients: Vec<(String, Spread, Spread)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub runs: Vec<RunRow>,
    /// Runs sharing their configuration modulo the seed.
    pub groups: Vec<GroupRow>,
    pub warnings: Vec<String>,
}

pub fn compare(dirs: &[PathBuf]) -> Result<Comparison> {
    if dirs.len() < 2 {
        return Err(Error::config(
            "runs",
            "compare needs at least two run directories",
        ));
    }
    let mut reports = Vec::new();
    for d in dirs {
        reports.push((
            d.display().to_string(),
            read_report(d)?,
            read_resolved_config(d)?,
        ));
    }
    let mut warnings = Vec::new();
    let first = &reports[0].1;
    if reports.iter().any(|(_, r, _)| r.preset != first.preset) {
        warnings.push("runs use different presets; deltas compare unrelated clients".into());
    }
    let runs = reports
        .iter()
        .map(|(dir, r, _)| RunRow {
            dir: dir.clone(),
            preset: r.preset.clone(),
            strategy: r.strategy,
            seed: r.seed,
            kd_overall: r.kd.as_ref().map(|k| k.usage.overall),
            clients: r
                .clients
                .iter()
                .map(|c| {
                    let base = first.clients.iter().find(|b| b.name == c.name);
                    ClientRow {
                        client: c.name.clone(),
                        test_ce: c.test_ce,
                        r1: c.rouge.r1.f,
                        r2: c.rouge.r2.f,
                        rl: c.rouge.rl.f,
                        delta_ce: base.map_or(f64::NAN, |b| c.test_ce - b.test_ce),
                        delta_r1: base.map_or(f64::NAN, |b| c.rouge.r1.f - b.rouge.r1.f),
                    }
                })
                .collect(),
        })
        .collect();

    let mut grouped: BTreeMap<ConfigHash, Vec<usize>> = BTreeMap::new();
    for (i, (_, _, cfg)) in reports.iter().enumerate() {
        grouped.entry(cfg.hash_modulo_seed()).or_default().push(i);
    }
    let mut groups = Vec::new();
    for idx in grouped.values().filter(|v| v.len() > 1) {
        let head = &reports[idx[0]].1;
        let clients = head
            .clients
            .iter()
            .map(|c| {
                let pick = |f: fn(&ClientReport) -> f64| -> Vec<f64> {
                    idx.iter()
                        .filter_map(|&i| {
                            reports[i]
                                .1
                                .clients
                                .iter()
                                .find(|x| x.name == c.name)
                                .map(f)
                        })
                        .collect()
                };
                (
                    c.name.clone(),
                    Spread::of(&pick(|x| x.test_ce)),
                    Spread::of(&pick(|x| x.rouge.r1.f)),
                )
            })
            .collect();
        groups.push(GroupRow {
            strategy: head.strategy,
            preset: head.preset.clone(),
            runs: idx.iter().map(|&i| reports[i].0.clone()).collect(),
            clients,
        });
    }
    Ok(Comparison {
        runs,
        groups,
        warnings,
    })
}

impl Comparison {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        s.push_str(&format!(
            "{:<28} {:<12} {:>6} {:<10} {:>8} {:>7} {:>7} {:>7} {:>8} {:>8} {:>6}\n",
            "run", "strategy", "seed", "client", "test_ce", "r1", "r2", "rl", "d_ce", "d_r1", "kd"
        ));
        for r in &self.runs {
            for c in &r.clients {
                s.push_str(&format!(
                    "{:<28} {:<12} {:>6} {:<10} {:>8.4} {:>7.4} {:>7.4} {:>7.4} {:>+8.4} {:>+8.4} {:>6}\n",
                    truncate(&r.dir, 28),
                    r.strategy.name(),
                    r.seed,
                    c.client,
                    c.test_ce,
                    c.r1,
                    c.r2,
                    c.rl,
                    c.delta_ce,
                    c.delta_r1,
                    r.kd_overall.map_or("-".to_string(), |k| format!("{k:.3}")),
                ));
            }
        }
        for g in &self.groups {
            s.push_str(&format!(
                "\n{} on {} over {} seeds:\n",
                g.strategy.name(),
                g.preset,
                g.runs.len()
            ));
            for (name, ce, r1) in &g.clients {
                s.push_str(&format!(
                    "  {:<10} test_ce {:.4} ± {:.4}   r1 {:.4} ± {:.4}\n",
                    name, ce.mean, ce.std, r1.mean, r1.std
                ));
            }
        }
        s
    }
}

fn truncate(s: &str, n: usize) -> String {
    if s.chars().count() <= n {
        s.to_string()
    } else {
        let tail: String = s
            .chars()
            .rev()
            .take(n - 1)
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect();
        format!("…{tail}")
    }
}
