//! Tiny post-LN transformer encoder-decoder with bottleneck adapters.
//!
//! The backbone is frozen after pretraining. Adapters sit after selected
//! decoder layers and come in two parallel copies: the global adapter
//! (server parameters, teacher, never optimized) and the local adapter
//! (the client's trainable student). Both paths share every decoder layer
//! up to and including the lowest adapted one; above it each path runs its
//! own copy of the remaining layers.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Instance, TokenClass, BOS, EOS};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet};
use crate::rng::{stream, StreamRng};
use crate::scalar::Scalar;
use crate::tensor::{AdamW, AdamWConfig, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub bottleneck_dim: usize,
    pub ffn_dim: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub n_heads: usize,
    /// 1-based decoder layer indices followed by an adapter.
    pub adapter_layers: Vec<usize>,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 96,
            model_dim: 64,
            bottleneck_dim: 16,
            ffn_dim: 128,
            n_encoder_layers: 2,
            n_decoder_layers: 4,
            n_heads: 4,
            adapter_layers: vec![2, 3, 4],
            max_src_len: 48,
            max_tgt_len: 16,
        }
    }
}

impl ModelConfig {
    /// The top `count` decoder layers.
    pub fn top_layers(n_decoder_layers: usize, count: usize) -> Vec<usize> {
        (n_decoder_layers + 1 - count.min(n_decoder_layers)..=n_decoder_layers).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, m: String| Err(Error::config(format!("model.{f}"), m));
        if self.bottleneck_dim == 0 || self.bottleneck_dim >= self.model_dim {
            return err(
                "bottleneck_dim",
                format!(
                    "must satisfy 0 < m < n = {}, got {}",
                    self.model_dim, self.bottleneck_dim
                ),
            );
        }
        if self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return err(
                "n_heads",
                format!(
                    "{} does not divide model_dim {}",
                    self.n_heads, self.model_dim
                ),
            );
        }
        if self.n_decoder_layers == 0 || self.n_encoder_layers == 0 {
            return err(
                "n_decoder_layers",
                "encoder and decoder need at least one layer".into(),
            );
        }
        if self.vocab_size < 16 {
            return err(
                "vocab_size",
                format!("must be at least 16, got {}", self.vocab_size),
            );
        }
        if self.max_src_len == 0 || self.max_tgt_len < 2 || self.ffn_dim == 0 {
            return err(
                "max_tgt_len",
                "sequence limits and ffn_dim must be positive".into(),
            );
        }
        let mut prev = 0;
        for &l in &self.adapter_layers {
            if l == 0 || l > self.n_decoder_layers {
                return err(
                    "adapter_layers",
                    format!("layer {l} outside 1..={}", self.n_decoder_layers),
                );
            }
            if l <= prev {
                return err("adapter_layers", "must be strictly increasing".into());
            }
            prev = l;
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    /// Scalars in one exchanged adapter set: `|layers|·(2nm + 2n)`.
    pub fn payload_size(&self) -> usize {
        let (n, m) = (self.model_dim, self.bottleneck_dim);
        self.adapter_layers.len() * (2 * n * m + 2 * n)
    }

    /// 0-based index of the last decoder layer shared by both adapter paths.
    fn shared_through(&self) -> usize {
        self.adapter_layers
            .first()
            .map_or(self.n_decoder_layers - 1, |&l| l - 1)
    }
}

pub fn adapter_name(layer: usize, part: &str) -> String {
    format!("adapter.{layer}.{part}")
}

pub const ADAPTER_PARTS: [&str; 4] = ["w_down", "w_up", "ln_gain", "ln_bias"];

/// Fresh adapters: projections uniform in `±1/√n`, unit gain, zero bias.
pub fn init_adapters<S: Scalar>(config: &ModelConfig, rng: &mut StreamRng) -> ParamSet<S> {
    let (n, m) = (config.model_dim, config.bottleneck_dim);
    let bound = 1.0 / (n as f64).sqrt();
    let mut set = ParamSet::new();
    for &l in &config.adapter_layers {
        set.insert(adapter_name(l, "w_down"), uniform(&[n, m], bound, rng));
        set.insert(adapter_name(l, "w_up"), uniform(&[m, n], bound, rng));
        set.insert(adapter_name(l, "ln_gain"), Tensor::filled(&[n], S::one()));
        set.insert(adapter_name(l, "ln_bias"), Tensor::zeros(&[n]));
    }
    set
}

fn uniform<S: Scalar>(shape: &[usize], bound: f64, rng: &mut StreamRng) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| S::lit(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Graph handles of one layer's adapter.
#[derive(Clone, Copy, Debug)]
pub struct BoundAdapter {
    pub w_down: Var,
    pub w_up: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

/// Adapters keyed by 1-based decoder layer.
#[derive(Clone, Debug)]
pub struct BoundAdapters {
    layers: BTreeMap<usize, BoundAdapter>,
    params: BoundParams,
}

impl BoundAdapters {
    pub fn params(&self) -> &BoundParams {
        &self.params
    }
}

/// Binds an adapter [`ParamSet`]; every configured layer must be present.
pub fn bind_adapters<S: Scalar>(
    config: &ModelConfig,
    graph: &mut Graph<S>,
    set: &ParamSet<S>,
    trainable: bool,
) -> Result<BoundAdapters> {
    for &l in &config.adapter_layers {
        if ADAPTER_PARTS
            .iter()
            .any(|p| set.get(&adapter_name(l, p)).is_none())
        {
            return Err(Error::MissingAdapterLayer(l));
        }
    }
    let params = set.bind(graph, trainable);
    let layers = config
        .adapter_layers
        .iter()
        .map(|&l| {
            let v = |p: &str| params.var(&adapter_name(l, p)).expect("checked above");
            (
                l,
                BoundAdapter {
                    w_down: v("w_down"),
                    w_up: v("w_up"),
                    ln_gain: v("ln_gain"),
                    ln_bias: v("ln_bias"),
                },
            )
        })
        .collect();
    Ok(BoundAdapters { layers, params })
}

/// `LayerNorm(y + ReLU(y·W_down)·W_up)`
pub fn adapter_forward<S: Scalar>(graph: &mut Graph<S>, y: Var, w: &BoundAdapter) -> Result<Var> {
    let down = graph.matmul(y, w.w_down)?;
    let act = graph.relu(down);
    let up = graph.matmul(act, w.w_up)?;
    let residual = graph.add(y, up)?;
    graph.layer_norm(residual, w.ln_gain, w.ln_bias)
}

/// Frozen backbone weights, shared read-only between clients.
#[derive(Clone, Debug)]
pub struct BackboneWeights<S> {
    tensors: BTreeMap<String, Arc<Tensor<S>>>,
}

impl<S: Scalar> BackboneWeights<S> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, "backbone-init", &[]);
        let (n, f, v) = (config.model_dim, config.ffn_dim, config.vocab_size);
        let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let mut t: BTreeMap<String, Tensor<S>> = BTreeMap::new();
        t.insert("emb.word".into(), uniform(&[v, n], 1.0, &mut rng));
        t.insert(
            "emb.enc_pos".into(),
            uniform(&[config.max_src_len, n], 0.5, &mut rng),
        );
        t.insert(
            "emb.dec_pos".into(),
            uniform(&[config.max_tgt_len, n], 0.5, &mut rng),
        );
        let attention = |t: &mut BTreeMap<String, Tensor<S>>, prefix: &str, rng: &mut StreamRng| {
            for p in ["q", "k", "v", "o"] {
                t.insert(format!("{prefix}.{p}"), uniform(&[n, n], lin(n), rng));
            }
        };
        let norm = |t: &mut BTreeMap<String, Tensor<S>>, prefix: &str| {
            t.insert(format!("{prefix}.gain"), Tensor::filled(&[n], S::one()));
            t.insert(format!("{prefix}.bias"), Tensor::zeros(&[n]));
        };
        let ffn = |t: &mut BTreeMap<String, Tensor<S>>, prefix: &str, rng: &mut StreamRng| {
            t.insert(format!("{prefix}.w1"), uniform(&[n, f], lin(n), rng));
            t.insert(format!("{prefix}.b1"), Tensor::zeros(&[f]));
            t.insert(format!("{prefix}.w2"), uniform(&[f, n], lin(f), rng));
            t.insert(format!("{prefix}.b2"), Tensor::zeros(&[n]));
        };
        for i in 0..config.n_encoder_layers {
            attention(&mut t, &format!("enc.{i}.attn"), &mut rng);
            norm(&mut t, &format!("enc.{i}.ln1"));
            ffn(&mut t, &format!("enc.{i}.ffn"), &mut rng);
            norm(&mut t, &format!("enc.{i}.ln2"));
        }
        for i in 0..config.n_decoder_layers {
            attention(&mut t, &format!("dec.{i}.self"), &mut rng);
            norm(&mut t, &format!("dec.{i}.ln1"));
            attention(&mut t, &format!("dec.{i}.cross"), &mut rng);
            norm(&mut t, &format!("dec.{i}.ln2"));
            ffn(&mut t, &format!("dec.{i}.ffn"), &mut rng);
            norm(&mut t, &format!("dec.{i}.ln3"));
        }
        t.insert("head.w".into(), uniform(&[n, v], lin(n), &mut rng));
        t.insert("head.b".into(), Tensor::zeros(&[v]));
        Ok(Self::from_params(t.into_iter().collect()))
    }

    pub fn from_params(params: ParamSet<S>) -> Self {
        BackboneWeights {
            tensors: params
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.clone())))
                .collect(),
        }
    }

    pub fn to_params(&self) -> ParamSet<S> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), (**v).clone()))
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    fn get(&self, name: &str) -> Arc<Tensor<S>> {
        Arc::clone(
            self.tensors
                .get(name)
                .unwrap_or_else(|| panic!("backbone tensor `{name}` missing")),
        )
    }

    /// Binds all weights into `graph`; as constants once frozen.
    pub fn bind(
        &self,
        config: &ModelConfig,
        graph: &mut Graph<S>,
        trainable: bool,
    ) -> BoundBackbone {
        let mut vars = BTreeMap::new();
        let mut leaf = |name: String, graph: &mut Graph<S>| -> Var {
            let t = self.get(&name);
            let v = if trainable {
                graph.param(t)
            } else {
                graph.constant(t)
            };
            vars.insert(name, v);
            v
        };
        let attn =
            |p: String, g: &mut Graph<S>, leaf: &mut dyn FnMut(String, &mut Graph<S>) -> Var| {
                BoundAttention {
                    q: leaf(format!("{p}.q"), g),
                    k: leaf(format!("{p}.k"), g),
                    v: leaf(format!("{p}.v"), g),
                    o: leaf(format!("{p}.o"), g),
                }
            };
        let norm =
            |p: String, g: &mut Graph<S>, leaf: &mut dyn FnMut(String, &mut Graph<S>) -> Var| {
                BoundNorm {
                    gain: leaf(format!("{p}.gain"), g),
                    bias: leaf(format!("{p}.bias"), g),
                }
            };
        let ffn = |p: String,
                   g: &mut Graph<S>,
                   leaf: &mut dyn FnMut(String, &mut Graph<S>) -> Var| BoundFfn {
            w1: leaf(format!("{p}.w1"), g),
            b1: leaf(format!("{p}.b1"), g),
            w2: leaf(format!("{p}.w2"), g),
            b2: leaf(format!("{p}.b2"), g),
        };
        let word = leaf("emb.word".into(), graph);
        let enc_pos = leaf("emb.enc_pos".into(), graph);
        let dec_pos = leaf("emb.dec_pos".into(), graph);
        let encoder = (0..config.n_encoder_layers)
            .map(|i| EncoderLayer {
                attn: attn(format!("enc.{i}.attn"), graph, &mut leaf),
                ln1: norm(format!("enc.{i}.ln1"), graph, &mut leaf),
                ffn: ffn(format!("enc.{i}.ffn"), graph, &mut leaf),
                ln2: norm(format!("enc.{i}.ln2"), graph, &mut leaf),
            })
            .collect();
        let decoder = (0..config.n_decoder_layers)
            .map(|i| DecoderLayer {
                self_attn: attn(format!("dec.{i}.self"), graph, &mut leaf),
                ln1: norm(format!("dec.{i}.ln1"), graph, &mut leaf),
                cross: attn(format!("dec.{i}.cross"), graph, &mut leaf),
                ln2: norm(format!("dec.{i}.ln2"), graph, &mut leaf),
                ffn: ffn(format!("dec.{i}.ffn"), graph, &mut leaf),
                ln3: norm(format!("dec.{i}.ln3"), graph, &mut leaf),
            })
            .collect();
        let head = leaf("head.w".into(), graph);
        let head_bias = leaf("head.b".into(), graph);
        BoundBackbone {
            word,
            enc_pos,
            dec_pos,
            encoder,
            decoder,
            head,
            head_bias,
            vars,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct BoundAttention {
    q: Var,
    k: Var,
    v: Var,
    o: Var,
}

#[derive(Clone, Copy, Debug)]
struct BoundNorm {
    gain: Var,
    bias: Var,
}

#[derive(Clone, Copy, Debug)]
struct BoundFfn {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: BoundAttention,
    ln1: BoundNorm,
    ffn: BoundFfn,
    ln2: BoundNorm,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: BoundAttention,
    ln1: BoundNorm,
    cross: BoundAttention,
    ln2: BoundNorm,
    ffn: BoundFfn,
    ln3: BoundNorm,
}

/// Backbone weights bound into one graph.
#[derive(Clone, Debug)]
pub struct BoundBackbone {
    word: Var,
    enc_pos: Var,
    dec_pos: Var,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    head: Var,
    head_bias: Var,
    vars: BTreeMap<String, Var>,
}

impl BoundBackbone {
    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }
}

/// Encoder output plus whether the source had to be truncated.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub states: Var,
    pub truncated: bool,
}

/// Cross-attention keys and values of each decoder layer.
#[derive(Clone, Debug)]
pub struct Memory {
    pub layers: Vec<Option<(Var, Var)>>,
}

/// Per-position output distributions of the two adapter paths.
#[derive(Clone, Copy, Debug)]
pub struct DualOutput {
    /// Teacher distribution, detached.
    pub q_g: Var,
    /// Student distribution, differentiable w.r.t. the local adapters.
    pub q_l: Var,
}

type KeyValue<S> = (Arc<Tensor<S>>, Arc<Tensor<S>>);

/// Frozen-backbone activations of one instance. They never change during
/// federated training, so they are computed once per client.
#[derive(Clone, Debug)]
pub struct PreparedInstance<S> {
    pub source_len: usize,
    pub decoder_input: Vec<usize>,
    pub target: Vec<usize>,
    pub target_classes: Vec<TokenClass>,
    pub reference: Vec<usize>,
    pub truncated: bool,
    encoder_states: Arc<Tensor<S>>,
    /// Cross-attention keys and values per decoder layer.
    memory: Vec<Option<KeyValue<S>>>,
    trunk: Arc<Tensor<S>>,
}

impl<S: Scalar> PreparedInstance<S> {
    pub fn target_len(&self) -> usize {
        self.target.len()
    }
}

/// The summarizer: configuration plus a shared frozen backbone.
#[derive(Clone, Debug)]
pub struct Summarizer<S> {
    config: ModelConfig,
    backbone: Arc<BackboneWeights<S>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Linear learning-rate warmup length.
    pub warmup: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1500,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.0,
            warmup: 200,
            clip_norm: 1.0,
        }
    }
}

impl<S: Scalar> Summarizer<S> {
    pub fn new(config: ModelConfig, backbone: BackboneWeights<S>) -> Result<Self> {
        config.validate()?;
        Ok(Summarizer {
            config,
            backbone: Arc::new(backbone),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &BackboneWeights<S> {
        &self.backbone
    }

    /// Trains the whole backbone with plain cross-entropy on a pooled
    /// corpus, then freezes it. `steps = 0` yields the random init.
    pub fn pretrain(
        config: ModelConfig,
        corpus: &[Instance],
        opts: &PretrainConfig,
        seed: u64,
    ) -> Result<Self> {
        Self::pretrain_observed(config, corpus, opts, seed, |_, _| {})
    }

    /// [`Self::pretrain`], reporting `(step, batch loss)` after every update.
    pub fn pretrain_observed(
        config: ModelConfig,
        corpus: &[Instance],
        opts: &PretrainConfig,
        seed: u64,
        mut observe: impl FnMut(usize, f64),
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("pretraining corpus"));
        }
        let mut params = BackboneWeights::<S>::init(&config, seed)?.to_params();
        let mut opt = AdamW::new(AdamWConfig {
            lr: opts.lr,
            weight_decay: opts.weight_decay,
            ..Default::default()
        });
        let mut rng = stream(seed, "pretrain-batches", &[]);
        for step in 0..opts.steps {
            let backbone = BackboneWeights::from_params(params.clone());
            let model = Summarizer {
                config: config.clone(),
                backbone: Arc::new(backbone),
            };
            let mut g = Graph::new();
            let bb = model.backbone.bind(&config, &mut g, true);
            let mut terms = Vec::with_capacity(opts.batch_size);
            let mut total_tokens = 0;
            for _ in 0..opts.batch_size.max(1) {
                let inst = &corpus[rng.gen_range(0..corpus.len())];
                let (ce, n) = model.teacher_forced_ce_rows(&mut g, &bb, inst)?;
                total_tokens += n;
                terms.push(ce);
            }
            let loss = sum_mean(&mut g, &terms, total_tokens)?;
            observe(step, g.value(loss).item().as_f64());
            g.backward(loss)?;
            let mut grads = BTreeMap::new();
            for (name, &v) in bb.vars() {
                let grad = g
                    .take_grad(v)
                    .ok_or_else(|| Error::MissingGrad(name.clone()))?;
                grads.insert(name.clone(), grad);
            }
            if opts.clip_norm > 0.0 {
                clip_global_norm(&mut grads, opts.clip_norm);
            }
            opt.set_lr(opts.lr * ((step + 1) as f64 / opts.warmup.max(1) as f64).min(1.0));
            opt.step(&mut params, &mut grads)?;
        }
        // Released weights are 32-bit, which also makes caching them lossless.
        let params = params.cast::<f32>().cast::<S>();
        Ok(Summarizer {
            config,
            backbone: Arc::new(BackboneWeights::from_params(params)),
        })
    }

    fn teacher_forced_ce_rows(
        &self,
        g: &mut Graph<S>,
        bb: &BoundBackbone,
        inst: &Instance,
    ) -> Result<(Var, usize)> {
        let enc = self.encode(g, bb, &inst.source())?;
        let memory = self.memory(g, bb, enc.states, 0)?;
        let (input, target) = self.clip_target(inst.decoder_input(), inst.target());
        let x = self.decoder_embed(g, bb, &input)?;
        let y = self.run_layers(g, bb, x, &memory, 0, None)?;
        let q = self.head(g, bb, y)?;
        let ce = g.cross_entropy_rows(q, &target)?;
        Ok((ce, target.len()))
    }

    fn clip_target(
        &self,
        mut input: Vec<usize>,
        mut target: Vec<usize>,
    ) -> (Vec<usize>, Vec<usize>) {
        input.truncate(self.config.max_tgt_len);
        target.truncate(self.config.max_tgt_len);
        (input, target)
    }

    pub fn bind_backbone(&self, g: &mut Graph<S>) -> BoundBackbone {
        self.backbone.bind(&self.config, g, false)
    }

    /// Encoder stack over `src_ids` (truncated to `max_src_len`).
    pub fn encode(
        &self,
        g: &mut Graph<S>,
        bb: &BoundBackbone,
        src_ids: &[usize],
    ) -> Result<Encoded> {
        if src_ids.is_empty() {
            return Err(Error::Empty("source sequence"));
        }
        let truncated = src_ids.len() > self.config.max_src_len;
        let ids = &src_ids[..src_ids.len().min(self.config.max_src_len)];
        let positions: Vec<usize> = (0..ids.len()).collect();
        let words = g.embedding(bb.word, ids)?;
        let pos = g.embedding(bb.enc_pos, &positions)?;
        let mut x = g.add(words, pos)?;
        for layer in &bb.encoder {
            let attended = self.attention(g, &layer.attn, x, None, false)?;
            let res = g.add(x, attended)?;
            let h = g.layer_norm(res, layer.ln1.gain, layer.ln1.bias)?;
            let f = self.ffn(g, &layer.ffn, h)?;
            let res = g.add(h, f)?;
            x = g.layer_norm(res, layer.ln2.gain, layer.ln2.bias)?;
        }
        Ok(Encoded {
            states: x,
            truncated,
        })
    }

    /// Cross-attention keys/values for decoder layers `from..`.
    pub fn memory(
        &self,
        g: &mut Graph<S>,
        bb: &BoundBackbone,
        enc: Var,
        from: usize,
    ) -> Result<Memory> {
        let layers = bb
            .decoder
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                if i < from {
                    return Ok(None);
                }
                let k = g.matmul(enc, layer.cross.k)?;
                let v = g.matmul(enc, layer.cross.v)?;
                Ok(Some((k, v)))
            })
            .collect::<Result<_>>()?;
        Ok(Memory { layers })
    }

    fn attention(
        &self,
        g: &mut Graph<S>,
        w: &BoundAttention,
        x: Var,
        memory: Option<(Var, Var)>,
        causal: bool,
    ) -> Result<Var> {
        let q = g.matmul(x, w.q)?;
        let (k, v) = match memory {
            Some(kv) => kv,
            None => (g.matmul(x, w.k)?, g.matmul(x, w.v)?),
        };
        let dh = self.config.head_dim();
        let scale = S::one() / S::from_count(dh).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let p = if causal {
                g.causal_softmax(scores)
            } else {
                g.softmax(scores)
            };
            heads.push(g.matmul(p, vh)?);
        }
        let joined = g.concat_cols(&heads)?;
        g.matmul(joined, w.o)
    }

    fn ffn(&self, g: &mut Graph<S>, w: &BoundFfn, x: Var) -> Result<Var> {
        let h = g.matmul(x, w.w1)?;
        let h = g.add_row(h, w.b1)?;
        let h = g.relu(h);
        let o = g.matmul(h, w.w2)?;
        g.add_row(o, w.b2)
    }

    fn decoder_embed(&self, g: &mut Graph<S>, bb: &BoundBackbone, ids: &[usize]) -> Result<Var> {
        if ids.len() > self.config.max_tgt_len {
            return Err(Error::Index {
                what: "decoder position",
                index: ids.len(),
                bound: self.config.max_tgt_len,
            });
        }
        let positions: Vec<usize> = (0..ids.len()).collect();
        let words = g.embedding(bb.word, ids)?;
        let pos = g.embedding(bb.dec_pos, &positions)?;
        g.add(words, pos)
    }

    fn decoder_layer(
        &self,
        g: &mut Graph<S>,
        layer: &DecoderLayer,
        x: Var,
        kv: (Var, Var),
    ) -> Result<Var> {
        let a = self.attention(g, &layer.self_attn, x, None, true)?;
        let res = g.add(x, a)?;
        let h = g.layer_norm(res, layer.ln1.gain, layer.ln1.bias)?;
        let c = self.attention(g, &layer.cross, h, Some(kv), false)?;
        let res = g.add(h, c)?;
        let h = g.layer_norm(res, layer.ln2.gain, layer.ln2.bias)?;
        let f = self.ffn(g, &layer.ffn, h)?;
        let res = g.add(h, f)?;
        g.layer_norm(res, layer.ln3.gain, layer.ln3.bias)
    }

    /// Decoder layers `from..`, applying `adapters` after configured layers.
    fn run_layers(
        &self,
        g: &mut Graph<S>,
        bb: &BoundBackbone,
        mut x: Var,
        memory: &Memory,
        from: usize,
        adapters: Option<&BoundAdapters>,
    ) -> Result<Var> {
        for i in from..self.config.n_decoder_layers {
            let kv = memory.layers[i].ok_or(Error::Index {
                what: "decoder memory layer",
                index: i,
                bound: from,
            })?;
            x = self.decoder_layer(g, &bb.decoder[i], x, kv)?;
            if let Some(adapters) = adapters {
                if let Some(w) = adapters.layers.get(&(i + 1)) {
                    x = adapter_forward(g, x, w)?;
                }
            }
        }
        Ok(x)
    }

    fn head(&self, g: &mut Graph<S>, bb: &BoundBackbone, y: Var) -> Result<Var> {
        let logits = g.matmul(y, bb.head)?;
        let logits = g.add_row(logits, bb.head_bias)?;
        Ok(g.softmax(logits))
    }

    /// Shared decoder trunk: layers `0..=shared_through()` over the prefix.
    fn trunk(
        &self,
        g: &mut Graph<S>,
        bb: &BoundBackbone,
        prefix: &[usize],
        memory: &Memory,
    ) -> Result<Var> {
        let mut x = self.decoder_embed(g, bb, prefix)?;
        for i in 0..=self.config.shared_through() {
            let kv = memory.layers[i].ok_or(Error::Index {
                what: "decoder memory layer",
                index: i,
                bound: 0,
            })?;
            x = self.decoder_layer(g, &bb.decoder[i], x, kv)?;
        }
        Ok(x)
    }

    /// One adapter path above the trunk, ending in the output distribution.
    fn path(
        &self,
        g: &mut Graph<S>,
        bb: &BoundBackbone,
        trunk: Var,
        memory: &Memory,
        adapters: &BoundAdapters,
    ) -> Result<Var> {
        let s = self.config.shared_through();
        let mut x = trunk;
        if let Some(w) = adapters.layers.get(&(s + 1)) {
            x = adapter_forward(g, x, w)?;
        }
        let y = self.run_layers(g, bb, x, memory, s + 1, Some(adapters))?;
        self.head(g, bb, y)
    }

    /// Teacher-forced twin distributions for `tgt_prefix` (starting with BOS).
    pub fn decode_dual(
        &self,
        g: &mut Graph<S>,
        bb: &BoundBackbone,
        tgt_prefix: &[usize],
        encoded: Var,
        global: &BoundAdapters,
        local: &BoundAdapters,
    ) -> Result<DualOutput> {
        if tgt_prefix.is_empty() {
            return Err(Error::Empty("decoder prefix"));
        }
        let memory = self.memory(g, bb, encoded, 0)?;
        let trunk = self.trunk(g, bb, tgt_prefix, &memory)?;
        self.dual_from_trunk(g, bb, trunk, &memory, global, local)
    }

    fn dual_from_trunk(
        &self,
        g: &mut Graph<S>,
        bb: &BoundBackbone,
        trunk: Var,
        memory: &Memory,
        global: &BoundAdapters,
        local: &BoundAdapters,
    ) -> Result<DualOutput> {
        let teacher = self.path(g, bb, trunk, memory, global)?;
        let q_g = g.detach(teacher);
        let q_l = self.path(g, bb, trunk, memory, local)?;
        Ok(DualOutput { q_g, q_l })
    }

    /// Local path only, teacher-forced.
    pub fn decode_single(
        &self,
        g: &mut Graph<S>,
        bb: &BoundBackbone,
        tgt_prefix: &[usize],
        encoded: Var,
        adapters: &BoundAdapters,
    ) -> Result<Var> {
        let memory = self.memory(g, bb, encoded, 0)?;
        let trunk = self.trunk(g, bb, tgt_prefix, &memory)?;
        self.path(g, bb, trunk, &memory, adapters)
    }

    /// Runs the frozen parts of the network once for an instance.
    pub fn prepare(&self, inst: &Instance) -> Result<PreparedInstance<S>> {
        let mut g = Graph::new();
        let bb = self.bind_backbone(&mut g);
        let enc = self.encode(&mut g, &bb, &inst.source())?;
        let memory = self.memory(&mut g, &bb, enc.states, 0)?;
        let (input, target) = self.clip_target(inst.decoder_input(), inst.target());
        let mut classes = inst.target_classes();
        classes.truncate(target.len());
        let trunk = self.trunk(&mut g, &bb, &input, &memory)?;
        let keep_from = self.config.shared_through() + 1;
        let memory = memory
            .layers
            .iter()
            .enumerate()
            .map(|(i, kv)| match kv {
                Some((k, v)) if i >= keep_from => Some((g.value_arc(*k), g.value_arc(*v))),
                _ => None,
            })
            .collect();
        Ok(PreparedInstance {
            source_len: inst.source().len().min(self.config.max_src_len),
            truncated: enc.truncated || input.len() < inst.decoder_input().len(),
            decoder_input: input,
            target,
            target_classes: classes,
            reference: inst.summary.clone(),
            encoder_states: g.value_arc(enc.states),
            memory,
            trunk: g.value_arc(trunk),
        })
    }

    fn cached_memory(&self, g: &mut Graph<S>, p: &PreparedInstance<S>) -> Memory {
        Memory {
            layers: p
                .memory
                .iter()
                .map(|kv| {
                    kv.as_ref()
                        .map(|(k, v)| (g.constant(Arc::clone(k)), g.constant(Arc::clone(v))))
                })
                .collect(),
        }
    }

    /// [`Self::decode_dual`] over cached frozen activations. Bit-identical
    /// to the uncached computation.
    pub fn decode_dual_prepared(
        &self,
        g: &mut Graph<S>,
        bb: &BoundBackbone,
        p: &PreparedInstance<S>,
        global: &BoundAdapters,
        local: &BoundAdapters,
    ) -> Result<DualOutput> {
        let memory = self.cached_memory(g, p);
        let trunk = g.constant(Arc::clone(&p.trunk));
        self.dual_from_trunk(g, bb, trunk, &memory, global, local)
    }

    pub fn decode_single_prepared(
        &self,
        g: &mut Graph<S>,
        bb: &BoundBackbone,
        p: &PreparedInstance<S>,
        adapters: &BoundAdapters,
    ) -> Result<Var> {
        let memory = self.cached_memory(g, p);
        let trunk = g.constant(Arc::clone(&p.trunk));
        self.path(g, bb, trunk, &memory, adapters)
    }

    /// Mean teacher-forced cross-entropy per target token of one prepared
    /// instance under `local`.
    pub fn instance_ce(&self, p: &PreparedInstance<S>, local: &ParamSet<S>) -> Result<f64> {
        let mut g = Graph::new();
        let bb = self.bind_backbone(&mut g);
        let adapters = bind_adapters(&self.config, &mut g, local, false)?;
        let q = self.decode_single_prepared(&mut g, &bb, p, &adapters)?;
        let ce = g.cross_entropy_rows(q, &p.target)?;
        let v = g.value(ce);
        Ok(v.data().iter().map(|x| x.as_f64()).sum::<f64>() / v.numel() as f64)
    }

    /// Greedy decoding through the given adapters. Stops after EOS (which
    /// is included) or `max_len` tokens; ties go to the lowest token id.
    pub fn generate(
        &self,
        src_ids: &[usize],
        local: &ParamSet<S>,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let bb = self.bind_backbone(&mut g);
        let enc = self.encode(&mut g, &bb, src_ids)?;
        let states = g.value_arc(enc.states);
        self.generate_from_states(states, local, max_len)
    }

    pub fn generate_prepared(
        &self,
        p: &PreparedInstance<S>,
        local: &ParamSet<S>,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        self.generate_from_states(Arc::clone(&p.encoder_states), local, max_len)
    }

    fn generate_from_states(
        &self,
        states: Arc<Tensor<S>>,
        local: &ParamSet<S>,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let limit = max_len.min(self.config.max_tgt_len);
        let mut g = Graph::new();
        let bb = self.bind_backbone(&mut g);
        let adapters = bind_adapters(&self.config, &mut g, local, false)?;
        let enc = g.constant(states);
        let memory = self.memory(&mut g, &bb, enc, 0)?;
        let base = g.len();
        let mut prefix = vec![BOS];
        let mut out = Vec::new();
        while out.len() < limit {
            let trunk = self.trunk(&mut g, &bb, &prefix, &memory)?;
            let q = self.path(&mut g, &bb, trunk, &memory, &adapters)?;
            let probs = g.value(q);
            let next = argmax(probs.row(probs.rows() - 1));
            out.push(next);
            if next == EOS {
                break;
            }
            prefix.push(next);
            debug_assert!(g.len() > base);
        }
        Ok(out)
    }
}

fn clip_global_norm<S: Scalar>(grads: &mut BTreeMap<String, Tensor<S>>, max_norm: f64) {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = S::lit(max_norm / norm);
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x = *x * k;
            }
        }
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Sums per-token loss vectors and divides by the token count.
pub(crate) fn sum_mean<S: Scalar>(g: &mut Graph<S>, terms: &[Var], tokens: usize) -> Result<Var> {
    let w = S::one() / S::from_count(tokens.max(1));
    let mut total: Option<Var> = None;
    for &t in terms {
        let n = g.value(t).numel();
        let s = g.weighted_sum(t, vec![w; n])?;
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    total.ok_or(Error::Empty("loss terms"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generic_corpus, Vocab};

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 24,
            model_dim: 8,
            bottleneck_dim: 3,
            ffn_dim: 12,
            n_encoder_layers: 1,
            n_decoder_layers: 3,
            n_heads: 2,
            adapter_layers: vec![2, 3],
            max_src_len: 48,
            max_tgt_len: 16,
        }
    }

    fn model(cfg: ModelConfig) -> Summarizer<f64> {
        let bb = BackboneWeights::init(&cfg, 5).unwrap();
        Summarizer::new(cfg, bb).unwrap()
    }

    fn instance(cfg: &ModelConfig) -> Instance {
        let vocab = Vocab::build(cfg.vocab_size, 0.7, 1).unwrap();
        generic_corpus(&vocab, 1, cfg.max_src_len, 2)
            .unwrap()
            .remove(0)
    }

    #[test]
    fn default_payload() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.payload_size(), 6528);
        assert_eq!(ModelConfig::top_layers(4, 3), vec![2, 3, 4]);
        assert_eq!(ModelConfig::top_layers(8, 3), vec![6, 7, 8]);
    }

    #[test]
    fn config_validation() {
        for c in [
            ModelConfig {
                bottleneck_dim: 64,
                ..Default::default()
            },
            ModelConfig {
                adapter_layers: vec![0, 1],
                ..Default::default()
            },
            ModelConfig {
                adapter_layers: vec![5],
                ..Default::default()
            },
        ] {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn adapter_special_cases() {
        let mut g = Graph::<f64>::new();
        let y = g.input(Tensor::from_rows(&[&[1.0, -2.0, 0.5, 3.0]]).unwrap());
        let zeros = |g: &mut Graph<f64>, s: &[usize]| g.input(Tensor::zeros(s));
        let w = BoundAdapter {
            w_down: zeros(&mut g, &[4, 2]),
            w_up: g.input(Tensor::filled(&[2, 4], 0.3)),
            ln_gain: g.input(Tensor::filled(&[4], 1.0)),
            ln_bias: zeros(&mut g, &[4]),
        };
        let out = adapter_forward(&mut g, y, &w).unwrap();
        let gain = g.input(Tensor::filled(&[4], 1.0));
        let bias = zeros(&mut g, &[4]);
        let ln = g.layer_norm(y, gain, bias).unwrap();
        assert_eq!(g.value(out), g.value(ln));

        let y0 = zeros(&mut g, &[1, 4]);
        let out0 = adapter_forward(&mut g, y0, &w).unwrap();
        assert!(g.value(out0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_adapters_give_identical_paths() {
        let cfg = small();
        let m = model(cfg.clone());
        let ad = init_adapters::<f64>(&cfg, &mut stream(1, "a", &[]));
        let inst = instance(&cfg);
        let mut g = Graph::new();
        let bb = m.bind_backbone(&mut g);
        let ga = bind_adapters(&cfg, &mut g, &ad, false).unwrap();
        let la = bind_adapters(&cfg, &mut g, &ad, true).unwrap();
        let enc = m.encode(&mut g, &bb, &inst.source()).unwrap();
        let out = m
            .decode_dual(&mut g, &bb, &inst.decoder_input(), enc.states, &ga, &la)
            .unwrap();
        let (qg, ql) = (g.value(out.q_g), g.value(out.q_l));
        assert_eq!(qg, ql);
        assert!(!g.requires_grad(out.q_g));
        assert!(g.requires_grad(out.q_l));
        for r in 0..ql.rows() {
            let s: f64 = ql.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn prepared_path_is_bit_identical() {
        let cfg = small();
        let m = model(cfg.clone());
        let g_ad = init_adapters::<f64>(&cfg, &mut stream(1, "a", &[]));
        let l_ad = init_adapters::<f64>(&cfg, &mut stream(2, "a", &[]));
        let inst = instance(&cfg);
        let p = m.prepare(&inst).unwrap();

        let mut g1 = Graph::new();
        let bb = m.bind_backbone(&mut g1);
        let ga = bind_adapters(&cfg, &mut g1, &g_ad, false).unwrap();
        let la = bind_adapters(&cfg, &mut g1, &l_ad, true).unwrap();
        let enc = m.encode(&mut g1, &bb, &inst.source()).unwrap();
        let a = m
            .decode_dual(&mut g1, &bb, &inst.decoder_input(), enc.states, &ga, &la)
            .unwrap();

        let mut g2 = Graph::new();
        let bb2 = m.bind_backbone(&mut g2);
        let ga2 = bind_adapters(&cfg, &mut g2, &g_ad, false).unwrap();
        let la2 = bind_adapters(&cfg, &mut g2, &l_ad, true).unwrap();
        let b = m
            .decode_dual_prepared(&mut g2, &bb2, &p, &ga2, &la2)
            .unwrap();

        assert_eq!(g1.value(a.q_g), g2.value(b.q_g));
        assert_eq!(g1.value(a.q_l), g2.value(b.q_l));
    }

    #[test]
    fn missing_adapter_layer_is_named() {
        let cfg = small();
        let mut ad = init_adapters::<f64>(&cfg, &mut stream(1, "a", &[]));
        let full = ad.clone();
        ad = full
            .iter()
            .filter(|(k, _)| !k.starts_with("adapter.3."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let mut g = Graph::new();
        let err = bind_adapters(&cfg, &mut g, &ad, false).unwrap_err();
        assert!(matches!(err, Error::MissingAdapterLayer(3)));
    }

    #[test]
    fn encoder_shapes_and_truncation() {
        let cfg = small();
        let m = model(cfg.clone());
        let mut g = Graph::new();
        let bb = m.bind_backbone(&mut g);
        let one = m.encode(&mut g, &bb, &[5]).unwrap();
        assert_eq!(g.value(one.states).shape(), &[1, 8]);
        assert!(!one.truncated);
        let long: Vec<usize> = (0..60).map(|i| 4 + i % 20).collect();
        let e = m.encode(&mut g, &bb, &long).unwrap();
        assert!(e.truncated);
        assert_eq!(g.value(e.states).shape(), &[48, 8]);
    }

    #[test]
    fn positions_matter() {
        let cfg = small();
        let m = model(cfg.clone());
        let mut params = m.backbone().to_params();
        let pos = params.get_mut("emb.enc_pos").unwrap();
        let n = pos.cols();
        let (a, b) = pos.data_mut().split_at_mut(n);
        a.swap_with_slice(&mut b[..n]);
        let swapped = Summarizer::new(cfg.clone(), BackboneWeights::from_params(params)).unwrap();
        let run = |m: &Summarizer<f64>| {
            let mut g = Graph::new();
            let bb = m.bind_backbone(&mut g);
            let e = m.encode(&mut g, &bb, &[5, 6, 7]).unwrap();
            g.value(e.states).clone()
        };
        assert_ne!(run(&m), run(&swapped));
        assert_eq!(run(&m), run(&m));
    }

    #[test]
    fn generation_limits() {
        let cfg = small();
        let m = model(cfg.clone());
        let ad = init_adapters::<f64>(&cfg, &mut stream(1, "a", &[]));
        let src = instance(&cfg).source();
        let one = m.generate(&src, &ad, 1).unwrap();
        assert_eq!(one.len(), 1);
        let full = m.generate(&src, &ad, 100).unwrap();
        assert!(full.len() <= cfg.max_tgt_len);
        assert!(full
            .iter()
            .position(|&t| t == EOS)
            .is_none_or(|i| i == full.len() - 1));
        assert_eq!(full, m.generate(&src, &ad, 100).unwrap());
        assert_eq!(full[0], one[0]);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
        assert_eq!(argmax(&[0.25f32; 4]), 0);
    }

    #[test]
    fn pretraining() {
        let cfg = small();
        let vocab = Vocab::build(cfg.vocab_size, 0.7, 1).unwrap();
        let corpus = generic_corpus(&vocab, 50, cfg.max_src_len, 3).unwrap();
        assert!(
            Summarizer::<f64>::pretrain(cfg.clone(), &[], &PretrainConfig::default(), 1).is_err()
        );
        let zero = PretrainConfig {
            steps: 0,
            ..Default::default()
        };
        let m0 = Summarizer::<f64>::pretrain(cfg.clone(), &corpus, &zero, 9).unwrap();
        let init = BackboneWeights::<f64>::init(&cfg, 9)
            .unwrap()
            .to_params()
            .cast::<f32>()
            .cast::<f64>();
        assert_eq!(m0.backbone().to_params(), init);

        let opts = PretrainConfig {
            steps: 30,
            batch_size: 4,
            lr: 3e-3,
            ..Default::default()
        };
        let mut losses = Vec::new();
        let a = Summarizer::<f64>::pretrain_observed(cfg.clone(), &corpus, &opts, 9, |_, l| {
            losses.push(l)
        })
        .unwrap();
        let b = Summarizer::<f64>::pretrain(cfg.clone(), &corpus, &opts, 9).unwrap();
        assert_eq!(a.backbone().to_params(), b.backbone().to_params());
        assert_eq!(losses.len(), 30);
        assert_ne!(a.backbone().to_params(), m0.backbone().to_params());
    }
}
