//! Synthetic multi-domain query-focused summarization data.
//!
//! A transcript is a sequence of turns, each a speaker token followed by a
//! fixed number of words mixing CONTENT and FUNCTION tokens. The query is a
//! marker followed by keywords that occur in exactly one turn each. The
//! summary is fully determined by `(query, transcript, domain)`:
//!
//! ```text
//! open(domain) · for each keyword turn, in transcript order:
//!                    speaker · join(domain) · non-keyword CONTENT words of that turn
//! ```
//!
//! Domains differ in turn structure, in which pair of (shared) connective
//! tokens they use, and, controlled by `skew`, in their CONTENT vocabulary.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, StreamRng};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const NUM_SPECIALS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Academic,
    Committee,
    Product,
    /// Short everyday dialogues, unlike any meeting domain.
    Chitchat,
}

impl Domain {
    pub const ALL: [Domain; 4] = [
        Domain::Academic,
        Domain::Committee,
        Domain::Product,
        Domain::Chitchat,
    ];
    pub const MEETINGS: [Domain; 3] = [Domain::Academic, Domain::Committee, Domain::Product];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Academic => "academic",
            Domain::Committee => "committee",
            Domain::Product => "product",
            Domain::Chitchat => "chitchat",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    /// Domain-bearing words (noun/verb analog).
    Content,
    /// Shared words (determiner/pronoun analog): speakers, connectives, fillers.
    Function,
    Special,
}

impl TokenClass {
    pub const ALL: [TokenClass; 3] = [
        TokenClass::Content,
        TokenClass::Function,
        TokenClass::Special,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TokenClass::Content => "content",
            TokenClass::Function => "function",
            TokenClass::Special => "special",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    classes: Vec<TokenClass>,
    content: Vec<usize>,
    speakers: Vec<usize>,
    query_marker: usize,
    connectives: Vec<usize>,
    fillers: Vec<usize>,
}

impl Vocab {
    /// Builds a vocabulary of `size` ids: four specials, then
    /// `floor(content_fraction · (size − 4))` CONTENT ids and FUNCTION ids
    /// for the rest. Which id lands in which role is a seeded shuffle.
    pub fn build(size: usize, content_fraction: f64, seed: u64) -> Result<Vocab> {
        if size < 16 {
            return Err(Error::config(
                "vocab_size",
                format!("must be at least 16, got {size}"),
            ));
        }
        if !(0.0..=1.0).contains(&content_fraction) {
            return Err(Error::config("content_fraction", "must lie in [0, 1]"));
        }
        let rest = size - NUM_SPECIALS;
        let n_content = (content_fraction * rest as f64).floor() as usize;
        let n_function = rest - n_content;
        if n_content < Domain::ALL.len() || n_function < 4 {
            return Err(Error::config(
                "vocab_size",
                format!(
                    "{size} ids cannot host {n_content} content and {n_function} function tokens"
                ),
            ));
        }
        let mut ids: Vec<usize> = (NUM_SPECIALS..size).collect();
        ids.shuffle(&mut stream(seed, "vocab", &[]));
        let (content, function) = ids.split_at(n_content);

        let n_speakers = (n_function / 7).clamp(1, 4);
        let n_connectives = (n_function - n_speakers - 2).min(2 * Domain::ALL.len());
        let speakers = function[..n_speakers].to_vec();
        let query_marker = function[n_speakers];
        let connectives = function[n_speakers + 1..n_speakers + 1 + n_connectives].to_vec();
        let fillers = function[n_speakers + 1 + n_connectives..].to_vec();

        let mut tokens = vec![String::new(); size];
        let mut classes = vec![TokenClass::Special; size];
        for (id, name) in [(PAD, "<pad>"), (BOS, "<s>"), (EOS, "</s>"), (SEP, "#SEP#")] {
            tokens[id] = name.to_string();
        }
        let block = content.len() / Domain::ALL.len();
        for (k, &id) in content.iter().enumerate() {
            let d = (k / block).min(Domain::ALL.len() - 1);
            tokens[id] = format!("{}_{}", &Domain::ALL[d].name()[..4], k);
            classes[id] = TokenClass::Content;
        }
        let named = [
            ("spk", &speakers[..]),
            ("conn", &connectives[..]),
            ("fn", &fillers[..]),
        ];
        for (prefix, group) in named {
            for (k, &id) in group.iter().enumerate() {
                tokens[id] = format!("{prefix}{k}");
                classes[id] = TokenClass::Function;
            }
        }
        tokens[query_marker] = "<query>".to_string();
        classes[query_marker] = TokenClass::Function;

        Ok(Vocab {
            tokens,
            classes,
            content: content.to_vec(),
            speakers,
            query_marker,
            connectives,
            fillers,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn class(&self, id: usize) -> TokenClass {
        self.classes[id]
    }

    pub fn content_ids(&self) -> &[usize] {
        &self.content
    }

    pub fn function_ids(&self) -> Vec<usize> {
        (0..self.size())
            .filter(|&i| self.classes[i] == TokenClass::Function)
            .collect()
    }

    pub fn speakers(&self) -> &[usize] {
        &self.speakers
    }

    pub fn query_marker(&self) -> usize {
        self.query_marker
    }

    pub fn fillers(&self) -> &[usize] {
        &self.fillers
    }

    /// The domain's own slice of the CONTENT vocabulary.
    pub fn content_block(&self, domain: Domain) -> &[usize] {
        let block = self.content.len() / Domain::ALL.len();
        let start = domain.index() * block;
        let end = if domain.index() + 1 == Domain::ALL.len() {
            self.content.len()
        } else {
            start + block
        };
        &self.content[start..end]
    }

    /// `(open, join)` connectives. All domains draw from one shared pool.
    pub fn connectives(&self, domain: Domain) -> (usize, usize) {
        let n = self.connectives.len();
        let i = domain.index();
        (
            self.connectives[(2 * i) % n],
            self.connectives[(2 * i + 1) % n],
        )
    }

    pub fn all_connectives(&self) -> &[usize] {
        &self.connectives
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Generation knobs of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain: Domain,
    /// Inclusive range of turns per transcript.
    pub turns: (usize, usize),
    pub words_per_turn: usize,
    /// Probability that a word slot holds a CONTENT token.
    pub content_rate: f64,
    pub keywords: usize,
    /// 0: CONTENT drawn uniformly from the whole CONTENT vocabulary (shared
    /// across domains). 1: drawn only from the domain's own block.
    pub skew: f64,
}

impl DomainSpec {
    /// Turn profiles loosely follow the QMSum domain statistics: committee
    /// meetings have few long turns, academic and product meetings many
    /// short ones; chitchat dialogues are about an eighth of the length.
    pub fn preset(domain: Domain, skew: f64) -> DomainSpec {
        let (turns, words_per_turn) = match domain {
            Domain::Academic => ((5, 7), 4),
            Domain::Committee => ((2, 3), 8),
            Domain::Product => ((5, 7), 5),
            Domain::Chitchat => ((1, 2), 2),
        };
        DomainSpec {
            domain,
            turns,
            words_per_turn,
            content_rate: 0.6,
            keywords: 1,
            skew,
        }
    }

    pub fn max_source_len(&self) -> usize {
        1 + self.keywords + 1 + self.turns.1 * (1 + self.words_per_turn)
    }

    pub fn max_target_len(&self) -> usize {
        // open + per keyword (speaker, join, words) + EOS
        1 + self.keywords * (2 + self.words_per_turn) + 1
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.skew) {
            return Err(Error::config("skew", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.content_rate) {
            return Err(Error::config("content_rate", "must lie in [0, 1]"));
        }
        if self.turns.0 == 0
            || self.turns.0 > self.turns.1
            || self.words_per_turn == 0
            || self.keywords == 0
        {
            return Err(Error::config(
                "domain",
                format!("degenerate spec for {}", self.domain),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub domain: Domain,
    pub query: Vec<usize>,
    pub transcript: Vec<usize>,
    pub summary: Vec<usize>,
    /// Class of each summary token.
    pub classes: Vec<TokenClass>,
}

impl Instance {
    /// `query · SEP · transcript`
    pub fn source(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.query.len() + 1 + self.transcript.len());
        s.extend_from_slice(&self.query);
        s.push(SEP);
        s.extend_from_slice(&self.transcript);
        s
    }

    /// Teacher-forcing decoder input: `BOS · summary`.
    pub fn decoder_input(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.summary.len() + 1);
        s.push(BOS);
        s.extend_from_slice(&self.summary);
        s
    }

    /// Training targets: `summary · EOS`.
    pub fn target(&self) -> Vec<usize> {
        let mut s = self.summary.clone();
        s.push(EOS);
        s
    }

    pub fn target_classes(&self) -> Vec<TokenClass> {
        let mut c = self.classes.clone();
        c.push(TokenClass::Special);
        c
    }
}

fn draw_content(vocab: &Vocab, domain: Domain, skew: f64, rng: &mut StreamRng) -> usize {
    let pool = if rng.gen_bool(skew) {
        vocab.content_block(domain)
    } else {
        vocab.content_ids()
    };
    pool[rng.gen_range(0..pool.len())]
}

/// Draws one instance. Transcripts are trimmed by whole turns to fit
/// `max_source_len`.
pub fn generate_instance(
    spec: &DomainSpec,
    vocab: &Vocab,
    max_source_len: usize,
    rng: &mut StreamRng,
) -> Result<Instance> {
    let connectives = vocab.connectives(spec.domain);
    generate_with_connectives(spec, vocab, max_source_len, connectives, rng)
}

fn generate_with_connectives(
    spec: &DomainSpec,
    vocab: &Vocab,
    max_source_len: usize,
    (open, join): (usize, usize),
    rng: &mut StreamRng,
) -> Result<Instance> {
    spec.validate()?;
    let w = spec.words_per_turn;
    let fit = max_source_len.saturating_sub(2 + spec.keywords) / (1 + w);
    if fit == 0 {
        return Err(Error::config(
            "max_src_len",
            format!("{max_source_len} cannot hold a single turn"),
        ));
    }
    let n_turns = rng.gen_range(spec.turns.0..=spec.turns.1).min(fit);
    let k = spec.keywords.min(n_turns);

    let mut turns: Vec<(usize, Vec<usize>)> = (0..n_turns)
        .map(|_| {
            let speaker = vocab.speakers[rng.gen_range(0..vocab.speakers.len())];
            let words = (0..w)
                .map(|_| {
                    if rng.gen_bool(spec.content_rate) {
                        draw_content(vocab, spec.domain, spec.skew, rng)
                    } else {
                        vocab.fillers[rng.gen_range(0..vocab.fillers.len())]
                    }
                })
                .collect();
            (speaker, words)
        })
        .collect();

    let mut matched = rand::seq::index::sample(rng, n_turns, k).into_vec();
    matched.sort_unstable();
    let mut keywords: Vec<usize> = Vec::with_capacity(k);
    let mut slots = Vec::with_capacity(k);
    for &t in &matched {
        let kw = loop {
            let c = draw_content(vocab, spec.domain, spec.skew, rng);
            if !keywords.contains(&c) {
                break c;
            }
        };
        let slot = rng.gen_range(0..w);
        turns[t].1[slot] = kw;
        keywords.push(kw);
        slots.push((t, slot));
    }
    // Every keyword must occur exactly once, in its own turn.
    for (t, (_, words)) in turns.iter_mut().enumerate() {
        for (s, word) in words.iter_mut().enumerate() {
            if keywords.contains(word) && !slots.contains(&(t, s)) {
                *word = (0..16)
                    .map(|_| draw_content(vocab, spec.domain, spec.skew, rng))
                    .find(|c| !keywords.contains(c))
                    .unwrap_or(vocab.fillers[0]);
            }
        }
    }

    let mut query = vec![vocab.query_marker];
    query.extend_from_slice(&keywords);
    let transcript: Vec<usize> = turns
        .iter()
        .flat_map(|(spk, words)| std::iter::once(*spk).chain(words.iter().copied()))
        .collect();

    let mut summary = vec![open];
    for &t in &matched {
        let (spk, words) = &turns[t];
        summary.push(*spk);
        summary.push(join);
        summary.extend(
            words
                .iter()
                .copied()
                .filter(|&id| vocab.class(id) == TokenClass::Content && !keywords.contains(&id)),
        );
    }
    let classes = summary.iter().map(|&id| vocab.class(id)).collect();
    Ok(Instance {
        domain: spec.domain,
        query,
        transcript,
        summary,
        classes,
    })
}

/// Pooled, domain-agnostic text for backbone pretraining: uniform CONTENT,
/// a random turn profile, and connectives drawn at random from the shared
/// pool, so the backbone learns the format but none of the domain habits.
pub fn generic_corpus(
    vocab: &Vocab,
    count: usize,
    max_source_len: usize,
    seed: u64,
) -> Result<Vec<Instance>> {
    let mut rng = stream(seed, "generic-corpus", &[]);
    let conns = vocab.all_connectives();
    (0..count)
        .map(|_| {
            let domain = Domain::ALL[rng.gen_range(0..Domain::ALL.len())];
            let mut spec = DomainSpec::preset(domain, 0.0);
            spec.words_per_turn = rng.gen_range(2..=8);
            let open = conns[rng.gen_range(0..conns.len())];
            let join = conns[rng.gen_range(0..conns.len())];
            generate_with_connectives(&spec, vocab, max_source_len, (open, join), &mut rng)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    NoniidUnbalanced,
    IidBalanced,
    NoniidBalanced,
    ExtremeFourth,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::NoniidUnbalanced => "noniid_unbalanced",
            Preset::IidBalanced => "iid_balanced",
            Preset::NoniidBalanced => "noniid_balanced",
            Preset::ExtremeFourth => "extreme_fourth",
        }
    }

    pub fn parse(s: &str) -> Result<Preset> {
        match s {
            "noniid_unbalanced" => Ok(Preset::NoniidUnbalanced),
            "iid_balanced" => Ok(Preset::IidBalanced),
            "noniid_balanced" => Ok(Preset::NoniidBalanced),
            "extreme_fourth" => Ok(Preset::ExtremeFourth),
            other => Err(Error::config("preset", format!("unknown preset `{other}`"))),
        }
    }
}

/// Split sizes `(train, valid, test)` before scaling.
pub fn full_split_sizes(domain: Domain) -> (usize, usize, usize) {
    match domain {
        Domain::Academic => (218, 45, 49),
        Domain::Committee => (284, 67, 66),
        Domain::Product => (593, 125, 129),
        Domain::Chitchat => (1200, 100, 100),
    }
}

pub const BALANCED_SPLIT: (usize, usize, usize) = (200, 40, 40);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub skew: f64,
    /// Multiplier on every split size.
    pub scale: f64,
    pub keywords: usize,
    pub max_src_len: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            skew: 0.9,
            scale: 0.1,
            keywords: 1,
            max_src_len: 48,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientData {
    pub name: String,
    /// Dominant domain, `None` for mixed-domain clients.
    pub domain: Option<Domain>,
    pub train: Vec<Instance>,
    pub valid: Vec<Instance>,
    pub test: Vec<Instance>,
}

fn scaled(n: usize, scale: f64) -> usize {
    ((n as f64 * scale).round() as usize).max(1)
}

fn domain_pool(
    vocab: &Vocab,
    cfg: &CorpusConfig,
    domain: Domain,
    sizes: (usize, usize, usize),
    seed: u64,
) -> Result<[Vec<Instance>; 3]> {
    let mut spec = DomainSpec::preset(domain, cfg.skew);
    spec.keywords = cfg.keywords;
    let split = |which: u64, n: usize| -> Result<Vec<Instance>> {
        let mut rng = stream(seed, "data", &[domain.index() as u64, which]);
        (0..n)
            .map(|_| generate_instance(&spec, vocab, cfg.max_src_len, &mut rng))
            .collect()
    };
    Ok([split(0, sizes.0)?, split(1, sizes.1)?, split(2, sizes.2)?])
}

/// Materializes the per-client datasets of a preset. Each domain's pool
/// comes from its own seeded stream, so the meeting clients hold identical
/// data in `noniid_unbalanced` and `extreme_fourth`.
pub fn make_setting(
    preset: Preset,
    cfg: &CorpusConfig,
    vocab: &Vocab,
    seed: u64,
) -> Result<Vec<ClientData>> {
    if cfg.scale <= 0.0 {
        return Err(Error::config("scale", "must be positive"));
    }
    let scale3 = |(a, b, c): (usize, usize, usize)| {
        (
            scaled(a, cfg.scale),
            scaled(b, cfg.scale),
            scaled(c, cfg.scale),
        )
    };
    let single = |domain: Domain, sizes| -> Result<ClientData> {
        let [train, valid, test] = domain_pool(vocab, cfg, domain, sizes, seed)?;
        Ok(ClientData {
            name: domain.name().to_string(),
            domain: Some(domain),
            train,
            valid,
            test,
        })
    };
    match preset {
        Preset::NoniidUnbalanced => Domain::MEETINGS
            .iter()
            .map(|&d| single(d, scale3(full_split_sizes(d))))
            .collect(),
        Preset::NoniidBalanced => Domain::MEETINGS
            .iter()
            .map(|&d| single(d, scale3(BALANCED_SPLIT)))
            .collect(),
        Preset::ExtremeFourth => Domain::ALL
            .iter()
            .map(|&d| single(d, scale3(full_split_sizes(d))))
            .collect(),
        Preset::IidBalanced => {
            let n = Domain::MEETINGS.len();
            let mut clients: Vec<ClientData> = (0..n)
                .map(|i| ClientData {
                    name: format!("mixed{i}"),
                    domain: None,
                    train: Vec::new(),
                    valid: Vec::new(),
                    test: Vec::new(),
                })
                .collect();
            for &d in &Domain::MEETINGS {
                let pools = domain_pool(vocab, cfg, d, scale3(full_split_sizes(d)), seed)?;
                for (which, mut pool) in pools.into_iter().enumerate() {
                    pool.shuffle(&mut stream(
                        seed,
                        "iid-split",
                        &[d.index() as u64, which as u64],
                    ));
                    let base = pool.len() / n;
                    let extra = pool.len() % n;
                    let mut it = pool.into_iter();
                    for (c, client) in clients.iter_mut().enumerate() {
                        let take = base + usize::from(c < extra);
                        let part: Vec<Instance> = it.by_ref().take(take).collect();
                        match which {
                            0 => client.train.extend(part),
                            1 => client.valid.extend(part),
                            _ => client.test.extend(part),
                        }
                    }
                }
            }
            Ok(clients)
        }
    }
}
