mod common;

use fskd_core::corpus::{make_setting, ClientData, CorpusConfig, Preset};
use fskd_core::federation::{
    aggregate, init, run_round, run_training, sample_clients, ClientState, FederationConfig,
    Strategy, WIRE_BYTES,
};
use fskd_core::model::Summarizer;
use fskd_core::rng::stream;
use fskd_core::selective_kd::KdConfig;
use fskd_core::tensor::Tensor;
use fskd_core::{Error, ParamSet64};

fn scalar_set(v: f64) -> ParamSet64 {
    let mut s = ParamSet64::new();
    s.insert("x", Tensor::vector(vec![v]).unwrap());
    s
}

#[test]
fn weighted_mean_by_dataset_size() {
    let (a, b) = (scalar_set(1.0), scalar_set(5.0));
    let out = aggregate(&[(&a, 1), (&b, 3)]).unwrap();
    assert_eq!(out.get("x").unwrap().data(), &[4.0]);
}

#[test]
fn aggregate_errors() {
    assert!(matches!(aggregate::<f64>(&[]), Err(Error::Empty(_))));
    let a = scalar_set(1.0);
    let mut b = scalar_set(1.0);
    b.insert("y", Tensor::vector(vec![0.0]).unwrap());
    match aggregate(&[(&a, 1), (&b, 1)]) {
        Err(Error::Structure(name)) => assert_eq!(name, "y"),
        other => panic!("{other:?}"),
    }
    let mut c = ParamSet64::new();
    c.insert("x", Tensor::vector(vec![1.0, 2.0]).unwrap());
    assert!(matches!(aggregate(&[(&a, 1), (&c, 1)]), Err(Error::Structure(n)) if n == "x"));
}

#[test]
fn sampling() {
    let mut rng = stream(0, "t", &[]);
    assert_eq!(sample_clients(3, 1.0, &mut rng).unwrap(), vec![0, 1, 2]);
    for _ in 0..20 {
        let p = sample_clients(3, 0.7, &mut rng).unwrap();
        assert_eq!(p.len(), 2);
        assert!(p.windows(2).all(|w| w[0] < w[1]) && p.iter().all(|&i| i < 3));
    }
    assert_eq!(sample_clients(3, 1e-6, &mut rng).unwrap().len(), 1);
    assert_eq!(sample_clients(10, 0.25, &mut rng).unwrap().len(), 3);
    assert!(sample_clients(0, 1.0, &mut rng).is_err());
    assert!(matches!(
        sample_clients(3, 0.0, &mut rng),
        Err(Error::Config { .. })
    ));
    assert!(matches!(
        sample_clients(3, 1.5, &mut rng),
        Err(Error::Config { .. })
    ));

    let draw = |seed| sample_clients(10, 0.5, &mut stream(seed, "t", &[])).unwrap();
    assert_eq!(draw(1), draw(1));
    assert!((0..20).any(|s| draw(s) != draw(1)));
}

#[test]
fn server_init() {
    let (model, _, _) = common::small_model(0);
    assert_eq!(init::<f64>(&model, 4), init::<f64>(&model, 4));
    assert_ne!(
        init::<f64>(&model, 4).get("adapter.2.w_down"),
        init::<f64>(&model, 5).get("adapter.2.w_down")
    );
    let s = init::<f64>(&model, 4);
    assert!(s
        .get("adapter.2.ln_gain")
        .unwrap()
        .data()
        .iter()
        .all(|&g| g == 1.0));
    assert!(s
        .get("adapter.2.ln_bias")
        .unwrap()
        .data()
        .iter()
        .all(|&b| b == 0.0));
    let bound = 1.0 / (model.config().model_dim as f64).sqrt();
    assert!(s
        .get("adapter.2.w_up")
        .unwrap()
        .data()
        .iter()
        .all(|w| w.abs() <= bound));
}

fn setting(vocab: &fskd_core::corpus::Vocab) -> Vec<ClientData> {
    let cfg = CorpusConfig {
        scale: 0.03,
        max_src_len: 40,
        ..Default::default()
    };
    make_setting(Preset::NoniidBalanced, &cfg, vocab, 0).unwrap()
}

fn fed_config(strategy: Strategy, rounds: usize, rate: f64) -> FederationConfig {
    FederationConfig {
        strategy,
        kd: KdConfig {
            batch_size: 4,
            lr: 1e-2,
            ..KdConfig::for_vocab(32)
        },
        rounds,
        participation_rate: rate,
        reset_local_each_round: false,
        seed: 0,
        keep_traces: true,
    }
}

fn clients(
    model: &Summarizer<f64>,
    data: &[ClientData],
    server: &ParamSet64,
) -> Vec<ClientState<f64>> {
    data.iter()
        .enumerate()
        .map(|(i, d)| ClientState::new(i, d, model, server, 0).unwrap())
        .collect()
}

#[test]
fn round_ledger_and_non_participants() {
    let (model, vocab, _) = common::small_model(0);
    let data = setting(&vocab);
    let server = init(&model, 0);
    let mut cs = clients(&model, &data, &server);
    let before: Vec<_> = cs
        .iter()
        .map(|c| (c.local.clone(), c.global.clone()))
        .collect();
    let cfg = fed_config(Strategy::FedSelectKd, 1, 0.5);
    let (next, record, traces) = run_round(&model, &server, &mut cs, &cfg, 1).unwrap();
    assert_eq!(record.participants.len(), 2);
    let bytes = model.config().payload_size() * WIRE_BYTES;
    assert!(record
        .bytes_up
        .iter()
        .chain(&record.bytes_down)
        .all(|&b| b == bytes));
    assert_eq!(record.train_loss.len(), 2);
    assert_eq!(record.checksum, next.checksum());
    for (i, c) in cs.iter().enumerate() {
        if record.participants.contains(&i) {
            assert_ne!(c.local, before[i].0);
        } else {
            assert_eq!((&c.local, &c.global), (&before[i].0, &before[i].1));
        }
    }
    let expected: usize = record
        .participants
        .iter()
        .map(|&i| cs[i].train_target_tokens())
        .sum();
    assert_eq!(traces.len(), expected);
    assert!(traces
        .iter()
        .all(|t| t.round == 1 && record.participants.contains(&t.client)));
}

#[test]
fn single_client_round_is_its_update() {
    let (model, vocab, _) = common::small_model(0);
    let data = setting(&vocab);
    let server = init(&model, 0);
    let mut cs = clients(&model, &data[..1], &server);
    let (next, _, _) = run_round(
        &model,
        &server,
        &mut cs,
        &fed_config(Strategy::FedAvg, 1, 1.0),
        1,
    )
    .unwrap();
    assert_eq!(next, cs[0].local);
    assert_ne!(next, server);
}

#[test]
fn identical_clients_aggregate_to_each() {
    let (model, vocab, _) = common::small_model(0);
    let mut one = setting(&vocab).remove(0);
    one.train.truncate(1);
    let data = vec![one.clone(), one.clone(), one];
    let server = init(&model, 0);
    let mut cs = clients(&model, &data, &server);
    let (next, _, _) = run_round(
        &model,
        &server,
        &mut cs,
        &fed_config(Strategy::FedKd, 1, 1.0),
        1,
    )
    .unwrap();
    for c in &cs {
        assert_eq!(c.local, cs[0].local);
    }
    assert_eq!(next, cs[0].local);
}

#[test]
fn empty_training_split_names_the_client() {
    let (model, vocab, _) = common::small_model(0);
    let mut data = setting(&vocab);
    data[1].train.clear();
    let server = init(&model, 0);
    let mut cs = clients(&model, &data, &server);
    match run_round(
        &model,
        &server,
        &mut cs,
        &fed_config(Strategy::FedAvg, 1, 1.0),
        1,
    ) {
        Err(Error::Client { client, .. }) => assert_eq!(client, 1),
        other => panic!("{:?}", other.map(|r| r.1)),
    }
}

#[test]
fn strategies_treat_local_adapters_differently() {
    let (model, vocab, _) = common::small_model(0);
    let data = setting(&vocab);
    let server = init(&model, 0);

    // FedAvg: every round starts from the broadcast aggregate.
    let mut cs = clients(&model, &data, &server);
    let cfg = fed_config(Strategy::FedAvg, 2, 1.0);
    let (s1, _, _) = run_round(&model, &server, &mut cs, &cfg, 1).unwrap();
    let mut fresh = cs.clone();
    for c in &mut fresh {
        c.local = s1.clone();
    }
    let (a, _, _) = run_round(&model, &s1, &mut cs, &cfg, 2).unwrap();
    let (b, _, _) = run_round(&model, &s1, &mut fresh, &cfg, 2).unwrap();
    assert_eq!(a, b);

    // FedSelectKD: local adapters carry over.
    let mut cs = clients(&model, &data, &server);
    let cfg = fed_config(Strategy::FedSelectKd, 2, 1.0);
    let (s1, _, _) = run_round(&model, &server, &mut cs, &cfg, 1).unwrap();
    assert!(cs.iter().all(|c| c.local != s1));
    let mut reset = cs.clone();
    for c in &mut reset {
        c.local = s1.clone();
    }
    let (a, _, _) = run_round(&model, &s1, &mut cs, &cfg, 2).unwrap();
    let (b, _, _) = run_round(&model, &s1, &mut reset, &cfg, 2).unwrap();
    assert_ne!(a, b);
    assert!(cs.iter().all(|c| c.global == s1));
}

#[test]
fn training_runs() {
    let (model, vocab, _) = common::small_model(0);
    let data = setting(&vocab);

    let none = run_training(&model, &data, &fed_config(Strategy::FedSelectKd, 0, 1.0)).unwrap();
    assert!(none.history.is_empty() && none.traces.is_empty());
    assert!(none
        .best
        .iter()
        .all(|b| b.round == 0 && b.params == none.server));

    let cfg = fed_config(Strategy::FedSelectKd, 3, 0.7);
    let a = run_training(&model, &data, &cfg).unwrap();
    let b = run_training(&model, &data, &cfg).unwrap();
    assert_eq!(a.history.len(), 3);
    assert_eq!(a.history, b.history);
    assert_eq!(a.server, b.server);
    assert_eq!(a.test, b.test);
    assert!(a.best.iter().all(|b| (1..=3).contains(&b.round)));
    for m in &a.history {
        assert_eq!(m.record.participants.len(), 2);
        assert_eq!(m.valid_ce.as_ref().unwrap().len(), 3);
    }
}

#[test]
fn single_client_fedavg_is_local_training() {
    let (model, vocab, _) = common::small_model(0);
    let data = setting(&vocab);
    let solo = &data[..1];
    let out = run_training(&model, solo, &fed_config(Strategy::FedAvg, 2, 1.0)).unwrap();

    let server = init(&model, 0);
    let mut c = ClientState::new(0, &solo[0], &model, &server, 0).unwrap();
    let cfg = fed_config(Strategy::FedAvg, 2, 1.0);
    let (s1, _, _) = run_round(&model, &server, std::slice::from_mut(&mut c), &cfg, 1).unwrap();
    let (s2, _, _) = run_round(&model, &s1, std::slice::from_mut(&mut c), &cfg, 2).unwrap();
    assert_eq!(out.server, s2);
    assert_eq!(s2, c.local);
}
