use super::*;
use crate::datapipe::{prepare, synth_generate, SyntheticSceneSpec};
use crate::evalgen::cider;

fn toy_data() -> PreparedData {
    let records = synth_generate(&SyntheticSceneSpec::default(), 120, 3).unwrap();
    prepare(&records, 1).unwrap()
}

fn toy_config() -> SearchConfig {
    SearchConfig {
        macro_config: MacroConfig::desk(3, 8),
        controller: ControllerConfig {
            hidden: 8,
            traces_per_update: 3,
            ..ControllerConfig::default()
        },
        epochs: 2,
        omega_steps: Some(3),
        batch_size: 8,
        theta_updates: 2,
        reward_subsample: 6,
        derive_samples: 4,
        max_len: 8,
        seed: 5,
        ..SearchConfig::default()
    }
}

fn report(index: usize, cider: f64, params: usize) -> CandidateReport {
    CandidateReport {
        index,
        genotype: CellGenotype::chain(2, crate::activations::ActivationKind::Tanh).unwrap(),
        macro_config: MacroConfig::default(),
        reward_mode: RewardMode::MetricCider,
        reward: cider,
        metrics: MetricReport {
            cider,
            ..MetricReport::default()
        },
        loss: 1.0,
        params,
        decodes: Vec::new(),
        wall_time_s: 0.0,
    }
}

#[test]
fn tie_breaks_prefer_fewer_params_then_earlier_index() {
    let reports = vec![report(0, 0.5, 2_100_000), report(1, 0.5, 1_800_000), report(2, 0.4, 10)];
    assert_eq!(select_best(&reports, RewardMode::MetricCider), Some(1));
    let same = vec![report(0, 0.5, 7), report(1, 0.5, 7)];
    assert_eq!(select_best(&same, RewardMode::MetricCider), Some(0));
    assert_eq!(select_best(&reports[..1], RewardMode::MetricCider), Some(0));
}

#[test]
fn perfect_decodes_give_unit_bleu4_reward() {
    let refs = vec![vec![vec![4usize, 5, 6, 7]], vec![vec![8, 9, 10, 11]]];
    let cands = vec![vec![4usize, 5, 6, 7], vec![8, 9, 10, 11]];
    let m = MetricReport::compute(&cands, &refs, CiderVariant::CiderD).unwrap();
    assert_eq!(RewardMode::MetricBleu4.reward(&m, 3.0), 1.0);
}

#[test]
fn neg_loss_of_uniform_model_is_inverse_vocab() {
    let data = toy_data();
    let cfg = toy_config();
    let mut state = SearchState::new(&cfg, data.vocab.len(), data.feature_dim).unwrap();
    let key = state.layout(&cfg, &cfg.macro_config).key();
    let bank = state.banks.banks.get_mut(&key).unwrap();
    for id in bank.store.ids().collect::<Vec<_>>() {
        bank.store.value_mut(id).scale_assign(0.0);
    }
    let net = bank.child(CellGenotype::chain(3, crate::activations::ActivationKind::Tanh).unwrap()).unwrap();
    let r = evaluate_child(&net, &bank.store, &data.val[..4], RewardMode::NegLoss, CiderVariant::CiderD, 8).unwrap();
    assert!((r.reward - 1.0 / data.vocab.len() as f64).abs() < 1e-12);
}

#[test]
fn cider_reward_matches_metric_module() {
    let data = toy_data();
    let cfg = toy_config();
    let state = SearchState::new(&cfg, data.vocab.len(), data.feature_dim).unwrap();
    let (net, bank) = state
        .child(&cfg, &state.controller.sample(&mut SeededRng::new(1), cfg.controller.policy).unwrap())
        .unwrap();
    let items = &data.val[..6];
    let r = evaluate_child(&net, &bank.store, items, RewardMode::MetricCider, CiderVariant::CiderD, 8).unwrap();
    let refs: Vec<Vec<Vec<usize>>> = items.iter().map(|i| i.refs.clone()).collect();
    assert_eq!(r.reward, cider(&r.decodes, &refs, CiderVariant::CiderD).unwrap());
    assert!(r.reward >= 0.0);
    assert!(evaluate_child(&net, &bank.store, &[], RewardMode::MetricCider, CiderVariant::CiderD, 8).is_err());
}

#[test]
fn zero_theta_updates_leave_controller_unchanged() {
    let data = toy_data();
    let cfg = SearchConfig {
        theta_updates: 0,
        ..toy_config()
    };
    let fresh = SearchState::new(&cfg, data.vocab.len(), data.feature_dim).unwrap();
    let run = run_search_in(&cfg, &data, None, false).unwrap();
    assert_eq!(run.state.controller.store, fresh.controller.store);
    assert_ne!(run.state.omega_checksum(), fresh.omega_checksum());
    assert_eq!(run.state.baseline, 0.0);
}

#[test]
fn phases_only_touch_their_own_parameters() {
    let data = toy_data();
    let run = run_search_in(&toy_config(), &data, None, false).unwrap();
    let bounds: Vec<&SearchEvent> = run
        .events
        .iter()
        .filter(|e| matches!(e.kind, EventKind::PhaseStart | EventKind::PhaseEnd))
        .collect();
    assert_eq!(bounds.len(), 8);
    for pair in bounds.chunks(2) {
        let (s, e) = (pair[0], pair[1]);
        assert_eq!(s.phase, e.phase);
        match s.phase {
            Phase::Omega => assert_eq!(s.theta_checksum, e.theta_checksum),
            Phase::Theta => assert_eq!(s.omega_checksum, e.omega_checksum),
        }
    }
}

#[test]
fn baseline_follows_the_moving_average() {
    let data = toy_data();
    let cfg = toy_config();
    let run = run_search_in(&cfg, &data, None, false).unwrap();
    let logged: Vec<f64> = run
        .events
        .iter()
        .filter(|e| e.kind == EventKind::Update)
        .map(|e| e.baseline)
        .collect();
    assert_eq!(logged.len(), cfg.epochs * cfg.theta_updates);
    assert_eq!(replay_baselines(&run.events, cfg.baseline_decay), logged);
    let first_mean = run.events.iter().find(|e| e.kind == EventKind::Update).unwrap().reward.unwrap();
    assert!((logged[0] - 0.05 * first_mean).abs() < 1e-15);
}

#[test]
fn search_is_deterministic() {
    let data = toy_data();
    let cfg = toy_config();
    let a = run_search_in(&cfg, &data, None, false).unwrap();
    let b = run_search_in(&cfg, &data, None, false).unwrap();
    assert_eq!(a.events, b.events);
    assert_eq!(a.state.omega_checksum(), b.state.omega_checksum());
    assert_eq!(a.state.theta_checksum(), b.state.theta_checksum());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = toy_data();
    let cfg = toy_config();
    let full_dir = tempfile::tempdir().unwrap();
    let part_dir = tempfile::tempdir().unwrap();
    let full = run_search_in(&cfg, &data, Some(full_dir.path()), false).unwrap();
    let short = SearchConfig { epochs: 1, ..cfg.clone() };
    run_search_in(&short, &data, Some(part_dir.path()), false).unwrap();
    let resumed = run_search_in(&cfg, &data, Some(part_dir.path()), true).unwrap();
    assert_eq!(full.events, resumed.events);
    assert_eq!(full.state.omega_checksum(), resumed.state.omega_checksum());
    assert_eq!(full.state.controller.store, resumed.state.controller.store);
    let log_a = std::fs::read(full_dir.path().join(LOG_FILE)).unwrap();
    let log_b = std::fs::read(part_dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log_a, log_b);
}

#[test]
fn resume_rejects_a_different_configuration() {
    let data = toy_data();
    let dir = tempfile::tempdir().unwrap();
    let cfg = SearchConfig { epochs: 1, ..toy_config() };
    run_search_in(&cfg, &data, Some(dir.path()), false).unwrap();
    let other = SearchConfig {
        epochs: 2,
        omega_lr: 1e-2,
        ..cfg
    };
    assert!(run_search_in(&other, &data, Some(dir.path()), true).is_err());
}

#[test]
fn derive_picks_the_best_candidate() {
    let data = toy_data();
    let cfg = toy_config();
    let run = run_search_in(&cfg, &data, None, false).unwrap();
    let d = derive(&run.state, &cfg, &data).unwrap();
    assert_eq!(d.candidates.len(), cfg.derive_samples);
    let best = d.candidates[d.best].reward;
    assert!(d.candidates.iter().all(|c| c.reward <= best));
    assert_eq!(d.spec.genotype, d.candidates[d.best].genotype);
    let csv = candidates_csv(&d.candidates, cfg.reward_mode);
    assert_eq!(csv.lines().count(), cfg.derive_samples + 1);
    assert!(csv.lines().nth(1).unwrap().starts_with(&format!("1,{},", d.best)));

    let single = SearchConfig {
        derive_samples: 1,
        ..cfg.clone()
    };
    let d1 = derive(&run.state, &single, &data).unwrap();
    assert_eq!((d1.best, d1.candidates.len()), (0, 1));
}

#[test]
fn child_warmup_steps_change_scores_deterministically() {
    let data = toy_data();
    let cfg = SearchConfig {
        child_eval_steps: 2,
        epochs: 1,
        ..toy_config()
    };
    let a = run_search_in(&cfg, &data, None, false).unwrap();
    let b = run_search_in(&cfg, &data, None, false).unwrap();
    assert_eq!(a.events, b.events);
}

#[test]
fn macro_search_creates_banks_per_signature() {
    let data = toy_data();
    let cfg = SearchConfig {
        search_macro: true,
        macro_config: MacroConfig {
            unrestricted_dims: true,
            ..MacroConfig::desk(3, 8)
        },
        macro_space: MacroSpace {
            embed_size: vec![6, 8],
            hidden_size: vec![8],
            label_smoothing: vec![0.0, 0.1],
            init_hidden_each_epoch: vec![true],
            tie_embeddings: vec![false, true],
        },
        epochs: 1,
        omega_steps: Some(8),
        ..toy_config()
    };
    let run = run_search_in(&cfg, &data, None, false).unwrap();
    assert!(run.state.banks.banks.len() > 1);
    let d = derive(&run.state, &cfg, &data).unwrap();
    assert_eq!(d.spec.macro_config, d.candidates[d.best].macro_config);
}

#[test]
fn reward_mode_parses() {
    assert_eq!("neg_loss".parse::<RewardMode>().unwrap(), RewardMode::NegLoss);
    assert!("cider".parse::<RewardMode>().is_err());
}
