use autornn::activations::ActivationKind;
use autornn::datapipe::{prepare, synth_generate, PreparedData, SyntheticSceneSpec, BOS};
use autornn::evalgen::{cider_scorer, features_of, scst_finetune, CiderVariant, ScstConfig, StepModel};
use autornn::genotype::{CellGenotype, MacroConfig, NodeSemantics};
use autornn::numkernel::SeededRng;
use autornn::supernet::{BankLayout, CaptionNet, StandaloneModel};

fn data() -> PreparedData {
    prepare(&synth_generate(&SyntheticSceneSpec::default(), 200, 4).unwrap(), 1).unwrap()
}

fn model(d: &PreparedData, seed: u64) -> StandaloneModel {
    let m = MacroConfig::desk(2, 16);
    let layout = BankLayout::new(&m, NodeSemantics::Plain, d.vocab.len(), d.feature_dim);
    let g = CellGenotype::chain(2, ActivationKind::Tanh).unwrap();
    StandaloneModel::fresh(CaptionNet::new(layout, g).unwrap(), &mut SeededRng::new(seed)).unwrap()
}

/// Mean probability of `token` along each item's greedy path.
fn path_probability(m: &StandaloneModel, d: &PreparedData, token: usize) -> f64 {
    let items: Vec<_> = d.val.iter().collect();
    let dec = m.net.decoder(&m.store);
    let mut state = dec.start(&features_of(&items)).unwrap();
    let mut tokens = vec![BOS; items.len()];
    let (mut total, steps) = (0.0, 8);
    for _ in 0..steps {
        let (logp, next) = dec.step(&state, &tokens).unwrap();
        total += (0..items.len()).map(|r| logp.get(r, token).exp()).sum::<f64>();
        tokens = logp.argmax_rows();
        state = next;
    }
    total / (steps * items.len()) as f64
}

#[test]
fn equal_rewards_leave_the_model_untouched() {
    let d = data();
    let mut m = model(&d, 1);
    let before = m.store.clone();
    let cfg = ScstConfig {
        epochs: 2,
        max_len: 8,
        ..ScstConfig::default()
    };
    let log = scst_finetune(&mut m, &d.train_items[..32], &|_, _| 0.5, &cfg).unwrap();
    assert!(log.iter().all(|s| !s.updated && s.sample_reward == s.greedy_reward));
    assert_eq!(m.store, before);
}

#[test]
fn rigged_token_reward_raises_that_token() {
    let d = data();
    let token = d.vocab.id("dog");
    let mut m = model(&d, 2);
    let before = path_probability(&m, &d, token);
    let cfg = ScstConfig {
        lr: 1e-3,
        epochs: 100,
        batch_size: 16,
        max_len: 8,
        seed: 3,
        ..ScstConfig::default()
    };
    let reward = |_: usize, ids: &[usize]| ids.iter().filter(|&&t| t == token).count() as f64;
    let log = scst_finetune(&mut m, &d.train_items[..32], &reward, &cfg).unwrap();
    assert_eq!(log.len(), 200);
    let after = path_probability(&m, &d, token);
    println!("p(dog) {before:.4} -> {after:.4}");
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn cider_finetuning_is_deterministic() {
    let d = data();
    let items = &d.train_items[..24];
    let scorer = cider_scorer(items, CiderVariant::CiderD).unwrap();
    let reward = |i: usize, ids: &[usize]| scorer.score(ids, &items[i].refs);
    let cfg = ScstConfig {
        epochs: 2,
        batch_size: 8,
        max_len: 8,
        ..ScstConfig::default()
    };
    let (mut a, mut b) = (model(&d, 5), model(&d, 5));
    let la = scst_finetune(&mut a, items, &reward, &cfg).unwrap();
    let lb = scst_finetune(&mut b, items, &reward, &cfg).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.store, b.store);
}
