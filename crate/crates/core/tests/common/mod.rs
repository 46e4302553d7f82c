#![allow(dead_code)]

use autornn::datapipe::{Batch, EncodedExample, BOS, EOS};
use autornn::genotype::{CellGenotype, NodeSemantics};
use autornn::numkernel::{ParamStore, SeededRng};
use autornn::supernet::{BankLayout, CaptionNet, SharedParamBank};

pub fn random_layout(rng: &mut SeededRng, n_max: usize) -> BankLayout {
    BankLayout {
        n_max,
        embed: 2 + rng.below(4),
        hidden: 2 + rng.below(4),
        vocab: 6 + rng.below(4),
        feature_dim: 3 + rng.below(3),
        tie_embeddings: rng.below(2) == 1,
        semantics: if rng.below(2) == 1 {
            NodeSemantics::Gated
        } else {
            NodeSemantics::Plain
        },
    }
}

/// A bank whose weights are O(1), so activations leave their linear regime.
pub fn random_bank(layout: BankLayout, rng: &mut SeededRng, scale: f64) -> SharedParamBank {
    let mut bank = SharedParamBank::init(layout, rng).unwrap();
    for id in bank.store.ids().collect::<Vec<_>>() {
        for v in bank.store.value_mut(id).data_mut() {
            *v = scale * rng.normal();
        }
    }
    bank
}

pub fn random_net(rng: &mut SeededRng, n_max: usize) -> (CaptionNet, SharedParamBank) {
    let layout = random_layout(rng, n_max);
    let n = 1 + rng.below(n_max);
    let alpha = 0.5 + rng.uniform();
    let genotype = CellGenotype::random(rng, n, alpha).unwrap();
    let bank = random_bank(layout.clone(), rng, 0.7);
    (CaptionNet::new(layout, genotype).unwrap(), bank)
}

pub fn random_batch(layout: &BankLayout, rows: usize, rng: &mut SeededRng) -> Batch {
    let examples: Vec<EncodedExample> = (0..rows)
        .map(|k| EncodedExample {
            image_id: k.to_string(),
            ids: std::iter::once(BOS)
                .chain((0..1 + rng.below(4)).map(|_| 4 + rng.below(layout.vocab - 4)))
                .chain(std::iter::once(EOS))
                .collect(),
            feature: (0..layout.feature_dim).map(|_| rng.normal()).collect(),
        })
        .collect();
    let refs: Vec<&EncodedExample> = examples.iter().collect();
    Batch::from_examples(&refs)
}

pub fn subset(store: &ParamStore, net: &CaptionNet) -> ParamStore {
    net.extract(store).unwrap()
}
