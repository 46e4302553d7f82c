use autornn::datapipe::{batch_iter, EncodedExample};
use autornn::evalgen::{CiderVariant, MetricReport};
use autornn::genotype::{
    genotype_param_count, param_count, CellGenotype, GenotypeSpec, MacroConfig, NodeSemantics,
};
use autornn::numkernel::{noam_lr, Matrix, SeededRng};
use proptest::prelude::*;

fn genotype(seed: u64, n: usize) -> CellGenotype {
    CellGenotype::random(&mut SeededRng::new(seed), n, 1.0).unwrap()
}

fn corpus() -> impl Strategy<Value = (Vec<Vec<u8>>, Vec<Vec<Vec<u8>>>)> {
    prop::collection::vec(
        (
            prop::collection::vec(0u8..6, 1..8),
            prop::collection::vec(prop::collection::vec(0u8..6, 1..8), 1..4),
        ),
        2..8,
    )
    .prop_map(|items| items.into_iter().unzip())
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn random_genotypes_are_valid_trees(seed in any::<u64>(), n in 1usize..13) {
        let g = genotype(seed, n);
        prop_assert_eq!(g.n_blocks(), n);
        prop_assert_eq!(g.topological_order().map(|o| o.len()), Some(n));
        let leaves = g.leaf_set();
        prop_assert!(leaves.contains(&n));
        for i in 2..=n {
            let p = g.node(i).prev.unwrap();
            prop_assert!(p >= 1 && p < i);
            prop_assert!(!leaves.contains(&p));
        }
    }

    #[test]
    fn genotype_text_and_json_round_trip(seed in any::<u64>(), n in 1usize..13, gated in any::<bool>()) {
        let g = genotype(seed, n);
        prop_assert_eq!(g.to_string().parse::<CellGenotype>().unwrap(), g.clone());
        let spec = GenotypeSpec {
            genotype: g,
            macro_config: MacroConfig::desk(n, 32),
            semantics: if gated { NodeSemantics::Gated } else { NodeSemantics::Plain },
        };
        prop_assert_eq!(GenotypeSpec::from_json(&spec.to_json().unwrap()).unwrap(), spec);
    }

    #[test]
    fn cell_size_depends_only_on_dimensions(seed in any::<u64>(), n in 1usize..13, e in 1usize..64, h in 1usize..64) {
        let m = MacroConfig { n_blocks: n, embed_size: e, hidden_size: h, unrestricted_dims: true, ..MacroConfig::default() };
        for sem in [NodeSemantics::Plain, NodeSemantics::Gated] {
            prop_assert_eq!(genotype_param_count(&genotype(seed, n), &m, sem), param_count(n, e, h, sem));
        }
    }

    #[test]
    fn metrics_ignore_corpus_order((cands, refs) in corpus(), seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..cands.len()).collect();
        SeededRng::new(seed).shuffle(&mut order);
        let pc: Vec<_> = order.iter().map(|&i| cands[i].clone()).collect();
        let pr: Vec<_> = order.iter().map(|&i| refs[i].clone()).collect();
        let a = MetricReport::compute(&cands, &refs, CiderVariant::CiderD).unwrap();
        let b = MetricReport::compute(&pc, &pr, CiderVariant::CiderD).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
        for v in &a.values()[..5] {
            prop_assert!((0.0..=1.0 + 1e-12).contains(v));
        }
        prop_assert!(a.cider >= 0.0);
    }

    #[test]
    fn echoing_the_references_scores_the_ceiling(refs in prop::collection::vec(prop::collection::vec(0u8..20, 4..9), 2..6)) {
        let nested: Vec<Vec<Vec<u8>>> = refs.iter().map(|r| vec![r.clone()]).collect();
        let m = MetricReport::compute(&refs, &nested, CiderVariant::CiderD).unwrap();
        for v in &m.values()[..5] {
            prop_assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-30.0f64..30.0, 12), shift in -50.0f64..50.0) {
        let m = Matrix::from_vec(3, 4, data).unwrap();
        let p = m.softmax_rows();
        for r in 0..3 {
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted = m.map(|v| v + shift).log_softmax_rows();
        let plain = m.log_softmax_rows();
        for (a, b) in shifted.data().iter().zip(plain.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn each_epoch_visits_every_example_once(n in 1usize..60, bs in 1usize..17, seed in any::<u64>(), epoch in 0u64..5) {
        let examples: Vec<EncodedExample> = (0..n)
            .map(|k| EncodedExample { image_id: k.to_string(), ids: vec![1, 4 + k % 3, 2], feature: vec![k as f64] })
            .collect();
        let batches = batch_iter(&examples, bs, seed, epoch);
        prop_assert_eq!(batches.len(), n.div_ceil(bs));
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.image_ids.iter().map(|s| s.parse::<usize>().unwrap())).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn noam_peaks_at_warmup(warmup in 1u64..500, dim in 1usize..1024, step in 1u64..5000) {
        let peak = noam_lr(warmup, dim, warmup).unwrap();
        prop_assert!(noam_lr(step, dim, warmup).unwrap() <= peak * (1.0 + 1e-12));
    }
}
