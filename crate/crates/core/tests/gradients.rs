mod common;

use autornn::activations::ActivationKind;
use autornn::numkernel::gradcheck::{central_difference, check_gradients, rel_err, GradCheck, DEFAULT_STEP};
use autornn::numkernel::{Eager, Graph, Matrix, ParamStore, SeededRng, Tape};
use autornn::supernet::CaptionNet;

const TOLERANCE: f64 = 1e-4;
const INSTANCES: usize = 100;

fn kinds() -> Vec<ActivationKind> {
    let mut kinds = ActivationKind::ALL.to_vec();
    kinds.push(ActivationKind::Celu { alpha: 0.5 });
    kinds.push(ActivationKind::Celu { alpha: 2.0 });
    kinds
}

fn random_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.normal();
    }
    m
}

#[test]
fn scalar_derivatives_match_central_differences() {
    let mut rng = SeededRng::new(11);
    for kind in kinds() {
        let mut worst: f64 = 0.0;
        let mut n = 0;
        while n < INSTANCES {
            let x = rng.uniform_range(-4.0, 4.0);
            if x.abs() < 1e-3 {
                continue;
            }
            let numeric = central_difference(|v| kind.apply_scalar(v), x, DEFAULT_STEP);
            worst = worst.max(rel_err(kind.derivative_scalar(x), numeric));
            n += 1;
        }
        assert!(worst < TOLERANCE, "{kind}: {worst}");
    }
}

#[test]
fn activation_op_backward_matches_central_differences() {
    let mut rng = SeededRng::new(12);
    for kind in kinds() {
        for _ in 0..10 {
            let mut store = ParamStore::new();
            let id = store.insert("x", random_matrix(3, 4, &mut rng).scaled(2.0)).unwrap();
            let r = random_matrix(3, 4, &mut rng);
            let mut tape = Tape::new();
            let x = tape.param(&store, id);
            let y = tape.activation(kind, &x);
            let rc = tape.constant(r.clone());
            let p = tape.mul(&y, &rc);
            let l = tape.sum(&p);
            let grads = tape.backward(l).unwrap();
            let check = check_gradients(&store, &grads, None, &mut rng, |s| {
                let mut g = Eager::new();
                let x = g.param(s, id);
                let y = g.activation(kind, &x);
                let rc = g.constant(r.clone());
                let p = g.mul(&y, &rc);
                Ok(g.sum(&p).item())
            })
            .unwrap();
            assert!(check.max_rel_err < TOLERANCE, "{kind}: {check:?}");
        }
    }
}

fn cell_loss<G: Graph>(g: &mut G, net: &CaptionNet, store: &ParamStore, x: &Matrix, h: &Matrix, r: &Matrix) -> G::Var {
    let p = net.bind(g, store).unwrap();
    let xv = g.constant(x.clone());
    let hv = g.constant(h.clone());
    let out = net.cell_step(g, &p, &xv, &hv).unwrap();
    let rv = g.constant(r.clone());
    let prod = g.mul(&out, &rv);
    g.sum(&prod)
}

#[test]
fn cell_step_backward_matches_central_differences() {
    let mut rng = SeededRng::new(13);
    let mut total = GradCheck::default();
    for _ in 0..INSTANCES {
        let (net, bank) = common::random_net(&mut rng, 6);
        let store = common::subset(&bank.store, &net);
        let rows = 1 + rng.below(3);
        let x = random_matrix(rows, net.layout.embed, &mut rng);
        let h = random_matrix(rows, net.layout.hidden, &mut rng);
        let r = random_matrix(rows, net.layout.hidden, &mut rng);
        let mut tape = Tape::new();
        let l = cell_loss(&mut tape, &net, &store, &x, &h, &r);
        let grads = tape.backward(l).unwrap();
        let check = check_gradients(&store, &grads, None, &mut rng, |s| {
            Ok(cell_loss(&mut Eager::new(), &net, s, &x, &h, &r).item())
        })
        .unwrap();
        assert!(check.max_rel_err < TOLERANCE, "{} {:?}", net.genotype, check);
        total = total.merge(check);
    }
    assert!(total.checked > 10_000);
}

#[test]
fn sequence_backward_matches_central_differences() {
    let mut rng = SeededRng::new(14);
    let mut total = GradCheck::default();
    for k in 0..INSTANCES {
        let (net, bank) = common::random_net(&mut rng, 4);
        let store = common::subset(&bank.store, &net);
        let batch = common::random_batch(&net.layout, 1 + rng.below(3), &mut rng);
        let weights: Vec<f64> = (0..batch.size()).map(|_| rng.uniform_range(0.2, 2.0)).collect();
        let smoothing = if k % 2 == 0 { 0.0 } else { 0.1 };
        let h0 = (k % 3 == 0).then(|| random_matrix(batch.size(), net.layout.hidden, &mut rng));
        let run = |g: &mut Tape, s: &ParamStore| {
            net.forward(g, s, &batch, Some(&weights), smoothing, batch.target_count(), h0.as_ref())
                .unwrap()
                .loss
        };
        let mut tape = Tape::new();
        let l = run(&mut tape, &store);
        let grads = tape.backward(l).unwrap();
        let check = check_gradients(&store, &grads, None, &mut rng, |s| {
            let mut g = Eager::new();
            let out = net.forward(&mut g, s, &batch, Some(&weights), smoothing, batch.target_count(), h0.as_ref())?;
            Ok(out.loss.item())
        })
        .unwrap();
        assert!(check.max_rel_err < TOLERANCE, "{} {:?}", net.genotype, check);
        total = total.merge(check);
    }
    assert!(total.checked > 10_000);
}
