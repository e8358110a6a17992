use eegmel::numerics::{GradCheckOptions, OpKind, Tape, Tensor};
use eegmel::selftest::{layer_grad_check, op_grad_check, LAYER_CHECKS};

#[test]
fn every_op_matches_finite_differences_over_ten_seeds() {
    let opts = GradCheckOptions::new(1e-6, 1e-5);
    let mut failures = Vec::new();
    for kind in OpKind::ALL {
        for seed in 0..10 {
            let r = op_grad_check(kind, seed, &opts).unwrap();
            if !r.passed() {
                failures.push(format!("{} seed {seed}: {:?}", kind.name(), r.worst));
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn every_layer_matches_finite_differences() {
    let opts = GradCheckOptions::new(1e-5, 1e-4);
    for name in LAYER_CHECKS {
        let r = layer_grad_check(name, 3, &opts).unwrap();
        assert!(r.passed(), "{name}: max rel err {} worst {:?}", r.max_rel_err, r.worst);
    }
}

#[test]
fn corrupted_backward_rule_is_detected() {
    for kind in OpKind::ALL {
        let mut opts = GradCheckOptions::new(1e-6, 1e-5);
        opts.fault = Some(kind);
        let r = op_grad_check(kind, 0, &opts).unwrap();
        assert!(!r.passed(), "fault in {} went unnoticed", kind.name());
    }
}

#[test]
fn shared_leaf_accumulates() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, -2.0]), true);
    let y = tape.add(x, x).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn mean_of_matmul_matches_finite_differences() {
    let mut rng = eegmel::rng::Rng::new(8);
    let w = Tensor::zeros(&[3, 4]).map(|_| rng.normal());
    let x = Tensor::zeros(&[2, 3]).map(|_| rng.normal());
    let r = eegmel::numerics::grad_check(&[x], &GradCheckOptions::new(1e-6, 1e-6), |t, v| {
        let wv = t.constant(w.clone());
        let y = t.matmul(v[0], wv)?;
        t.mean(y)
    })
    .unwrap();
    assert!(r.passed(), "{:?}", r.worst);
}
