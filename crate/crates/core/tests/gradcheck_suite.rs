use tmanet::gradcheck::{end_to_end_fixture, model_grad_check, op_suite, DEFAULT_EPS};

#[test]
fn every_op_matches_finite_differences() {
    for r in op_suite(5).unwrap() {
        assert!(r.max_rel_error < 1e-4, "{} {}", r.name, r.max_rel_error);
    }
}

#[test]
fn end_to_end_model_gradients() {
    let (model, clip) = end_to_end_fixture().unwrap();
    let t = std::time::Instant::now();
    let results = model_grad_check(&model, &clip, 0.4, DEFAULT_EPS).unwrap();
    let worst = results.iter().cloned().fold(("".to_string(), 0.0f64), |a, r| if r.max_rel_error > a.1 { (r.name, r.max_rel_error) } else { a });
    eprintln!("params {} worst {:?} in {:?}", model.params().num_scalars(), worst, t.elapsed());
    assert!(worst.1 < 1e-4, "{worst:?}");
}
