use holue_core::holue::{fit_mlp, mlp_predict, MlpCalibrator, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_set(seed: u64, n: usize) -> (Vec<[f64; 2]>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)])
        .collect();
    let y = x.iter().map(|p| p[0] + p[1] > 0.0).collect();
    (x, y)
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..5 {
        let mut net = MlpCalibrator::random(TrainConfig::default(), trial);
        // perturb biases too so every parameter is exercised
        let mut params: Vec<f64> = net.params().into_iter().map(|p| p + rng.gen_range(-0.3..0.3)).collect();
        net.set_params(&params);
        let (x, y) = toy_set(trial + 100, 12);
        let (_, grad) = net.loss_and_gradient(&x, &y);
        let h = 1e-5;
        let mut worst = 0.0_f64;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + h;
            net.set_params(&params);
            let plus = net.loss_and_gradient(&x, &y).0;
            params[i] = orig - h;
            net.set_params(&params);
            let minus = net.loss_and_gradient(&x, &y).0;
            params[i] = orig;
            net.set_params(&params);
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-4);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-6, "trial {trial}: worst relative error {worst:e}");
    }
}

#[test]
fn toy_separable_training() {
    let (x, y) = toy_set(7, 200);
    let net = fit_mlp(&x, &y, TrainConfig::default(), 3).unwrap();
    let correct = x
        .iter()
        .zip(&y)
        .filter(|(p, &label)| (mlp_predict(&net, p[0], p[1]) > 0.5) == label)
        .count();
    let accuracy = correct as f64 / x.len() as f64;
    assert!(accuracy >= 0.99, "accuracy {accuracy}");
    assert!(mlp_predict(&net, 2.5, 2.5) > 0.9);
    assert!(mlp_predict(&net, -2.5, -2.5) < 0.1);
}

#[test]
fn training_is_deterministic() {
    let (x, y) = toy_set(1, 60);
    let cfg = TrainConfig { epochs: 200, ..TrainConfig::default() };
    let a = fit_mlp(&x, &y, cfg, 5).unwrap();
    let b = fit_mlp(&x, &y, cfg, 5).unwrap();
    let bits = |n: &MlpCalibrator| n.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    let c = fit_mlp(&x, &y, cfg, 6).unwrap();
    assert_ne!(bits(&a), bits(&c));
}
