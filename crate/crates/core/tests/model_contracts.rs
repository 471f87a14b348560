use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symwd_core::model::{ArchSpec, IndependentPair, ParamSet, SymbioticNet};
use symwd_core::Tensor;

fn random_images(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 1, 28, 28], |_| rng.gen_range(0.0..1.0f32)).unwrap()
}

#[test]
fn parameter_count_matches_layer_arithmetic() {
    // conv 1→16: 16·9+16; conv 16→32: 32·16·9+32; dense 1568→64: 1568·64+64.
    let encoder = 160 + 4_640 + 100_416;
    let classifier = 64 * 10 + 10;
    // dense 64→1568, tconv 32→16, tconv 16→1.
    let decoder = 101_920 + 4_624 + 145;
    let net = SymbioticNet::build(0);
    assert_eq!(net.encoder.param_count(), encoder);
    assert_eq!(net.classifier.param_count(), classifier);
    assert_eq!(net.decoder.param_count(), decoder);
    assert_eq!(net.param_count(), 212_555);
    assert_eq!(ArchSpec::default().param_counts(), (encoder, classifier, decoder));
    assert_eq!(IndependentPair::build(0).param_count(), 2 * encoder + classifier + decoder);
}

#[test]
fn same_seed_same_params_different_seed_differs() {
    let a = SymbioticNet::build(11);
    let b = SymbioticNet::build(11);
    let c = SymbioticNet::build(12);
    for ((name, x), (_, y)) in a.params().into_iter().zip(b.params()) {
        assert_eq!(x.data(), y.data(), "{name}");
    }
    let differing = a.params().into_iter().zip(c.params()).filter(|((_, x), (_, y))| x.data() != y.data()).count();
    assert!(differing >= 3, "only {differing} tensors differ");
}

#[test]
fn heads_consume_the_same_latent() {
    let net = SymbioticNet::build(5);
    let x = random_images(4, 1);
    let out = net.forward_with_latent(&x).unwrap();
    assert_eq!(out.latent.shape(), &[4, 64]);
    assert_eq!(net.classifier.forward(&out.latent).unwrap(), out.class_probs);
    assert_eq!(net.decoder.forward(&out.latent).unwrap(), out.reconstruction);
    assert_eq!(net.encoder.forward(&x).unwrap(), out.latent);
}

#[test]
fn outputs_are_distributions_and_sigmoid_range() {
    let net = SymbioticNet::build(2);
    let (p, r) = net.forward(&random_images(6, 2)).unwrap();
    for i in 0..6 {
        let s: f32 = p.row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
    assert!(r.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn batch_independence() {
    let net = SymbioticNet::build(9);
    let batch = random_images(8, 3);
    let (p8, r8) = net.forward(&batch).unwrap();
    for i in [0, 5, 7] {
        let single = batch.gather_rows(&[i]).unwrap();
        let (p1, r1) = net.forward(&single).unwrap();
        for (a, b) in p1.data().iter().zip(p8.row(i)) {
            assert!((a - b).abs() < 1e-6);
        }
        let r8_i = r8.gather_rows(&[i]).unwrap();
        for (a, b) in r1.data().iter().zip(r8_i.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn untrained_classifier_is_near_uniform() {
    let x = random_images(4, 4);
    for seed in 0..100 {
        let net = SymbioticNet::build(seed);
        let (p, _) = net.forward(&x).unwrap();
        for &v in p.data() {
            assert!((v - 0.1).abs() <= 0.25, "seed {seed}: {v}");
        }
    }
}

#[test]
fn classifier_paths_share_layer_shapes() {
    let sym = SymbioticNet::build(0);
    let pair = IndependentPair::build(0);
    let a: Vec<Vec<usize>> = sym.encoder.params().iter().chain(sym.classifier.params().iter()).map(|(_, t)| t.shape().to_vec()).collect();
    let b: Vec<Vec<usize>> = pair.classifier.params().iter().map(|(_, t)| t.shape().to_vec()).collect();
    assert_eq!(a, b);
}
