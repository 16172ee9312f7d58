use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vessel_synth::nn::gradcheck;
use vessel_synth::nn::layers::{
    batchnorm_forward_train, conv2d_forward, crop_concat_forward, maxpool2_backward, maxpool2_forward, relu_forward,
    softmax2_probability, softmax_ce, upsample2_forward,
};
use vessel_synth::nn::{Checkpoint, GeneratedSource, LayerSpec, Network, NetworkSpec, Tensor, TrainConfig, Trainer};
use vessel_synth::{make_sample, GeneratorConfig, GrayImage, NnError, NoiseConfig};

fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Runs one train-mode pass so batch-norm layers have running statistics.
fn warmed_up(seed: u64) -> Network<f32> {
    let mut net = Network::<f32>::new(NetworkSpec::default_fcn(), seed).unwrap();
    let g = GeneratorConfig::default();
    let s = make_sample(&g, &NoiseConfig::default(), seed).unwrap();
    let x = Tensor::from_vec([1, 1, 128, 128], s.image.into_vec()).unwrap();
    net.forward_train(&x).unwrap();
    net
}

#[test]
fn layer_examples() {
    let ones = Tensor::<f64>::filled([1, 1, 3, 3], 1.0);
    let out = conv2d_forward(&ones, &ones, &[0.0], 1, 0).unwrap();
    assert_eq!(out.shape(), [1, 1, 1, 1]);
    assert_eq!(out.as_slice(), &[9.0]);

    let x = random_tensor([1, 1, 6, 5], 1);
    let mut ident = Tensor::<f64>::zeros([1, 1, 3, 3]);
    ident.as_mut_slice()[4] = 1.0;
    assert_eq!(conv2d_forward(&x, &ident, &[0.0], 1, 1).unwrap(), x);
    let err = conv2d_forward(&x, &Tensor::zeros([1, 2, 3, 3]), &[0.0], 1, 0).unwrap_err();
    assert!(err.to_string().contains("[1, 1, 6, 5]") && err.to_string().contains("[1, 2, 3, 3]"), "{err}");

    let r = relu_forward(&Tensor::from_vec([1, 1, 1, 3], vec![-1.0f64, 0.0, 2.0]).unwrap());
    assert_eq!(r.as_slice(), &[0.0, 0.0, 2.0]);

    let x = random_tensor([2, 3, 7, 6], 2);
    let (pooled, argmax) = maxpool2_forward(&x).unwrap();
    assert_eq!(pooled.shape(), [2, 3, 3, 3]);
    let d = random_tensor(pooled.shape(), 3);
    let back = maxpool2_backward(x.shape(), &argmax, &d);
    let (s_in, s_out): (f64, f64) = (back.as_slice().iter().sum(), d.as_slice().iter().sum());
    assert!((s_in - s_out).abs() < 1e-12);

    let c = Tensor::<f64>::filled([1, 2, 8, 8], 0.7);
    let round_trip = upsample2_forward(&maxpool2_forward(&c).unwrap().0);
    assert_eq!(round_trip, c);

    let deep = random_tensor([1, 1, 6, 6], 4);
    let skip = Tensor::<f64>::from_fn([1, 1, 10, 10], |i| i as f64);
    let cat = crop_concat_forward(&deep, &skip).unwrap();
    assert_eq!(cat.shape(), [1, 2, 6, 6]);
    assert_eq!(cat.channel(0, 0), deep.channel(0, 0));
    let expect: Vec<f64> = (2..8).flat_map(|y| (2..8).map(move |x| (y * 10 + x) as f64)).collect();
    assert_eq!(cat.channel(0, 1), &expect[..]);
    assert!(crop_concat_forward(&skip, &deep).is_err());
    let same = crop_concat_forward(&deep, &deep).unwrap();
    assert_eq!(same.channel(0, 1), deep.channel(0, 0));
}

#[test]
fn batchnorm_normalizes_each_channel() {
    let x = Tensor::<f64>::from_fn([3, 2, 4, 4], |i| (i as f64 * 0.37).sin() * 5.0 + 2.0);
    let c = x.channels();
    let (y, _) = batchnorm_forward_train(&x, &vec![1.0; c], &vec![0.0; c]).unwrap();
    for ch in 0..c {
        let vals: Vec<f64> = (0..3).flat_map(|n| y.channel(n, ch).to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-4, "{mean} {var}");
    }
    let (z, _) = batchnorm_forward_train(&y, &vec![1.0; c], &vec![0.0; c]).unwrap();
    for (a, b) in z.as_slice().iter().zip(y.as_slice()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn softmax_examples() {
    let flat = Tensor::<f64>::filled([2, 2, 3, 3], 0.4);
    let labels = Tensor::<f64>::from_fn([2, 1, 3, 3], |i| (i % 2) as f64);
    let (loss, _) = softmax_ce(&flat, &labels, true).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);

    let confident = Tensor::<f64>::from_fn([2, 2, 3, 3], |i| {
        let (n, c, p) = (i / 18, (i / 9) % 2, i % 9);
        let label = ((n * 9 + p) % 2) as f64;
        if c as f64 == label { 40.0 } else { -40.0 }
    });
    assert!(softmax_ce(&confident, &labels, true).unwrap().0 < 1e-30);

    let bad = Tensor::<f64>::filled([2, 1, 3, 3], 0.5);
    assert!(matches!(softmax_ce(&flat, &bad, true), Err(NnError::NonBinaryLabel { .. })));

    // Larger labels are center-cropped onto the logits.
    let big = Tensor::<f64>::zeros([2, 1, 7, 7]);
    assert!(softmax_ce(&flat, &big, true).is_ok());
    assert!(softmax_ce(&flat, &big, false).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn softmax_channels_sum_to_one(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let logits = random_tensor([2, 2, 4, 5], seed).map(|v| v * scale);
        let swapped = Tensor::from_fn(logits.shape(), |i| {
            let plane = 20;
            let (n, c, p) = (i / 40, (i / plane) % 2, i % plane);
            logits.as_slice()[n * 40 + (1 - c) * plane + p]
        });
        let p1 = softmax2_probability(&logits).unwrap();
        let p0 = softmax2_probability(&swapped).unwrap();
        for (a, b) in p1.as_slice().iter().zip(p0.as_slice()) {
            prop_assert!((a + b - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn every_layer_matches_finite_differences(seed in any::<u64>()) {
        let mut checks = gradcheck::check_conv2d(seed, 1, 0);
        checks.extend(gradcheck::check_conv2d(seed, 2, 1));
        checks.extend(gradcheck::check_batchnorm(seed));
        checks.extend(gradcheck::check_relu(seed));
        checks.extend(gradcheck::check_maxpool(seed));
        checks.extend(gradcheck::check_upsample(seed));
        checks.extend(gradcheck::check_crop_concat(seed));
        checks.extend(gradcheck::check_softmax_ce(seed));
        for c in checks {
            prop_assert!(c.passed(), "{}", c);
        }
    }
}

#[test]
fn reduced_network_matches_finite_differences() {
    for seed in 0..3 {
        for c in gradcheck::check_network(seed) {
            println!("{c}");
            assert!(c.passed(), "{c}");
        }
    }
}

#[test]
fn spec_lint() {
    let spec = NetworkSpec::default_fcn();
    assert_eq!(spec.layers.len(), 16);
    assert!(matches!(spec.layers[11], LayerSpec::CropConcat { source: 5 }));
    assert_eq!(*spec.channel_plan().unwrap().last().unwrap(), 2);
    // Every layer kind is local: no layer mixes all spatial positions.
    for l in &spec.layers {
        if let LayerSpec::Conv { kernel, .. } = l {
            assert!(*kernel <= 3);
        }
    }
    assert_eq!(spec.output_size(128, 128).unwrap(), (118, 118));
    assert_eq!(spec.output_size(256, 256).unwrap(), (246, 246));
    assert_eq!(spec.output_size(584, 565).unwrap(), (574, 554));
    let min = spec.min_input_dim().unwrap();
    assert!(spec.output_size(min, min).is_ok());
    let err = spec.output_size(min - 1, min - 1).unwrap_err();
    assert!(err.to_string().contains(&format!("minimum {min}")), "{err}");
}

#[test]
fn forward_is_size_portable_and_deterministic() {
    let net = warmed_up(5);
    for size in [128usize, 256] {
        let img = GrayImage::from_vec(size, size, (0..size * size).map(|i| ((i * 31) % 97) as f32 / 96.0).collect())
            .unwrap();
        let p = net.predict(&img).unwrap();
        assert_eq!(p.dims(), net.spec().output_size(size, size).map(|(h, w)| (w, h)).unwrap());
        assert_eq!(net.predict(&img).unwrap(), p);
    }
}

#[test]
fn constant_input_gives_constant_output() {
    let net = warmed_up(6);
    let p = net.predict(&GrayImage::filled(64, 64, 0.4)).unwrap();
    let first = p.get(0, 0);
    assert!(p.as_slice().iter().all(|&v| (v - first).abs() < 1e-6));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let net = warmed_up(7);
    let ckpt = Checkpoint { network: net.clone(), iteration: 3, rng: vessel_synth::nn::RngState::capture(&ChaCha8Rng::seed_from_u64(1)), velocity: None };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(loaded.iteration, 3);
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = GrayImage::from_vec(40, 36, (0..40 * 36).map(|_| rng.random()).collect()).unwrap();
        let a = net.predict(&img).unwrap();
        let b = loaded.network.predict(&img).unwrap();
        assert_eq!(
            a.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes), Err(NnError::Format(_))));
}

fn small_source() -> GeneratedSource {
    let generator = GeneratorConfig {
        image_size: 40,
        circle_center: [20, 20],
        circle_radius: 16.0,
        mean_length: 6.0,
        sigma_length: 2.0,
        ..GeneratorConfig::default()
    };
    let noise = NoiseConfig { patch_size: 12, ..NoiseConfig::default() };
    GeneratedSource { generator, noise }
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let cfg = TrainConfig { iterations: 12, checkpoint_every: 5, seed: 21, ..TrainConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let mut straight = Trainer::new(Network::<f32>::new(NetworkSpec::default_fcn(), 21).unwrap(), cfg.clone());
    let log = straight.run(&mut small_source(), Some(dir.path())).unwrap();
    assert_eq!(log.losses.len(), 12);

    let ckpt = Checkpoint::<f32>::load(&dir.path().join("checkpoint_0000005.ckpt")).unwrap();
    assert_eq!(ckpt.iteration, 5);
    let mut resumed = Trainer::resume(ckpt, cfg);
    let tail = resumed.run(&mut small_source(), None).unwrap();
    assert_eq!(tail.losses, log.losses[5..]);
    let bits = |n: &Network<f32>| -> Vec<u32> { n.parameters().iter().flat_map(|p| p.iter().map(|v| v.to_bits())).collect() };
    assert_eq!(bits(resumed.network()), bits(straight.network()));

    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("iteration,loss"));
    assert_eq!(csv.lines().count(), 13);
    assert!(dir.path().join("final.ckpt").exists());
}

#[test]
fn fixed_sample_loss_goes_down() {
    let src = small_source();
    let s = make_sample(&src.generator, &src.noise, 8).unwrap();
    let batch = vec![(s.image, s.label)];
    let mut t = Trainer::new(Network::<f32>::new(NetworkSpec::default_fcn(), 8).unwrap(), TrainConfig::default());
    let initial = t.probe_loss(&batch).unwrap();
    for _ in 0..60 {
        t.step_on(&batch).unwrap();
    }
    let last = t.probe_loss(&batch).unwrap();
    assert!(last < initial, "{initial} -> {last}");
}
