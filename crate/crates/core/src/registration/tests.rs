use alloc::vec;
use alloc::vec::Vec;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::fieldcheck::{check_field, smooth_random_field};
use crate::masrnet::NetConfig;
use crate::phantom;
use crate::volume::gaussian_smooth;

fn random_features(dims: Dims, channels: usize, seed: u64) -> FeatureField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..dims.len() * channels).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureField::new(dims, channels, data).unwrap().smoothed(1.0).unwrap()
}

fn smooth_volume(dims: Dims, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = Volume::from_fn(dims, |_| rng.random_range(0.0..1.0));
    gaussian_smooth(&v, 1.5).unwrap().normalized()
}

#[test]
fn pyramid_shapes_and_constants() {
    let d = random_features(Dims::cube(32), 2, 1);
    let p = dsir_pyramid(&d, &[0.5, 0.75, 1.0]).unwrap();
    let dims: Vec<Dims> = p.iter().map(|f| f.dims).collect();
    assert_eq!(dims, vec![Dims::cube(16), Dims::cube(24), Dims::cube(32)]);
    assert_eq!(p[2], d);
    assert_eq!(dsir_pyramid(&d, &[1.0]).unwrap(), vec![d]);
    let c = FeatureField::new(Dims::cube(8), 2, [0.25, -3.0].repeat(512)).unwrap();
    for level in dsir_pyramid(&c, &[0.5, 0.75, 1.0]).unwrap() {
        for v in level.data.chunks_exact(2) {
            assert_abs_diff_eq!(v[0], 0.25, epsilon = 1e-12);
            assert_abs_diff_eq!(v[1], -3.0, epsilon = 1e-12);
        }
    }
}

#[test]
fn similarity_dns_examples() {
    let dims = Dims::cube(6);
    let d = random_features(dims, 4, 2);
    let zero = DisplacementField::zeros(dims);
    assert_abs_diff_eq!(similarity_dns(&d, &d, &zero, 1.0).unwrap(), -1.0, epsilon = 1e-9);
    let mut neg = d.clone();
    neg.data.iter_mut().for_each(|x| *x = -*x);
    assert_abs_diff_eq!(similarity_dns(&d, &neg, &zero, 1.0).unwrap(), 1.0, epsilon = 1e-9);
    let other = random_features(dims, 3, 3);
    assert!(similarity_dns(&d, &other, &zero, 1.0).is_err());
    assert!(similarity_dns(&d, &d, &DisplacementField::zeros(Dims::cube(5)), 1.0).is_err());
}

#[test]
fn similarity_dns_gradient() {
    let dims = Dims::cube(8);
    let f = random_features(dims, 4, 4);
    let m = random_features(dims, 4, 5);
    let phi = smooth_random_field(dims, 1.0, 6);
    for sigma in [0.0, 1.0] {
        let (_, grad) = similarity_dns_grad(&f, &m, &phi, sigma).unwrap();
        let err = check_field(&phi, &grad, 300, |p| similarity_dns(&f, &m, p, sigma).unwrap());
        assert!(err < 1e-3, "similarity_dns rel err {err} at sigma {sigma}");
    }
}

#[test]
fn regularity_examples() {
    let dims = Dims::cube(6);
    assert_eq!(regularity(&DisplacementField::zeros(dims)).unwrap(), 0.0);
    assert_eq!(regularity(&DisplacementField::from_fn(dims, |_| [1.5, -2.0, 0.3])).unwrap(), 0.0);
    let half = DisplacementField::from_fn(dims, |c| c.map(|x| 0.5 * x as f64));
    assert_abs_diff_eq!(regularity(&half).unwrap(), 0.75, epsilon = 1e-12);
}

#[test]
fn regularity_gradient() {
    let dims = Dims::new(5, 6, 7);
    let phi = smooth_random_field(dims, 2.0, 7);
    let (value, grad) = regularity_grad(&phi).unwrap();
    assert_abs_diff_eq!(value, regularity(&phi).unwrap(), epsilon = 1e-12);
    let err = check_field(&phi, &grad, 400, |p| regularity(p).unwrap());
    assert!(err < 1e-4, "regularity rel err {err}");
}

fn level(iterations: usize, lambda: f64) -> LevelConfig {
    LevelConfig { learning_rate: 1e-2, iterations, lambda }
}

#[test]
fn identical_inputs_stay_near_zero() {
    let dims = Dims::cube(12);
    let d = random_features(dims, 4, 8);
    let inputs = LevelInputs::Dns { fixed: &d, moving: &d };
    let (phi, trace) = optimize_level(&inputs, &DisplacementField::zeros(dims), &level(30, 0.5), 0).unwrap();
    assert_eq!(trace.len(), 30);
    assert!(phi.mean_magnitude(None) < 0.1);
}

#[test]
fn zero_iterations_return_the_initial_field() {
    let dims = Dims::cube(6);
    let d = random_features(dims, 3, 9);
    let e = random_features(dims, 3, 10);
    let init = smooth_random_field(dims, 1.0, 11);
    let (phi, trace) = optimize_level(&LevelInputs::Dns { fixed: &d, moving: &e }, &init, &level(0, 0.5), 0).unwrap();
    assert_eq!(phi, init);
    assert!(trace.is_empty());
}

#[test]
fn heavy_regularization_gives_a_smoother_field() {
    let dims = Dims::cube(10);
    let f = random_features(dims, 4, 12);
    let m = random_features(dims, 4, 13);
    let zero = DisplacementField::zeros(dims);
    let inputs = LevelInputs::Dns { fixed: &f, moving: &m };
    let (free, _) = optimize_level(&inputs, &zero, &level(40, 0.0), 0).unwrap();
    let (stiff, _) = optimize_level(&inputs, &zero, &level(40, 1e6), 0).unwrap();
    assert!(regularity(&stiff).unwrap() < regularity(&free).unwrap());
}

#[test]
fn returns_the_best_iterate() {
    let dims = Dims::cube(8);
    let f = random_features(dims, 4, 14);
    let m = random_features(dims, 4, 15);
    let cfg = LevelConfig { learning_rate: 0.5, iterations: 25, lambda: 0.1 };
    let inputs = LevelInputs::Dns { fixed: &f, moving: &m };
    let (phi, trace) = optimize_level(&inputs, &DisplacementField::zeros(dims), &cfg, 2).unwrap();
    let best = trace.iter().map(|r| r.total).fold(f64::INFINITY, f64::min);
    let sim = cosine_loss_grad(&f, &m, &phi).unwrap().0;
    assert_abs_diff_eq!(sim + 0.1 * regularity(&phi).unwrap(), best, epsilon = 1e-12);
    assert!(trace.iter().all(|r| r.level == 2));
    let mut envelope = f64::INFINITY;
    for r in &trace {
        let next = envelope.min(r.total);
        assert!(next <= envelope);
        envelope = next;
    }
}

#[test]
fn config_validation() {
    assert!(RegistrationConfig::default().validate().is_ok());
    let bad = [
        RegistrationConfig { scales: vec![], learning_rates: vec![], iterations: vec![], lambdas: vec![], ..Default::default() },
        RegistrationConfig { lambdas: vec![0.6, 0.5], ..Default::default() },
        RegistrationConfig { learning_rates: vec![1e-2, 0.0, 3e-3], ..Default::default() },
        RegistrationConfig { lambdas: vec![0.6, -0.5, 0.4], ..Default::default() },
        RegistrationConfig { scales: vec![0.5, 0.75, 1.5], ..Default::default() },
        RegistrationConfig { sigma: -1.0, ..Default::default() },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
    assert_eq!("MIND".parse::<Metric>().unwrap(), Metric::Mind);
    assert!("ssd".parse::<Metric>().is_err());
}

fn short(metric: Metric) -> RegistrationConfig {
    RegistrationConfig { metric, iterations: vec![20, 15, 10], ..Default::default() }
}

#[test]
fn dns_without_network_is_an_error() {
    let v = smooth_volume(Dims::cube(8), 16);
    assert!(matches!(register(&v, &v, &short(Metric::Dns), None), Err(Error::MissingNetwork)));
}

#[test]
fn identical_images_give_a_small_field() {
    let v = smooth_volume(Dims::cube(16), 17);
    let net = MasrNet::new(NetConfig::desk(), 18).unwrap();
    for metric in [Metric::Dns, Metric::Mind, Metric::Nmi] {
        let r = register(&v, &v, &short(metric), Some(&net)).unwrap();
        assert_eq!(r.field.dims, v.dims);
        assert_eq!(r.trace.len(), 45);
        assert!(r.field.mean_magnitude(None) < 0.5, "{metric}: {}", r.field.mean_magnitude(None));
    }
}

#[test]
fn registration_is_deterministic() {
    let a = smooth_volume(Dims::cube(16), 19);
    let b = smooth_volume(Dims::cube(16), 20);
    let net = MasrNet::new(NetConfig::desk(), 21).unwrap();
    let x = register(&a, &b, &short(Metric::Dns), Some(&net)).unwrap();
    let y = register(&a, &b, &short(Metric::Dns), Some(&net)).unwrap();
    assert_eq!(x.trace, y.trace);
    assert_eq!(x.field, y.field);
}

#[test]
fn mind_registration_recovers_a_phantom_warp() {
    let dims = Dims::cube(24);
    let ph = phantom::generate(22, dims).unwrap();
    let gt = phantom::synth_deformation(23, dims, 3.0, 4.0).unwrap();
    let moving = crate::volume::warp(&ph.volume, &gt).unwrap();
    let cfg = RegistrationConfig { metric: Metric::Mind, lambdas: vec![0.1; 3], ..Default::default() };
    let r = register(&ph.volume, &moving, &cfg, None).unwrap();
    let target = crate::volume::invert_field(&gt, 20);
    let mask = crate::BinaryMask::foreground(&ph.volume, 0.05);
    let before = target.mean_magnitude(Some(&mask));
    let after = r.field.mean_endpoint_error(&target, Some(&mask)).unwrap();
    assert!(after < 0.75 * before, "endpoint error {before} -> {after}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn upsampling_preserves_translation(t in proptest::array::uniform3(-4.0f64..4.0), n in 4usize..10) {
        let coarse = Dims::new(n, n + 1, n + 2);
        let fine = Dims::new(2 * n, 2 * n + 1, 2 * n + 2);
        let phi = DisplacementField::from_fn(coarse, |_| t);
        let up = phi.resampled(fine).unwrap();
        let ratio: Vec<f64> = (0..3).map(|a| (fine.0[a] - 1) as f64 / (coarse.0[a] - 1) as f64).collect();
        for u in up.data.chunks_exact(3) {
            for a in 0..3 {
                prop_assert!((u[a] - t[a] * ratio[a]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn similarity_dns_is_bounded(seed in any::<u64>(), amp in 0.0f64..3.0) {
        let dims = Dims::cube(5);
        let f = random_features(dims, 3, seed);
        let m = random_features(dims, 3, seed ^ 0x5a5a);
        let phi = smooth_random_field(dims, amp, seed);
        let s = similarity_dns(&f, &m, &phi, 1.0).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
    }
}


