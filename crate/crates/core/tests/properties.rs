use nalgebra::DMatrix;
use proptest::prelude::*;

use scoregan_core::data::{augment, read_sgsh, write_sgsh, Split};
use scoregan_core::evaluator::{differentiable_score, regularized_score, score_from_logits, Evaluator, Provenance};
use scoregan_core::io::to_byte;
use scoregan_core::losses::GammaController;
use scoregan_core::metrics::{fid, trace_sqrt_product, FeatureStats};
use scoregan_core::networks::{NetworkInstance, NetworkSpec};
use scoregan_core::nn::{cbn_forward, spectral_normalize, Mode, RunningStats, SpectralState, NORM_EPS};
use scoregan_core::optim::{AdamConfig, AdamState};
use scoregan_core::rng::Rng;
use scoregan_core::tape::Tape;
use scoregan_core::tensor::Tensor;
use scoregan_core::training::{lr_schedule, TrainConfig};

fn randn(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = Rng::new(seed, "properties");
    Tensor::from_fn(shape, |_| rng.normal() * scale)
}

fn score(l: &Tensor<f64>) -> f64 {
    let tape = Tape::new();
    score_from_logits(tape.constant(l.clone())).unwrap().value()
}

fn permuted_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let per = t.len() / t.dim(0);
    let mut shape = t.shape().to_vec();
    shape[0] = perm.len();
    Tensor::from_fn(&shape, |k| t.data()[perm[k / per] * per + k % per])
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    Rng::new(seed, "perm").shuffle(&mut p);
    p
}

fn evaluator(seed: u64) -> Evaluator<f64> {
    let spec = NetworkSpec::desk_classifier(3).scaled(0.25).unwrap();
    let net = NetworkInstance::build(spec, &mut Rng::new(seed, "properties/evaluator")).unwrap();
    Evaluator::new(net, Provenance { seed, held_out_accuracy: 0.0, iterations: 0 }).unwrap()
}

fn spd(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed, "spd");
    let a = DMatrix::<f64>::from_fn(d, d, |_, _| rng.normal());
    let m = &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 1e-3;
    ((&m + m.transpose()) * 0.5).as_slice().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(n in 1usize..8, c in 1usize..12, scale in 0.01f64..50.0, seed in any::<u64>()) {
        let tape = Tape::new();
        let p = tape.constant(randn(&[n, c], seed, scale)).softmax_rows().unwrap().value();
        for row in p.data().chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn replayed_tape_gives_identical_gradients(seed in any::<u64>()) {
        let x = randn(&[3, 5], seed, 1.0);
        let w = randn(&[5, 4], seed ^ 1, 1.0);
        let grads = || {
            let tape = Tape::new();
            let (xv, wv) = (tape.param(x.clone()), tape.param(w.clone()));
            let y = xv.matmul(wv, false, false).unwrap().tanh().log_softmax_rows().unwrap().sum_all();
            tape.gradients(y, &[xv, wv]).unwrap()
        };
        prop_assert_eq!(grads(), grads());
    }

    #[test]
    fn equal_seeds_equal_streams(seed in any::<u64>(), name in "[a-z/]{1,12}") {
        let (mut a, mut b) = (Rng::new(seed, &name), Rng::new(seed, &name));
        for _ in 0..64 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
        prop_assert_eq!(a.normal().to_bits(), b.normal().to_bits());
    }

    #[test]
    fn score_bounds_and_permutation_invariance(n in 2usize..40, c in 2usize..12, scale in 0.01f64..20.0, seed in any::<u64>()) {
        let l = randn(&[n, c], seed, scale);
        let s = score(&l);
        prop_assert!(s >= 1.0 - 1e-12 && s <= n.min(c) as f64 + 1e-12, "score {s}");
        let rows = permuted_rows(&l, &permutation(n, seed));
        prop_assert!((score(&rows) - s).abs() <= 1e-12 * s);
        let cp = permutation(c, seed ^ 7);
        let cols = Tensor::from_fn(&[n, c], |k| l.data()[(k / c) * c + cp[k % c]]);
        prop_assert!((score(&cols) - s).abs() <= 1e-12 * s);
    }

    #[test]
    fn fid_symmetry_self_and_sign(d in 1usize..12, seed in any::<u64>()) {
        let mut rng = Rng::new(seed, "means");
        let stats = |cov: Vec<f64>, rng: &mut Rng| FeatureStats { dim: d, count: 100, mean: (0..d).map(|_| rng.normal()).collect(), cov };
        let a = stats(spd(d, seed), &mut rng);
        let b = stats(spd(d, seed ^ 3), &mut rng);
        let ab = fid(&a, &b).unwrap();
        prop_assert!((ab - fid(&b, &a).unwrap()).abs() <= 1e-8);
        prop_assert!(fid(&a, &a).unwrap() <= 1e-10);
        prop_assert!(ab >= 0.0);
        let tr: f64 = (0..d).map(|i| a.cov[i * d + i]).sum();
        prop_assert!((trace_sqrt_product(d, &a.cov, &a.cov).unwrap() - tr).abs() <= 1e-8);
    }

    #[test]
    fn spectral_state_stays_unit_and_bounds_gain(rows in 1usize..24, cols in 1usize..24, iters in 1usize..6, seed in any::<u64>()) {
        let w = randn(&[rows, cols], seed, 1.0);
        let mut st = SpectralState::new(randn(&[cols], seed ^ 9, 1.0).data().to_vec(), iters).unwrap();
        let (wn, sigma_hat) = spectral_normalize(&w, &mut st).unwrap();
        let norm = st.u.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() <= 1e-6);
        let sigma = DMatrix::from_row_slice(rows, cols, w.data()).singular_values().max();
        let x = randn(&[rows], seed ^ 5, 1.0);
        let xn = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let y: Vec<f64> = (0..cols).map(|j| (0..rows).map(|i| x.data()[i] * wn.data()[i * cols + j]).sum()).collect();
        let yn = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(yn <= xn * sigma / sigma_hat * (1.0 + 1e-9));
    }

    #[test]
    fn cbn_eval_ignores_batch_composition(n in 2usize..6, seed in any::<u64>()) {
        let x = randn(&[n, 2, 2, 3], seed, 2.0);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let (g, b) = (randn(&[2, 3], seed ^ 1, 1.0), randn(&[2, 3], seed ^ 2, 1.0));
        let mut running = RunningStats::new(3);
        running.mean = vec![0.3, -0.2, 0.1];
        running.var = vec![1.5, 0.7, 2.0];
        let run = |x: &Tensor<f64>, labels: &[usize]| {
            let tape = Tape::new();
            let mut r = running.clone();
            cbn_forward(tape.constant(x.clone()), labels, tape.constant(g.clone()), tape.constant(b.clone()), &mut r, Mode::Eval, NORM_EPS)
                .unwrap()
                .value()
                .as_ref()
                .clone()
        };
        let full = run(&x, &labels);
        let one = run(&permuted_rows(&x, &[0]), &labels[..1]);
        prop_assert_eq!(&full.data()[..12], one.data());
    }

    #[test]
    fn gamma_stays_in_range(steps in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..64)) {
        let mut c = GammaController::default();
        for (lg, lr) in steps {
            let g = c.update(lg, lr);
            prop_assert!((0.0..=0.1).contains(&g));
        }
    }

    #[test]
    fn adam_moments_keep_shape_and_sign(steps in 1usize..6, seed in any::<u64>()) {
        let mut p = vec![randn(&[3, 2], seed, 1.0), randn(&[4], seed ^ 1, 1.0)];
        let mut st = AdamState::for_params(&p, AdamConfig::default());
        for k in 0..steps {
            let g = vec![randn(&[3, 2], seed ^ (k as u64 + 10), 3.0), randn(&[4], seed ^ (k as u64 + 20), 3.0)];
            st.step(&mut p, &g, 1e-3).unwrap();
        }
        prop_assert_eq!(st.t, steps as u64);
        for (m, (v, q)) in st.m.iter().zip(st.v.iter().zip(&p)) {
            prop_assert_eq!(m.shape(), q.shape());
            prop_assert_eq!(v.shape(), q.shape());
            prop_assert!(v.data().iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn augmentation_stays_in_range(n in 1usize..5, seed in any::<u64>()) {
        let mut rng = Rng::new(seed, "pixels");
        let x = Tensor::<f32>::from_fn(&[n, 16, 16, 3], |_| (rng.uniform() * 2.0 - 1.0) as f32);
        let y = augment(&x, &mut Rng::new(seed, "augment")).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn ppm_mapping_is_monotone_and_clamped(a in -3.0f32..3.0, b in -3.0f32..3.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(to_byte(lo) <= to_byte(hi));
        if lo <= -1.0 { prop_assert_eq!(to_byte(lo), 0); }
        if hi >= 1.0 { prop_assert_eq!(to_byte(hi), 255); }
    }

    #[test]
    fn sgsh_round_trips(n in 1usize..6, classes in 2usize..10, seed in any::<u64>()) {
        let mut rng = Rng::new(seed, "sgsh");
        let split = Split {
            images: Tensor::from_fn(&[n, 8, 8, 3], |_| (rng.uniform() * 2.0 - 1.0) as f32),
            labels: (0..n).map(|i| i % classes).collect(),
        };
        let mut buf = vec![];
        write_sgsh(&mut buf, classes, &split).unwrap();
        let (c, back) = read_sgsh(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(c, classes);
        prop_assert_eq!(back, split);
    }

    #[test]
    fn lr_schedule_halves_once(halve in 1u64..100_000, it in 0u64..200_000) {
        let cfg = TrainConfig { halve_at_iteration: halve, ..TrainConfig::default() };
        let (d, g) = lr_schedule(&cfg, it);
        let f = if it >= halve { 0.5 } else { 1.0 };
        prop_assert_eq!((d, g), (4e-4 * f, 2e-4 * f));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn ris_never_exceeds_the_real_score_and_evaluator_is_untouched(seed in any::<u64>(), spread in 0.2f64..3.0) {
        let e = evaluator(seed % 4);
        let before = e.checksum();
        let gen = randn(&[4, 16, 16, 3], seed, spread).map(f64::tanh);
        let real = randn(&[4, 16, 16, 3], seed ^ 1, 1.0).map(f64::tanh);
        let tape = Tape::new();
        let g = tape.param(gen);
        let r = regularized_score(g, &real, &e).unwrap();
        prop_assert!(r.value.value().item() <= r.real_score);
        tape.gradients(r.value, &[g]).unwrap();
        let s = differentiable_score(g, &e).unwrap().score;
        tape.gradients(s, &[g]).unwrap();
        prop_assert_eq!(e.checksum(), before);
    }

    #[test]
    fn eval_forwards_are_batch_permutation_equivariant(seed in any::<u64>()) {
        let x = randn(&[5, 16, 16, 3], seed, 1.0).map(f64::tanh);
        let perm = permutation(5, seed);
        let d = NetworkInstance::<f64>::build(NetworkSpec::desk_discriminator().scaled(0.25).unwrap(), &mut Rng::new(seed, "d")).unwrap();
        let c = NetworkInstance::<f64>::build(NetworkSpec::desk_classifier(3).scaled(0.25).unwrap(), &mut Rng::new(seed, "c")).unwrap();
        for net in [&d, &c] {
            let y = forward(net, &x);
            let yp = forward(net, &permuted_rows(&x, &perm));
            let want = permuted_rows(&y, &perm);
            for (a, b) in yp.data().iter().zip(want.data()) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }
    }
}

fn forward(net: &NetworkInstance<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let tape = Tape::new();
    let b = net.bind_frozen(&tape).unwrap();
    net.forward_eval(&b, tape.constant(x.clone()), None).unwrap().output.value().as_ref().clone()
}
