use mtc_core::autodiff::{Checkpoint, ParamStore, Tape, Tensor, Var};
use mtc_core::nn::gaussian::{atanh_clamped, squashed_log_prob};
use mtc_core::nn::{kl_diag_gaussian, soft_update, Architecture, Bind, DiagGaussian, ModelSet, Representation, LOG_STD_MAX, LOG_STD_MIN};
use mtc_core::rng::{normal_vec, stream};
use mtc_core::MtcError;
use proptest::prelude::*;
use rand::Rng;
use std::f64::consts::PI;

fn small(representation: Representation) -> ModelSet {
    let arch = Architecture {
        obs_dim: 3,
        act_dim: 2,
        latent_dim: 4,
        hidden: 16,
        rnn_hidden: 8,
        rnn_out: 4,
        output_norm: mtc_core::nn::OutputNorm::LayerNorm,
        representation,
    };
    ModelSet::new(arch, 3, 1e-6, 0.1).unwrap()
}

fn history() -> Representation {
    Representation::History { action_model: true }
}

fn row_tensor(v: Vec<f64>) -> Tensor {
    let n = v.len();
    Tensor::matrix(1, n, v).unwrap()
}

/// Stratified Monte-Carlo estimate of `∫_{(−1,1)} exp(log p(a)) da`: one
/// uniform draw in each of `samples` equal cells, so narrow densities are
/// still resolved.
fn squashed_mass(base: &DiagGaussian, samples: usize, seed: u64) -> f64 {
    assert_eq!(base.dim(), 1);
    let mut rng = stream(seed, "quadrature");
    let width = 2.0 / samples as f64;
    let mut sum = 0.0;
    for i in 0..samples {
        let a = -1.0 + width * (i as f64 + rng.random_range(0.0..1.0));
        sum += squashed_log_prob(base, &[atanh_clamped(a)]).exp();
    }
    width * sum
}

#[test]
fn reference_architecture_conformance() {
    let arch = Architecture::reference(3, 1, history());
    let m = ModelSet::new(arch, 0, 1e-6, 0.1).unwrap();
    let dims = |mlp: &mtc_core::nn::Mlp| [vec![mlp.in_dim()], mlp.widths()].concat();
    assert_eq!(dims(&m.encoder.as_ref().unwrap().mlp), vec![3, 256, 256, 60]);
    assert_eq!(m.encoder.as_ref().unwrap().latent_dim, 30);
    assert_eq!(dims(&m.policy.mlp), vec![3, 256, 256, 2]);
    for model in [m.dynamics.as_ref().unwrap(), m.action_model.as_ref().unwrap()] {
        assert_eq!(m.store.get(model.cell.params()[1]).shape(), &[256, 1024]);
        assert_eq!(m.store.get(model.proj.params()[0]).shape(), &[256, 30]);
        assert!(model.norm.is_some());
        assert_eq!(dims(&model.head)[..3], [30, 256, 256]);
    }
    assert_eq!(m.dynamics.as_ref().unwrap().head.out_dim(), 60);
    assert_eq!(m.action_model.as_ref().unwrap().head.out_dim(), 2);
    assert_eq!(dims(&m.q1.mlp), vec![4, 256, 256, 1]);
    assert!(m.alpha() > 0.0 && m.beta_prime() > 0.0);
    assert!((m.alpha() - 1e-6).abs() < 1e-18 && (m.beta_prime() - 0.1).abs() < 1e-15);
    // the two history models do not share weights
    let d = m.dynamics.as_ref().unwrap().cell.params();
    let a = m.action_model.as_ref().unwrap().cell.params();
    assert!(d.iter().all(|p| !a.contains(p)));
}

#[test]
fn encoder_sample_and_density_at_mean() {
    let mut m = ModelSet::new(Architecture::reference(3, 1, history()), 1, 1e-6, 0.1).unwrap();
    let enc = m.encoder.clone().unwrap();
    // drive the raw log-std head far negative so it clamps to the floor
    let last = *enc.mlp.params().last().unwrap();
    m.store.get_mut(last).data_mut()[30..].fill(-100.0);
    let mut tape = Tape::new();
    let obs = tape.input(row_tensor(vec![0.3, -0.2, 0.9]));
    let (z, dist) = enc.encode(&mut tape, &m.store, obs, Tensor::zeros(1, 30), Bind::Frozen).unwrap();
    assert_eq!(tape.value(z).data(), tape.value(dist.mean).data());
    let g = dist.row(&tape, 0);
    assert!(g.log_std().iter().all(|&l| l == LOG_STD_MIN));
    let expected = -g.log_std().iter().sum::<f64>() - 15.0 * (2.0 * PI).ln();
    assert!((g.log_prob(g.mean()) - expected).abs() < 1e-9);
    let lp = dist.log_prob(&mut tape, z).unwrap();
    assert!((tape.value(lp).item() - expected).abs() < 1e-9);
}

#[test]
fn reparameterized_sample_has_identity_gradient_in_the_mean() {
    let mut tape = Tape::new();
    let mean = tape.variable(row_tensor(vec![0.4, -1.1, 0.2]));
    let log_std = tape.input(row_tensor(vec![-0.5, 0.1, 0.3]));
    let dist = mtc_core::nn::GaussianVars { mean, log_std };
    let z = dist.rsample(&mut tape, row_tensor(vec![0.7, -0.3, 1.2])).unwrap();
    let w = tape.input(row_tensor(vec![1.0, 2.0, -3.0]));
    let loss = tape.mul(z, w).unwrap();
    let loss = tape.sum(loss).unwrap();
    tape.backward(loss, &mut ParamStore::new()).unwrap();
    assert_eq!(tape.grad(mean).unwrap(), &[1.0, 2.0, -3.0]);
}

#[test]
fn policy_density_examples() {
    // μ=0, σ=1, u=0: a=0 and no squash correction
    let base = DiagGaussian::standard(1);
    assert!((squashed_log_prob(&base, &[0.0]) + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    let base2 = DiagGaussian::standard(2);
    assert!((squashed_log_prob(&base2, &[0.0, 0.0]) + (2.0 * PI).ln()).abs() < 1e-15);

    // saturated mean: actions approach but never reach the boundary
    let m = small(Representation::None);
    let mut store = m.store.clone();
    let last = *m.policy.mlp.params().last().unwrap();
    let bias = store.get_mut(last).data_mut();
    bias[..2].fill(15.0);
    bias[2..].fill(-50.0);
    let a = m.policy.mean_action(&store, &[0.1, 0.2, 0.3]).unwrap();
    assert!(a.iter().all(|&x| x > 0.999 && x <= 1.0));
    let (sampled, lp) = m.policy.act(&store, &[0.1, 0.2, 0.3], &mut stream(0, "p")).unwrap();
    assert!(sampled.iter().all(|&x| x.abs() <= 1.0) && lp.is_finite());
}

#[test]
fn policy_density_integrates_to_one() {
    let m = small(Representation::None);
    for (i, obs) in [[0.0, 0.0, 0.0], [0.5, -0.4, 2.0], [-1.0, 1.0, -3.0]].iter().enumerate() {
        let b = m.policy.base_distribution(&m.store, obs).unwrap();
        let one_d = DiagGaussian::new(vec![b.mean()[0]], vec![b.log_std()[0]]).unwrap();
        let mass = squashed_mass(&one_d, 1_000_000, i as u64);
        assert!((mass - 1.0).abs() < 0.02, "obs {obs:?}: {mass}");
    }
    // narrow distribution near the boundary
    let sharp = DiagGaussian::new(vec![1.2], vec![-1.0]).unwrap();
    assert!((squashed_mass(&sharp, 1_000_000, 9) - 1.0).abs() < 0.02);
}

#[test]
fn action_predictor_density_integrates_to_one() {
    let m = small(history());
    let mut tape = Tape::new();
    let mut rng = stream(2, "window");
    let z: Vec<Var> = (0..3).map(|_| tape.input(row_tensor(normal_vec(&mut rng, 4)))).collect();
    let a: Vec<Var> = (0..2).map(|_| tape.input(row_tensor(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]))).collect();
    let dist = m.predict_action(&mut tape, &z, &a, Bind::Frozen).unwrap();
    let g = dist.row(&tape, 0);
    for k in 0..2 {
        let marginal = DiagGaussian::new(vec![g.mean()[k]], vec![g.log_std()[k]]).unwrap();
        let mass = squashed_mass(&marginal, 1_000_000, 20 + k as u64);
        assert!((mass - 1.0).abs() < 0.02, "{mass} {marginal:?}");
    }
}

#[test]
fn history_predictions_depend_on_order_and_first_step() {
    let m = small(history());
    let mut rng = stream(4, "window");
    let zs: Vec<Vec<f64>> = (0..5).map(|_| normal_vec(&mut rng, 4)).collect();
    let acts: Vec<Vec<f64>> = (0..5).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let predict = |order: &[usize]| {
        let mut tape = Tape::new();
        let z: Vec<Var> = order.iter().map(|&i| tape.input(row_tensor(zs[i].clone()))).collect();
        let a: Vec<Var> = order.iter().map(|&i| tape.input(row_tensor(acts[i].clone()))).collect();
        let d = m.predict_next_latent(&mut tape, &z, &a, Bind::Frozen).unwrap();
        let pa = m.predict_action(&mut tape, &z, &a[..z.len() - 1], Bind::Frozen).unwrap();
        (d.row(&tape, 0), pa.row(&tape, 0))
    };
    let base = predict(&[0, 1, 2, 3, 4]);
    assert_eq!(base, predict(&[0, 1, 2, 3, 4]));
    assert_ne!(base.0, predict(&[1, 0, 2, 3, 4]).0);
    assert_ne!(base.1, predict(&[1, 0, 2, 3, 4]).1);

    // gradient with respect to the first latent, analytic against differences
    let objective = |tape: &mut Tape, first: Var| -> Var {
        let mut z = vec![first];
        z.extend(zs[1..].iter().map(|v| tape.input(row_tensor(v.clone()))));
        let a: Vec<Var> = acts.iter().map(|v| tape.input(row_tensor(v.clone()))).collect();
        let d = m.predict_next_latent(tape, &z, &a, Bind::Frozen).unwrap();
        let s = tape.add(d.mean, d.log_std).unwrap();
        tape.sum(s).unwrap()
    };
    let mut tape = Tape::new();
    let first = tape.variable(row_tensor(zs[0].clone()));
    let loss = objective(&mut tape, first);
    tape.backward(loss, &mut ParamStore::new()).unwrap();
    let grad = tape.grad(first).unwrap().to_vec();
    assert!(grad.iter().any(|g| g.abs() > 1e-6));
    let h = 1e-5;
    for i in 0..4 {
        let eval = |delta: f64| {
            let mut v = zs[0].clone();
            v[i] += delta;
            let mut t = Tape::new();
            let x = t.input(row_tensor(v));
            let l = objective(&mut t, x);
            t.value(l).item()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        assert!((fd - grad[i]).abs() <= 1e-3 * grad.iter().fold(0.0f64, |m, g| m.max(g.abs())));
    }
}

#[test]
fn action_predictor_first_step_uses_latent_only() {
    let m = small(history());
    let mut tape = Tape::new();
    let z = [tape.input(row_tensor(vec![0.1, 0.2, -0.3, 0.4]))];
    assert!(m.predict_action(&mut tape, &z, &[], Bind::Frozen).is_ok());
    assert!(matches!(m.predict_action(&mut tape, &[], &[], Bind::Frozen), Err(MtcError::Contract(_))));
    assert!(matches!(m.predict_next_latent(&mut tape, &[], &[], Bind::Frozen), Err(MtcError::Contract(_))));
}

#[test]
fn analytic_kl_examples_and_monte_carlo() {
    let std1 = DiagGaussian::standard(1);
    assert_eq!(kl_diag_gaussian(&std1, &std1).unwrap(), 0.0);
    let shifted = DiagGaussian::new(vec![1.0], vec![0.0]).unwrap();
    assert!((kl_diag_gaussian(&shifted, &std1).unwrap() - 0.5).abs() < 1e-15);
    let wide = DiagGaussian::new(vec![0.0], vec![0.5]).unwrap();
    let e = std::f64::consts::E;
    assert!((kl_diag_gaussian(&wide, &std1).unwrap() - 0.5 * (e - 2.0)).abs() < 1e-12);
    assert!(kl_diag_gaussian(&std1, &DiagGaussian::standard(2)).is_err());

    let mut rng = stream(8, "kl");
    for case in 0..3 {
        let d = 3;
        let mut draw = |lo: f64, hi: f64| (0..d).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        let p = DiagGaussian::new(draw(-1.0, 1.0), draw(-0.5, 0.3)).unwrap();
        let q = DiagGaussian::new(draw(-1.0, 1.0), draw(-0.3, 0.5)).unwrap();
        let exact = kl_diag_gaussian(&p, &q).unwrap();
        let mut srng = stream(case, "kl.samples");
        let n = 1_000_000;
        let mc = (0..n).map(|_| {
            let x = p.sample(&mut srng);
            p.log_prob(&x) - q.log_prob(&x)
        }).sum::<f64>() / n as f64;
        assert!((mc - exact).abs() / exact < 0.01, "case {case}: mc {mc} exact {exact}");
    }
}

#[test]
fn soft_update_endpoints() {
    let mut store = ParamStore::new();
    let net = store.insert("net", Tensor::filled(2, 3, 1.0)).unwrap();
    let target = store.insert("target", Tensor::zeros(2, 3)).unwrap();
    soft_update(&mut store, &[net], &[target], 0.0).unwrap();
    assert!(store.get(target).data().iter().all(|&x| x == 0.0));
    soft_update(&mut store, &[net], &[target], 0.01).unwrap();
    assert!(store.get(target).data().iter().all(|&x| x == 0.01));
    store.get_mut(net).data_mut()[4] = -7.25;
    soft_update(&mut store, &[net], &[target], 1.0).unwrap();
    assert_eq!(store.get(target).data(), store.get(net).data());
    let other = store.insert("other", Tensor::zeros(3, 2)).unwrap();
    assert!(matches!(soft_update(&mut store, &[net], &[other], 0.5), Err(MtcError::Contract(_))));

    let mut m = small(Representation::None);
    let (src, dst) = m.target_pairs();
    for (&s, &d) in src.iter().zip(&dst) {
        assert_eq!(m.store.get(s).data(), m.store.get(d).data());
    }
    let first = src[0];
    m.store.get_mut(first).data_mut()[0] += 1.0;
    let before = m.store.get(dst[0]).data()[0];
    m.update_targets(0.01).unwrap();
    assert!((m.store.get(dst[0]).data()[0] - (before + 0.01)).abs() < 1e-12);
}

#[test]
fn checkpoint_roundtrip_and_incompatible_rejection() {
    let m = small(history());
    let bytes = m.to_checkpoint().encode();
    let back = ModelSet::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
    assert_eq!(back.to_checkpoint().encode(), bytes);
    assert_eq!(back.arch, m.arch);
    assert!(matches!(back.check_dims(5, 2), Err(MtcError::Checkpoint(_))));

    // a checkpoint whose manifest disagrees with its tensors is refused
    let mut other = small(Representation::OneStep).to_checkpoint();
    let mut arch = m.arch;
    arch.hidden = 32;
    let entries: Vec<_> = other.entries().iter().filter(|(n, _)| n != Architecture::ENTRY).cloned().collect();
    other = Checkpoint::new();
    other.push(Architecture::ENTRY, arch.to_tensor());
    for (n, t) in entries {
        other.push(n, t);
    }
    assert!(matches!(ModelSet::from_checkpoint(&other), Err(MtcError::Checkpoint(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn emitted_log_std_stays_in_bounds(obs in proptest::collection::vec(-1e4f64..1e4, 3)) {
        let m = small(history());
        let mut tape = Tape::new();
        let o = tape.input(row_tensor(obs.clone()));
        let enc = m.encoder.as_ref().unwrap().distribution(&mut tape, &m.store, o, Bind::Frozen).unwrap();
        let pol = m.policy.distribution(&mut tape, &m.store, o, Bind::Frozen).unwrap();
        for v in [enc.log_std, pol.log_std] {
            prop_assert!(tape.value(v).data().iter().all(|&l| (LOG_STD_MIN..=LOG_STD_MAX).contains(&l)));
        }
        let (a, lp) = m.policy.act(&m.store, &obs, &mut stream(1, "a")).unwrap();
        prop_assert!(a.iter().all(|x| x.abs() <= 1.0));
        prop_assert!(lp.is_finite());
    }

    #[test]
    fn explicit_gaussians_clamp(mean in -5.0f64..5.0, ls in -50.0f64..50.0) {
        let g = DiagGaussian::new(vec![mean], vec![ls]).unwrap();
        prop_assert!((LOG_STD_MIN..=LOG_STD_MAX).contains(&g.log_std()[0]));
        let at_mean = g.log_prob(&[mean]);
        prop_assert!((at_mean + g.log_std()[0] + 0.5 * (2.0 * PI).ln()).abs() < 1e-12);
    }
}
