use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::losses::*;
use super::*;
use crate::autodiff::gradcheck::check;
use crate::geometry::{apply, compose, euler_to_transform, random_transform, EulerPose};
use crate::metrics::{edge_set, emd};
use crate::networks::{discriminator, load_checkpoint};

fn small(n: usize) -> NetworkConfig {
    NetworkConfig {
        n_points: n,
        k: 4,
        tnet_point: vec![8, 16],
        tnet_head: vec![16],
        embed_dim: 8,
        decoder: vec![8, 8, 4],
        discriminator: vec![8, 4],
        ..NetworkConfig::default()
    }
}

fn cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::new((0..n).map(|_| [0.0; 3].map(|_: f64| rng.gen_range(0.0..1.0))).collect()).unwrap()
}

fn pair(n: usize, seed: u64) -> TrainPair {
    let a = cloud(n, seed);
    let (t_gt, _) = random_transform(seed + 100, [0.0, 30.0], [0.0, 0.3]).unwrap();
    TrainPair { id: format!("p{seed}"), b: apply(&a, &t_gt), a, t_gt }
}

fn setup(n: usize, steps: usize) -> TrainSetup {
    TrainSetup {
        network: small(n),
        train: TrainConfig { batch_size: 2, max_steps: Some(steps), workers: Some(2), seed: 5, ..TrainConfig::default() },
        pdsac: PdsacConfig { m: 32, k: 4 },
        out_dir: None,
    }
}

#[test]
fn absolute_loss_cases() {
    let (a, b) = (cloud(5, 1), cloud(5, 2));
    assert_eq!(loss_absolute(&a, &b, &b, &a).unwrap(), 0.0);
    let (ag, bg) = (cloud(5, 3), cloud(5, 4));
    let l = loss_absolute(&a, &b, &ag, &bg).unwrap();
    assert!((l - loss_absolute(&b, &a, &bg, &ag).unwrap()).abs() < 1e-15);

    // exhaustive minimum over all 5! matchings
    fn perms(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        perms(n - 1)
            .into_iter()
            .flat_map(|p| (0..n).map(move |i| {
                let mut q = p.clone();
                q.insert(i, n - 1);
                q
            }))
            .collect()
    }
    let brute = |x: &PointCloud, y: &PointCloud| {
        perms(5)
            .iter()
            .map(|p| (0..5).map(|i| crate::spatial::dist(&x.points()[i], &y.points()[p[i]])).sum::<f64>() / 5.0)
            .fold(f64::INFINITY, f64::min)
    };
    assert!((l - brute(&a, &bg) - brute(&b, &ag)).abs() < 1e-12);
}

#[test]
fn relative_loss_cases() {
    let a = cloud(32, 1);
    let b = cloud(32, 2);
    for s in 0..5 {
        let (t, _) = random_transform(s, [0.0, 45.0], [0.0, 0.8]).unwrap();
        let l = loss_relative(&a, &apply(&a, &t), &b, &b, EdgeMode::Cyclic).unwrap();
        assert!(l < 1e-12, "{l}");
    }
    assert_eq!(loss_relative(&a, &a, &b, &b, EdgeMode::Verbatim).unwrap(), 0.0);
    let doubled = PointCloud::new(a.points().iter().map(|p| p.map(|c| 2.0 * c)).collect()).unwrap();
    let mean_edge = {
        let e = edge_set(&a, EdgeMode::Cyclic).unwrap().lengths;
        e.iter().sum::<f64>() / e.len() as f64
    };
    let l = loss_relative(&a, &doubled, &b, &b, EdgeMode::Cyclic).unwrap();
    assert!((l - mean_edge).abs() < 1e-12);
}

#[test]
fn transform_loss_cases() {
    let (t, _) = random_transform(3, [0.0, 45.0], [0.0, 0.8]).unwrap();
    assert!(loss_transform(&t, &t) < 1e-12);
    let shift = euler_to_transform(&EulerPose::new([0.0; 3], [0.3, 0.0, 0.0])).unwrap();
    let t_est = compose(&t, &shift);
    assert!((loss_transform(&t_est, &t) - 0.3).abs() < 1e-12);
    let (common, _) = random_transform(9, [0.0, 45.0], [0.0, 0.8]).unwrap();
    let (other, _) = random_transform(10, [0.0, 45.0], [0.0, 0.8]).unwrap();
    let before = loss_transform(&other, &t);
    let after = loss_transform(&compose(&other, &common), &compose(&t, &common));
    assert!((before - after).abs() < 1e-12, "{before} vs {after}");
}

#[test]
fn total_loss_weights() {
    assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, 0.0).total, 0.0);
    assert!((total_loss(0.0, 0.0, 0.0, 1.0, 0.0).total - 0.01).abs() < 1e-15);
    let l = total_loss(0.5, 0.25, 0.125, 2.0, 1.0);
    assert!((l.total - (0.5 + 0.25 + 0.125 + 0.02 + 1.0)).abs() < 1e-15);
}

fn zeroed(mut store: ParamStore) -> ParamStore {
    for i in 0..store.len() {
        let len = store.value(i).len();
        store.set(i, vec![0.0; len]);
    }
    store
}

#[test]
fn zero_discriminators_give_log_two() {
    let cfg = small(16);
    let disc = zeroed(init_discriminators(&cfg, 1).unwrap()).leaves(|_| false);
    let t = |s| cloud_tensor(&cloud(16, s));
    let d = discriminator_tensor(&disc, &cfg, &t(1), &t(2), &t(3), &t(4)).unwrap().item();
    assert!((d - 2.0 * 2f64.ln()).abs() < 1e-12);
    let g = adversarial_g_tensor(&disc, &cfg, &t(3), &t(4), AdversarialForm::NonSaturating).unwrap().item();
    assert!((g - 2f64.ln()).abs() < 1e-12);
    let g = adversarial_g_tensor(&disc, &cfg, &t(3), &t(4), AdversarialForm::Minimax).unwrap().item();
    assert!((g + 2f64.ln()).abs() < 1e-12);
}

#[test]
fn discriminator_losses_gradcheck() {
    let cfg = small(16);
    let store = init_discriminators(&cfg, 4).unwrap();
    let names: Vec<String> = store.names().to_vec();
    let inputs: Vec<(Vec<f64>, Vec<usize>)> =
        (0..store.len()).map(|i| (store.value(i).to_vec(), store.shape(i).to_vec())).collect();
    let clouds: Vec<Tensor> = (1..5).map(|s| cloud_tensor(&cloud(16, s))).collect();
    let with = |xs: &[Tensor]| {
        let mut p = store.leaves(|_| false);
        for (n, x) in names.iter().zip(xs) {
            p.replace(n, x.clone()).unwrap();
        }
        p
    };
    let r = check(|xs| discriminator_tensor(&with(xs), &cfg, &clouds[0], &clouds[1], &clouds[2], &clouds[3]), &inputs, 6, 1)
        .unwrap();
    assert!(r.max_rel_error < 1e-6, "{:?}", r.per_input);
    for form in [AdversarialForm::NonSaturating, AdversarialForm::Minimax] {
        let r = check(|xs| adversarial_g_tensor(&with(xs), &cfg, &clouds[2], &clouds[3], form), &inputs, 6, 2).unwrap();
        assert!(r.max_rel_error < 1e-6, "{:?}", r.per_input);
    }
}

#[test]
fn real_only_discriminator_loss_falls_with_final_bias() {
    let cfg = small(16);
    let mut store = init_discriminators(&cfg, 2).unwrap();
    let a = cloud_tensor(&cloud(16, 1));
    let real_only = |s: &ParamStore| {
        let p = s.leaves(|_| false);
        -discriminator(&p, &cfg, "disc_a", &a).unwrap().log().item()
    };
    let before = real_only(&store);
    let last = format!("disc_a.{}.b", cfg.discriminator.len());
    let i = store.position(&last).unwrap();
    store.value_mut(i)[0] += 0.5;
    assert!(real_only(&store) < before);
}

#[test]
fn emd_tensor_gradient_is_fixed_assignment() {
    let (x, y) = (cloud(6, 1), cloud(6, 2));
    let inputs = vec![(x.to_flat(), vec![6, 3]), (y.to_flat(), vec![6, 3])];
    let r = check(|t| emd_tensor(&t[0], &t[1]), &inputs, 18, 0).unwrap();
    assert!(r.max_rel_error < 1e-6);
    let v = emd_tensor(&cloud_tensor(&x), &cloud_tensor(&y)).unwrap().item();
    assert_eq!(v, emd(&x, &y).unwrap().cost);
}

/// Central differences of the whole generator objective with respect to
/// every generator tensor at N=16.
#[test]
fn full_generator_loss_gradcheck() {
    let s = setup(16, 1);
    let gen = init_generator(&s.network, 11).unwrap();
    let disc = init_discriminators(&s.network, 12).unwrap();
    let p = pair(16, 3);
    let names: Vec<String> = gen.names().to_vec();
    let inputs: Vec<(Vec<f64>, Vec<usize>)> =
        (0..gen.len()).map(|i| (gen.value(i).to_vec(), gen.shape(i).to_vec())).collect();
    let dp = disc.leaves(|_| false);
    take_suppressed_polar_grads();
    let r = check(
        |xs| {
            let mut gp = gen.leaves(|_| false);
            for (n, x) in names.iter().zip(xs) {
                gp.replace(n, x.clone())?;
            }
            Ok(generator_loss_graph(&gp, &dp, &s.network, &s.train, &s.pdsac, &p, (1, 2))?.0)
        },
        &inputs,
        4,
        7,
    )
    .unwrap();
    assert_eq!(take_suppressed_polar_grads(), 0);
    assert!(r.max_rel_error < 1e-3, "{:?}", names.iter().zip(&r.per_input).collect::<Vec<_>>());
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut store = ParamStore::new();
    store.insert("w", &[3], vec![1.0, -2.0, 0.5]).unwrap();
    let mut opt = Adam::new(&store, 0.1, 0.9, 0.999, 1e-12);
    opt.step(&mut store, &[vec![3.0, -0.5, 1e-3]]);
    let v = store.value(0);
    assert!((v[0] - 0.9).abs() < 1e-9 && (v[1] + 1.9).abs() < 1e-9 && (v[2] - 0.4).abs() < 1e-6);
    assert_eq!(opt.steps_taken(), 1);
}

#[test]
fn schedule_and_identity_hold() {
    let pairs: Vec<TrainPair> = (0..3).map(|s| pair(16, s)).collect();
    let out = train(&setup(16, 11), &pairs).unwrap();
    assert_eq!(out.steps, 11);
    assert_eq!(out.generator_updates, 3);
    let steps: Vec<usize> = out.history.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 5, 10]);
    for r in &out.history {
        let l = &r.loss;
        assert!((l.total - (l.abs + l.relative + l.cyc + ADV_WEIGHT * l.adv + l.transform)).abs() < 1e-9);
        assert!(r.disc_loss.is_some());
    }
}

#[test]
fn runs_are_deterministic_across_worker_counts() {
    let pairs: Vec<TrainPair> = (0..4).map(|s| pair(16, s)).collect();
    let mut s = setup(16, 6);
    let a = train(&s, &pairs).unwrap();
    s.train.workers = Some(1);
    let b = train(&s, &pairs).unwrap();
    let strip = |h: &[HistoryRow]| h.iter().map(|r| (r.step, r.loss, r.disc_loss)).collect::<Vec<_>>();
    assert_eq!(strip(&a.history), strip(&b.history));
    for i in 0..a.generator.len() {
        assert_eq!(a.generator.value(i), b.generator.value(i));
    }
}

#[test]
fn one_step_checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = setup(16, 1);
    s.out_dir = Some(dir.path().to_path_buf());
    let out = train(&s, &[pair(16, 1)]).unwrap();
    let (cfg, gen, disc) = load_trained(&dir.path().join("final"), Some(&s.network)).unwrap();
    assert_eq!(cfg, s.network);
    for (loaded, orig) in [(&gen, &out.generator), (&disc, &out.discriminators)] {
        assert_eq!(loaded.names(), orig.names());
        for i in 0..orig.len() {
            assert_eq!(loaded.value(i), orig.value(i));
        }
    }
    let (_, meta) = load_checkpoint(&dir.path().join("final")).unwrap();
    assert_eq!(meta.step, 1);
    let csv = fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert!(csv.starts_with(HISTORY_HEADER));
    assert_eq!(csv.lines().count(), 2);

    let other = small(24);
    assert!(matches!(load_trained(&dir.path().join("final"), Some(&other)), Err(Error::Compatibility(_))));
}

#[test]
fn non_finite_loss_aborts_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = setup(16, 3);
    s.out_dir = Some(dir.path().to_path_buf());
    let gen = init_generator(&s.network, 1).unwrap();
    let mut disc = init_discriminators(&s.network, 2).unwrap();
    let len = disc.value(0).len();
    disc.set(0, vec![f64::NAN; len]);
    let err = train_from(&s, &[pair(16, 1)], gen, disc).unwrap_err();
    assert!(matches!(err, Error::NonFinite { step: 0, .. }), "{err}");
    let dump = fs::read_to_string(dir.path().join("nonfinite_step_000000.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&dump).unwrap();
    assert_eq!(v["pairs"][0]["id"], "p1");
}

#[test]
fn config_validation_names_keys() {
    let mut c = TrainConfig::default();
    c.gan_schedule.generator_every = 0;
    match c.validate() {
        Err(Error::Config { key, .. }) => assert_eq!(key, "train.gan_schedule.generator_every"),
        other => panic!("{other:?}"),
    }
    let mut s = setup(16, 1);
    s.network.n_points = 32;
    assert!(matches!(train(&s, &[pair(16, 1)]), Err(Error::Config { .. })));
}
