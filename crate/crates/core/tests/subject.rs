use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgnet::data::{MovementType, ScaleType};
use sgnet::fixtures::ShotScene;
use sgnet::media::{FrameImage, Planes};
use sgnet::nn::gradcheck::check_gradient;
use sgnet::nn::{Graph, ParamStore};
use sgnet::subject::loss::lsgan_terms;
use sgnet::subject::teacher::write_fmap;
use sgnet::subject::*;
use sgnet::{Error, Tensor};

fn random_frame(rng: &mut impl Rng, size: usize) -> FrameImage {
    let data = (0..3 * size * size).map(|_| rng.random::<f32>()).collect();
    FrameImage::new(Planes::new(3, size, size, data).unwrap()).unwrap()
}

fn random_map(rng: &mut impl Rng, size: usize) -> SubjectMap {
    let data = (0..size * size).map(|_| rng.random::<f32>()).collect();
    SubjectMap::new(Planes::new(1, size, size, data).unwrap(), MapSource::Teacher).unwrap()
}

/// A rendered fixture frame and its ground-truth mask at `size x size`.
fn fixture_pair(scale: ScaleType, seed: u64, size: usize) -> (FrameImage, SubjectMap) {
    let scene = ShotScene { scale, movement: MovementType::Static, width: size, height: size, frames: 1, distractors: 2, seed };
    let (frames, masks) = scene.render();
    let frame = FrameImage::from_rgb8(size, size, &frames[0]).unwrap();
    let mask = SubjectMap::new(Planes::new(1, size, size, masks[0].clone()).unwrap(), MapSource::Teacher).unwrap();
    (frame, mask)
}

fn setup(seed: u64) -> (StudentGenerator, Discriminator, ParamStore<f32>) {
    let gen = StudentGenerator::new("smg");
    let disc = Discriminator::new("disc");
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gen.init(&mut store, &mut rng);
    disc.init(&mut store, &mut rng);
    (gen, disc, store)
}

#[test]
fn generator_fits_parameter_budget() {
    let gen = StudentGenerator::new("smg");
    assert_eq!(gen.num_params(), 51_329);
    assert!(gen.num_params() <= 100_000);
    let (_, _, store) = setup(0);
    assert_eq!(store.count_with_prefix("smg."), gen.num_params());
}

#[test]
fn student_forward_is_deterministic_and_sized() {
    let (gen, _, store) = setup(1);
    let frame = random_frame(&mut ChaCha8Rng::seed_from_u64(2), 32);
    let a = student_forward(&gen, &store, &frame).unwrap();
    let b = student_forward(&gen, &store, &frame).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.dims(), (32, 32));
    assert_eq!(a.source, MapSource::Student);
}

#[test]
fn student_rejects_non_rgb_input() {
    let (gen, _, store) = setup(1);
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(&[1, 4, 8, 8]));
    assert!(matches!(gen.forward(&mut g, &store, x), Err(Error::DimensionMismatch { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn student_output_stays_in_unit_range(seed in any::<u64>(), size in 8usize..24, gain in 0.0f32..50.0) {
        let (gen, _, mut store) = setup(seed);
        // Inflated weights push the sigmoid into saturation.
        if let Some(w) = store.get_mut("smg.conv6.weight") {
            w.data_mut().iter_mut().for_each(|v| *v *= gain);
        }
        let frame = random_frame(&mut ChaCha8Rng::seed_from_u64(seed ^ 1), size);
        let map = student_forward(&gen, &store, &frame).unwrap();
        prop_assert!(map.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn l2_is_symmetric_and_separates(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_map(&mut rng, 5);
        let b = random_map(&mut rng, 5);
        let ab = kd_l2_loss(&a, &b).unwrap();
        prop_assert_eq!(ab, kd_l2_loss(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(kd_l2_loss(&a, &a).unwrap(), 0.0);
        prop_assert!(a == b || ab > 0.0);
    }
}

#[test]
fn l2_examples() {
    let zeros = SubjectMap::filled(4, 4, 0.0, MapSource::Student);
    let ones = SubjectMap::filled(4, 4, 1.0, MapSource::Teacher);
    assert_eq!(kd_l2_loss(&zeros, &zeros).unwrap(), 0.0);
    assert_eq!(kd_l2_loss(&zeros, &ones).unwrap(), 1.0);
    assert!(matches!(
        kd_l2_loss(&zeros, &SubjectMap::filled(4, 5, 0.0, MapSource::Teacher)),
        Err(Error::DimensionMismatch { .. })
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random_map(&mut rng, 6);
    let b = random_map(&mut rng, 6);
    let mut brute = 0.0f64;
    for i in 0..36 {
        let d = a.values()[i] as f64 - b.values()[i] as f64;
        brute += d * d;
    }
    assert!((kd_l2_loss(&a, &b).unwrap() - brute / 36.0).abs() < 1e-12);
}

#[test]
fn lsgan_examples() {
    assert_eq!(lsgan_losses(&[1.0, 1.0], &[0.0, 0.0]), (0.0, 0.5));
    assert_eq!(lsgan_losses(&[0.5; 3], &[0.5; 3]), (0.25, 0.125));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let real: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..2.0)).collect();
    let fake: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..2.0)).collect();
    let (mut d, mut gl) = (0.0, 0.0);
    for i in 0..7 {
        d += 0.5 * ((real[i] - 1.0) * (real[i] - 1.0) + fake[i] * fake[i]);
        gl += 0.5 * (fake[i] - 1.0) * (fake[i] - 1.0);
    }
    let (dl, gen_l) = lsgan_losses(&real, &fake);
    assert!((dl - d / 7.0).abs() < 1e-12 && (gen_l - gl / 7.0).abs() < 1e-12);

    let mut g = Graph::<f64>::new();
    let r = g.input(Tensor::from_vec(&[7, 1], real.clone()).unwrap());
    let f = g.input(Tensor::from_vec(&[7, 1], fake.clone()).unwrap());
    let (dv, gv) = lsgan_terms(&mut g, r, f).unwrap();
    assert!((g.value(dv).data()[0] - dl).abs() < 1e-12);
    assert!((g.value(gv).data()[0] - gen_l).abs() < 1e-12);
}

#[test]
fn adversarial_losses_match_critic_scores() {
    let gen = StudentGenerator::new("smg");
    let disc = Discriminator::new("disc");
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    gen.init(&mut store, &mut rng);
    disc.init(&mut store, &mut rng);
    let frames: Vec<FrameImage> = (0..3).map(|_| random_frame(&mut rng, 16)).collect();
    let real: Vec<SubjectMap> = (0..3).map(|_| random_map(&mut rng, 16)).collect();
    let fake = gen.predict(&store, &frames).unwrap();
    let (d, gl) = adversarial_losses(&disc, &store, &frames, &real, &fake).unwrap();

    let score = |maps: &[SubjectMap]| -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.input(Planes::batch(frames.iter().map(|f| f.planes())).unwrap());
        let m = g.input(SubjectMap::batch(maps).unwrap());
        let s = disc.forward(&mut g, &store, m, x).unwrap();
        assert_eq!(g.shape(s), &[3, 1]);
        g.value(s).data().to_vec()
    };
    let (ed, eg) = lsgan_losses(&score(&real), &score(&fake));
    assert!((d - ed).abs() < 1e-12 && (gl - eg).abs() < 1e-12);
}

#[test]
fn total_loss_examples() {
    let w = KDLossWeights { alpha: 1.0, beta: 0.5 };
    assert_eq!(kd_total_loss(0.0, 0.0, 0.0, w), 0.0);
    assert_eq!(kd_total_loss(2.0, 3.0, 1.0, w), 4.5);
    assert_eq!(KDLossWeights::default(), KDLossWeights { alpha: 1.0, beta: 0.05 });
    assert!(KDLossWeights { alpha: -1.0, beta: 0.0 }.validate().is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let w = KDLossWeights { alpha: rng.random_range(0.0..3.0), beta: rng.random_range(0.0..3.0) };
        let (l2, adv, cls): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        let expected = w.alpha * l2 + w.beta * adv + cls;
        assert!((kd_total_loss(l2, adv, cls, w) - expected).abs() < 1e-12);

        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::scalar(l2));
        let b = g.input(Tensor::scalar(adv));
        let t = sgnet::subject::loss::kd_terms(&mut g, a, b, w).unwrap();
        assert!((g.value(t).data()[0] + cls - expected).abs() < 1e-12);
    }
}

#[test]
fn l2_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let student = Tensor::<f64>::uniform(&[1, 1, 4, 4], 0.0, 1.0, &mut rng);
    let teacher = Tensor::<f64>::uniform(&[1, 1, 4, 4], 0.0, 1.0, &mut rng);
    let check = check_gradient(&student, 1e-6, |g, x| {
        let t = g.input(teacher.clone());
        g.mse(x, t)
    })
    .unwrap();
    assert!(check.relative_error() <= 1e-4, "{}", check.relative_error());
}

#[test]
fn adversarial_gradients_match_finite_differences() {
    let disc = Discriminator::new("disc");
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    disc.init(&mut store, &mut rng);
    let frames = Tensor::<f64>::uniform(&[2, 3, 4, 4], 0.0, 1.0, &mut rng);
    let real = Tensor::<f64>::uniform(&[2, 1, 4, 4], 0.0, 1.0, &mut rng);
    let fake = Tensor::<f64>::uniform(&[2, 1, 4, 4], 0.0, 1.0, &mut rng);
    for pick_disc in [true, false] {
        let check = check_gradient(&fake, 1e-6, |g, f| {
            let x = g.input(frames.clone());
            let r = g.input(real.clone());
            let dr = disc.forward(g, &store, r, x)?;
            let df = disc.forward(g, &store, f, x)?;
            let (d, gl) = lsgan_terms(g, dr, df)?;
            Ok(if pick_disc { d } else { gl })
        })
        .unwrap();
        assert!(check.relative_error() <= 1e-4, "{}", check.relative_error());
    }
}

#[test]
fn oracle_teacher_examples() {
    let flat = FrameImage::new(Planes::filled(3, 16, 16, 0.4)).unwrap();
    let m = oracle_teacher(&flat);
    let (lo, hi) = m.values().iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    assert!(hi - lo <= 0.05);
    assert_eq!(m.source, MapSource::Oracle);

    let mut p = Planes::filled(3, 24, 24, 0.1);
    let inside = |i: usize| (8..16).contains(&(i / 24)) && (10..18).contains(&(i % 24));
    for c in 0..3 {
        for (i, v) in p.plane_mut(c).iter_mut().enumerate() {
            if inside(i) {
                *v = 0.9;
            }
        }
    }
    let frame = FrameImage::new(p).unwrap();
    let m = oracle_teacher(&frame);
    let (mut si, mut ni, mut so, mut no) = (0.0, 0, 0.0, 0);
    for (i, &v) in m.values().iter().enumerate() {
        if inside(i) {
            si += v;
            ni += 1;
        } else {
            so += v;
            no += 1;
        }
    }
    assert!(si / ni as f32 > so / no as f32);
    assert_eq!(oracle_teacher(&frame), m);
}

#[test]
fn teacher_maps_load_clamp_and_report_missing() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..3u64 {
        let img = image::GrayImage::from_pixel(6, 4, image::Luma([(i * 100) as u8]));
        img.save(dir.path().join(format!("s_{i}.png"))).unwrap();
    }
    let maps = load_teacher_maps(dir.path(), "s", &[0, 1, 2]).unwrap();
    assert_eq!(maps.len(), 3);
    assert!(maps.iter().all(|m| m.source == MapSource::Teacher && m.dims() == (4, 6)));
    assert!((maps[2].values()[0] - 200.0 / 255.0).abs() < 1e-4);

    let err = load_teacher_maps(dir.path(), "t", &[0, 1, 2]).unwrap_err();
    assert!(matches!(err, Error::MissingMap { index: 0, .. }));
    std::fs::remove_file(dir.path().join("s_2.png")).unwrap();
    let err = load_teacher_maps(dir.path(), "s", &[0, 1, 2]).unwrap_err();
    assert!(err.to_string().contains("index 2"), "{err}");

    let mut corrupt = Planes::filled(1, 2, 2, 0.5);
    corrupt.data[3] = 1.2;
    write_fmap(dir.path().join("s_2.fmap"), &corrupt).unwrap();
    let loader = TeacherMapLoader::new(dir.path());
    let m = loader.load("s", &[2]).unwrap();
    assert_eq!(m[0].values(), &[0.5, 0.5, 0.5, 1.0]);
    assert_eq!(loader.clamped_count(), 1);
}

#[test]
fn student_overfits_one_teacher_map() {
    let (frame, teacher) = fixture_pair(ScaleType::Ms, 3, 32);
    let (gen, disc, mut store) = setup(11);
    let mut opt = kd_optimizer::<f32>();
    let x: Tensor<f32> = Planes::batch([frame.planes()]).unwrap();
    let t: Tensor<f32> = SubjectMap::batch(std::slice::from_ref(&teacher)).unwrap();
    for _ in 0..200 {
        kd_step(&gen, &disc, &mut store, &mut opt, &x, &t, &KdSettings::default()).unwrap();
    }
    let l2 = kd_l2_loss(&student_forward(&gen, &store, &frame).unwrap(), &teacher).unwrap();
    assert!(l2 < 0.01, "L2 after 200 steps: {l2}");
}

#[test]
fn distillation_reduces_running_loss() {
    let pairs: Vec<_> = (0..10).map(|i| fixture_pair(ScaleType::ALL[i % 5], 100 + i as u64, 32)).collect();
    let x: Tensor<f32> = Planes::batch(pairs.iter().map(|(f, _)| f.planes())).unwrap();
    let maps: Vec<SubjectMap> = pairs.iter().map(|(_, m)| m.clone()).collect();
    let t: Tensor<f32> = SubjectMap::batch(&maps).unwrap();
    let (gen, disc, mut store) = setup(12);
    let mut opt = kd_optimizer::<f32>();
    let mut losses = Vec::new();
    for _ in 0..300 {
        losses.push(kd_step(&gen, &disc, &mut store, &mut opt, &x, &t, &KdSettings::default()).unwrap().total);
    }
    let tail = losses[280..].iter().sum::<f64>() / 20.0;
    assert!(tail < losses[0], "step 0 {} vs final running mean {tail}", losses[0]);
}
