//! Invariants checked over randomized inputs.

use letkd::assign::{oracle_smooth, solve_hard, solve_smooth, AssignmentProblem};
use letkd::autograd::Tape;
use letkd::config::ExperimentConfig;
use letkd::container::{Payload, TensorContainer};
use letkd::data::{load_dataset, write_pattern_blobs};
use letkd::kd_layer::{init_kd_layer, kd_forward, AssignMode};
use letkd::kmeans::{kmeans, nearest, sq_dist};
use letkd::lda::fit_lda;
use letkd::metrics::MetricsRecord;
use letkd::model::{ModelSpec, Network};
use letkd::ops::{batch_norm_train, channel_softmax, Mode, RunningStats};
use letkd::optim::{sgd_update, OptimizerState};
use letkd::penultimate::{labels_from_3x3_kernels, PenultimateLabeler};
use letkd::selftest::random_subclass_problem;
use letkd::subclass::{counting_oracle_st, fit_subclass_model, intermediate_soft_labels};
use letkd::train::{build_labelers, train_student, train_teacher, TrainPlan, Variant};
use letkd::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn problem() -> impl Strategy<Value = AssignmentProblem> {
    (
        prop::collection::vec(-1.0f64..1.0, 1..=16),
        -1.0f64..1.0,
        0.1f64..50.0,
    )
        .prop_map(|(a, mu, eps)| AssignmentProblem::new(a, mu, eps))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_length_matches_shape(shape in prop::collection::vec(1usize..5, 1..4), extra in 0usize..3) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::new(&shape, vec![0.0; n]).is_ok());
        if extra > 0 {
            prop_assert!(Tensor::new(&shape, vec![0.0; n + extra]).is_err());
        }
    }

    #[test]
    fn softmax_rows_are_positive_distributions(seed in any::<u64>(), rows in 1usize..20, k in 1usize..12, t in 0.05f64..20.0, scale in 0.1f64..30.0) {
        let x = Tensor::randn(&[rows, k], scale, &mut rng(seed));
        let p = channel_softmax(&x, t).unwrap();
        for r in 0..rows {
            let row = p.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            let x = x.row(r);
            let spread = x.iter().cloned().fold(f64::MIN, f64::max) - x.iter().cloned().fold(f64::MAX, f64::min);
            if spread * t < 700.0 {
                prop_assert!(row.iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn batch_norm_whitens_each_channel(seed in any::<u64>(), n in 2usize..40, c in 1usize..6, scale in 4.0f64..20.0, shift in -5.0f64..5.0) {
        let x = Tensor::randn(&[n, c], scale, &mut rng(seed)).map(|v| v + shift);
        let mut stats = RunningStats::new(c);
        let eps = stats.eps;
        let (y, _) = batch_norm_train(&x, &Tensor::ones(&[c]), &Tensor::zeros(&[c]), &mut stats).unwrap();
        for ch in 0..c {
            let col: Vec<f64> = (0..n).map(|i| x.row(i)[ch]).collect();
            let out: Vec<f64> = (0..n).map(|i| y.row(i)[ch]).collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let var = |v: &[f64]| { let m = mean(v); v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64 };
            prop_assert!(mean(&out).abs() < 1e-6);
            let s2 = var(&col);
            prop_assert!((var(&out) - s2 / (s2 + eps)).abs() < 1e-9);
            if s2 >= 10.0 {
                prop_assert!((var(&out) - 1.0).abs() < 1e-6 * (1.0 + eps));
            }
        }
    }

    #[test]
    fn hard_solutions_are_vertices(p in problem()) {
        let s = solve_hard(&p);
        prop_assert!(s.is_vertex());
        prop_assert!((s.total_mass() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn smooth_solutions_lie_on_the_simplex_and_match_the_oracle(p in problem()) {
        let s = solve_smooth(&p).unwrap();
        prop_assert!((s.total_mass() - 1.0).abs() <= 1e-9);
        prop_assert!(s.q >= 0.0 && s.p.iter().all(|&v| v >= 0.0));
        let o = oracle_smooth(&p).unwrap();
        for (a, b) in s.p.iter().zip(&o.p) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        prop_assert!((s.q - o.q).abs() < 1e-6);
    }

    #[test]
    fn raising_a_score_raises_its_mass_and_lowers_rejection(p in problem(), pick in any::<prop::sample::Index>(), bump in 0.01f64..0.5) {
        let k = pick.index(p.a.len());
        let before = solve_smooth(&p).unwrap();
        // the exact changes must exceed rounding for strictness to be visible
        let gain = before.p[k] * ((p.epsilon * bump).exp() - 1.0);
        prop_assume!(before.p[k] < 1.0 - 1e-9 && before.q > 1e-300 && gain > 1e-12);
        let mut q = p.clone();
        q.a[k] += bump;
        let after = solve_smooth(&q).unwrap();
        prop_assert!(after.p[k] > before.p[k]);
        prop_assert!(after.q < before.q);
    }

    #[test]
    fn shifting_scores_and_threshold_together_changes_nothing(p in problem(), c in -3.0f64..3.0) {
        let base = solve_smooth(&p).unwrap();
        let shifted = AssignmentProblem::new(p.a.iter().map(|v| v + c).collect(), p.mu + c, p.epsilon);
        let s = solve_smooth(&shifted).unwrap();
        prop_assert!((s.q - base.q).abs() < 1e-12);
        for (a, b) in s.p.iter().zip(&base.p) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_alpha_returns_the_input_bitwise(seed in any::<u64>(), d in 1usize..6, k in 2usize..8, explicit in any::<bool>()) {
        let mode = if explicit { AssignMode::explicit_default() } else { AssignMode::BnRelu };
        let mut layer = init_kd_layer(d, k, 0.0, mode, seed).unwrap();
        let x = Tensor::randn(&[2, 3, 3, d], 1.0, &mut rng(seed ^ 1));
        let (x_hat, p_s) = kd_forward(&x, &mut layer, Mode::Train).unwrap();
        prop_assert_eq!(x_hat.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(p_s.shape(), &[2, 3, 3, k][..]);
    }

    #[test]
    fn zero_pixels_score_zero(seed in any::<u64>(), d in 1usize..6, k in 2usize..8) {
        let mut layer = init_kd_layer(d, k, 1.0, AssignMode::BnRelu, seed).unwrap();
        let x = Tensor::zeros(&[1, 2, 2, d]);
        let (_, p_s) = kd_forward(&x, &mut layer, Mode::Train).unwrap();
        for r in 0..4 {
            for v in p_s.row(r) {
                prop_assert!((v - 1.0 / k as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernels_stay_unit_norm_after_updates(seed in any::<u64>(), d in 1usize..6, k in 2usize..8, lr in 0.001f64..2.0, steps in 1usize..4) {
        let mut layer = init_kd_layer(d, k, 1.0, AssignMode::BnRelu, seed).unwrap();
        let mut opt = OptimizerState::new(lr, 0.9, true, 5e-4);
        let mut r = rng(seed ^ 7);
        for _ in 0..steps {
            let grads: Vec<Tensor> = layer.params().iter().map(|p| Tensor::randn(p.shape(), 3.0, &mut r)).collect();
            sgd_update(&mut layer.params_mut(), &grads, &mut opt).unwrap();
            layer.renormalize();
        }
        for row in 0..k {
            let n: f64 = layer.omega.row(row).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() <= 1e-9);
        }
        let nu = layer.nu.as_ref().unwrap().transpose2().unwrap();
        for col in 0..k {
            let n: f64 = nu.row(col).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() <= 1e-9);
        }
        let shapes: Vec<&[usize]> = layer.params().into_iter().map(Tensor::shape).collect();
        prop_assert_eq!(opt.velocity.iter().map(Tensor::shape).collect::<Vec<_>>(), shapes);
    }

    #[test]
    fn penultimate_labels_favor_the_nearest_center(seed in any::<u64>(), k in 2usize..10, d in 1usize..5, tau in 0.1f64..4.0) {
        let mut r = rng(seed);
        let centers = Tensor::randn(&[k, d], 2.0, &mut r);
        let labeler = PenultimateLabeler::from_centers(centers.clone(), tau).unwrap();
        let map = Tensor::randn(&[2, 3, 3, d], 2.0, &mut r);
        let p = labeler.label(&map).unwrap();
        for px in 0..18 {
            let row = p.row(px);
            let pixel = &map.data()[px * d..(px + 1) * d];
            let dists: Vec<f64> = (0..k).map(|j| sq_dist(pixel, centers.row(j))).collect();
            let spread = dists.iter().cloned().fold(f64::MIN, f64::max) - dists.iter().cloned().fold(f64::MAX, f64::min);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            // positivity holds while e^(−spread/τ) stays a normal float
            if spread / tau < 700.0 {
                prop_assert!(row.iter().all(|&v| v > 0.0));
            }
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            let (near, dist) = nearest(&map.data()[px * d..(px + 1) * d], &centers);
            prop_assert!(best == near || (sq_dist(&map.data()[px * d..(px + 1) * d], centers.row(best)) - dist).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_labels_are_positive_distributions(seed in any::<u64>(), k in 1usize..10, tau in 0.1f64..4.0) {
        let act = Tensor::randn(&[2, 2, 2, k], 3.0, &mut rng(seed));
        let p = labels_from_3x3_kernels(&act, tau).unwrap();
        for r in 0..8 {
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(p.row(r).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn container_round_trip_is_bit_exact(dims in prop::collection::vec(0usize..5, 0..4), seed in any::<u64>(), kind in 0u8..4) {
        let n: usize = dims.iter().product();
        let mut r = rng(seed);
        let payload = match kind {
            0 => Payload::F32((0..n).map(|_| rand::Rng::random::<f32>(&mut r) - 0.5).collect()),
            1 => Payload::F64(Tensor::randn(&[n], 1e3, &mut r).into_data()),
            2 => Payload::U8((0..n).map(|_| rand::Rng::random::<u8>(&mut r)).collect()),
            _ => Payload::I64((0..n).map(|_| rand::Rng::random::<i64>(&mut r)).collect()),
        };
        let c = TensorContainer::new(&dims, payload).unwrap();
        let bytes = c.encode();
        prop_assert_eq!(bytes.len(), c.encoded_len());
        prop_assert_eq!(bytes.len() - (7 + 4 * dims.len()), n * c.dtype().size());
        prop_assert_eq!(TensorContainer::decode(&bytes).unwrap(), c);
    }

    #[test]
    fn metrics_rows_round_trip(epoch in 0usize..1000, vals in prop::array::uniform5(-1e6f64..1e6)) {
        let r = MetricsRecord {
            epoch,
            split: "test".into(),
            loss_ce: vals[0],
            loss_kd_penult: vals[1],
            loss_kd_inter: vals[2],
            top1: vals[3],
            wall_seconds: vals[4],
        };
        prop_assert_eq!(MetricsRecord::parse_row(&r.to_row()).unwrap(), r);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn kmeans_is_deterministic_per_seed(seed in any::<u64>(), n in 10usize..200, k in 1usize..6) {
        let pts = Tensor::randn(&[n, 3], 1.0, &mut rng(seed));
        let a = kmeans(&pts, k, seed).unwrap();
        let b = kmeans(&pts, k, seed).unwrap();
        prop_assert_eq!(a.centers, b.centers);
        prop_assert_eq!(a.assignments, b.assignments);
    }

    #[test]
    fn supervision_table_matches_counting(seed in any::<u64>()) {
        let (z, y, c, k) = random_subclass_problem(&mut rng(seed), 600);
        let model = fit_subclass_model(&z, &y, c, k, seed).unwrap();
        let (s_t, report) = counting_oracle_st(&z, &y, &model.prototypes).unwrap();
        prop_assert_eq!(&s_t, &model.s_t);
        prop_assert_eq!(&report, &model.report);
        for r in 0..s_t.rows() {
            prop_assert!((s_t.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(s_t.row(r).iter().all(|&v| v >= 0.0));
        }
        // each prototype is the mean of the pixels its class assigns to it
        let d = z.last_dim();
        for cls in 0..c {
            let mut sums = vec![0.0; k * d];
            let mut counts = vec![0usize; k];
            for i in (0..y.len()).filter(|&i| y[i] == cls) {
                let h = model.h1(z.row(i), cls) - cls * k;
                counts[h] += 1;
                for (s, v) in sums[h * d..(h + 1) * d].iter_mut().zip(z.row(i)) {
                    *s += v;
                }
            }
            for h in (0..k).filter(|&h| counts[h] > 0) {
                for j in 0..d {
                    let proto = model.prototypes.data()[((cls * k) + h) * d + j];
                    prop_assert!((proto - sums[h * d + j] / counts[h] as f64).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn pixels_sharing_label_and_subclass_share_targets(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (z, y, c, k) = random_subclass_problem(&mut r, 400);
        prop_assume!(c >= 2);
        let lda = fit_lda(&z, &y, 0.1).unwrap();
        let model = fit_subclass_model(&lda.apply_map(&z).unwrap(), &y, c, k, seed).unwrap();
        let d = z.last_dim();
        let (b, h, w) = (4, 3, 3);
        let map = Tensor::randn(&[b, h, w, d], 2.0, &mut r);
        let labels: Vec<usize> = (0..b).map(|i| i % c).collect();
        let p = intermediate_soft_labels(&map, &labels, &lda, &model).unwrap();
        let zmap = lda.apply_map(&map).unwrap();
        let key = |px: usize| (labels[px / (h * w)], model.h1(zmap.row(px), labels[px / (h * w)]));
        for i in 0..b * h * w {
            for j in 0..i {
                if key(i) == key(j) {
                    prop_assert_eq!(p.row(i), p.row(j));
                }
            }
        }
    }

    #[test]
    fn lda_on_a_map_equals_lda_per_pixel(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (z, y, c, _) = random_subclass_problem(&mut r, 300);
        prop_assume!(c >= 2);
        let lda = fit_lda(&z, &y, 0.1).unwrap();
        prop_assert_eq!(lda.output_dim(), (c - 1).min(z.last_dim()));
        let d = z.last_dim();
        let map = Tensor::randn(&[2, 3, 2, d], 1.5, &mut r);
        let out = lda.apply_map(&map).unwrap();
        for px in 0..12 {
            let expect = lda.apply_row(&map.data()[px * d..(px + 1) * d]);
            for (a, b) in out.row(px).iter().zip(&expect) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn backward_reaches_every_parameter(seed in any::<u64>()) {
        let spec = ModelSpec::plain_cnn([8, 8, 3], &[(4, 2), (6, 2), (6, 1)], 3).unwrap();
        let mut net = Network::init(&spec, seed).unwrap();
        net.kd_penult = Some(init_kd_layer(6, 4, 1.0, AssignMode::BnRelu, seed).unwrap());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[4, 8, 8, 3], 1.0, &mut rng(seed)));
        let out = net.forward(&mut tape, x, Mode::Train, true).unwrap();
        let ce = tape.cross_entropy(out.logits, &[0, 1, 2, 0]).unwrap();
        let target = channel_softmax(&Tensor::randn(&[4, 2, 2, 4], 1.0, &mut rng(seed ^ 3)), 1.0).unwrap();
        let kl = tape.kl_div(&target, out.kd_penult.as_ref().unwrap().p_s).unwrap();
        let total = tape.weighted_sum(&[(ce, 1.0), (kl, 1.0)]).unwrap();
        tape.backward(total).unwrap();
        for &v in &out.params {
            let g = tape.grad(v);
            prop_assert!(g.is_some());
            prop_assert_eq!(g.unwrap().shape(), tape.value(v).shape());
        }
    }
}

fn bits(net: &Network) -> Vec<u64> {
    let mut v: Vec<u64> = net
        .params()
        .iter()
        .flat_map(|t| t.data().iter().map(|x| x.to_bits()))
        .collect();
    for (_, s) in net.running_stats() {
        v.extend(
            s.mean
                .data()
                .iter()
                .chain(s.var.data())
                .map(|x| x.to_bits()),
        );
    }
    v
}

struct Tiny {
    _dir: tempfile::TempDir,
    data: letkd::data::Dataset,
    spec: ModelSpec,
    plan: TrainPlan,
    teacher: Network,
    labelers: letkd::checkpoint::TeacherLabelers,
}

fn tiny(seed: u64) -> Tiny {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml(
        "[data]\nnum_classes = 3\nimage_size = 16\ntrain = 48\ntest = 24\n\
         [teacher]\ngroups = [[6, 2], [8, 2], [8, 1]]\n\
         [student]\ngroups = [[4, 2], [6, 2], [6, 1]]\n\
         [kd]\nk_penult = 4\nk_inter = 2\n\
         [train]\nepochs = 2\nmilestones = [1]\nbatch_size = 16\neval_every = 1\n",
    )
    .unwrap();
    write_pattern_blobs(&cfg.blobs().unwrap(), seed, dir.path()).unwrap();
    let data = load_dataset(dir.path(), 3, cfg.input_shape()).unwrap();
    let mut teacher = train_teacher(
        &cfg.teacher_spec().unwrap(),
        &cfg.teacher_plan().unwrap(),
        &data,
        None,
    )
    .unwrap()
    .checkpoint
    .network;
    let spec = cfg.student_spec().unwrap();
    let plan = TrainPlan {
        seed,
        ..cfg.plan().unwrap()
    };
    let labelers = build_labelers(&mut teacher, &data, &spec, &plan, seed).unwrap();
    Tiny {
        _dir: dir,
        data,
        spec,
        plan,
        teacher,
        labelers,
    }
}

impl Tiny {
    fn student(&self, plan: &TrainPlan) -> letkd::train::TrainReport {
        train_student(
            &self.spec,
            plan,
            Some(&self.teacher),
            Some(&self.labelers),
            &self.data,
            None,
        )
        .unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    // Training also fails with an error whenever the reported total loss
    // departs from CE plus the KD terms by more than 1e-9.
    #[test]
    fn student_training_leaves_the_teacher_untouched_and_repeats_exactly(
        seed in 0u64..1000,
        variant in prop::sample::select(vec![Variant::VanillaKd, Variant::QuestStyle, Variant::LetKd1, Variant::LetKd2]),
    ) {
        let t = tiny(seed);
        let plan = TrainPlan { variant, ..t.plan.clone() };
        let before = bits(&t.teacher);
        let first = t.student(&plan);
        prop_assert_eq!(&before, &bits(&t.teacher));
        let second = t.student(&plan);
        prop_assert_eq!(bits(&first.checkpoint.network), bits(&second.checkpoint.network));
        prop_assert_eq!(format!("{:?}", first.history), format!("{:?}", second.history));
    }

    #[test]
    fn residual_with_zero_alpha_reduces_to_the_loss_only_variant(seed in 0u64..1000) {
        let t = tiny(seed);
        let a = t.student(&TrainPlan { variant: Variant::LetKd1, alpha_penult: 0.0, ..t.plan.clone() });
        let b = t.student(&TrainPlan { variant: Variant::QuestStyle, ..t.plan.clone() });
        let kd = |r: &letkd::train::TrainReport| r.history.iter().map(|m| m.loss_kd_penult.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(kd(&a), kd(&b));
        prop_assert_eq!(a.history, b.history);
    }
}
