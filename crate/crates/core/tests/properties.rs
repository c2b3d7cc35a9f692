mod common;

use common::{small_config, small_intrinsics, SMALL_STATS};
use fuselab_core::advtrain::lr_at;
use fuselab_core::attacks::{build_masks, check_feasible, pgd_attack_observed, Perturbation};
use fuselab_core::detector::{assign_targets, decode, iou, loss_of, perfect_prediction, RawPrediction};
use fuselab_core::evalkit::{average_precision, SceneResult};
use fuselab_core::ndlab::{ParamStore, Tensor};
use fuselab_core::scenegen::generate_scene;
use fuselab_core::{
    AttackSpec, Channel, Detection, Detector, FusionMode, GtBox, LrSchedule, MaskMode, ObjectClass, SceneSpec,
};
use proptest::prelude::*;

fn gt_box() -> impl Strategy<Value = GtBox> {
    (0.0f32..120.0, 0.0f32..88.0, 2.0f32..60.0, 2.0f32..60.0, 0usize..3).prop_map(|(x, y, w, h, c)| GtBox {
        bbox: [x, y, (x + w).min(128.0), (y + h).min(96.0)],
        class: ObjectClass::ALL[c],
    })
}

fn channel_sets() -> impl Strategy<Value = Vec<Channel>> {
    prop_oneof![
        Just(vec![Channel::Image]),
        Just(vec![Channel::Lidar]),
        Just(vec![Channel::Image, Channel::Lidar]),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_decode_round_trip(gt in prop::collection::vec(gt_box(), 1..8)) {
        let t = assign_targets(&gt, 96, 128);
        let pred = RawPrediction { grid: perfect_prediction(&t) };
        let dets = decode(&pred, 96, 128, 0.5, 1.0 - 1e-6);
        let kept: Vec<usize> = t.owner.iter().flatten().copied().collect();
        prop_assert_eq!(kept.len() + t.dropped, gt.len());
        for i in kept {
            let g = gt[i];
            let hit = dets.iter().any(|d| d.class == g.class && d.bbox.iter().zip(g.bbox).all(|(a, b)| (a - b).abs() < 1e-3));
            prop_assert!(hit, "gt {:?} not recovered from {:?}", g, dets);
        }
    }

    #[test]
    fn loss_total_is_the_weighted_sum(
        gt in prop::collection::vec(gt_box(), 0..6),
        logits in prop::collection::vec(-6.0f32..6.0, 8 * 12 * 16),
    ) {
        let t = assign_targets(&gt, 96, 128);
        let l = loss_of(&Tensor::new(vec![8, 12, 16], logits).unwrap(), &t).unwrap();
        prop_assert_eq!(l.total, (l.objectness + l.class) + 5.0 * l.regression);
        prop_assert!(l.objectness >= 0.0 && l.class >= 0.0 && l.regression >= 0.0);
        if gt.is_empty() {
            prop_assert_eq!(l.class, 0.0);
            prop_assert_eq!(l.regression, 0.0);
        }
    }

    #[test]
    fn decode_output_is_sorted_and_valid(logits in prop::collection::vec(-4.0f32..4.0, 8 * 12 * 16)) {
        let pred = RawPrediction { grid: Tensor::new(vec![8, 12, 16], logits).unwrap() };
        let dets = decode(&pred, 96, 128, 0.1, 0.5);
        for w in dets.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
        for (i, d) in dets.iter().enumerate() {
            prop_assert!(d.bbox[0] < d.bbox[2] && d.bbox[1] < d.bbox[3]);
            prop_assert!(d.bbox[0] >= 0.0 && d.bbox[2] <= 128.0 && d.bbox[1] >= 0.0 && d.bbox[3] <= 96.0);
            prop_assert!(d.score >= 0.1 && d.score < 1.0);
            for e in &dets[..i] {
                prop_assert!(e.class != d.class || iou(&e.bbox, &d.bbox) < 0.5);
            }
        }
    }

    #[test]
    fn ap_ignores_detection_order_within_scenes(seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rng = fuselab_core::rng::rng_from(seed);
        let scenes = common::random_ap_instance(&mut rng);
        // distinct scores make the pooled ranking order-independent
        let mut scenes: Vec<SceneResult> = scenes
            .into_iter()
            .enumerate()
            .map(|(si, mut s)| {
                for (di, d) in s.dets.iter_mut().enumerate() {
                    d.score = d.score * 0.5 + (si * 16 + di) as f32 * 1e-4;
                }
                s
            })
            .collect();
        let before: Vec<Option<f64>> = ObjectClass::ALL.iter().map(|&c| average_precision(&scenes, c, 0.5).map(|a| a.ap)).collect();
        for s in &mut scenes {
            s.dets.shuffle(&mut rng);
        }
        for (&c, b) in ObjectClass::ALL.iter().zip(&before) {
            let a = average_precision(&scenes, c, 0.5).map(|a| a.ap);
            prop_assert_eq!(a.is_some(), b.is_some());
            if let (Some(a), Some(b)) = (a, b) {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }
    }

    #[test]
    fn cosine_schedule_matches_closed_form(total in 1usize..5000, frac in 0.0f64..1.0, start in 1e-4f64..0.1) {
        let step = ((total as f64) * frac) as usize;
        let end = start / 5.0;
        let lr = lr_at(step, total, &LrSchedule::Cosine { start, end });
        let want = (start * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()) / 2.0).max(end);
        prop_assert_eq!(lr, want);
    }

    #[test]
    fn cyclic_schedule_peaks_then_decays(total in 10usize..5000, peak in 0.05f64..0.95) {
        let s = LrSchedule::Cyclic { max_lr: 1e-3, peak_fraction: peak };
        let lrs: Vec<f64> = (0..total).map(|i| lr_at(i, total, &s)).collect();
        prop_assert!(lrs.iter().all(|&v| (0.0..=1e-3).contains(&v)));
        let top = lrs.iter().cloned().fold(0.0, f64::max);
        let arg = lrs.iter().position(|&v| v == top).unwrap();
        prop_assert!(lrs[..=arg].windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(lrs[arg..].windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn checkpoint_bytes_round_trip(vals in prop::collection::vec(-1e6f32..1e6, 1..64), split in 0usize..64) {
        let split = split.min(vals.len());
        let mut p = ParamStore::new();
        p.insert("a.weight", Tensor::new(vec![split], vals[..split].to_vec()).unwrap()).unwrap();
        p.insert("b.bias", Tensor::new(vec![vals.len() - split], vals[split..].to_vec()).unwrap()).unwrap();
        let back = ParamStore::from_bytes(&p.to_bytes()).unwrap();
        prop_assert_eq!(back, p);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pgd_iterates_stay_feasible(
        seed in any::<u64>(),
        channels in channel_sets(),
        car_mask in any::<bool>(),
        fusion_idx in 0usize..4,
        eps in 0.0f32..6.0,
        gamma in 0.0f32..0.8,
        steps in 0usize..4,
        rand_init in any::<bool>(),
    ) {
        let intr = small_intrinsics();
        let scene = generate_scene(&SceneSpec::default(), &intr, seed).unwrap();
        let model = Detector::init(small_config(FusionMode::ALL[fusion_idx]), seed ^ 1).unwrap();
        let spec = AttackSpec {
            eps_image: eps,
            gamma_lidar: gamma,
            steps,
            rand_init,
            seed,
            ..AttackSpec::new(&channels, if car_mask { MaskMode::CarBoxes } else { MaskMode::Full })
        };
        let masks = build_masks(&scene, &intr, spec.mask);
        let mut violations = Vec::new();
        let mut seen = 0;
        let last = pgd_attack_observed(&model, &scene, &intr, &SMALL_STATS, &spec, |_, p, _| {
            seen += 1;
            violations.extend(check_feasible(&scene, p, &spec, &masks));
        })
        .unwrap();
        prop_assert_eq!(seen, steps + 1);
        prop_assert!(violations.is_empty(), "{:?}", &violations[..violations.len().min(3)]);
        prop_assert!(check_feasible(&scene, &last, &spec, &masks).is_empty());
    }

    #[test]
    fn car_masks_refine_full_masks(seed in any::<u64>()) {
        let intr = small_intrinsics();
        let scene = generate_scene(&SceneSpec::default(), &intr, seed).unwrap();
        let full = build_masks(&scene, &intr, MaskMode::Full);
        let cars = build_masks(&scene, &intr, MaskMode::CarBoxes);
        prop_assert!(full.image.iter().all(|&m| m) && full.points.iter().all(|&m| m));
        prop_assert!(cars.image_count() <= full.image_count());
        // every masked pixel center lies in some car box
        for (p, &m) in cars.image.iter().enumerate() {
            let (u, v) = ((p % intr.width) as f32 + 0.5, (p / intr.width) as f32 + 0.5);
            let in_car = scene.car_boxes().any(|g| u >= g.bbox[0] && u < g.bbox[2] && v >= g.bbox[1] && v < g.bbox[3]);
            prop_assert_eq!(m, in_car);
        }
    }

    #[test]
    fn zero_budget_attack_is_the_identity(seed in any::<u64>(), channels in channel_sets()) {
        let intr = small_intrinsics();
        let scene = generate_scene(&SceneSpec::default(), &intr, seed).unwrap();
        let model = Detector::init(small_config(FusionMode::Early), seed).unwrap();
        let spec = AttackSpec { eps_image: 0.0, gamma_lidar: 0.0, steps: 2, rand_init: true, ..AttackSpec::new(&channels, MaskMode::Full) };
        let p = fuselab_core::attacks::pgd_attack(&model, &scene, &intr, &SMALL_STATS, &spec).unwrap();
        prop_assert!(p.is_zero());
    }

    #[test]
    fn perturbation_bytes_round_trip(seed in any::<u64>()) {
        let intr = small_intrinsics();
        let scene = generate_scene(&SceneSpec::default(), &intr, seed).unwrap();
        let model = Detector::init(small_config(FusionMode::Early), seed).unwrap();
        let spec = AttackSpec { steps: 1, rand_init: true, seed, ..AttackSpec::new(&[Channel::Image, Channel::Lidar], MaskMode::Full) };
        let p = fuselab_core::attacks::pgd_attack(&model, &scene, &intr, &SMALL_STATS, &spec).unwrap();
        let back = Perturbation::from_bytes(&p.to_bytes(), &intr).unwrap();
        prop_assert_eq!(back, p);
    }
}

#[test]
fn detection_serializes_box_field() {
    let d = Detection { bbox: [1.0, 2.0, 3.0, 4.0], class: ObjectClass::Car, score: 0.5 };
    let v = serde_json::to_value(d).unwrap();
    assert!(v.get("box").is_some());
}
