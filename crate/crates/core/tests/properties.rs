use proptest::prelude::*;
use tch::{Device, Kind, Tensor};

use attrinet::classifier::{pool, youden_index, youden_threshold};
use attrinet::dataset::{
    contaminate, load_gray, make_synthetic, BoxAnnotation, ContaminationSpec, Dataset, ImageRecord, SyntheticConfig,
};
use attrinet::explain::{faithfulness_gap, global_explain, weighted_maps};
use attrinet::grid::{Grid, Rect};
use attrinet::guidance::{build_pseudo_binary, build_pseudo_weighted};
use attrinet::losses::{adversarial_loss, critic_loss, guidance_loss};
use attrinet::metrics::{auc, confounder_sensitivity, disease_sensitivity, Magnitude};
use attrinet::model::ModelConfig;
use attrinet::net::AttriNet;

fn tensor(values: &[f32], side: i64) -> Tensor {
    Tensor::from_slice(values).view([1, 1, side, side])
}

fn value(t: &Tensor) -> f64 {
    t.double_value(&[])
}

fn rect_in(side: usize) -> impl Strategy<Value = Rect> {
    (0..side, 0..side).prop_flat_map(move |(x, y)| (Just(x), Just(y), 1..=side - x, 1..=side - y))
        .prop_map(|(x, y, w, h)| Rect::new(x, y, w, h))
}

fn record(boxes: &[Rect]) -> ImageRecord {
    ImageRecord {
        id: "r".into(),
        image_path: "r.png".into(),
        labels: vec![1],
        boxes: boxes.iter().map(|&rect| BoxAnnotation { class_index: 0, rect }).collect(),
        seg_masks: vec![None],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn guidance_loss_is_a_scale_free_fraction(
        values in prop::collection::vec(-1f32..1.0, 64),
        mask in prop::collection::vec(any::<bool>(), 64),
        scale in 0.01f32..100.0,
    ) {
        prop_assume!(values.iter().any(|v| v.abs() > 1e-3));
        let m = tensor(&values, 8);
        let g = tensor(&mask.iter().map(|&b| f32::from(u8::from(b))).collect::<Vec<_>>(), 8);
        let l = value(&guidance_loss(&m, &g).unwrap());
        prop_assert!((0.0..=1.0 + 1e-6).contains(&l));
        let scaled = value(&guidance_loss(&(&m * f64::from(scale)), &g).unwrap());
        prop_assert!((l - scaled).abs() < 1e-5);
    }

    #[test]
    fn moving_mass_inside_never_raises_guidance_loss(
        values in prop::collection::vec(0.01f32..1.0, 64),
        mask in prop::collection::vec(any::<bool>(), 64),
        from in 0usize..64, to in 0usize..64,
    ) {
        prop_assume!(!mask[from] && mask[to]);
        let g = tensor(&mask.iter().map(|&b| f32::from(u8::from(b))).collect::<Vec<_>>(), 8);
        let mut moved = values.clone();
        moved[to] += moved[from];
        moved[from] = 0.0;
        let before = value(&guidance_loss(&tensor(&values, 8), &g).unwrap());
        let after = value(&guidance_loss(&tensor(&moved, 8), &g).unwrap());
        prop_assert!(after <= before + 1e-6);
    }

    #[test]
    fn pooling_is_linear(
        a in prop::collection::vec(-1f32..1.0, 256),
        b in prop::collection::vec(-1f32..1.0, 256),
        (p, q) in (-3f64..3.0, -3f64..3.0),
    ) {
        let (ma, mb) = (tensor(&a, 16).to_kind(Kind::Double), tensor(&b, 16).to_kind(Kind::Double));
        let lhs = pool(&(&ma * p + &mb * q), 4, &[4, 4]).unwrap();
        let rhs = pool(&ma, 4, &[4, 4]).unwrap() * p + pool(&mb, 4, &[4, 4]).unwrap() * q;
        prop_assert!(value(&(lhs - rhs).abs().max()) < 1e-12);
    }

    #[test]
    fn youden_threshold_beats_every_candidate(
        pos in prop::collection::vec(0f64..1.0, 1..30),
        neg in prop::collection::vec(0f64..1.0, 1..30),
    ) {
        let (tau, j) = youden_threshold(&pos, &neg);
        prop_assert!((youden_index(&pos, &neg, tau) - j).abs() < 1e-12);
        let mut unique: Vec<f64> = pos.iter().chain(&neg).copied().collect();
        unique.sort_by(f64::total_cmp);
        unique.dedup();
        for w in unique.windows(2) {
            prop_assert!(j >= youden_index(&pos, &neg, 0.5 * (w[0] + w[1])) - 1e-12);
        }
    }

    #[test]
    fn auc_matches_pair_counting(
        scored in prop::collection::vec((0u8..10, any::<bool>()), 2..100),
    ) {
        let scores: Vec<f64> = scored.iter().map(|&(s, _)| f64::from(s)).collect();
        let labels: Vec<bool> = scored.iter().map(|&(_, l)| l).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        prop_assert!((auc(&scores, &labels).unwrap() - wins / pairs).abs() < 1e-12);
    }

    #[test]
    fn disease_sensitivity_is_a_scale_free_fraction(
        values in prop::collection::vec(-1f32..1.0, 64),
        area in rect_in(8),
        scale in 0.01f32..100.0,
    ) {
        prop_assume!(values.iter().any(|v| v.abs() > 1e-3));
        let e = Grid::from_vec(8, 8, values).unwrap();
        let a = Grid::from_rect(8, 8, &area);
        for magnitude in [Magnitude::Abs, Magnitude::PositivePart] {
            let Ok(d) = disease_sensitivity(&e, &a, magnitude) else { continue };
            prop_assert!((0.0..=1.0).contains(&d));
            let scaled = disease_sensitivity(&e.map(|v| v * scale), &a, magnitude).unwrap();
            prop_assert!((d - scaled).abs() < 1e-6);
        }
    }

    #[test]
    fn confounder_sensitivity_is_a_reproducible_fraction(
        values in prop::collection::vec(-1f32..1.0, 100),
        tag in rect_in(10),
    ) {
        let e = Grid::from_vec(10, 10, values).unwrap();
        let c = confounder_sensitivity(&e, &[tag]).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
        prop_assert_eq!(c, confounder_sensitivity(&e.clone(), &[tag]).unwrap());
    }

    #[test]
    fn pseudo_masks_match_rasterized_boxes(boxes in prop::collection::vec(rect_in(12), 1..5)) {
        let records: Vec<ImageRecord> = boxes.chunks(2).map(record).collect();
        let union = build_pseudo_binary(&records, 0, 12, 12).unwrap().values;
        let weighted = build_pseudo_weighted(&records, 0, 12, 12).unwrap().values;
        for row in 0..12 {
            for col in 0..12 {
                let inside = boxes.iter().any(|b| b.contains(col, row));
                prop_assert_eq!(union.get(row, col) == 1.0, inside);
                prop_assert_eq!(weighted.get(row, col) > 0.0, inside);
            }
        }
        prop_assert_eq!(weighted.max(), 1.0);
    }

    #[test]
    fn fake_terms_of_critic_and_generator_cancel(
        real in prop::collection::vec(-5f32..5.0, 1..8),
        fake in prop::collection::vec(-5f32..5.0, 1..8),
    ) {
        let (r, f) = (Tensor::from_slice(&real), Tensor::from_slice(&fake));
        let critic = value(&critic_loss(&r, &f, None).unwrap());
        let real_term = -real.iter().map(|&v| f64::from(v)).sum::<f64>() / real.len() as f64;
        let adversarial = value(&adversarial_loss(&f).unwrap());
        prop_assert!((critic - real_term + adversarial).abs() < 1e-5);
    }
}

#[test]
fn contamination_only_touches_the_tag_region() {
    let tmp = tempfile::tempdir().unwrap();
    let src = make_synthetic(&SyntheticConfig { num_samples: 24, ..SyntheticConfig::default() }, &tmp.path().join("src")).unwrap();
    let spec = ContaminationSpec::centered_top(0, 0.5, "CXR-ROOM1", 64);
    let out = contaminate(&src, &tmp.path().join("dst"), &spec, 9).unwrap();
    assert!(!out.entries.is_empty());
    let again = contaminate(&src, &tmp.path().join("dst2"), &spec, 9).unwrap();
    assert_eq!(out.entries, again.entries);
    let (before, after) = (Dataset::open(&src, 64).unwrap(), Dataset::open(&out.manifest, 64).unwrap());
    for (i, rec) in before.records().iter().enumerate() {
        let a = load_gray(&before.root().join(&rec.image_path)).unwrap();
        let b = load_gray(&after.root().join(&after.records()[i].image_path)).unwrap();
        let tagged = out.entries.iter().any(|e| e.id == rec.id);
        for row in 0..64 {
            for col in 0..64 {
                if !(tagged && spec.tag_region.contains(col, row)) {
                    assert_eq!(a.get(row, col), b.get(row, col), "{} changed at ({row},{col})", rec.id);
                }
            }
        }
    }
}

#[test]
fn explanations_of_an_untrained_network_are_exact_and_stable() {
    let names: Vec<String> = (0..3).map(|c| format!("c{c}")).collect();
    let net = AttriNet::new(&ModelConfig::desk(3), &names, 11).unwrap();
    let x = Tensor::rand([6, 1, 64, 64], (Kind::Float, Device::Cpu)) * 2.0 - 1.0;
    for c in 0..3 {
        let (m, weighted, logits) = weighted_maps(&net, &x, c).unwrap();
        assert!(faithfulness_gap(&weighted, &logits, 8).unwrap().iter().all(|&g| g < 1e-5));
        let cf = &x + &m;
        assert!(value(&cf.min()) >= -1.0 - 1e-6 && value(&cf.max()) <= 1.0 + 1e-6);
        let (m2, _, _) = weighted_maps(&net, &x, c).unwrap();
        assert!(m.equal(&m2));
    }
    let m0 = net.attribution(&x, 0).unwrap();
    let m1 = net.attribution(&x, 1).unwrap();
    assert!(value(&(m0 - m1).abs().sum(Kind::Double)) > 0.0, "task code has no effect");
    assert_eq!(global_explain(&net).unwrap(), global_explain(&net).unwrap());
}
