use dpua_core::annotation::{agreement_score, disagreement_distribution, AnnotationCounts};
use dpua_core::grpo::{group_advantages, group_advantages_with, StdKind};
use dpua_core::protocol::{model_distribution, parse_output, parse_output_with_cap};
use dpua_core::reward::{calibration_mae, calibration_reward, reasoning_reward};
use dpua_core::{Label, TaskKind};
use proptest::prelude::*;

const EPS_ADV: f64 = 0.1;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn label() -> impl Strategy<Value = Label> {
    prop_oneof![Just(Label::Pos), Just(Label::Neg)]
}

fn group() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, 2..12)
}

proptest! {
    #![proptest_config(config(2000))]

    #[test]
    fn reasoning_reward_is_a_convex_combination(
        c in 0.5f64..=1.0, s_lab in 0.0f64..=1.0, s_cue in 0.0f64..=1.0,
    ) {
        let r = reasoning_reward(c, s_lab, s_cue, 0.5, 0.1).unwrap();
        prop_assert!(r >= s_lab.min(s_cue) - 1e-12);
        prop_assert!(r <= s_lab.max(s_cue) + 1e-12);
    }

    #[test]
    fn reasoning_reward_is_monotone(
        c in 0.5f64..=1.0, a in 0.0f64..=1.0, b in 0.0f64..=1.0, other in 0.0f64..=1.0,
    ) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-9);
        let lab_lo = reasoning_reward(c, lo, other, 0.5, 0.1).unwrap();
        let lab_hi = reasoning_reward(c, hi, other, 0.5, 0.1).unwrap();
        prop_assert!(lab_hi > lab_lo);
        let cue_lo = reasoning_reward(c, other, lo, 0.5, 0.1).unwrap();
        let cue_hi = reasoning_reward(c, other, hi, 0.5, 0.1).unwrap();
        prop_assert!(cue_hi > cue_lo);
    }

    #[test]
    fn binary_mae_is_difference_of_positive_mass(
        pred in label(), conf in 0.501f64..=1.0, pos in 0u32..20, neg in 0u32..20,
    ) {
        prop_assume!(pos + neg > 0);
        let human = disagreement_distribution(AnnotationCounts::new(pos, neg).unwrap()).unwrap();
        let model = model_distribution(pred, conf).unwrap();
        let mae = calibration_mae(&model, &human).unwrap();
        prop_assert!((mae - (model.p_pos - human.p_pos).abs()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&mae));
        let r = calibration_reward(mae).unwrap();
        prop_assert!((r + mae - 1.0).abs() < 1e-15);
    }

    #[test]
    fn distributions_are_normalized(
        pred in label(), conf in 0.501f64..=1.0, pos in 0u32..1000, neg in 0u32..1000,
    ) {
        let m = model_distribution(pred, conf).unwrap();
        prop_assert!(m.p_pos >= 0.0 && m.p_neg >= 0.0);
        prop_assert!((m.p_pos + m.p_neg - 1.0).abs() <= 1e-12);
        prop_assume!(pos + neg > 0);
        let h = disagreement_distribution(AnnotationCounts::new(pos, neg).unwrap()).unwrap();
        prop_assert!(h.p_pos >= 0.0 && h.p_neg >= 0.0);
        prop_assert!((h.p_pos + h.p_neg - 1.0).abs() <= 1e-12);
        let c = agreement_score(&h);
        prop_assert!((0.5..=1.0).contains(&c));
    }

    #[test]
    fn advantages_sum_to_zero(rewards in group()) {
        for kind in [StdKind::Population, StdKind::Sample] {
            let a = group_advantages_with(&rewards, EPS_ADV, kind).unwrap();
            prop_assert!(a.iter().sum::<f64>().abs() <= 1e-9);
        }
    }

    #[test]
    fn advantages_are_shift_invariant(rewards in group(), shift in -5.0f64..5.0) {
        let a = group_advantages(&rewards, EPS_ADV).unwrap();
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let b = group_advantages(&shifted, EPS_ADV).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn equal_rewards_give_zero_advantages(r in -3.0f64..3.0, g in 2usize..12) {
        let a = group_advantages(&vec![r; g], EPS_ADV).unwrap();
        prop_assert!(a.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn advantages_are_bounded_and_signed(rewards in group()) {
        let a = group_advantages(&rewards, EPS_ADV).unwrap();
        let max = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = rewards.iter().cloned().fold(f64::INFINITY, f64::min);
        for x in &a {
            prop_assert!(x.abs() <= (max - min) / EPS_ADV + 1e-12);
        }
        let argmax: Vec<usize> = (0..rewards.len()).filter(|&i| rewards[i] == max).collect();
        let argmin: Vec<usize> = (0..rewards.len()).filter(|&i| rewards[i] == min).collect();
        if max > min {
            if argmax.len() == 1 {
                prop_assert!(a[argmax[0]] > 0.0);
            }
            if argmin.len() == 1 {
                prop_assert!(a[argmin[0]] < 0.0);
            }
        }
    }
}

proptest! {
    #![proptest_config(config(10_000))]

    #[test]
    fn parser_is_total_on_random_bytes(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let text = String::from_utf8_lossy(&bytes);
        for task in TaskKind::ALL {
            if let Ok(out) = parse_output(&text, task) {
                prop_assert!(out.confidence > 0.5 && out.confidence <= 1.0);
                prop_assert!(!out.rationale.trim().is_empty());
            }
        }
    }
}

fn field_soup() -> impl Strategy<Value = String> {
    let piece = prop_oneof![
        Just("Prediction:".to_string()),
        Just("- prediction :".to_string()),
        Just("Rationale:".to_string()),
        Just("Confidence:".to_string()),
        Just("\n".to_string()),
        Just("Sarcastic".to_string()),
        Just("Not-sarcastic".to_string()),
        Just("Offensive".to_string()),
        Just("0.5".to_string()),
        Just("1.00".to_string()),
        Just("0.75".to_string()),
        Just("NaN".to_string()),
        Just("-0.9".to_string()),
        Just("1e9".to_string()),
        "[a-z .,]{0,12}",
    ];
    prop::collection::vec(piece, 0..14).prop_map(|v| v.join(" "))
}

proptest! {
    #![proptest_config(config(3000))]

    #[test]
    fn parser_is_total_on_field_soup(text in field_soup(), cap in 1usize..20) {
        for task in TaskKind::ALL {
            if let Ok(out) = parse_output_with_cap(&text, task, cap) {
                prop_assert!(out.confidence > 0.5 && out.confidence <= 1.0);
                prop_assert!(out.rationale.split_whitespace().count() <= cap);
            }
        }
    }
}
