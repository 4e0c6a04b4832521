use dpua_core::annotation::AnnotationCounts;
use dpua_core::metrics::{accuracy, macro_f1, pearson, pearson_coef, EvalRecord};
use dpua_core::{AnnotatedSample, DisagreementDistribution, Label, Split, TaskKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unanimous(id: usize, gold: Label) -> AnnotatedSample {
    let counts = match gold {
        Label::Pos => AnnotationCounts::new(3, 0),
        Label::Neg => AnnotationCounts::new(0, 3),
    }
    .unwrap();
    AnnotatedSample::new(format!("s{id}"), TaskKind::Sarcasm, None, "x", counts, None, Split::Test)
        .unwrap()
}

fn label(bits: u32, i: usize) -> Label {
    if bits >> i & 1 == 1 {
        Label::Pos
    } else {
        Label::Neg
    }
}

/// F1 per class from an explicit 2x2 confusion matrix `m[gold][pred]`,
/// 0 for a class that never occurs.
fn oracle(golds: &[Label], preds: &[Label]) -> (f64, f64) {
    let idx = |l: Label| usize::from(l == Label::Pos);
    let mut m = [[0usize; 2]; 2];
    for (g, p) in golds.iter().zip(preds) {
        m[idx(*g)][idx(*p)] += 1;
    }
    let acc = (m[0][0] + m[1][1]) as f64 / golds.len() as f64;
    let f1 = |c: usize| {
        let tp = m[c][c];
        let fp = m[1 - c][c];
        let fneg = m[c][1 - c];
        if tp + fp + fneg == 0 {
            0.0
        } else {
            let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let recall = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        }
    };
    (acc, (f1(0) + f1(1)) / 2.0)
}

#[test]
fn label_metrics_match_confusion_matrix_on_all_labelings() {
    let mut seen = 0;
    for gold_bits in 0..8u32 {
        for pred_bits in 0..8u32 {
            let golds: Vec<Label> = (0..3).map(|i| label(gold_bits, i)).collect();
            let preds: Vec<Label> = (0..3).map(|i| label(pred_bits, i)).collect();
            let records: Vec<EvalRecord> = golds
                .iter()
                .zip(&preds)
                .enumerate()
                .map(|(i, (g, p))| EvalRecord::valid(&unanimous(i, *g), *p, 0.9))
                .collect();
            let (acc, f1) = oracle(&golds, &preds);
            assert!((accuracy(&records).unwrap() - acc).abs() < 1e-12, "{golds:?} {preds:?}");
            assert!((macro_f1(&records).unwrap() - f1).abs() < 1e-12, "{golds:?} {preds:?}");
            seen += 1;
        }
    }
    assert_eq!(seen, 64);
}

fn textbook_pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let syy: f64 = ys.iter().map(|y| y * y).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

fn record(p_model: f64, p_human: f64) -> EvalRecord {
    let dist = |p: f64| DisagreementDistribution::new(p, 1.0 - p).unwrap();
    EvalRecord {
        id: "r".into(),
        gold: if p_human > 0.5 { Label::Pos } else { Label::Neg },
        human: dist(p_human),
        prediction: Some(if p_model >= 0.5 { Label::Pos } else { Label::Neg }),
        confidence: p_model.max(1.0 - p_model),
        model: dist(p_model),
        parse_valid: true,
        agreement: p_human.max(1.0 - p_human),
        unanimous: false,
    }
}

#[test]
fn pearson_matches_textbook_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = rng.gen_range(3..60);
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        // mix in a correlated component so the coefficients span [-1, 1]
        let w: f64 = rng.gen_range(-1.0..1.0);
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| (w * x + (1.0 - w.abs()) * rng.gen_range(0.0..1.0)).rem_euclid(1.0))
            .collect();
        let expected = textbook_pearson(&xs, &ys);
        assert!((pearson(&xs, &ys).unwrap() - expected).abs() < 1e-9);
        let records: Vec<EvalRecord> = xs.iter().zip(&ys).map(|(x, y)| record(*x, *y)).collect();
        assert!((pearson_coef(&records).unwrap() - expected).abs() < 1e-9);
    }
}

#[test]
fn perfectly_aligned_series_correlate_fully() {
    let xs = [0.1, 0.4, 0.35, 0.9];
    let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
    assert!((pearson(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
    let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
    assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
    assert!(pearson(&xs, &[0.5; 4]).is_err());
}
