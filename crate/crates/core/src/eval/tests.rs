use super::*;

fn rec(label: usize, predicted: usize, confidence: f64) -> PredictionRecord {
    PredictionRecord {
        label,
        predicted,
        confidence,
        tag: Partition::Test,
    }
}

/// Twenty records with a spread of confidences; every third is wrong.
pub(super) fn twenty() -> Vec<PredictionRecord> {
    (0..20)
        .map(|i| {
            let label = i % 3;
            let predicted = if i % 3 == 2 { (label + 1) % 3 } else { label };
            rec(label, predicted, 0.35 + 0.03 * ((i * 7) % 20) as f64)
        })
        .collect()
}

#[test]
fn accuracy_examples() {
    assert_eq!(accuracy(&[rec(0, 0, 0.9), rec(1, 1, 0.8)]).unwrap(), 1.0);
    assert_eq!(accuracy(&[rec(0, 0, 0.9), rec(1, 0, 0.8)]).unwrap(), 0.5);
    let t = twenty();
    let manual = (0..20).filter(|i| i % 3 != 2).count() as f64 / 20.0;
    assert_eq!(accuracy(&t).unwrap(), manual);
    assert!(matches!(accuracy(&[]), Err(Error::Protocol(_))));
}

#[test]
fn threshold_examples() {
    let v: Vec<_> = [0.2, 0.4, 0.6, 0.8, 1.0].iter().map(|&c| rec(0, 0, c)).collect();
    assert_eq!(confidence_threshold(&v, 0.95, false).unwrap(), 0.2);
    assert_eq!(confidence_threshold(&v, 0.95, true).unwrap(), 1.0);
    assert_eq!(confidence_threshold(&v, 1.0, false).unwrap(), 0.2);
    let same: Vec<_> = (0..7).map(|_| rec(1, 1, 0.7)).collect();
    assert_eq!(confidence_threshold(&same, 0.95, false).unwrap(), 0.7);
    let wrong = vec![rec(0, 1, 0.9)];
    assert!(matches!(confidence_threshold(&wrong, 0.95, false), Err(Error::Degenerate(_))));
}

#[test]
fn threshold_keeps_the_requested_fraction() {
    let v: Vec<_> = (0..40).map(|i| rec(0, 0, 0.3 + 0.0171 * i as f64)).collect();
    for retention in [0.5, 0.8, 0.95, 0.99] {
        let t = confidence_threshold(&v, retention, false).unwrap();
        let kept = v.iter().filter(|p| p.confidence >= t).count() as f64 / v.len() as f64;
        assert!(kept >= retention - 1e-12, "{retention}: {kept}");
    }
}

#[test]
fn acc_star_edges() {
    let t = twenty();
    let all = acc_star(&t, 0.0).unwrap();
    assert_eq!(all.acc, Some(accuracy(&t).unwrap()));
    assert_eq!(all.retention, 1.0);
    let none = acc_star(&t, 2.0).unwrap();
    assert!(none.undefined());
    assert_eq!(none.retention, 0.0);
    let clean = [rec(0, 0, 0.9), rec(1, 1, 0.95), rec(1, 0, 0.4)];
    assert_eq!(acc_star(&clean, 0.5).unwrap().acc, Some(1.0));
}

#[test]
fn acc_star_matches_filter_and_count() {
    let t = twenty();
    let th = 0.7;
    let mut kept = 0;
    let mut right = 0;
    for p in &t {
        if p.confidence >= th {
            kept += 1;
            if p.label == p.predicted {
                right += 1;
            }
        }
    }
    let got = acc_star(&t, th).unwrap();
    assert_eq!(got.acc, Some(right as f64 / kept as f64));
    assert_eq!(got.retention, kept as f64 / 20.0);
}
