use ndarray::Array2;
use nullsample::metrics::{
    accuracy, dp_diff, empirical_mi, hgr, joint_distribution, mutual_information, tnr_diff, tpr_diff, FairnessReport,
    MetricError,
};
use proptest::prelude::*;

fn flip(v: &[usize]) -> Vec<usize> {
    v.iter().map(|x| 1 - x).collect()
}

fn triples() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, Vec<usize>)> {
    (4usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(0usize..2, n),
            prop::collection::vec(0usize..2, n),
            prop::collection::vec(0usize..2, n),
        )
    })
}

fn categorical_pair() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (2usize..80).prop_flat_map(|n| (prop::collection::vec(0usize..4, n), prop::collection::vec(0usize..3, n)))
}

#[test]
fn report_has_seven_fields() {
    let report = FairnessReport::evaluate(&[1, 0, 1, 1], &[1, 0, 0, 1], &[0, 0, 1, 1]).unwrap();
    let value: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    let mut keys: Vec<&str> = value.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["accuracy", "dp_diff", "hgr", "mi_sy", "n_per_group", "tnr_diff", "tpr_diff"]);
    assert_eq!(report.n_per_group, vec![2, 2]);
}

#[test]
fn gaps_are_absent_for_non_binary_labels() {
    let report = FairnessReport::evaluate(&[0, 1, 2, 1], &[0, 1, 2, 2], &[0, 1, 0, 1]).unwrap();
    assert_eq!(report.accuracy, 0.75);
    assert!(report.dp_diff.is_none() && report.tpr_diff.is_none() && report.tnr_diff.is_none());
}

#[test]
fn empty_and_mismatched_inputs_are_errors() {
    assert_eq!(accuracy(&[], &[]), Err(MetricError::Empty));
    assert_eq!(dp_diff(&[1, 0], &[0]), Err(MetricError::LengthMismatch(2, 1)));
    assert_eq!(dp_diff(&[1, 0], &[0, 0]), Err(MetricError::EmptyGroup { group: 1 }));
}

#[test]
fn independent_variables_have_no_dependence() {
    let a: Vec<usize> = (0..40).map(|i| i % 2).collect();
    let b: Vec<usize> = (0..40).map(|i| (i / 2) % 2).collect();
    assert!(hgr(&a, &b).unwrap() < 1e-12);
    assert!(empirical_mi(&a, &b).unwrap() < 1e-12);
    assert!((hgr(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    assert!((empirical_mi(&a, &a).unwrap() - 2f64.ln()).abs() < 1e-12);
}

proptest! {
    #[test]
    fn gaps_are_symmetric_in_the_groups((preds, y, s) in triples()) {
        let swapped = flip(&s);
        prop_assert_eq!(dp_diff(&preds, &s).ok(), dp_diff(&preds, &swapped).ok());
        prop_assert_eq!(tpr_diff(&preds, &y, &s).ok(), tpr_diff(&preds, &y, &swapped).ok());
        prop_assert_eq!(tnr_diff(&preds, &y, &s).ok(), tnr_diff(&preds, &y, &swapped).ok());
    }

    #[test]
    fn gaps_lie_in_the_unit_interval((preds, y, s) in triples()) {
        for gap in [dp_diff(&preds, &s), tpr_diff(&preds, &y, &s), tnr_diff(&preds, &y, &s)].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&gap));
        }
        let acc = accuracy(&preds, &y).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn dependence_is_symmetric_and_bounded((a, b) in categorical_pair()) {
        let mi = empirical_mi(&a, &b).unwrap();
        prop_assert!(mi >= 0.0);
        prop_assert!((mi - empirical_mi(&b, &a).unwrap()).abs() < 1e-12);
        if let (Ok(ab), Ok(ba)) = (hgr(&a, &b), hgr(&b, &a)) {
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - ba).abs() < 1e-9);
        }
    }

    #[test]
    fn dependence_ignores_sample_order((a, b) in categorical_pair(), rotate in 0usize..80) {
        let k = rotate % a.len();
        let mut ra = a.clone();
        let mut rb = b.clone();
        ra.rotate_left(k);
        rb.rotate_left(k);
        prop_assert!((empirical_mi(&a, &b).unwrap() - empirical_mi(&ra, &rb).unwrap()).abs() < 1e-12);
        if let (Ok(x), Ok(y)) = (hgr(&a, &b), hgr(&ra, &rb)) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn dependence_ignores_relabelling((a, b) in categorical_pair()) {
        let relabel: Vec<usize> = a.iter().map(|v| 3 - v).collect();
        prop_assert!((empirical_mi(&a, &b).unwrap() - empirical_mi(&relabel, &b).unwrap()).abs() < 1e-12);
        if let (Ok(x), Ok(y)) = (hgr(&a, &b), hgr(&relabel, &b)) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn joint_is_a_distribution((a, b) in categorical_pair()) {
        let joint = joint_distribution(&a, &b).unwrap();
        prop_assert!((joint.sum() - 1.0).abs() < 1e-12);
        let product: Array2<f64> = {
            let pa = joint.sum_axis(ndarray::Axis(1));
            let pb = joint.sum_axis(ndarray::Axis(0));
            Array2::from_shape_fn(joint.dim(), |(i, j)| pa[i] * pb[j])
        };
        prop_assert!(mutual_information(&product) < 1e-12);
    }
}
