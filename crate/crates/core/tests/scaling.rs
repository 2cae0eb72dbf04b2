use slicelab::linalg::SeededRng;
use slicelab::scaling::{fit_line, paper_coefficients, predict_acc, MetricKind, PAPER_COEFFICIENTS};

/// Points drawn from each published line with Gaussian noise of the
/// published RMSE; the refit must land within that RMSE of (a, b).
#[test]
fn refit_of_noisy_published_lines_recovers_coefficients() {
    let mut rng = SeededRng::new(31);
    for row in PAPER_COEFFICIENTS {
        let pts: Vec<(f64, f64)> = (0..400)
            .map(|i| {
                let s = 0.5 * (i % 40) as f64 / 39.0;
                (s, row.a * s + row.b + row.rmse * rng.normal())
            })
            .collect();
        let fit = fit_line(&pts).unwrap();
        assert!((fit.a - row.a).abs() <= row.rmse, "{} {}: a {} vs {}", row.model, row.dataset, fit.a, row.a);
        assert!((fit.b - row.b).abs() <= row.rmse, "{} {}: b {} vs {}", row.model, row.dataset, fit.b, row.b);
        assert!((fit.rmse / row.rmse - 1.0).abs() < 0.2, "{} {}: rmse {}", row.model, row.dataset, fit.rmse);
    }
}

#[test]
fn every_accuracy_row_predicts_below_baseline_at_half_sparsity() {
    for row in PAPER_COEFFICIENTS.iter().filter(|r| r.metric == MetricKind::Accuracy) {
        let p = predict_acc(0.7, 0.5, row.a, row.b).unwrap();
        assert!(p.value < 0.7, "{} {}", row.model, row.dataset);
        assert!(!p.exceeds_one);
    }
}

#[test]
fn registry_aliases() {
    let full = paper_coefficients("Phi-3-mini-4k-Instruct", "WinoGrande", MetricKind::Accuracy).unwrap();
    assert_eq!(paper_coefficients("phi3", "winogrande", MetricKind::Accuracy).unwrap(), full);
    assert_eq!(paper_coefficients("PHI-3", "Wino Grande", MetricKind::Accuracy).unwrap(), full);
    assert!(paper_coefficients("phi3", "WikiText2", MetricKind::Accuracy).is_err());
    assert!(paper_coefficients("ll", "PIQA", MetricKind::Accuracy).is_err());
}
