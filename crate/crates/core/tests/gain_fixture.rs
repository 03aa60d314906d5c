use std::path::PathBuf;

use mergeforge::gainstats::{
    gain_report, gain_report_with, relative_improvement, render_report, ReportFormat, ScoreTable, VarianceForm,
};

const BASELINE: &str = "Phi-3.5-mini-instruct";

fn fixture() -> ScoreTable {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/clue_plus_scores.json");
    ScoreTable::from_json(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn fixture_has_twelve_datasets_per_model() {
    let t = fixture();
    assert_eq!(t.models.len(), 14);
    assert!(t.models.values().all(|m| m.len() == 12));
}

#[test]
fn published_summary_rows() {
    let t = fixture();
    // (candidate, baseline, AVG, #DG, CV Δ) as printed at one decimal.
    let rows = [
        ("DataMix", BASELINE, 37.5, 10, 1.2),
        ("PubMed", BASELINE, 37.7, 9, 1.8),
        ("Clinical", BASELINE, 39.6, 10, 2.0),
        ("MedWiki", BASELINE, 39.7, 10, 1.5),
        ("Guideline", BASELINE, 39.2, 10, 1.8),
        ("MediPhi", BASELINE, 39.3, 11, 1.5),
        ("MediPhi-SFT", BASELINE, 43.0, 9, 1.4),
        ("BioMistral-7B-DARE", "Mistral-7B-Instruct-v0.1", 34.7, 8, 3.4),
    ];
    for (candidate, baseline, avg, dg, cv) in rows {
        let r = gain_report(&t, baseline, candidate).unwrap();
        assert!(close(r.avg_score, avg, 0.05), "{candidate} avg {}", r.avg_score);
        assert_eq!(r.num_dataset_gains, dg, "{candidate}");
        assert!(close(r.cv_delta.unwrap(), cv, 0.05), "{candidate} cv {:?}", r.cv_delta);
    }
    assert!(close(t.average(BASELINE).unwrap(), 36.5, 0.05));
}

#[test]
fn population_form_is_available() {
    let r = gain_report_with(&fixture(), BASELINE, "MediPhi", VarianceForm::Population).unwrap();
    assert!(close(r.cv_delta.unwrap(), 1.448, 0.001));
}

#[test]
fn quoted_relative_improvements() {
    assert!(close(relative_improvement(36.5, 43.4).unwrap(), 18.9, 0.1));
    assert!(close(relative_improvement(41.2, 61.6).unwrap(), 49.5, 0.1));
    // SDoH entity extraction, Phi-3.5 to MediPhi-Instruct.
    assert!(close(relative_improvement(35.1, 56.7).unwrap(), 61.5, 0.1));
}

#[test]
fn scale_and_shift_behaviour() {
    let t = fixture();
    let base = gain_report(&t, BASELINE, "MediPhi").unwrap();
    let mut scaled = t.clone();
    let mut shifted = t.clone();
    for name in [BASELINE, "MediPhi"] {
        for v in scaled.models.get_mut(name).unwrap().values_mut() {
            *v *= 0.5;
        }
        for v in shifted.models.get_mut(name).unwrap().values_mut() {
            *v += 3.0;
        }
    }
    let s = gain_report(&scaled, BASELINE, "MediPhi").unwrap();
    assert!(close(s.avg_score, base.avg_score * 0.5, 1e-9));
    assert!(close(s.mean_delta, base.mean_delta * 0.5, 1e-9));
    assert!(close(s.cv_delta.unwrap(), base.cv_delta.unwrap(), 1e-9));
    assert_eq!(s.num_dataset_gains, base.num_dataset_gains);
    let h = gain_report(&shifted, BASELINE, "MediPhi").unwrap();
    assert!(close(h.mean_delta, base.mean_delta, 1e-9));
    assert!(close(h.cv_delta.unwrap(), base.cv_delta.unwrap(), 1e-9));
    assert_eq!(h.num_dataset_gains, base.num_dataset_gains);
}

#[test]
fn table_rendering_is_one_decimal() {
    let t = fixture();
    let reports: Vec<_> = ["MediPhi", "MediPhi-SFT"]
        .iter()
        .map(|c| gain_report(&t, BASELINE, c).unwrap())
        .collect();
    let text = render_report(&reports, ReportFormat::Table);
    let line = text.lines().find(|l| l.starts_with("MediPhi ")).unwrap();
    assert!(line.contains("39.3") && line.contains("11") && line.contains("1.5"), "{line}");
    assert_eq!(render_report(&reports, ReportFormat::Csv).lines().count(), 3);
}
