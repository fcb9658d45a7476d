use qfilters::harness::{self, needle_retention, NeedleOptions};
use qfilters_core::kvcache::PolicyKind;
use qfilters_core::model::PlantedModel;

#[test]
fn full_budget_retains_everything() {
    let source = PlantedModel::new(harness::needle_source(2)).unwrap();
    let filters = harness::calibrate_planted(&source, 2, 512, 500, 2).unwrap();
    let l = 96;
    let options = NeedleOptions { budget: l, depths: vec![0.5], ..NeedleOptions::with_ratio(l, 1, 2) };
    for policy in PolicyKind::ALL {
        for run in needle_retention(&source, Some(&filters), policy, &options).unwrap() {
            assert_eq!(run.retention, 1.0, "{policy}");
        }
    }
}

#[test]
fn span_larger_than_budget_is_rejected() {
    let source = PlantedModel::new(harness::needle_source(2)).unwrap();
    let options = NeedleOptions { budget: 3, needle_span: 4, ..NeedleOptions::with_ratio(64, 8, 0) };
    assert!(needle_retention(&source, None, PolicyKind::KNorm, &options).is_err());
}

#[test]
fn qfilters_keep_needle_under_tight_budget() {
    let source = PlantedModel::new(harness::needle_source(5)).unwrap();
    let filters = harness::calibrate_planted(&source, 2, 512, 1000, 5).unwrap();
    let options = NeedleOptions::with_ratio(256, 8, 5);
    let runs = needle_retention(&source, Some(&filters), PolicyKind::QFilters, &options).unwrap();
    assert_eq!(runs.len(), options.depths.len());
    assert!(runs.iter().all(|r| r.retention == 1.0));
}
