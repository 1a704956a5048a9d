use std::collections::BTreeSet;

use ptchain_core::verify::{run_suite, SuiteOptions, COVERAGE};

#[test]
fn suite_covers_exactly_the_documented_anchors() {
    let r = run_suite(&SuiteOptions { negative_controls: true, ..SuiteOptions::default() }).unwrap();
    let documented: BTreeSet<&str> = COVERAGE.iter().copied().collect();
    assert_eq!(r.anchors(), documented);
    assert!(r.all_pass(), "{}", r.to_text());
    assert!(r.negative_controls_caught());
}

#[test]
fn same_seed_gives_identical_csv() {
    let opts = SuiteOptions { seed: 7, lemma_samples: 200, ..SuiteOptions::default() };
    let a = run_suite(&opts).unwrap().to_csv();
    let b = run_suite(&opts).unwrap().to_csv();
    assert_eq!(a, b);
    let c = run_suite(&SuiteOptions { seed: 8, ..opts }).unwrap().to_csv();
    assert!(c.starts_with("check,anchor,residual,threshold,pass\n"));
}
