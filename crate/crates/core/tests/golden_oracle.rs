//! Pinned regression values for the default rubric oracle.

use serde::Deserialize;

use preflab_core::eval::{RewardOracle, RubricConfig, RubricOracle};
use preflab_core::model::{Sequence, Vocabulary};

#[derive(Deserialize)]
struct GoldenCase {
    rubric: RubricConfig,
    prompt: Vec<u32>,
    response: Vec<u32>,
    score: f64,
}

#[test]
fn rubric_scores_match_golden_file() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/oracle_scores.json");
    let cases: Vec<GoldenCase> =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert!(!cases.is_empty());
    for case in cases {
        let oracle = RubricOracle::new(Vocabulary::default(), case.rubric);
        let got = oracle
            .score(&Sequence::from(case.prompt.clone()), &Sequence::from(case.response.clone()))
            .unwrap();
        assert_eq!(
            got, case.score,
            "prompt {:?} response {:?}",
            case.prompt, case.response
        );
    }
}
