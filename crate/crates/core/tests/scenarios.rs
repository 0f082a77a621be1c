use std::fs;

use luce::contract::RequesterState;
use luce::simnet::{bundled, run_scenario, run_scenario_text, ScenarioError, SimConfig, BUNDLED};

const PROFILE: &str = r#"
profile_id = "imaging-7"
data_description = "retinal imaging archive"
provider_name = "eye clinic"

[permissions]
allowed_purposes = ["method-development"]

[meta_conditions]
contains_personal_data = true
"#;

const SCENARIO: &str = "\
# file-backed publication with a violation
0 provider publish profile=inputs/profile.toml license=7 period=4 data=inputs/data.csv
1 alice request ds-1 purpose=method-development
3 alice agree ds-1 license=7
3 alice open ds-1
4 alice act ds-1 distribute
4 alice act ds-1 commercial-use
8 - inspect contract ds-1
";

#[test]
fn file_scenario_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("inputs")).unwrap();
    fs::write(dir.path().join("inputs/profile.toml"), PROFILE).unwrap();
    fs::write(dir.path().join("inputs/data.csv"), "anon_id,eye,grade\nanon-1,left,2\nanon-2,right,0\n").unwrap();
    let path = dir.path().join("imaging.scn");
    fs::write(&path, SCENARIO).unwrap();

    let (sim, result) = run_scenario(path.to_str().unwrap(), SimConfig::default()).unwrap();
    assert!(result.all_ok(), "{}", result.transcript());
    let handle = sim.handle(&"alice".into(), &"ds-1".into()).unwrap();
    assert_eq!(handle.stored_copy().len(), 2);
    let contract = sim.platform().contracts().iter().next().unwrap();
    // license 7 permits commercial use and distribution carries no conditions
    assert!(matches!(contract.requester(&"alice".into()).unwrap().state, RequesterState::Active(2)));
    assert!(result.transcript().contains("imaging"));
}

#[test]
fn commercial_purpose_rejected_for_personal_data() {
    let text = "0 provider publish id=c desc=cohort license=63 purposes=general-research personal=true\n\
                1 alice request ds-1 purpose=commercial\n\
                3 alice agree ds-1 license=63\n";
    let err = run_scenario_text(text, SimConfig::default()).unwrap_err();
    assert!(matches!(err, ScenarioError::Step { line: 3, .. }), "{err}");
}

#[test]
fn parse_errors_carry_line_numbers() {
    let cases = [
        ("0 provider publish id=c desc=x license=63\n2 alice tick 1\n1 - tick 1\n", 3),
        ("# c\n0 provider frobnicate\n", 2),
        ("x provider tick 1\n", 1),
        ("0 alice act ds-1 distribute deriv=7\n", 1),
        ("0 - erase s1\n", 1),
        ("0 mallory request ds-1 purpose=general-research\n", 1),
    ];
    for (text, line) in cases {
        match run_scenario_text(text, SimConfig::default()) {
            Err(ScenarioError::Parse(e)) => assert_eq!(e.line, line, "{text}: {e}"),
            other => panic!("{text}: expected a parse error, got {:?}", other.map(|(_, r)| r.transcript())),
        }
    }
}

#[test]
fn missing_file_is_reported() {
    let err = run_scenario("does/not/exist.scn", SimConfig::default()).unwrap_err();
    assert!(err.to_string().contains("exist"), "{err}");
}

#[test]
fn bundled_scenarios_hold_invariants_under_many_seeds() {
    for (name, text) in BUNDLED {
        assert_eq!(bundled(name), Some(text));
        for seed in 0..10 {
            let (_, result) = run_scenario(name, SimConfig::seeded(seed)).unwrap();
            assert!(result.all_ok(), "{name} seed {seed}\n{}", result.transcript());
        }
    }
}
