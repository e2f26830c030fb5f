use std::path::{Path, PathBuf};

use netident::network::{builtin_case, simulate, SimOptions};
use netident_cli::run::{read_result, Outcome};
use netident_cli::{execute, parse_network_config, parse_network_config_str, read_data_csv, write_data_csv, CliError, NetworkConfig};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> i32 {
    execute(std::iter::once("netident").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn shipped_configs_equal_builtin_cases() {
    for c in ["case1", "case2"] {
        let parsed = parse_network_config(&configs().join(format!("{c}.json"))).unwrap();
        assert_eq!(parsed, builtin_case(c).unwrap());
    }
}

#[test]
fn config_round_trips() {
    let net = builtin_case("case2").unwrap();
    let text = NetworkConfig::from_model(&net).to_json();
    assert_eq!(parse_network_config_str(&text).unwrap(), net);
}

const TWO_NODE: &str = r#"{
  "L": 2,
  "modules": [{ "from": 1, "to": 2, "num": [0, 0.5], "den": [1, -0.3] }],
  "noise": [
    { "node": 1, "num": [1], "den": [1], "variance": 0 },
    { "node": 2, "num": [1], "den": [1], "variance": 0.1 }
  ],
  "references": [1]
}"#;

#[test]
fn config_errors_name_the_problem() {
    assert!(parse_network_config_str(TWO_NODE).is_ok());

    let improper = TWO_NODE.replace("[0, 0.5]", "[0.2, 0.5]");
    match parse_network_config_str(&improper) {
        Err(CliError::Validation(m)) => assert!(m.contains("not strictly proper"), "{m}"),
        other => panic!("{other:?}"),
    }

    let unknown = TWO_NODE.replace("\"references\"", "\"refs\"");
    match parse_network_config_str(&unknown) {
        Err(CliError::Parse(m)) => assert!(m.contains("`refs`") && m.contains("line"), "{m}"),
        other => panic!("{other:?}"),
    }

    let missing = TWO_NODE.replace(
        r#"    { "node": 2, "num": [1], "den": [1], "variance": 0.1 }"#,
        r#"    { "node": 1, "num": [1], "den": [1], "variance": 0.1 }"#,
    );
    match parse_network_config_str(&missing) {
        Err(CliError::Validation(m)) => assert!(m.contains("node 2 has no noise entry"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let data = simulate(&builtin_case("case1").unwrap(), 200, 9, &SimOptions::default()).unwrap();
    write_data_csv(&path, &data).unwrap();
    let back = read_data_csv(&path).unwrap();
    assert_eq!(back.w, data.w);
    assert_eq!(back.r, data.r);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("t,w1,w2,w3,w4,r1,r2,r3,r4\n0,"));
}

#[test]
fn exit_codes() {
    assert_eq!(run(&[]), 2);
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(
        run(&["identify", "--data", "x.csv", "--target", "13", "--inputs", "2", "--orders", "nb=2,nf=2", "--out", "r.json"]),
        2
    );
    assert_eq!(
        run(&["identify", "--data", "/nonexistent/x.csv", "--target", "1:3", "--inputs", "2,4", "--orders", "nb=2,nf=2", "--out", "/nonexistent/r.json"]),
        1
    );
    assert_eq!(run(&["simulate", "--case", "case1", "--network", "a.json", "--samples", "5", "--out", "d.csv"]), 2);
    assert_eq!(run(&["montecarlo", "--case", "case1", "--runs", "1", "--methods", "pem", "--out", "s.json"]), 2);
}

#[test]
fn simulate_identify_replay() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let r1 = dir.path().join("r1.json");
    let r2 = dir.path().join("r2.json");
    assert_eq!(run(&["simulate", "--case", "case1", "--samples", "300", "--seed", "4", "--out", s(&data)]), 0);
    let identify = |out: &Path| {
        run(&[
            "identify", "--data", s(&data), "--target", "1:3", "--inputs", "2,4", "--orders", "nb=2,nf=2",
            "--kernel-length", "40", "--case", "case1", "--out", s(out),
        ])
    };
    assert_eq!(identify(&r1), 0);
    assert_eq!(identify(&r2), 0);
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());

    let res = read_result(&r1).unwrap();
    let Outcome::Identify(ident) = &res.outcome else { panic!() };
    assert!(ident.trace.is_monotone(1e-8));
    assert!(res.fits["ir_G31"] > 0.5);
    assert!(res.fits.contains_key("theta_G31"));
    assert!(res.seconds.is_none());
    assert_eq!(run(&["replay", "--result", s(&r1)]), 0);
}

#[test]
fn nonparametric_and_baseline_commands() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let np = dir.path().join("np.json");
    let pem = dir.path().join("pem.json");
    assert_eq!(run(&["simulate", "--network", s(&configs().join("case1.json")), "--samples", "300", "--out", s(&data)]), 0);
    assert_eq!(
        run(&["identify-np", "--data", s(&data), "--output", "3", "--inputs", "1,2,4", "--kernel-length", "40", "--taps", "30", "--case", "case1", "--out", s(&np)]),
        0
    );
    let res = read_result(&np).unwrap();
    let Outcome::IdentifyNp { recovered_g, .. } = &res.outcome else { panic!() };
    assert_eq!(recovered_g[&1].len(), 30);
    assert!(res.fits.contains_key("ir_G31"));

    assert_eq!(
        run(&[
            "baseline", "--data", s(&data), "--target", "1:3", "--inputs", "2,4",
            "--module-orders", "1=2/2,2=1/1,4=4/4", "--noise-orders", "nc=3,nd=3", "--case", "case1", "--out", s(&pem),
        ]),
        0
    );
    let res = read_result(&pem).unwrap();
    assert!(matches!(res.outcome, Outcome::Baseline(_)));
    assert!(res.fits["ir_G31"] > 0.5);
    // orders missing for the target input
    assert_eq!(
        run(&["baseline", "--data", s(&data), "--target", "1:3", "--inputs", "2,4", "--module-orders", "2=1/1,4=4/4", "--out", s(&pem)]),
        2
    );
}

#[test]
fn montecarlo_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("summary.json");
    assert_eq!(
        run(&["montecarlo", "--case", "case1", "--runs", "1", "--methods", "ebdm", "--samples", "300", "--kernel-length", "40", "--out", s(&out)]),
        0
    );
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(v["summaries"][0]["median_ir_fit"].is_number());
    assert_eq!(v["seeds"].as_array().unwrap().len(), 1);
}
