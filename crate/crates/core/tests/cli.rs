use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use regret_design::commands::{BoundsOutput, ChooseReport, DesignOutput, SampleSizeReport, SimulateOutput};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_regret-design"))
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok_json<T: serde::de::DeserializeOwned>(out: Output) -> T {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn choose_two_arms() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("arm_id,ratio,treatment,outcome\n");
    for y in [0.2, 0.4, 0.3] {
        text += &format!("control,0,0,{y}\n");
    }
    for y in [0.5, 0.6, 0.4] {
        text += &format!("treated,1,1,{y}\n");
    }
    let input = write(dir.path(), "s.csv", &text);
    let r: ChooseReport = ok_json(run(&["choose", "--input", input.to_str().unwrap()]));
    assert_eq!(r.chosen_rule, vec![1.0]);
    assert!(!r.tie);
    assert!((r.estimates[0] - 0.3).abs() < 1e-12 && (r.estimates[1] - 0.5).abs() < 1e-12);
}

#[test]
fn choose_rejects_out_of_range_outcome() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "s.csv", "arm_id,ratio,treatment,outcome\na,0,0,0.3\nb,1,1,1.2\n");
    let out = run(&["choose", "--input", input.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn choose_reports_empty_stratum() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "s.csv", "arm_id,ratio,treatment,outcome\na,0.5,0,0.3\nb,1,1,0.2\n");
    let out = run(&["choose", "--input", input.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(out.stdout.is_empty());
}

#[test]
fn choose_covariate_sample() {
    let dir = tempfile::tempdir().unwrap();
    // Stratum means by (rule, cell, treatment).
    let means = [[[0.2, 0.6], [0.5, 0.4]], [[0.1, 0.9], [0.3, 0.3]]];
    let rules = [[0.5, 0.5], [0.7, 0.3]];
    let cells = ["low", "high"];
    let mut text = String::from("arm_id,ratio_low,ratio_high,cell,treatment,outcome\n");
    for (k, rule) in rules.iter().enumerate() {
        for (l, cell) in cells.iter().enumerate() {
            for t in 0..2 {
                // Two draws whose average is the stratum mean.
                let m: f64 = means[k][l][t];
                for y in [m - 0.05, m + 0.05] {
                    text += &format!("{k},{},{},{cell},{t},{y}\n", rule[0], rule[1]);
                }
            }
        }
    }
    let input = write(dir.path(), "s.csv", &text);
    let config = write(
        dir.path(),
        "c.json",
        r#"{"profile":{"cells":["low","high"],"probs":[0.9,0.1]}}"#,
    );
    let r: ChooseReport = ok_json(run(&[
        "choose",
        "--input",
        input.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]));
    let p = [0.9, 0.1];
    let est: Vec<f64> = (0..2)
        .map(|k| {
            (0..2)
                .map(|l| p[l] * ((1.0 - rules[k][l]) * means[k][l][0] + rules[k][l] * means[k][l][1]))
                .sum()
        })
        .collect();
    let expect = if est[1] > est[0] { 1 } else { 0 };
    assert_eq!(r.rule, "cmes");
    assert_eq!(r.chosen, expect);
    for k in 0..2 {
        assert!((r.estimates[k] - est[k]).abs() < 1e-12);
    }
}

#[test]
fn bounds_on_reference_counts() {
    let dir = tempfile::tempdir().unwrap();
    for (table, n, expect, tol) in [("p050", 18, 0.145, 5e-4), ("p099", 5860, 0.00792, 2e-5)] {
        let c = write(dir.path(), "c.json", &format!(r#"{{"reference":"{table}","total":{n}}}"#));
        let r: BoundsOutput = ok_json(run(&["bounds", "--config", c.to_str().unwrap()]));
        assert!((r.bounds.uniform_regret_upper - expect).abs() <= tol, "{table} {n}");
    }
}

#[test]
fn bounds_from_counts_file_and_single_rule() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(dir.path(), "c.json", r#"{"ratios":[0.4],"welfares":[0.6]}"#);
    let counts = write(dir.path(), "n.csv", "arm,cell,treatment,count\n0,0,0,5\n0,0,1,5\n");
    let r: BoundsOutput = ok_json(run(&[
        "bounds",
        "--config",
        c.to_str().unwrap(),
        "--input",
        counts.to_str().unwrap(),
    ]));
    assert_eq!(r.bounds.uniform_regret_upper, 0.0);
    assert_eq!(r.bounds.welfare_lower, Some(0.6));
    assert_eq!(r.bounds.welfare_upper, Some(0.6));
}

#[test]
fn design_and_infeasible_design() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(dir.path(), "c.json", r#"{"ratios":[0.0,1.0],"total":40}"#);
    let r: DesignOutput = ok_json(run(&["design", "--config", c.to_str().unwrap()]));
    assert_eq!(r.design.alphas, vec![0.5, 0.5]);
    let c = write(dir.path(), "c.json", r#"{"ratios":[0.0,0.5,1.0],"total":2}"#);
    assert_eq!(run(&["design", "--config", c.to_str().unwrap()]).status.code(), Some(4));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(dir.path(), "c.json", r#"{"ratios":[0.0,1.0],"total":40,"colour":"red"}"#);
    let out = run(&["design", "--config", c.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
}

#[test]
fn samplesize_crossings() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(dir.path(), "c.json", r#"{"reference":"p099","threshold":0.00792}"#);
    let r: SampleSizeReport = ok_json(run(&["samplesize", "--config", c.to_str().unwrap()]));
    assert_eq!(r.total, 5875);
    let c = write(dir.path(), "c.json", r#"{"reference":"p099","threshold":0.00792,"max_total":5000}"#);
    let out = run(&["samplesize", "--config", c.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(5));
    assert!(out.stdout.is_empty());
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(
        dir.path(),
        "c.json",
        r#"{"ratios":[0.0,1.0],"counts":[[[10,0]],[[0,10]]],
            "state":{"cells":1,"means":[
              {"treatment":0,"cell":0,"exposure":0.0,"mean":0.4},
              {"treatment":1,"cell":0,"exposure":1.0,"mean":0.6}]},
            "verify":true}"#,
    );
    let paths: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("out{i}.json"))).collect();
    for p in &paths {
        let out = run(&[
            "simulate",
            "--config",
            c.to_str().unwrap(),
            "--seed",
            "9",
            "--reps",
            "3000",
            "--output",
            p.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read(&paths[0]).unwrap();
    assert_eq!(a, std::fs::read(&paths[1]).unwrap());
    let parsed: SimulateOutput = serde_json::from_slice(&a).unwrap();
    assert_eq!(parsed.report.replications, 3000);
    assert!(parsed.check.unwrap().passed());
}

#[test]
fn csv_output() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(dir.path(), "c.json", r#"{"reference":"p050","total":18}"#);
    let out = run(&["bounds", "--config", c.to_str().unwrap(), "--format", "csv"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("key,value\n"));
    assert!(text.contains("uniform_regret_upper,0.14518"));
}
