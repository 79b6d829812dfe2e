use std::fs;
use std::path::Path;
use std::process::Command;

const TINY: &str = r#"
fractions = [0.25]
seeds = [1]
deterministic = true

[dataset]
kind = "synthetic"
name = "tiny"
train = 8
test = 4
validation = 0
size = 16
seed = 3

[model]
base_width = 4
depth = 2
time_embed_dim = 8

[pretrain]
epochs = 1

[cotrain]
epochs = 1
rounds = 1

[eval]
ensemble = 1
"#;

fn run(config: &Path, out: &Path, args: &[&str]) -> String {
    let output = Command::new(env!("CARGO_BIN_EXE_diffseg"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env("DIFFSEG_OUT", out)
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&output.stdout).into_owned();
    assert!(output.status.success(), "{args:?}: {}\n{stdout}", String::from_utf8_lossy(&output.stderr));
    stdout
}

fn count(dir: &Path, ext: &str) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext))
        .count()
}

#[test]
fn pipeline_writes_records_report_and_plots_under_the_env_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let out = dir.path().join("out");

    run(&config, &out, &["synth"]);
    assert_eq!(count(&out.join("dataset/train/images"), "png"), 8);

    let pre = run(&config, &out, &["pretrain"]);
    let teacher = pre.lines().find_map(|l| l.strip_prefix("teacher checkpoint ")).expect("checkpoint line").to_owned();
    assert!(Path::new(&teacher).join("manifest.json").is_file());

    let co = run(&config, &out, &["cotrain", "--teacher", &teacher]);
    assert!(co.contains(" DC "), "{co}");
    run(&config, &out, &["baseline"]);
    assert_eq!(count(&out.join("records"), "json"), 2);

    let table = run(&config, &out, &["report"]);
    assert!(table.contains("| tiny | 25% | student |"), "{table}");
    assert!(out.join("metrics.csv").is_file() && out.join("table.md").is_file());
    assert_eq!(count(&out.join("plots"), "png"), 2);

    let eval = run(&config, &out, &["evaluate", "--checkpoint", &teacher]);
    assert!(eval.contains("on 4 test images"), "{eval}");
}

#[test]
fn command_line_seed_and_out_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let flag_out = dir.path().join("flag");
    let output = Command::new(env!("CARGO_BIN_EXE_diffseg"))
        .args(["--config", config.to_str().unwrap(), "--seed", "5", "--fraction", "0.5", "--out"])
        .arg(&flag_out)
        .arg("baseline")
        .env_remove("DIFFSEG_OUT")
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let names: Vec<String> = fs::read_dir(flag_out.join("records"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["supervised-tiny-f0.5000-s5.json"]);
}

#[test]
fn invalid_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "fractions = [2.0]\n").unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_diffseg")).arg("--config").arg(&config).arg("report").output().unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("bad.toml"));
}
