use std::path::Path;
use std::process::{Command, Output};

use updateleak::eval::EvaluationReport;

const CONFIG: &str = r#"
seed = 1

[data]
dataset = "checkin"
target_size = 200
shadow_size = 200
probe_size = 20
train_size = 120

[data.checkin]
num_locations = 500
num_classes = 4

[victim]
epochs = 2

[corpus]
m_shadow = 40
m_target = 10

[attack]
kind = "li"
epochs = 3

[eval]
draws = 2
"#;

fn leakctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leakctl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, extra: &str) -> String {
    let out = dir.join(name.trim_end_matches(".toml"));
    let text = format!("out_dir = {:?}\n{CONFIG}{extra}", out.to_str().unwrap());
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn staged_run_matches_a_cold_run_and_reports_render() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "staged.toml", "");
    let run = tmp.path().join("staged");

    let o = leakctl(&["run-pipeline", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("prepare-data"));

    let o = leakctl(&["prepare-data", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("wrote"));
    let o = leakctl(&["prepare-data", "--config", &cfg]);
    assert!(stdout(&o).starts_with("up to date"));

    let o = leakctl(&["run-pipeline", "--config", &cfg, "--stages", "victim,corpus"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = leakctl(&["run-pipeline", "--config", &cfg, "--stages", "evaluate"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("`attack`"), "{}", stderr(&o));

    let o = leakctl(&["run-pipeline", "--config", &cfg, "--stages", "attack,evaluate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("accuracy"));
    for f in ["report.json", "report.csv", "figures/bars_accuracy.png"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let staged = EvaluationReport::load_json(&run.join("report.json")).unwrap();

    let o = leakctl(&["report", "--config", &cfg]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("random_label.accuracy"));

    // Same settings, different directory: every stage runs cold.
    let cold_cfg = write_config(tmp.path(), "cold.toml", "");
    assert!(leakctl(&["prepare-data", "--config", &cold_cfg]).status.success());
    let o = leakctl(&["run-pipeline", "--config", &cold_cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cold = EvaluationReport::load_json(&tmp.path().join("cold/report.json")).unwrap();
    assert_eq!(cold.metrics, staged.metrics);
    assert_eq!(cold.baselines, staged.baselines);
    assert_eq!(cold.config_hash, staged.config_hash);

    // A rerun with everything current changes nothing.
    let o = leakctl(&["run-pipeline", "--config", &cfg]);
    assert!(o.status.success());
    assert_eq!(EvaluationReport::load_json(&run.join("report.json")).unwrap().metrics, staged.metrics);

    // A changed setting pointed at the old directory is refused.
    let changed = write_config(tmp.path(), "changed.toml", "");
    let text = std::fs::read_to_string(&changed).unwrap().replace("epochs = 3", "epochs = 4");
    let text = text.replace(&*tmp.path().join("changed").to_string_lossy(), &run.to_string_lossy());
    std::fs::write(&changed, text).unwrap();
    let o = leakctl(&["run-pipeline", "--config", &changed, "--stages", "evaluate"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("rerun stage"), "{}", stderr(&o));

    // So is a seed override.
    let o = leakctl(&["run-pipeline", "--config", &cfg, "--seed", "2", "--stages", "evaluate"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn report_on_an_empty_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "empty.toml", "");
    let o = leakctl(&["report", "--config", &cfg, "--out", tmp.path().join("nothing").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn config_errors_exit_with_two_and_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", "\n[msr]\nbogus_knob = 3\n");
    let o = leakctl(&["prepare-data", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus_knob"));

    let cfg = write_config(tmp.path(), "sizes.toml", "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("target_size = 200", "target_size = 450");
    std::fs::write(&cfg, text).unwrap();
    let o = leakctl(&["prepare-data", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.shadow_size"), "{}", stderr(&o));

    let o = leakctl(&["run-pipeline", "--config", &cfg, "--stages", "victim,bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn presets_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        updateleak::config::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 20);
}
