use std::path::{Path, PathBuf};

use edac::diagnostics::MetricsRecord;
use edac::runner::{history_csv, parse_etas, ExperimentConfig, OutputFormat, RunError, Split, HISTORY_HEADER};
use edac::train::Method;

fn benchmark_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.toml")
}

#[test]
fn shipped_benchmark_config_loads() {
    let cfg = ExperimentConfig::load(benchmark_path()).unwrap();
    assert_eq!(cfg.model.layer_widths.last(), Some(&4));
    assert_eq!(cfg.train.epochs, 30);
    assert_eq!(cfg.train.lr_decay_epochs, vec![15, 23]);
    assert!(cfg.output.wants(OutputFormat::Csv) && cfg.output.wants(OutputFormat::Json));
    let (train, test) = cfg.datasets().unwrap();
    assert_eq!((train.len(), test.len()), (2000, 1000));
}

#[test]
fn unknown_keys_and_bad_values_are_config_errors() {
    let text = std::fs::read_to_string(benchmark_path()).unwrap();
    let with_typo = text.replacen("momentum = 0.9", "momentun = 0.9", 1);
    let err = ExperimentConfig::from_toml_str(&with_typo).unwrap_err().to_string();
    assert!(err.contains("momentun"), "{err}");

    let bad_lr = text.replacen("lr = 0.1\n", "lr = -1.0\n", 1);
    let err = ExperimentConfig::from_toml_str(&bad_lr).unwrap_err().to_string();
    assert!(err.contains("train: ") && err.contains("lr"), "{err}");

    let wrong_dim = text.replacen("input_dim = 16", "input_dim = 15", 1);
    assert!(ExperimentConfig::from_toml_str(&wrong_dim).unwrap().datasets().is_err());
}

#[test]
fn relative_idx_paths_resolve_against_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    for f in ["tiny-images.idx3", "tiny-labels.idx1"] {
        std::fs::copy(fixtures.join(f), dir.path().join(f)).unwrap();
    }
    let text = r#"
[dataset]
train_fraction = 0.5
shuffle_seed = 0
[dataset.idx]
images = "tiny-images.idx3"
labels = "tiny-labels.idx1"

[model]
input_dim = 16
layer_widths = [5, 3]
activation = "tanh"

[train]
epochs = 1
batch_size = 4
lr = 0.1
[train.train_attack]
norm = "linf"
epsilon = 0.1
step_size = 0.05
steps = 2
[train.eval_attack]
norm = "linf"
epsilon = 0.1
step_size = 0.05
steps = 2

[output]
dir = "out"
"#;
    let path = dir.path().join("idx.toml");
    std::fs::write(&path, text).unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    let (train, test) = cfg.datasets().unwrap();
    assert_eq!(train.len() + test.len(), 12);
}

#[test]
fn seed_override_sets_both_seeds() {
    let mut cfg = ExperimentConfig::load(benchmark_path()).unwrap();
    cfg.override_seed(42);
    assert_eq!(cfg.train.seed, 42);
    assert_eq!(cfg.model.init_seed, 42);
}

#[test]
fn eta_lists_and_ranges() {
    assert_eq!(parse_etas("0,0.5, 2").unwrap(), vec![0.0, 0.5, 2.0]);
    let r = parse_etas("0:2:0.1").unwrap();
    assert_eq!(r.len(), 21);
    assert_eq!(r[3], 0.3);
    assert_eq!(r[20], 2.0);
    for bad in ["", "x", "0,-0.1", "1:0:0.1", "0:1:0", "0:1", "nan", "inf"] {
        let e = parse_etas(bad).unwrap_err();
        assert!(matches!(e, RunError::Config(_)), "{bad}");
        assert_eq!(e.exit_code(), 2);
    }
}

#[test]
fn split_names() {
    assert_eq!("train".parse::<Split>().unwrap(), Split::Train);
    assert_eq!("test".parse::<Split>().unwrap(), Split::Test);
    assert_eq!("valid".parse::<Split>().unwrap_err().exit_code(), 2);
}

#[test]
fn history_rows_follow_the_header_and_skip_wall_time() {
    let r = MetricsRecord {
        epoch: 3,
        clean_acc_train: 0.5,
        clean_acc_test: 0.25,
        robust_acc_train: 0.125,
        robust_acc_test: 0.0625,
        ac_train: 1.5,
        ac_test: 2.5,
        lr: 0.01,
        method: Method::Edac,
        wall_time_s: 12.75,
    };
    let csv = history_csv(&[r]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], HISTORY_HEADER);
    assert_eq!(lines[1], "3,edac,0.01,0.5,0.25,0.125,0.0625,1.5,2.5");
}
