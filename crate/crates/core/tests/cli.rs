//! The command-line tool end to end: exit codes, artifacts, report format and
//! the sweep matrix layout.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use idcontrast::encoder::{ArchitectureSpec, EncoderPair};
use idcontrast::eval::EmbeddingBank;
use idcontrast::harness::RunResult;
use idcontrast::training::Checkpoint;

const EXPERIMENT: &str = r#"
name = "tiny"
hidden = 12
seeds = [0, 1]
output_dir = "out"

[train]
preset = "desk"
queue_size = 16
batch_size = 8
embedding_dim = 4
ghost_subbatches = 2
total_epochs = 2
t_end = 1
monitor_every = 1

[data]
kind = "gaussian"
classes = 4
dim = 8
train_per_class = 40
test_per_class = 6
separation = 3.0
noise = 1.0
seed = 0

[split]
kind = "mismatch"
id_classes = [0, 1]
ood_classes = [2, 3]
mismatch_ratio = 0.5
labeled_per_class = 8
val_per_class = 4
unlabeled_slots = 2
seed = 0

[eval]
knn = [5, 200]
probe_epochs = 2
probe_lr = 0.5
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_idcontrast"))
}

fn run(args: &[&str], config: &Path) -> Output {
    let mut all: Vec<&str> = args.to_vec();
    let config = config.to_str().unwrap();
    all.extend(["--config", config]);
    bin().args(&all).output().unwrap()
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(out.status.success(), "exit {:?}\nstdout: {stdout}\nstderr: {}", out.status, String::from_utf8_lossy(&out.stderr));
    stdout
}

fn failed(out: &Output) -> String {
    assert!(!out.status.success(), "expected failure, got success: {}", String::from_utf8_lossy(&out.stdout));
    String::from_utf8_lossy(&out.stderr).to_string()
}

fn experiment(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(dir.path(), EXPERIMENT);
    let out = dir.path().join("out");

    let text = ok(&run(&["prepare-data"], &cfg));
    assert!(text.contains("labeled 16, unlabeled 56, validation 8, test 12"), "{text}");
    assert!(out.join("split.json").is_file());

    ok(&run(&["pretrain", "--seed", "0", "--checkpoint-every", "1"], &cfg));
    let seed_dir = out.join("seed-0");
    for f in ["checkpoint.json", "metrics.csv", "checkpoint-epoch-1.json"] {
        assert!(seed_dir.join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(seed_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    // Seed 1 has not been trained yet.
    let err = failed(&run(&["eval-knn"], &cfg));
    assert!(err.contains("seed-1") && err.contains("not found"), "{err}");
    ok(&run(&["pretrain", "--seed", "1"], &cfg));

    let text = ok(&run(&["eval-knn", "--k", "5"], &cfg));
    assert!(text.contains("knn5"), "{text}");
    let text = ok(&run(&["eval-linear"], &cfg));
    assert!(text.contains("linear_probe"), "{text}");
    let result = RunResult::read(&seed_dir.join("result.json")).unwrap();
    assert!(result.scores.contains_key("knn5") && result.scores.contains_key("linear_probe"));

    let bank_path = dir.path().join("emb.txt");
    let ck = seed_dir.join("checkpoint.json");
    let args = ["export-embeddings", "--checkpoint", ck.to_str().unwrap(), "--pool", "unlabeled", "-o", bank_path.to_str().unwrap()];
    ok(&run(&args, &cfg));
    let bank = EmbeddingBank::read(&bank_path).unwrap();
    assert_eq!(bank.len(), 56);

    let text = ok(&bin().args(["report", out.to_str().unwrap(), "--plots"]).output().unwrap());
    assert!(out.join("report.csv").is_file());
    assert!(seed_dir.join("loss.svg").is_file() && seed_dir.join("knn.svg").is_file());
    assert!(text.starts_with("config,seeds,"), "{text}");

    // Resuming the intermediate checkpoint reproduces the final one.
    let final_bytes = std::fs::read(&ck).unwrap();
    let resumed = dir.path().join("resumed");
    let mid = seed_dir.join("checkpoint-epoch-1.json");
    ok(&run(&["pretrain", "--resume", mid.to_str().unwrap(), "--out", resumed.to_str().unwrap()], &cfg));
    assert_eq!(std::fs::read(resumed.join("seed-0").join("checkpoint.json")).unwrap(), final_bytes);
}

#[test]
fn zero_epochs_writes_the_initialized_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(dir.path(), EXPERIMENT);
    ok(&run(&["pretrain", "--seed", "3", "--total-epochs", "0"], &cfg));
    let ck = Checkpoint::read(&dir.path().join("out/seed-3/checkpoint.json")).unwrap();
    assert_eq!(ck.iteration, 0);
    assert!(ck.metrics.is_empty());
    let fresh = EncoderPair::new(ArchitectureSpec::tiny_mlp(8, 12, 4), 3).unwrap();
    assert_eq!(ck.pair().unwrap(), fresh);
    let metrics = std::fs::read_to_string(dir.path().join("out/seed-3/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(dir.path(), EXPERIMENT);
    ok(&run(&["pretrain", "--seed", "0", "--alpha", "0.5", "--set", "train.temperature=0.3", "--total-epochs", "1"], &cfg));
    let ck = Checkpoint::read(&dir.path().join("out/seed-0/checkpoint.json")).unwrap();
    assert_eq!(ck.config.alpha, 0.5);
    assert_eq!(ck.config.temperature, 0.3);
    assert_eq!(ck.config.total_epochs, 1);
}

#[test]
fn errors_exit_nonzero_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(dir.path(), EXPERIMENT);

    let err = failed(&bin().arg("no-such-command").output().unwrap());
    assert!(!err.is_empty());

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "name = \"x\"\n[train\n").unwrap();
    assert!(failed(&run(&["prepare-data"], &bad)).starts_with("error:"));

    let missing = dir.path().join("absent.toml");
    assert!(failed(&run(&["prepare-data"], &missing)).starts_with("error:"));

    let err = failed(&run(&["pretrain", "--temperature", "-1"], &cfg));
    assert!(err.starts_with("error:") && err.contains("temperature"), "{err}");

    let err = failed(&run(&["pretrain", "--set", "train.queue_size=12"], &cfg));
    assert!(err.starts_with("error:"), "{err}");

    ok(&run(&["pretrain", "--seed", "0", "--total-epochs", "0"], &cfg));
    let ck = dir.path().join("out/seed-0/checkpoint.json");
    let out_path = dir.path().join("x.txt");
    let args = ["export-embeddings", "--checkpoint", ck.to_str().unwrap(), "--pool", "holdout", "-o", out_path.to_str().unwrap()];
    let err = failed(&run(&args, &cfg));
    assert!(err.contains("unknown pool"), "{err}");

    let nope = dir.path().join("nope.json");
    let args = ["eval-knn", "--checkpoint", nope.to_str().unwrap()];
    assert!(failed(&run(&args, &cfg)).starts_with("error:"));
}

fn report_cell_pattern(cell: &str) -> bool {
    // `\d+\.\d{2} \(\d+\.\d{2,3}\)`
    let Some((mean, rest)) = cell.split_once(" (") else { return false };
    let Some(std) = rest.strip_suffix(')') else { return false };
    let decimals = |s: &str, allowed: &[usize]| {
        s.split_once('.').is_some_and(|(i, f)| {
            !i.is_empty() && i.bytes().all(|b| b.is_ascii_digit()) && f.bytes().all(|b| b.is_ascii_digit()) && allowed.contains(&f.len())
        })
    };
    decimals(mean, &[2]) && decimals(std, &[2, 3])
}

#[test]
fn report_aggregates_seeds_in_table_format() {
    let dir = tempfile::tempdir().unwrap();
    for (seed, acc) in [0.80, 0.81, 0.79, 0.80, 0.80].into_iter().enumerate() {
        let r = RunResult {
            name: "desk".into(),
            seed: seed as u64,
            alpha: 2.0,
            t_end: idcontrast::config::ScheduleEnd::at(100),
            objective: idcontrast::training::Objective::Combined,
            scores: [("knn5".to_string(), acc)].into(),
            intra: Some(0.5 + seed as f64 / 100.0),
            inter: Some(0.0),
        };
        let d = dir.path().join(format!("seed-{seed}"));
        std::fs::create_dir_all(&d).unwrap();
        r.write(&d.join("result.json")).unwrap();
    }
    let text = ok(&bin().args(["report", dir.path().to_str().unwrap()]).output().unwrap());
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("config,seeds,knn5,intra"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[1], "5");
    assert_eq!(row[2], "0.80 (0.007)");
    assert!(row[2..].iter().all(|c| report_cell_pattern(c)), "{row:?}");
}

#[test]
fn sweep_emits_the_alpha_by_t_end_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let text = EXPERIMENT.replace("seeds = [0, 1]", "seeds = [0]").replace("total_epochs = 2", "total_epochs = 1")
        + "\n[sweep]\nalphas = [0.25, 0.5, 1.0, 2.0, 3.0]\nt_ends = [\"none\", 1, 2, 3]\nmetric = \"knn5\"\n";
    let text = text.replace("t_end = 1\n", "t_end = \"none\"\n").replace("total_epochs = 1", "total_epochs = 3");
    let cfg = experiment(dir.path(), &text);

    // Cells in a different order, one at a time, give the same cell results.
    ok(&run(&["sweep", "--cell", "2,1"], &cfg));
    let lone = std::fs::read(dir.path().join("out/sweep/alpha-2-tend-1/seed-0/result.json")).unwrap();
    std::fs::remove_dir_all(dir.path().join("out/sweep")).unwrap();

    let matrix = ok(&run(&["sweep"], &cfg));
    assert_eq!(std::fs::read(dir.path().join("out/sweep/alpha-2-tend-1/seed-0/result.json")).unwrap(), lone);
    assert_eq!(std::fs::read_to_string(dir.path().join("out/sweep/matrix.csv")).unwrap(), matrix);
    let rows: Vec<Vec<&str>> = matrix.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 7, "{matrix}");
    assert_eq!(rows[0], ["alpha", "t_end=none", "t_end=1", "t_end=2", "t_end=3"]);
    for (row, alpha) in rows[1..6].iter().zip(["0.25", "0.5", "1", "2", "3"]) {
        assert_eq!(row[0], alpha);
        assert_eq!(row.len(), 5);
        assert!(row[1..].iter().all(|c| report_cell_pattern(c)), "{row:?}");
    }
    assert_eq!(rows[6][0], "moco");
    assert!(report_cell_pattern(rows[6][1]));
}
