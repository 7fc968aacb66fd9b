use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use relrep::dataset::{Dataset, Format};
use relrep::embednet::EmbedNet;
use relrep::pipeline::{PipelineConfig, METRICS_HEADER};

fn relrep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relrep"))
        .args(args)
        .output()
        .expect("spawn relrep")
}

fn ok(args: &[&str]) -> String {
    let out = relrep(args);
    assert!(
        out.status.success(),
        "relrep {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_CONFIG: &str = "\
# quick run
iterations = 2
subsets = 2
h_max = 6
random_groups = 100
target_dim = 4
hidden = 8
epoch_budget = 6
batch_size = 16
seed = 9
";

#[test]
fn gen_run_eval_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let config = dir.path().join("config.txt");
    let run_dir = dir.path().join("run");
    let figs = dir.path().join("figs");
    fs::write(&config, SMALL_CONFIG).unwrap();

    ok(&["gen", "--classes", "3", "--per-class", "15", "--dim", "4", "--std", "0.2", "--seed", "2", "--out", s(&data)]);
    let ds = Dataset::load(&data, Format::Csv).unwrap();
    assert_eq!((ds.len(), ds.dim()), (45, 4));
    assert_eq!(ds.labels().unwrap().iter().filter(|&&l| l == 0).count(), 15);

    ok(&["run", "--data", s(&data), "--config", s(&config), "--out-dir", s(&run_dir)]);
    for name in [
        "config.txt",
        "phi_init.ckpt",
        "phi_iter01.ckpt",
        "phi_iter02.ckpt",
        "phi_final.ckpt",
        "groups_iter01.txt",
        "partition_iter02.txt",
        "triplets_iter01.csv",
        "fig7_correctness.csv",
        "fig8_coverage.csv",
    ] {
        assert!(run_dir.join(name).exists(), "missing {name}");
    }
    let metrics = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some(METRICS_HEADER));
    assert_eq!(metrics.lines().count(), 3);
    let written = PipelineConfig::load(&run_dir.join("config.txt")).unwrap();
    assert_eq!(written, PipelineConfig::parse(SMALL_CONFIG).unwrap());
    assert_eq!(
        EmbedNet::load(&run_dir.join("phi_final.ckpt")).unwrap(),
        EmbedNet::load(&run_dir.join("phi_iter02.ckpt")).unwrap()
    );

    let final_ckpt = run_dir.join("phi_final.ckpt");
    let eval = ok(&["eval", "--data", s(&data), "--checkpoint", s(&final_ckpt), "--k", "5"]);
    let acc: f64 = eval
        .lines()
        .find_map(|l| l.strip_prefix("knn_accuracy(k=5) = "))
        .expect("accuracy line")
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&acc));

    ok(&[
        "analyze",
        "--data",
        s(&data),
        "--checkpoint",
        s(&final_ckpt),
        "--out-dir",
        s(&figs),
        "--h-max",
        "6",
        "--run-dir",
        s(&run_dir),
    ]);
    for name in [
        "fig2_ratio.csv",
        "fig3_sorted.csv",
        "fig4_noise.csv",
        "fig5a_correctness_coverage.csv",
        "fig5b_distances.csv",
        "fig7_correctness.csv",
        "fig8_coverage.csv",
    ] {
        let text = fs::read_to_string(figs.join(name)).unwrap_or_else(|_| panic!("missing {name}"));
        assert!(text.lines().count() >= 2, "{name} has no rows");
    }
    // Rebuilt from the saved groups, fig8 matches what the run wrote.
    assert_eq!(
        fs::read_to_string(figs.join("fig8_coverage.csv")).unwrap(),
        fs::read_to_string(run_dir.join("fig8_coverage.csv")).unwrap()
    );
}

#[test]
fn raw_format_round_trips_through_gen() {
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("data.bin");
    ok(&["gen", "--classes", "2", "--per-class", "5", "--dim", "3", "--out", s(&bin)]);
    let bytes = fs::read(&bin).unwrap();
    assert_eq!(&bytes[..4], b"RRDS");
    let ds = Dataset::load(&bin, Format::RawF32).unwrap();
    assert_eq!((ds.len(), ds.dim()), (10, 3));
    assert!(ds.labels().is_some());
}

#[test]
fn unknown_config_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let config = dir.path().join("bad.txt");
    ok(&["gen", "--classes", "2", "--per-class", "5", "--dim", "2", "--out", s(&data)]);
    fs::write(&config, "subsets = 2\nwarp_factor = 9\n").unwrap();
    let out = relrep(&["run", "--data", s(&data), "--config", s(&config), "--out-dir", s(&dir.path().join("r"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("warp_factor") && err.contains('2'), "{err}");
}

#[test]
fn eval_refuses_unlabeled_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("plain.csv");
    fs::write(&data, "0.0,0.0\n1.0,0.0\n5.0,5.0\n").unwrap();
    let ckpt = dir.path().join("net.ckpt");
    EmbedNet::new(2, &[3], 2, 0).unwrap().save(&ckpt).unwrap();
    let out = relrep(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--k", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no labels"));
}

#[test]
fn identical_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let config = dir.path().join("config.txt");
    fs::write(&config, SMALL_CONFIG).unwrap();
    ok(&["gen", "--classes", "3", "--per-class", "15", "--dim", "4", "--std", "0.2", "--seed", "2", "--out", s(&data)]);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["run", "--data", s(&data), "--config", s(&config), "--out-dir", s(out)]);
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 10);
    for name in names {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?} differs");
    }
}
