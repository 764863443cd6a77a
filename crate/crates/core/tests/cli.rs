use std::path::Path;
use std::process::{Command, Output};

use toposurf::extract::MetricsReport;
use toposurf::io::{self, RunConfig};
use toposurf::model::{Architecture, SdfModel};
use toposurf::persistence::{persistence0_tagged, sample_grid, Domain, Filtration};

fn toposurf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_toposurf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_CONFIG: &str = "layers = 3\nwidth = 16\nskip = 1\niterations = 120\nwarmup_iters = 10\nbatch_points = 300\nbatch_queries = 64\ncurriculum_start_iter = 100\ntopo_resolution = 5\nsnapshot_every = 10\n";

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cloud = d.join("torus.xyz");
    let out = toposurf(&["generate", "--shape", "torus", "--count", "600", "--seed", "2", "--out", s(&cloud)]);
    assert!(out.status.success());
    assert_eq!(io::load_xyz(&cloud).unwrap().len(), 600);

    let cfg = d.join("run.cfg");
    std::fs::write(&cfg, SMALL_CONFIG).unwrap();
    let run = d.join("run");
    let out = toposurf(&["reconstruct", "--input", s(&cloud), "--config", s(&cfg), "--out", s(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut names: Vec<String> = std::fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["checkpoint.stch", "config.txt", "diagram.csv", "frame.txt", "history.csv"]);

    let echo = std::fs::read_to_string(run.join("config.txt")).unwrap();
    let resolved = RunConfig::parse(&echo).unwrap();
    assert_eq!(resolved.to_text(), echo);
    assert_eq!(resolved.train.iterations, 120);
    assert_eq!(resolved.out, s(&run));

    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(lines.next().unwrap(), io::HISTORY_HEADER);
    assert_eq!(lines.count(), 120);

    let ckpt = run.join("checkpoint.stch");
    let model = io::load_checkpoint(&ckpt).unwrap();
    assert_eq!(model.architecture(), Architecture::new(3, 16, 1).unwrap());

    let mesh = d.join("m.obj");
    let out = toposurf(&["mesh", "--model", s(&ckpt), "--resolution", "24", "--out", s(&mesh)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let parsed = io::load_obj(&mesh).unwrap();
    assert!(!parsed.triangles.is_empty());

    let report = d.join("report.json");
    let out = toposurf(&[
        "eval", "--mesh", s(&mesh), "--gt", s(&cloud), "--model", s(&ckpt), "--report", s(&report),
        "--frame", s(&run.join("frame.txt")), "--samples", "2000",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in [
        "cd_one_sided_pred_to_gt",
        "cd_one_sided_gt_to_pred",
        "cd_two_sided",
        "hd_one_sided_pred_to_gt",
        "hd_one_sided_gt_to_pred",
        "hd_two_sided",
        "significant_feature_loss",
        "component_count",
        "samples_pred",
        "samples_gt",
    ] {
        assert!(value.get(key).is_some(), "missing {key}");
    }
    let r: MetricsReport = serde_json::from_str(&text).unwrap();
    assert_eq!((r.samples_pred, r.samples_gt), (2000, 600));

    let csv = d.join("d.csv");
    let out = toposurf(&["diagram", "--model", s(&ckpt), "--resolution", "6", "--out", s(&csv)]);
    assert!(out.status.success());
    let pairs = io::parse_diagram_csv(&std::fs::read_to_string(&csv).unwrap()).unwrap();
    let grid = sample_grid(&model, 6, Domain::default(), Filtration::Absolute).unwrap();
    assert_eq!(pairs, io::sorted_pairs(&persistence0_tagged(&grid, Filtration::Absolute)));
}

#[test]
fn mesh_without_zero_crossing_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let arch = Architecture::new(2, 4, 1).unwrap();
    let mut flat = vec![0.0; arch.parameter_count()];
    *flat.last_mut().unwrap() = 1.0;
    let ckpt = dir.path().join("const.stch");
    io::save_checkpoint(&SdfModel::from_flat(arch, &flat).unwrap(), &ckpt).unwrap();
    let out = toposurf(&["mesh", "--model", s(&ckpt), "--resolution", "16", "--iso", "0", "--out", s(&dir.path().join("m.obj"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("never crosses"));
    assert!(!dir.path().join("m.obj").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = toposurf(&["reconstruct", "--input", s(&dir.path().join("none.xyz")), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = toposurf(&["mesh", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "learning_rate = 3\n").unwrap();
    let cloud = dir.path().join("c.xyz");
    std::fs::write(&cloud, "0 0 0\n1 1 1\n0 1 0\n").unwrap();
    let out = toposurf(&["reconstruct", "--input", s(&cloud), "--config", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));

    let malformed = dir.path().join("m.xyz");
    std::fs::write(&malformed, "0 0\n").unwrap();
    let out = toposurf(&["reconstruct", "--input", s(&malformed), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
    assert!(!dir.path().join("o").exists());

    let out = toposurf(&["verify", "--theorem", "2", "--m", "5", "--k", "3", "--trials", "100", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 counterexamples"));
}
