use std::path::Path;
use std::process::{Command, Output};

fn ocdd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ocdd"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run ocdd")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SCENE: &str = r#"{"objects":[
 {"shape":"ball","size":0.05,"x":0.3,"y":0.7,"movable":true,"color":"red"},
 {"shape":"ball","size":0.04,"x":0.6,"y":0.8,"movable":true,"color":"blue"},
 {"shape":"bar","size":0.3,"x":0.5,"y":0.3,"rotation":0.2,"movable":false}
]}"#;

const CONDITIONS: &str = r#"{"conditions":[
 {"o":0,"l":0,"values":[0.3,0.7,0.0]},
 {"o":1,"l":4,"values":[0.55,0.5,0.0]}
]}"#;

/// Generates a dataset and trains a small checkpoint in `dir`.
fn setup(dir: &Path) {
    let o = ocdd(dir, &["gen-data", "--template", "drop-two", "--count", "3", "--length", "16", "--out", "data"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = ocdd(
        dir,
        &[
            "train", "--data", "data", "--out", "ck/model.bin", "--steps", "2", "--batch-size", "2", "--channels",
            "8,16", "--diffusion-steps", "8", "--checkpoint-every", "0",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    std::fs::write(dir.join("scene.json"), SCENE).unwrap();
    std::fs::write(dir.join("cond.json"), CONDITIONS).unwrap();
}

#[test]
fn gen_data_summary_and_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = ocdd(dir.path(), &["gen-data", "--template", "three-balls,funnel", "--count", "2", "--length", "8", "--out", "d"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("wrote 4 trajectories (O=7/9, L=8, d=8)"), "{}", stdout(&o));
    assert!(dir.path().join("d/meta.json").exists());
    assert!(dir.path().join("d/trajectories.bin").exists());
}

#[test]
fn gen_data_unknown_template_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = ocdd(dir.path(), &["gen-data", "--template", "pinball", "--out", "d"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("pinball"));
}

#[test]
fn bad_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&ocdd(dir.path(), &["gen-data", "--bogus"])), 2);
    assert_eq!(code(&ocdd(dir.path(), &["train", "--data", "x", "--out", "y", "--arch", "mlp"])), 2);
    assert_eq!(code(&ocdd(dir.path(), &["--help"])), 0);
}

#[test]
fn train_missing_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = ocdd(dir.path(), &["train", "--data", "nowhere", "--out", "m.bin"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_writes_checkpoint_header_and_log() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let ck = dir.path().join("ck");
    assert!(ck.join("model.bin").exists());
    let header: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ck.join("model.bin.json")).unwrap()).unwrap();
    assert_eq!(header["arch"], "full");
    assert_eq!(header["train_steps"], 2);
    let log = std::fs::read_to_string(ck.join("model.bin.loss.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,loss,term1,term2"));
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn train_records_ablation_variant() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&ocdd(d, &["gen-data", "--template", "drop-two", "--count", "1", "--length", "8", "--out", "data"])), 0);
    let o = ocdd(
        d,
        &[
            "train", "--data", "data", "--out", "m.bin", "--steps", "1", "--batch-size", "1", "--channels", "8,16",
            "--diffusion-steps", "4", "--arch", "cnn-only", "--no-hard-conditioning",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let header: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("m.bin.json")).unwrap()).unwrap();
    assert_eq!(header["arch"], "cnn_only");
    assert_eq!(header["model"]["cnn_objects"], 6);
}

#[test]
fn sample_satisfies_conditions_and_checks_length() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let o = ocdd(
        d,
        &["sample", "--ckpt", "ck/model.bin", "--scene", "scene.json", "--conditions", "cond.json", "--length", "16", "--out", "s.bin"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let line = stdout(&o).lines().find(|l| l.starts_with("max condition violation")).unwrap().to_string();
    let v: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(v <= 1e-5, "{line}");
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("s.bin.json")).unwrap()).unwrap();
    assert_eq!(side["frames"].as_array().unwrap().len(), 16);
    assert_eq!(side["frames"][0][0]["color"], "red");

    let o = ocdd(d, &["sample", "--ckpt", "ck/model.bin", "--scene", "scene.json", "--length", "15", "--out", "t.bin"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("multiple of 2"), "{}", stderr(&o));

    let o = ocdd(d, &["sample", "--ckpt", "missing.bin", "--scene", "scene.json", "--out", "t.bin"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn sample_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let run = |seed: &str, out: &str| {
        let o = ocdd(d, &["--seed", seed, "sample", "--ckpt", "ck/model.bin", "--scene", "scene.json", "--length", "16", "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read(d.join(out)).unwrap()
    };
    assert_eq!(run("1", "a.bin"), run("1", "b.bin"));
    assert_ne!(run("1", "a.bin"), run("2", "c.bin"));
}

#[test]
fn eval_oracle_and_sweeps() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let o = ocdd(d, &["eval", "--oracle", "--data", "data", "--report", "oracle.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("oracle.json")).unwrap()).unwrap();
    assert!(report["median"].as_f64().unwrap() < 0.01);
    assert_eq!(report["per_traj"].as_array().unwrap().len(), 3);

    let o = ocdd(
        d,
        &["eval", "--ckpt", "ck/model.bin", "--data", "data", "--report", "r/model.json", "--limit", "1", "--sweep-lengths", "8,16,24", "--sweep-count", "1"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("rmse median"));
    let csv = std::fs::read_to_string(d.join("r/model.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let o = ocdd(d, &["eval", "--data", "data", "--report", "x.json"]);
    assert_eq!(code(&o), 2);
    let o = ocdd(d, &["eval", "--oracle", "--data", "missing", "--report", "x.json"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn render_frames_and_denoising() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let o = ocdd(d, &["render", "--traj", "data", "--index", "1", "--out", "frames"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let svgs = std::fs::read_dir(d.join("frames")).unwrap().filter(|e| {
        e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg")
    });
    assert_eq!(svgs.count(), 16);
    let svg = std::fs::read_to_string(d.join("frames/frame_000.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<circle") && svg.contains("matrix(1 0 0 -1 0 1)"));
    assert!(std::fs::read_to_string(d.join("frames/index.html")).unwrap().contains("frame_015.svg"));

    let o = ocdd(
        d,
        &["sample", "--ckpt", "ck/model.bin", "--scene", "scene.json", "--length", "16", "--out", "s.bin"],
    );
    assert_eq!(code(&o), 0);
    let o = ocdd(
        d,
        &["render", "--traj", "s.bin", "--out", "den", "--denoise-steps", "ck/model.bin", "--snapshots", "8,4,1"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for t in [8, 4, 1] {
        assert!(d.join(format!("den/denoise_t{t:04}.svg")).exists());
    }
    let svg = std::fs::read_to_string(d.join("den/frame_000.svg")).unwrap();
    assert!(svg.contains("fill=\"red\"") && svg.contains("<rect x=\"-0.30000\""));

    let o = ocdd(d, &["render", "--traj", "data", "--index", "9", "--out", "x"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("cfg.json"),
        r#"{"seed": 4, "gen-data": {"template": "drop-two", "count": 2, "length": 8}}"#,
    )
    .unwrap();
    let o = ocdd(d, &["--config", "cfg.json", "gen-data", "--out", "a", "--count", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("wrote 1 trajectories (O=6, L=8"), "{}", stdout(&o));
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("a/meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 4);

    std::fs::write(d.join("bad.json"), "[1]").unwrap();
    assert_eq!(code(&ocdd(d, &["--config", "bad.json", "gen-data", "--template", "drop-two", "--out", "b"])), 2);
}
