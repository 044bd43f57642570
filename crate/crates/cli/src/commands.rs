use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ocdd::acnet::Checkpoint;
use ocdd::ballworld::{decode_features, make_template, statics_tensor, DisplayState, ObjectSpec};
use ocdd::ndgrad::io;
use ocdd::pipeline::{
    evaluate_rmse, gen_dataset, initial_state_conditions, max_condition_violation, sample_trajectories, sweep_csv,
    sweep_lengths, sweep_objects, train, Dataset, EvalOptions, ModelDenoiser, Predictor, SweepRow, TrainConfig,
    META_FILE,
};
use ocdd::schedule::ScheduleConfig;
use ocdd::{ConditionSet, Error, Result, Tensor, FEATURE_LAYOUT_VERSION};

use crate::args;
use crate::render;

const TRAJ_NAME: &str = "trajectory";

#[derive(Debug, Deserialize)]
struct Scene {
    objects: Vec<ObjectSpec>,
}

/// Human-readable companion of a sampled trajectory file.
#[derive(Debug, Serialize, Deserialize)]
struct TrajSidecar {
    feature_layout: u32,
    colors: Vec<String>,
    max_condition_violation: f64,
    frames: Vec<Vec<DisplayState>>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    require(&dir.join(META_FILE), "dataset")?;
    Dataset::load(dir)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    require(path, "checkpoint")?;
    Checkpoint::load(path)
}

fn load_conditions(path: Option<&Path>) -> Result<ConditionSet> {
    match path {
        Some(p) => {
            require(p, "conditions file")?;
            ConditionSet::load(p)
        }
        None => Ok(ConditionSet::empty()),
    }
}

fn load_scene(path: &Path) -> Result<Scene> {
    require(path, "scene")?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn check_length(ckpt: &Checkpoint, length: usize) -> Result<()> {
    let stride = ckpt.header.model.stride();
    if length == 0 || length % stride != 0 {
        return Err(Error::Shape(format!("trajectory length {length} must be a multiple of {stride}")));
    }
    Ok(())
}

pub fn gen_data(a: &args::GenData, seed: u64) -> Result<()> {
    for t in &a.template {
        make_template(t)?;
    }
    if a.count == 0 || a.length == 0 {
        return Err(Error::Usage("--count and --length must be positive".into()));
    }
    let names: Vec<&str> = a.template.iter().map(String::as_str).collect();
    let data = gen_dataset(&names, a.count, a.augment, seed, a.length)?;
    data.save(&a.out)?;
    let objects: Vec<String> = data.meta.objects.iter().map(usize::to_string).collect();
    println!(
        "wrote {} trajectories (O={}, L={}, d={}) to {}",
        data.len(),
        objects.join("/"),
        data.meta.steps,
        data.meta.features,
        a.out.display()
    );
    Ok(())
}

pub fn train_cmd(a: &args::Train, seed: u64) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let mut cfg = TrainConfig {
        batch_size: a.batch_size,
        lr: a.lr,
        lr_decay: a.lr_decay,
        max_steps: a.steps,
        augment: a.augment,
        seed,
        hard_conditioning: !a.no_hard_conditioning,
        checkpoint_every: a.checkpoint_every,
        schedule: ScheduleConfig {
            steps: a.diffusion_steps,
            ..ScheduleConfig::default()
        },
        ..TrainConfig::default()
    };
    cfg.model.arch = a.arch.parse()?;
    if let Some(ch) = &a.channels {
        cfg.model.channels = ch.clone();
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (ckpt, logs) = train(cfg, &data, Some(&a.out))?;
    let last = logs.last().map_or(f64::NAN, |l| l.loss);
    println!(
        "trained {} steps ({}, {} parameters), final loss {last:.6}, checkpoint {}",
        ckpt.header.train_steps,
        ckpt.header.arch.as_str(),
        ckpt.params.count(),
        a.out.display()
    );
    Ok(())
}

pub fn sample_cmd(a: &args::Sample, seed: u64) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let scene = load_scene(&a.scene)?;
    let cond = load_conditions(a.conditions.as_deref())?;
    check_length(&ckpt, a.length)?;
    let statics = statics_tensor(&scene.objects, a.length);
    let movable: Vec<bool> = scene.objects.iter().map(|o| o.movable).collect();
    cond.validate(&movable, a.length)?;
    let den = ModelDenoiser::new(&ckpt)?;
    let x = sample_trajectories(&den, &statics, &cond, seed, !a.no_hard_conditioning, None)?;
    let violation = max_condition_violation(&x, &cond);
    let colors: Vec<String> = scene.objects.iter().map(|o| o.color.clone()).collect();
    write_trajectory(&a.out, &x, &colors, violation)?;
    println!("max condition violation {violation:.3e}");
    println!("wrote trajectory [{}, {}, {}] to {}", x.dims()[0], x.dims()[1], x.dims()[2], a.out.display());
    Ok(())
}

fn write_trajectory(path: &Path, x: &Tensor<f32>, colors: &[String], violation: f64) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    io::save(path, &[(TRAJ_NAME, x)])?;
    let side = TrajSidecar {
        feature_layout: FEATURE_LAYOUT_VERSION,
        colors: colors.to_vec(),
        max_condition_violation: violation,
        frames: decode_features(x, colors, FEATURE_LAYOUT_VERSION)?,
    };
    let sp = sidecar_path(path);
    std::fs::write(&sp, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(&sp, e))
}

/// Reads a trajectory file or one record of a dataset directory.
fn read_trajectory(path: &Path, index: usize) -> Result<(Tensor<f32>, Vec<String>)> {
    require(path, "trajectory")?;
    if path.is_dir() {
        let data = load_dataset(path)?;
        let n = data.len();
        let rec = data
            .records
            .into_iter()
            .nth(index)
            .ok_or_else(|| Error::Usage(format!("index {index} out of range for a dataset of {n}")))?;
        return Ok((rec.x, rec.colors));
    }
    let mut tensors = io::load(path)?;
    let x = match tensors.iter().position(|(n, _)| n == TRAJ_NAME) {
        Some(i) => tensors.swap_remove(i).1,
        None if tensors.len() == 1 => tensors.remove(0).1,
        None => return Err(Error::Format(format!("{} holds no trajectory", path.display()))),
    };
    if x.dims().len() != 3 {
        return Err(Error::Shape(format!("trajectory must be [O, L, d], got {:?}", x.dims())));
    }
    let sp = sidecar_path(path);
    let colors = if sp.exists() {
        let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        let side: TrajSidecar = serde_json::from_str(&text)?;
        if side.feature_layout != FEATURE_LAYOUT_VERSION {
            return Err(Error::Format(format!(
                "trajectory feature layout {} does not match {FEATURE_LAYOUT_VERSION}",
                side.feature_layout
            )));
        }
        side.colors
    } else {
        vec!["gray".to_string(); x.dims()[0]]
    };
    Ok((x, colors))
}

pub fn eval_cmd(a: &args::Eval, seed: u64) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let ckpt = if a.oracle {
        None
    } else {
        Some(load_checkpoint(a.ckpt.as_deref().expect("clap requires --ckpt"))?)
    };
    let schedule = ScheduleConfig::default();
    let pred = match &ckpt {
        Some(c) => {
            check_length(c, data.meta.steps)?;
            Predictor::Model(c)
        }
        None => Predictor::Oracle(&schedule),
    };
    let opts = EvalOptions {
        hard_conditioning: !a.no_hard_conditioning,
        seed,
    };
    let n = a.limit.map_or(data.len(), |l| l.min(data.len()));
    let report = evaluate_rmse(pred, &data.records[..n], &opts)?;
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    report.save(&a.report)?;
    println!("rmse median {:.6} mean {:.6} over {} trajectories", report.median, report.mean, n);

    let mut rows: Vec<SweepRow> = Vec::new();
    if let Some(lengths) = &a.sweep_lengths {
        let template = data.meta.templates.first().cloned().unwrap_or_default();
        rows.extend(sweep_lengths(pred, &template, lengths, a.sweep_count, &opts)?);
    }
    if let Some(templates) = &a.sweep_objects {
        let names: Vec<&str> = templates.iter().map(String::as_str).collect();
        rows.extend(sweep_objects(pred, &names, data.meta.steps, a.sweep_count, &opts)?);
    }
    if !rows.is_empty() {
        let csv = a.report.with_extension("csv");
        std::fs::write(&csv, sweep_csv(&rows)).map_err(|e| Error::io(&csv, e))?;
        for r in &rows {
            println!("{}: median {:.6} mean {:.6}", r.setting, r.report.median, r.report.mean);
        }
        println!("wrote sweep table {}", csv.display());
    }
    Ok(())
}

pub fn render_cmd(a: &args::Render, seed: u64) -> Result<()> {
    let (x, colors) = read_trajectory(&a.traj, a.index)?;
    let frames = decode_features(&x, &colors, FEATURE_LAYOUT_VERSION)?;
    let mut snapshots = Vec::new();
    if let Some(ck) = &a.denoise_steps {
        let ckpt = load_checkpoint(ck)?;
        check_length(&ckpt, x.dims()[1])?;
        let cond = match &a.conditions {
            Some(p) => load_conditions(Some(p))?,
            None => initial_state_conditions(&x),
        };
        let den = ModelDenoiser::new(&ckpt)?;
        let wanted = &a.snapshots;
        let mut taken: Vec<(usize, Tensor<f32>)> = Vec::new();
        let mut grab = |t: usize, x0: &Tensor<f32>| {
            if wanted.contains(&t) {
                taken.push((t, x0.clone()));
            }
        };
        sample_trajectories(&den, &x, &cond, seed, true, Some(&mut grab))?;
        for (t, x0) in taken {
            snapshots.push((t, decode_features(&x0, &colors, FEATURE_LAYOUT_VERSION)?));
        }
    }
    let n = render::render_dir(&a.out, &frames, &snapshots)?;
    println!("rendered {n} frames to {}", a.out.join("index.html").display());
    Ok(())
}
