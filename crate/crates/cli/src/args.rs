use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde_json::Value;

#[derive(Debug, Parser)]
#[command(name = "ocdd", version, about = "Object-centric denoising diffusion for ball-and-bar scenes")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Seed for every random draw of the subcommand.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON file with flag values; explicit flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset of trajectories.
    GenData(GenData),
    /// Train a denoiser on a dataset.
    Train(Train),
    /// Sample a trajectory for a scene under conditions.
    Sample(Sample),
    /// Evaluate RMSE with initial-state conditioning.
    Eval(Eval),
    /// Render a trajectory as SVG frames.
    Render(Render),
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct GenData {
    /// Template name; repeat or comma-separate for several.
    #[arg(long, required = true, value_delimiter = ',')]
    pub template: Vec<String>,
    /// Trajectories per template.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Shift each trajectory by a random offset in [-1, 1]^2.
    #[arg(long)]
    pub augment: bool,
    /// Trajectory length.
    #[arg(long, default_value_t = 64)]
    pub length: usize,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct Train {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path; the header and loss log are written next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "full", value_parser = ["full", "cnn-only", "cnn_only", "no-mlp", "no_mlp"])]
    pub arch: String,
    /// Drop the shift penalty and train on the raw x0 estimate.
    #[arg(long)]
    pub no_hard_conditioning: bool,
    #[arg(long, default_value_t = 50_000)]
    pub steps: u64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Cosine-decay the learning rate to zero over the run.
    #[arg(long)]
    pub lr_decay: bool,
    /// Train with random scene offsets.
    #[arg(long)]
    pub augment: bool,
    #[arg(long, default_value_t = 1000)]
    pub checkpoint_every: u64,
    /// Comma-separated channel widths per U-Net level.
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    /// Diffusion steps T.
    #[arg(long, default_value_t = 256)]
    pub diffusion_steps: usize,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct Sample {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Scene statics: JSON with an "objects" list.
    #[arg(long)]
    pub scene: PathBuf,
    /// Condition set JSON; omit for an unconditional sample.
    #[arg(long)]
    pub conditions: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub length: usize,
    #[arg(long)]
    pub no_hard_conditioning: bool,
    /// Output tensor file; a readable JSON is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct Eval {
    #[arg(long, required_unless_present = "oracle")]
    pub ckpt: Option<PathBuf>,
    /// Use the ground truth in place of a model.
    #[arg(long)]
    pub oracle: bool,
    /// Dataset directory to evaluate on.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON report path; sweep rows go to the same path with a .csv extension.
    #[arg(long)]
    pub report: PathBuf,
    /// Also evaluate fresh eval sets at these lengths.
    #[arg(long, value_delimiter = ',')]
    pub sweep_lengths: Option<Vec<usize>>,
    /// Also evaluate fresh eval sets of these templates.
    #[arg(long, value_delimiter = ',')]
    pub sweep_objects: Option<Vec<String>>,
    /// Trajectories per sweep setting.
    #[arg(long, default_value_t = 20)]
    pub sweep_count: usize,
    /// Evaluate only the first N trajectories of the dataset.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub no_hard_conditioning: bool,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct Render {
    /// Trajectory file written by `sample`, or a dataset directory.
    #[arg(long)]
    pub traj: PathBuf,
    /// Record index when --traj is a dataset.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Output directory for the SVG frames and index.html.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint whose denoising process is rendered for the scene.
    #[arg(long)]
    pub denoise_steps: Option<PathBuf>,
    /// Conditions for --denoise-steps.
    #[arg(long)]
    pub conditions: Option<PathBuf>,
    /// Diffusion steps to snapshot.
    #[arg(long, value_delimiter = ',', default_values_t = [256usize, 192, 128, 64, 16, 1])]
    pub snapshots: Vec<usize>,
}

fn flag_args(key: &str, value: &Value) -> Result<Vec<OsString>, String> {
    let flag = format!("--{}", key.replace('_', "-"));
    Ok(match value {
        Value::Bool(true) => vec![flag.into()],
        Value::Bool(false) | Value::Null => Vec::new(),
        Value::Number(n) => vec![flag.into(), n.to_string().into()],
        Value::String(s) => vec![flag.into(), s.into()],
        Value::Array(items) => {
            let parts: Vec<String> = items
                .iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s.clone()),
                    Value::Number(n) => Ok(n.to_string()),
                    other => Err(format!("config key {key}: unsupported list item {other}")),
                })
                .collect::<Result<_, _>>()?;
            vec![flag.into(), parts.join(",").into()]
        }
        Value::Object(_) => return Err(format!("config key {key}: nested objects are only allowed per subcommand")),
    })
}

fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let a = a.to_str()?;
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

/// Returns `argv` with values from the `--config` file inserted for every
/// flag not given explicitly. Unchanged when no config file is named.
pub fn merge_config(argv: &[OsString]) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(argv) else {
        return Ok(argv.to_vec());
    };
    let text = std::fs::read_to_string(&path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let json: Value = serde_json::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))?;
    let Value::Object(top) = json else {
        return Err(format!("config {} must be a JSON object", path.display()));
    };
    let cmd = Cli::command();
    let Some(pos) = argv
        .iter()
        .position(|a| a.to_str().is_some_and(|a| cmd.find_subcommand(a).is_some()))
    else {
        return Ok(argv.to_vec());
    };
    let name = argv[pos].to_str().expect("checked above");
    let sub = cmd.find_subcommand(name).expect("checked above");
    let known: Vec<String> = sub
        .get_arguments()
        .chain(cmd.get_arguments())
        .filter_map(|a| a.get_long().map(str::to_string))
        .collect();
    let mut entries: Vec<(String, Value)> = Vec::new();
    for (k, v) in &top {
        if v.is_object() || k == "config" {
            continue;
        }
        if known.contains(&k.replace('_', "-")) {
            entries.push((k.clone(), v.clone()));
        }
    }
    if let Some(own) = top.get(name) {
        let Value::Object(own) = own else {
            return Err(format!("config: {name} must be an object"));
        };
        for (k, v) in own {
            if !known.contains(&k.replace('_', "-")) {
                return Err(format!("config: {name} has no flag --{}", k.replace('_', "-")));
            }
            entries.retain(|(e, _)| e != k);
            entries.push((k.clone(), v.clone()));
        }
    }
    let explicit = |flag: &str| {
        argv.iter()
            .filter_map(|a| a.to_str())
            .any(|a| a == flag || a.strip_prefix(flag).is_some_and(|rest| rest.starts_with('=')))
    };
    let mut merged: Vec<OsString> = argv[..=pos].to_vec();
    for (k, v) in &entries {
        if !explicit(&format!("--{}", k.replace('_', "-"))) {
            merged.extend(flag_args(k, v)?);
        }
    }
    merged.extend(argv[pos + 1..].iter().cloned());
    Ok(merged)
}
