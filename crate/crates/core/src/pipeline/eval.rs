use std::collections::BTreeMap;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::conditions::initial_state_conditions;
use super::sample::{sample_trajectories, Denoiser, ModelDenoiser, OracleDenoiser};
use crate::acnet::Checkpoint;
use crate::ballworld::{make_template, simulate, TrajectoryRecord};
use crate::error::{shape_err, Error, Result};
use crate::ndgrad::Tensor;
use crate::schedule::{DenoiseMask, ScheduleConfig};

/// What produces the `x0` estimates during evaluation.
#[derive(Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a Checkpoint),
    /// Ground truth with the given schedule.
    Oracle(&'a ScheduleConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub hard_conditioning: bool,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            hard_conditioning: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub median: f64,
    pub mean: f64,
}

impl Summary {
    pub fn of(values: &[f32]) -> Self {
        Self {
            count: values.len(),
            median: median(values),
            mean: if values.is_empty() {
                f64::NAN
            } else {
                values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: serde_json::Value,
    pub per_traj: Vec<f32>,
    pub median: f64,
    pub mean: f64,
    pub per_template: BTreeMap<String, Summary>,
}

impl EvalReport {
    fn build(config: serde_json::Value, per_traj: Vec<f32>, templates: &[String]) -> Self {
        let s = Summary::of(&per_traj);
        let mut groups: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        for (v, t) in per_traj.iter().zip(templates) {
            groups.entry(t.clone()).or_default().push(*v);
        }
        Self {
            config,
            median: s.median,
            mean: s.mean,
            per_template: groups.iter().map(|(k, v)| (k.clone(), Summary::of(v))).collect(),
            per_traj,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn median(values: &[f32]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Root mean squared error over the changeable features of movable objects.
pub fn masked_rmse(pred: &Tensor<f32>, truth: &Tensor<f32>) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(shape_err!("rmse of {:?} against {:?}", pred.dims(), truth.dims()));
    }
    let mask = DenoiseMask::from_trajectory(truth)?;
    if mask.count() == 0 {
        return Err(Error::Usage("no movable object to score".into()));
    }
    let s: f64 = (0..pred.len())
        .filter(|&i| mask.is_set(i))
        .map(|i| {
            let d = pred.data()[i] as f64 - truth.data()[i] as f64;
            d * d
        })
        .sum();
    Ok((s / mask.count() as f64).sqrt())
}

fn traj_seed(seed: u64, i: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng.next_u64()
}

/// Samples every trajectory from its step-0 states and scores it against
/// the simulator output.
pub fn evaluate_rmse(pred: Predictor, records: &[TrajectoryRecord], opts: &EvalOptions) -> Result<EvalReport> {
    let model = match pred {
        Predictor::Model(c) => Some(ModelDenoiser::new(c)?),
        Predictor::Oracle(_) => None,
    };
    let per_traj: Vec<f32> = records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let cond = initial_state_conditions(&rec.x);
            let oracle;
            let den: &dyn Denoiser = match (&model, pred) {
                (Some(m), _) => m,
                (None, Predictor::Oracle(s)) => {
                    oracle = OracleDenoiser::new(&rec.x, s)?;
                    &oracle
                }
                (None, Predictor::Model(_)) => unreachable!(),
            };
            let out = sample_trajectories(den, &rec.x, &cond, traj_seed(opts.seed, i), opts.hard_conditioning, None)?;
            Ok(masked_rmse(&out, &rec.x)? as f32)
        })
        .collect::<Result<_>>()?;
    let templates: Vec<String> = records.iter().map(|r| r.template.clone()).collect();
    let config = serde_json::json!({
        "predictor": match pred {
            Predictor::Model(c) => serde_json::to_value(&c.header)?,
            Predictor::Oracle(s) => serde_json::json!({ "oracle": true, "schedule": s }),
        },
        "options": opts,
        "trajectories": records.len(),
    });
    Ok(EvalReport::build(config, per_traj, &templates))
}

/// Fresh simulator trajectories of `template` at length `steps`.
pub fn simulate_eval_set(template: &str, steps: usize, count: usize, seed: u64) -> Result<Vec<TrajectoryRecord>> {
    let tpl = make_template(template)?.with_frames(steps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..count).map(|_| rng.next_u64()).collect();
    seeds.par_iter().map(|&s| simulate(&tpl, s)).collect()
}

/// One row of a sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub report: EvalReport,
}

/// Evaluates on fresh eval sets of `template` at each trajectory length.
pub fn sweep_lengths(
    pred: Predictor,
    template: &str,
    lengths: &[usize],
    count: usize,
    opts: &EvalOptions,
) -> Result<Vec<SweepRow>> {
    lengths
        .iter()
        .map(|&l| {
            if let Predictor::Model(c) = pred {
                let stride = c.header.model.stride();
                if l % stride != 0 {
                    return Err(shape_err!("trajectory length {l} must be a multiple of {stride}"));
                }
            }
            let set = simulate_eval_set(template, l, count, opts.seed)?;
            Ok(SweepRow {
                setting: format!("L={l}"),
                report: evaluate_rmse(pred, &set, opts)?,
            })
        })
        .collect()
}

/// Evaluates on fresh eval sets of each template (different object counts).
pub fn sweep_objects(
    pred: Predictor,
    templates: &[&str],
    steps: usize,
    count: usize,
    opts: &EvalOptions,
) -> Result<Vec<SweepRow>> {
    templates
        .iter()
        .map(|&t| {
            let set = simulate_eval_set(t, steps, count, opts.seed)?;
            let o = set.first().map_or(0, |r| r.x.dims()[0]);
            Ok(SweepRow {
                setting: format!("{t} (O={o})"),
                report: evaluate_rmse(pred, &set, opts)?,
            })
        })
        .collect()
}

/// `setting,count,median,mean` table.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("setting,count,median,mean\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.setting,
            r.report.per_traj.len(),
            r.report.median,
            r.report.mean
        ));
    }
    s
}
