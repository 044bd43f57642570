//! Dataset generation, training, sampling and evaluation.

mod conditions;
mod dataset;
mod eval;
mod sample;
mod train;

pub use conditions::{build_cond_input, check_probs, initial_state_conditions, sample_training_conditions, COND_INPUT_DIM};
pub use dataset::{draw_offset, gen_dataset, Dataset, DatasetMeta, RecordMeta, META_FILE, TRAJ_FILE};
pub use eval::{
    evaluate_rmse, masked_rmse, median, simulate_eval_set, sweep_csv, sweep_lengths, sweep_objects, EvalOptions,
    EvalReport, Predictor, Summary, SweepRow,
};
pub use sample::{max_condition_violation, sample_trajectories, Denoiser, ModelDenoiser, OracleDenoiser};
pub use train::{loss_log_path, run, sample_gradient, sample_loss, train, SampleGrad, StepLog, TrainConfig, Trainer};

/// Caps rayon's global pool at `OCDD_THREADS` when set. Call once, early.
pub fn init_threads_from_env() {
    if let Some(n) = std::env::var("OCDD_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}
