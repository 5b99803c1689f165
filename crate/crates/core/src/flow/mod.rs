//! The toy multi-layer rectified-flow transformer: configuration,
//! parameters, forward pass, losses, training and sampling.

mod checkpoint;
mod config;
mod loss;
mod net;
mod params;
mod sample;
mod train;

pub use checkpoint::{
    checkpoint_id, decode_tensors, encode_tensors, load_checkpoint, save_checkpoint, sidecar_path,
    Checkpoint, MAGIC, VERSION,
};
pub use config::{LossConfig, ModelConfig, RunConfig, TrainConfig};
pub use loss::{
    alpha_loss, clean_estimate, clean_estimate_var, fm_loss, interpolate, mean_cosine, orth_loss,
    total_loss, LossParts, LossValues,
};
pub use net::{forward, timestep_embedding, ForwardOut, Prepared};
pub use params::{Bound, ParamStore};
pub use sample::{
    decode_targets, initial_noise, predict_velocity, prepare_inference, sample_euler,
    sample_euler_observed, Decomposition, SampleOptions,
};
pub use train::{
    gradcheck_model, gradcheck_suite, model_gradcheck, pick_batch, run_steps, sample_gradients, step_rng, train_step, Adam, StepMetrics,
    TrainSample, CheckLine, MODEL_TOL, OP_TOL,
};
