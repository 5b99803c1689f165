#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use revealtoy_core::codec::RopeSplit;
use revealtoy_core::flow::{save_checkpoint, Adam, Checkpoint, ModelConfig, ParamStore, RunConfig};

pub fn small_run() -> RunConfig {
    let mut run = RunConfig {
        model: ModelConfig {
            dim: 16,
            heads: 2,
            rope: RopeSplit::new(2, 2, 4),
            blocks: 1,
            mlp_ratio: 2,
            k_text: 2,
            canvas: 16,
            ..Default::default()
        },
        ..Default::default()
    };
    run.train.batch_size = 2;
    run.train.checkpoint_every = 2;
    run
}

/// Writes a randomly initialised small checkpoint into `dir`.
pub fn write_checkpoint(dir: &Path) -> PathBuf {
    let run = small_run();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let params = ParamStore::<f32>::init(&run.model, &mut rng)
        .unwrap()
        .perturbed(0.05, &mut rng);
    let ck = Checkpoint {
        optimizer: Adam::new(&run.train),
        config: run,
        params,
    };
    let path = dir.join("model.rvlt");
    save_checkpoint(&path, &ck).unwrap();
    path
}
