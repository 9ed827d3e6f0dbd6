//! Stop a run halfway, save it, reload and finish: the result matches an uninterrupted run bit for bit.

use pgk::harness::checkpoint::{load_checkpoint, save_checkpoint};
use pgk::harness::datasets::two_clusters;
use pgk::models::{ArchSpec, Classifier};
use pgk::trainer::{Method, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fresh(config: &TrainConfig) -> pgk::Result<Trainer<f32>> {
    let model = Classifier::new(ArchSpec::mlp(4, 16, 2), &mut ChaCha8Rng::seed_from_u64(0))?;
    Trainer::new(config.clone(), model)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = two_clusters(256, 4, 0.3, 0);
    let mut config = TrainConfig::new(Method::FgsmPgk);
    config.epochs = 6;
    config.batch_size = 32;

    let mut straight = fresh(&config)?;
    while !straight.is_finished() {
        straight.run_epoch(&data, None)?;
    }

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("checkpoint.bin");
    let mut first = fresh(&config)?;
    for _ in 0..3 {
        first.run_epoch(&data, None)?;
    }
    save_checkpoint(&first, None, &path)?;
    println!("saved after epoch {} ({} bytes)", first.epochs_done(), std::fs::metadata(&path)?.len());

    let (mut resumed, _) = load_checkpoint::<f32>(&path)?;
    while !resumed.is_finished() {
        resumed.run_epoch(&data, None)?;
    }
    let same_live = resumed.model().params().flatten() == straight.model().params().flatten();
    let same_ema = resumed.ema_model().map(|m| m.params().flatten()) == straight.ema_model().map(|m| m.params().flatten());
    println!("live weights identical: {same_live}, averaged weights identical: {same_ema}");
    Ok(())
}
