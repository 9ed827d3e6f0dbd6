//! Fast adversarial training on two moons: FGSM-AT, FGSM-RS and FGSM-PGK side by side.

use pgk::eval::{robust_accuracy, EvalAttack};
use pgk::harness::datasets::two_moons;
use pgk::models::{ArchSpec, Classifier};
use pgk::trainer::{train, LrSchedule, Method, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pgk::Result<()> {
    let train_set = two_moons(800, 2, 0.08, 0);
    let test_set = two_moons(400, 2, 0.08, 1);
    let eps = 16.0 / 255.0;
    for method in [Method::FgsmAt, Method::FgsmRs, Method::FgsmPgk] {
        let mut config = TrainConfig::new(method);
        config.epochs = 15;
        config.batch_size = 64;
        config.epsilon = eps;
        config.lr_schedule = LrSchedule::Cyclic { max_lr: 0.2 };
        // A short run needs a faster average than the default decay.
        config.nu = 1.0;
        config.kappa = 0.95;
        let model = Classifier::<f32>::new(ArchSpec::mlp(2, 64, 2), &mut ChaCha8Rng::seed_from_u64(0))?;
        let outcome = train(config, &train_set, model)?;
        let averaged = outcome.ema_model();
        let reported = averaged.as_ref().unwrap_or(&outcome.model);
        let last = outcome.history.last().expect("at least one epoch");
        println!(
            "{:<9} loss {:.3} train asr {:.3} grads/batch {} | pgd10 {:.3}",
            method.name(),
            last.loss,
            last.attack_success_rate,
            last.gradient_evaluations / 800u64.div_ceil(64),
            robust_accuracy(reported, &test_set, &EvalAttack::pgd(10, eps), 0)?,
        );
    }
    Ok(())
}
