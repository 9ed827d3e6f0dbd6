//! Evaluation report, epsilon sweep, loss landscape and perturbation norms.

use pgk::eval::{evaluate, loss_landscape, perturbation_norm_stats, run_attack, EvalAttack, LandscapeConfig};
use pgk::harness::datasets::two_clusters;
use pgk::models::{ArchSpec, Classifier};
use pgk::trainer::{train, Method, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pgk::Result<()> {
    let train_set = two_clusters(600, 8, 0.25, 0);
    let test_set = two_clusters(300, 8, 0.25, 1);
    let eps = 8.0 / 255.0;
    let mut config = TrainConfig::new(Method::FgsmPgk);
    config.epochs = 10;
    config.batch_size = 50;
    config.nu = 1.0;
    config.kappa = 0.95;
    let model = Classifier::<f32>::new(ArchSpec::mlp(8, 32, 2), &mut ChaCha8Rng::seed_from_u64(0))?;
    let outcome = train(config, &train_set, model)?;
    let model = outcome.ema_model().unwrap_or(outcome.model);

    let attacks = [EvalAttack::fgsm(eps), EvalAttack::pgd(10, eps), EvalAttack::pgd(50, eps)];
    let sweep: Vec<f64> = [0.0, 2.0, 4.0, 8.0, 12.0, 16.0].iter().map(|e| e / 255.0).collect();
    let report = evaluate(&model, &test_set, &attacks, Some(&attacks[2]), &sweep, 0)?;
    println!("clean {:.3}", report.clean_acc);
    for (name, acc) in &report.robust_acc {
        println!("{name:>6} robust {acc:.3} success {:.3}", report.attack_success_rate[name]);
    }
    for p in &report.eps_sweep {
        println!("eps {:>4.1}/255 -> {:.3}", p.epsilon * 255.0, p.robust_acc);
    }

    let outcome = run_attack(&model, &test_set, &attacks[0], 0, true)?;
    let stats = perturbation_norm_stats(outcome.deltas.as_deref().unwrap_or_default(), test_set.sample_len(), eps)?;
    println!(
        "fgsm norms: mean l2 {:.4} bound {:.4} ratio to uniform {:.3}",
        stats.mean_l2, stats.l2_bound, stats.ratio_to_uniform
    );

    let slice = test_set.select(&[0, 1, 2, 3]);
    let batch = pgk::models::Batch::new(&slice.inputs, &slice.labels, &slice.ids);
    let grid = loss_landscape(&model, batch, &LandscapeConfig { eta: eps, resolution: 5, epsilon: eps, seed: 0 })?;
    for row in &grid.losses {
        println!("{}", row.iter().map(|l| format!("{l:7.4}")).collect::<Vec<_>>().join(" "));
    }
    Ok(())
}
