//! How each prior-guided strategy seeds the next epoch's attack.

use pgk::attacks::linf_norm;
use pgk::harness::datasets::two_clusters;
use pgk::models::{ArchSpec, Classifier};
use pgk::pgi::{compute_gamma, PgiState, Strategy};
use pgk::models::count_correct;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pgk::Result<()> {
    let data = two_clusters(128, 4, 0.2, 3);
    let model = Classifier::<f32>::new(ArchSpec::mlp(4, 16, 2), &mut ChaCha8Rng::seed_from_u64(1))?;
    let eps = 8.0 / 255.0;
    for strategy in [Strategy::Bp, Strategy::Ep, Strategy::Mep, Strategy::Wmep] {
        let mut state = PgiState::<f32>::new(strategy, eps, eps, 0.3, data.sample_len())?;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        print!("{:>4}:", strategy.name());
        for epoch in 1..=3 {
            let mut gammas = Vec::new();
            for chunk in data.sequential_batches(32) {
                let batch = chunk.as_batch();
                let init = state.fetch_init(batch, epoch, &mut rng)?;
                let pending = state.attack(&model, batch, init)?;
                let clean = count_correct(&model.logits(batch.inputs, batch.len())?, batch.labels, 2);
                let adv_inputs = pgk::attacks::perturb(batch.inputs, &pending.delta_adv);
                let adv = count_correct(&model.logits(&adv_inputs, batch.len())?, batch.labels, 2);
                let gamma = compute_gamma(clean, adv);
                gammas.push(gamma);
                state.commit(batch, &pending, gamma)?;
            }
            let mean = gammas.iter().sum::<f64>() / gammas.len() as f64;
            print!("  epoch {epoch} gamma {mean:.3}");
        }
        let stored = state.perturbations.ids().next().and_then(|id| state.perturbations.get(id).map(linf_norm));
        println!("  stored {} rows, first linf {:?}", state.perturbations.len(), stored);
    }
    Ok(())
}
