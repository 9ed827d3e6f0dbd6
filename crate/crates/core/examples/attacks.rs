//! FGSM and PGD on a small MLP: budget, data range and the one-step identity.

use pgk::attacks::{linf_norm, pgd, fgsm_from, AttackConfig};
use pgk::harness::datasets::two_moons;
use pgk::models::{ArchSpec, Batch, Classifier, Counted, GradCounter};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pgk::Result<()> {
    let data = two_moons(64, 2, 0.1, 7);
    let model = Classifier::<f32>::new(ArchSpec::mlp(2, 32, 2), &mut ChaCha8Rng::seed_from_u64(0))?;
    let eps = 8.0 / 255.0;
    let batch = Batch::new(&data.inputs, &data.labels, &data.ids);
    let counter = GradCounter::new();
    let counted = Counted::new(&model, &counter);
    let zero = vec![0.0f32; data.inputs.len()];

    let fgsm = fgsm_from(&counted, batch, &zero, eps, eps)?;
    println!("fgsm: gradients {} linf {:.5}", counter.gradients(), linf_norm(&fgsm));

    counter.reset();
    let one_step = pgd(&counted, batch, &AttackConfig::new(eps, eps, 1)?, &zero)?;
    println!("pgd-1 equals fgsm bitwise: {}", one_step == fgsm);

    counter.reset();
    let ten = pgd(&counted, batch, &AttackConfig::new(eps, eps / 4.0, 10)?, &zero)?;
    let in_range = data.inputs.iter().zip(&ten).all(|(x, d)| (0.0..=1.0).contains(&(x + d)));
    println!("pgd-10: gradients {} linf {:.5} inside [0,1]: {in_range}", counter.gradients(), linf_norm(&ten));
    Ok(())
}
