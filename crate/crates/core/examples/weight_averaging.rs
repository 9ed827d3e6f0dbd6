//! Dynamic decay and the averaged weights it produces.

use pgk::models::{ArchSpec, Classifier};
use pgk::wa::{compute_lambda, dynamic_decay, EmaMode, EmaState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pgk::Result<()> {
    let (kappa, nu, clamp) = (0.55, 0.3, 1.0);
    println!("ratio  decay");
    for (clean, adv) in [(100, 10), (100, 30), (100, 45), (100, 90), (0, 0)] {
        let lambda = compute_lambda(clean, adv);
        println!("{lambda:5.2}  {:.4}", dynamic_decay(lambda, nu, kappa, clamp));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ema = EmaState::<f64>::new(kappa, nu, clamp)?;
    let mut last = Vec::new();
    for step in 0..50 {
        let w = Classifier::<f64>::new(ArchSpec::linear(3, 2), &mut rng)?;
        let decay = ema.decay(EmaMode::Dynamic, if step % 10 == 0 { 0.9 } else { 0.1 });
        ema.update(w.params(), decay)?;
        last = w.params().flatten();
    }
    let avg = ema.w_tilde.as_ref().map(|p| p.flatten()).unwrap_or_default();
    let spread = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64;
    println!("mean |w| live {:.4} averaged {:.4}", spread(&last), spread(&avg));
    Ok(())
}
