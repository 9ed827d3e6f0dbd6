//! Exponential moving average of model weights with a fixed or
//! attack-quality-driven decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ParamSet;
use crate::real::Real;

/// How (and whether) the trainer averages weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmaMode {
    Off,
    /// Constant decay `κ`.
    Fixed,
    /// Decay `κ̃` from [`dynamic_decay`].
    Dynamic,
}

/// Averaged weights `w̃` and the decay settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState<T> {
    /// Absent until the first update.
    pub w_tilde: Option<ParamSet<T>>,
    pub kappa: f64,
    pub nu: f64,
    pub clamp_max: f64,
    pub updates: u64,
}

impl<T: Real> EmaState<T> {
    pub fn new(kappa: f64, nu: f64, clamp_max: f64) -> Result<Self> {
        if !(kappa > 0.0 && kappa < 1.0) {
            return Err(Error::config("kappa", format!("must lie in (0, 1), got {kappa}")));
        }
        if !(nu > 0.0 && nu <= 1.0) {
            return Err(Error::config("nu", format!("must lie in (0, 1], got {nu}")));
        }
        if !(clamp_max > 0.0 && clamp_max <= 1.0) {
            return Err(Error::config("clamp_max", format!("must lie in (0, 1], got {clamp_max}")));
        }
        Ok(EmaState {
            w_tilde: None,
            kappa,
            nu,
            clamp_max,
            updates: 0,
        })
    }

    /// Decay for a batch with quality ratio `lambda`.
    pub fn decay(&self, mode: EmaMode, lambda: f64) -> f64 {
        match mode {
            EmaMode::Dynamic => dynamic_decay(lambda, self.nu, self.kappa, self.clamp_max),
            _ => self.kappa,
        }
    }

    /// `w̃ <- κ̃·w̃ + (1-κ̃)·w`; the first call copies `w`.
    pub fn update(&mut self, w: &ParamSet<T>, kappa_tilde: f64) -> Result<()> {
        match &mut self.w_tilde {
            None => self.w_tilde = Some(w.clone()),
            Some(avg) => ema_update(avg, w, kappa_tilde)?,
        }
        self.updates += 1;
        Ok(())
    }
}

/// `Λ = Acc(adv) / Acc(clean)`; `1` when nothing is classified correctly on clean inputs.
pub fn compute_lambda(clean_correct: usize, adv_correct: usize) -> f64 {
    if clean_correct == 0 {
        return 1.0;
    }
    adv_correct as f64 / clean_correct as f64
}

/// `κ̃ = κ` when `Λ < ν`, else `min(Λ/ν · κ, clamp_max)`.
pub fn dynamic_decay(lambda: f64, nu: f64, kappa: f64, clamp_max: f64) -> f64 {
    if lambda < nu {
        kappa
    } else {
        (lambda / nu * kappa).min(clamp_max)
    }
}

/// In-place `avg <- κ̃·avg + (1-κ̃)·w` for every array.
pub fn ema_update<T: Real>(avg: &mut ParamSet<T>, w: &ParamSet<T>, kappa_tilde: f64) -> Result<()> {
    avg.check_compatible(w)?;
    let k = T::of(kappa_tilde);
    let rest = T::one() - k;
    for (a, p) in avg.params.iter_mut().zip(&w.params) {
        for (ai, &wi) in a.data.iter_mut().zip(&p.data) {
            *ai = k * *ai + rest * wi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Param;
    use proptest::prelude::*;

    fn scalar(v: f64) -> ParamSet<f64> {
        ParamSet {
            params: vec![Param {
                name: "w".into(),
                shape: vec![1],
                data: vec![v],
            }],
        }
    }

    #[test]
    fn lambda_examples() {
        assert_eq!(compute_lambda(8, 4), 0.5);
        assert_eq!(compute_lambda(8, 0), 0.0);
        assert_eq!(compute_lambda(0, 0), 1.0);
    }

    #[test]
    fn decay_branch_table() {
        assert_eq!(dynamic_decay(0.2, 0.5, 0.999, 1.0), 0.999);
        assert_eq!(dynamic_decay(0.5, 0.5, 0.999, 1.0), 0.999);
        assert_eq!(dynamic_decay(0.75, 0.5, 0.999, 1.0), 1.0);
        assert!((dynamic_decay(0.75, 0.5, 0.999, 2.0) - 1.4985).abs() < 1e-12);
    }

    #[test]
    fn update_examples() {
        let mut avg = scalar(0.0);
        ema_update(&mut avg, &scalar(1.0), 0.9).unwrap();
        assert!((avg.params[0].data[0] - 0.1).abs() < 1e-15);
        let before = avg.clone();
        ema_update(&mut avg, &scalar(123.0), 1.0).unwrap();
        assert_eq!(avg, before);
        let mut wrong = scalar(0.0);
        wrong.params[0].shape = vec![1, 1];
        assert!(ema_update(&mut avg, &wrong, 0.5).is_err());
    }

    #[test]
    fn first_update_copies_weights() {
        let mut state = EmaState::<f64>::new(0.999, 0.5, 1.0).unwrap();
        state.update(&scalar(3.5), 0.999).unwrap();
        assert_eq!(state.w_tilde, Some(scalar(3.5)));
    }

    #[test]
    fn constant_decay_matches_geometric_sum() {
        let kappa = 0.97;
        let ws: Vec<f64> = (0..100).map(|k| ((k * 7919) % 113) as f64 / 17.0 - 3.0).collect();
        let w0 = 0.25;
        let mut avg = scalar(w0);
        for &w in &ws {
            ema_update(&mut avg, &scalar(w), kappa).unwrap();
        }
        let t = ws.len() as i32;
        let oracle = kappa.powi(t) * w0
            + (1.0 - kappa) * ws.iter().enumerate().map(|(k, w)| kappa.powi(t - 1 - k as i32) * w).sum::<f64>();
        assert!((avg.params[0].data[0] - oracle).abs() < 1e-10);
    }

    #[test]
    fn unit_threshold_with_clamp_at_kappa_is_plain_ema() {
        let dynamic = EmaState::<f64>::new(0.99, 1.0, 0.99).unwrap();
        for lambda in [0.0, 0.3, 0.99, 1.0] {
            assert_eq!(dynamic.decay(EmaMode::Dynamic, lambda), dynamic.decay(EmaMode::Fixed, lambda));
        }
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(EmaState::<f64>::new(1.0, 0.5, 1.0).is_err());
        assert!(EmaState::<f64>::new(0.9, 0.0, 1.0).is_err());
        assert!(EmaState::<f64>::new(0.9, 0.5, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn decay_is_monotone_and_branch_exact(a in 0.0f64..1.0, b in 0.0f64..1.0, nu in 0.05f64..1.0, kappa in 0.5f64..0.9999) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (k_lo, k_hi) = (dynamic_decay(lo, nu, kappa, 1.0), dynamic_decay(hi, nu, kappa, 1.0));
            prop_assert!(k_lo <= k_hi);
            if lo < nu { prop_assert_eq!(k_lo, kappa); } else { prop_assert!(k_lo >= kappa); }
        }

        #[test]
        fn average_stays_in_input_hull(ws in proptest::collection::vec(-10.0f64..10.0, 1..40), ks in proptest::collection::vec(0.0f64..=1.0, 40)) {
            let mut state = EmaState::<f64>::new(0.9, 0.5, 1.0).unwrap();
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for (w, k) in ws.iter().zip(&ks) {
                lo = lo.min(*w);
                hi = hi.max(*w);
                state.update(&scalar(*w), *k).unwrap();
                let v = state.w_tilde.as_ref().unwrap().params[0].data[0];
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
