use crate::error::{ensure_domain, Result};
use crate::real::Real;

/// `phi <- tau * phi + (1 - tau) * theta`, elementwise.
pub fn ema_update<T: Real>(phi: &mut [T], theta: &[T], tau: f64) -> Result<()> {
    ensure_domain!(phi.len() == theta.len(), "EMA has {} values, model has {}", phi.len(), theta.len());
    ensure_domain!((0.0..=1.0).contains(&tau), "EMA coefficient {tau} outside [0, 1]");
    if tau == 1.0 {
        return Ok(());
    }
    let one_minus = 1.0 - tau;
    for (f, &t) in phi.iter_mut().zip(theta) {
        // written as an increment so the stored value moves by a correctly
        // rounded step instead of recombining two rounded products
        let v = f.f64() + one_minus * (t.f64() - f.f64());
        *f = T::c(v);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_point_and_single_step() {
        let mut phi = vec![0.3f32, -1.0];
        ema_update(&mut phi, &[5.0, 5.0], 1.0).unwrap();
        assert_eq!(phi, vec![0.3, -1.0]);
        let mut phi = vec![0.0f32];
        ema_update(&mut phi, &[1.0], 0.9999).unwrap();
        assert!((phi[0] - 0.0001).abs() < 1e-9);
        assert!(ema_update(&mut phi, &[1.0, 2.0], 0.5).is_err());
        assert!(ema_update(&mut phi, &[1.0], 1.5).is_err());
    }

    #[test]
    fn zero_tau_copies() {
        let mut phi = vec![0.0f64, 7.0];
        ema_update(&mut phi, &[1.5, -2.0], 0.0).unwrap();
        assert_eq!(phi, vec![1.5, -2.0]);
    }
}
