//! Scalar math kernels used inside the scan loops.
//!
//! `fast_exp` is a Cody-Waite range reduction plus degree-13 Taylor
//! polynomial. It exists so the per-timestep discretization inside the
//! selective scans does not bottleneck on libm calls, and so results do not
//! depend on the host libm. Accuracy is checked against `f64::exp` in the
//! tests (relative error < 5e-14 over the clamped domain).

const LOG2_E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238_164_9e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;

/// exp(x) for x clamped to [-708, 709]. Inputs below -708 return ~3e-308
/// (effectively zero for decay factors) instead of exactly 0.
#[inline]
pub fn fast_exp(x: f64) -> f64 {
    let xc = x.clamp(-708.0, 709.0);
    let k = (xc * LOG2_E).round();
    let r = (xc - k * LN2_HI) - k * LN2_LO;
    // Taylor series for exp(r), |r| <= ln2/2; truncation < 5e-18.
    let p = 1.0
        + r * (1.0
            + r * (1.0 / 2.0
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0
                        + r * (1.0 / 120.0
                            + r * (1.0 / 720.0
                                + r * (1.0 / 5040.0
                                    + r * (1.0 / 40320.0
                                        + r * (1.0 / 362880.0
                                            + r * (1.0 / 3628800.0
                                                + r * (1.0 / 39916800.0
                                                    + r * (1.0 / 479001600.0))))))))))));
    let scale = f64::from_bits(((k as i64 + 1023) as u64) << 52);
    scale * p
}

/// Zero-order-hold decay and input gain for one diagonal state entry:
/// returns (exp(dt*a), (exp(dt*a) - 1)/a), with the a -> 0 limit dt.
#[inline]
pub fn zoh_decay_gain(a: f64, dt: f64) -> (f64, f64) {
    let xbar = dt * a;
    let abar = fast_exp(xbar);
    let phi = if xbar.abs() < 1e-5 {
        dt * (1.0 + xbar * (0.5 + xbar * (1.0 / 6.0)))
    } else {
        (abar - 1.0) / a
    };
    (abar, phi)
}

/// d/da of the input gain (exp(dt*a) - 1)/a, with a series fallback for
/// small |dt*a| where the closed form cancels catastrophically.
#[inline]
pub fn zoh_gain_da(a: f64, dt: f64, abar: f64) -> f64 {
    let xbar = dt * a;
    if xbar.abs() < 1e-4 {
        dt * dt * (0.5 + xbar * (1.0 / 3.0 + xbar * (1.0 / 8.0)))
    } else {
        (dt * abar * a - (abar - 1.0)) / (a * a)
    }
}

/// Numerically stable softplus ln(1 + e^x).
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of softplus: x such that softplus(x) = y, y > 0.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn fast_exp_matches_std() {
        // seed 42
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut worst = 0.0f64;
        for _ in 0..200_000 {
            let x: f64 = rng.gen_range(-708.0..50.0);
            let got = fast_exp(x);
            let want = x.exp();
            let rel = ((got - want) / want).abs();
            worst = worst.max(rel);
        }
        for x in [-708.0, -100.0, -1.0, -1e-12, 0.0, 1e-12, 0.5, 1.0, 20.0, 709.0] {
            let rel = ((fast_exp(x) - x.exp()) / x.exp()).abs();
            worst = worst.max(rel);
        }
        assert!(worst < 5e-14, "worst relative error {worst:e}");
    }

    #[test]
    fn zoh_gain_limit_and_series() {
        // a -> 0 limit is exactly dt.
        let (abar, phi) = zoh_decay_gain(0.0, 0.25);
        assert_eq!(abar, 1.0);
        assert_eq!(phi, 0.25);
        // Series region agrees with high-precision closed form evaluated
        // away from the cancellation (reference via f64::exp_m1).
        for &a in &[1e-7, -1e-7, 1e-6, -3e-6] {
            let dt = 0.5;
            let (_, phi) = zoh_decay_gain(a, dt);
            let want = (dt * a).exp_m1() / a;
            assert!(
                ((phi - want) / want).abs() < 1e-12,
                "a={a}: phi={phi} want={want}"
            );
        }
    }

    #[test]
    fn gain_derivative_matches_finite_difference() {
        for &(a, dt) in &[(-1.5f64, 0.3f64), (-0.02, 0.7), (2e-5, 0.1), (0.0, 0.4)] {
            let h = 1e-6;
            let fd = ((dt * (a + h)).exp_m1() / (a + h) - (dt * (a - h)).exp_m1() / (a - h))
                / (2.0 * h);
            let got = zoh_gain_da(a, dt, fast_exp(dt * a));
            assert!(
                (got - fd).abs() < 1e-8,
                "a={a} dt={dt}: got={got} fd={fd}"
            );
        }
    }

    #[test]
    fn softplus_round_trip_and_tails() {
        for &y in &[1e-3, 0.05, 0.1, 1.0, 40.0] {
            let x = softplus_inv(y);
            assert!((softplus(x) - y).abs() < 1e-12 * y.max(1.0));
        }
        assert_eq!(softplus(100.0), 100.0);
        assert!(softplus(-100.0) > 0.0);
    }
}
