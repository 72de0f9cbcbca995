//! Black-Scholes pricing with continuous dividend yield, implied-volatility
//! inversion, put-call-parity yield extraction and the at-the-money
//! price approximation used to translate IV moves into option returns.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use statrs::function::erf::erfc;
use thiserror::Error;

use crate::marketdata::Right;

/// Lower end of the implied-volatility search bracket.
pub const MIN_VOL: f64 = 1e-6;
/// Upper end of the implied-volatility search bracket.
pub const MAX_VOL: f64 = 5.0;
const MAX_ITERATIONS: usize = 200;
const PRICE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PricingError {
    #[error("price {price} outside no-arbitrage bounds ({lower}, {upper})")]
    PriceOutOfBounds { price: f64, lower: f64, upper: f64 },
    #[error("implied volatility did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("put-call parity log argument {argument} is not positive")]
    ParityDegenerate { argument: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BsInputs {
    pub spot: f64,
    pub strike: f64,
    /// Years to expiry.
    pub maturity: f64,
    pub rate: f64,
    pub dividend: f64,
    pub vol: f64,
    pub right: Right,
}

/// Standard normal CDF via the complementary error function, accurate in
/// both tails.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Discounted forward legs `(S e^{-q tau}, K e^{-r tau})`.
fn legs(spot: f64, strike: f64, maturity: f64, rate: f64, dividend: f64) -> (f64, f64) {
    (
        spot * (-dividend * maturity).exp(),
        strike * (-rate * maturity).exp(),
    )
}

/// No-arbitrage price bounds `(lower, upper)` for a European option.
pub fn price_bounds(spot: f64, strike: f64, maturity: f64, rate: f64, dividend: f64, right: Right) -> (f64, f64) {
    let (fs, fk) = legs(spot, strike, maturity, rate, dividend);
    match right {
        Right::Call => ((fs - fk).max(0.0), fs),
        Right::Put => ((fk - fs).max(0.0), fk),
    }
}

pub fn bs_price(p: &BsInputs) -> f64 {
    let (fs, fk) = legs(p.spot, p.strike, p.maturity, p.rate, p.dividend);
    let total_vol = p.vol * p.maturity.sqrt();
    if total_vol <= 0.0 {
        return match p.right {
            Right::Call => (fs - fk).max(0.0),
            Right::Put => (fk - fs).max(0.0),
        };
    }
    let d1 = (fs / fk).ln() / total_vol + 0.5 * total_vol;
    let d2 = d1 - total_vol;
    let price = match p.right {
        Right::Call => fs * norm_cdf(d1) - fk * norm_cdf(d2),
        Right::Put => fk * norm_cdf(-d2) - fs * norm_cdf(-d1),
    };
    price.max(0.0)
}

/// Sensitivity of the price to volatility.
pub fn bs_vega(p: &BsInputs) -> f64 {
    let (fs, fk) = legs(p.spot, p.strike, p.maturity, p.rate, p.dividend);
    let sqrt_t = p.maturity.sqrt();
    let total_vol = p.vol * sqrt_t;
    if total_vol <= 0.0 {
        return 0.0;
    }
    let d1 = (fs / fk).ln() / total_vol + 0.5 * total_vol;
    fs * norm_pdf(d1) * sqrt_t
}

/// Inverts [`bs_price`] for volatility.
///
/// Bracketed bisection on `[MIN_VOL, MAX_VOL]` with safeguarded Newton
/// steps. Iterates until the volatility is pinned to machine precision, so
/// the result is far tighter than the price tolerance alone would imply for
/// low-vega options.
pub fn implied_vol(
    price: f64,
    spot: f64,
    strike: f64,
    maturity: f64,
    rate: f64,
    dividend: f64,
    right: Right,
) -> Result<f64, PricingError> {
    let (lower, upper) = price_bounds(spot, strike, maturity, rate, dividend, right);
    let out_of_bounds = PricingError::PriceOutOfBounds {
        price,
        lower,
        upper,
    };
    if !price.is_finite() || price <= lower || price >= upper {
        return Err(out_of_bounds);
    }
    let mut inputs = BsInputs {
        spot,
        strike,
        maturity,
        rate,
        dividend,
        vol: MIN_VOL,
        right,
    };
    let mut f = |vol: f64| {
        inputs.vol = vol;
        (bs_price(&inputs) - price, bs_vega(&inputs))
    };

    let (f_lo, _) = f(MIN_VOL);
    let (f_hi, _) = f(MAX_VOL);
    if f_lo > 0.0 || f_hi < 0.0 {
        return Err(out_of_bounds);
    }
    let (mut lo, mut hi) = (MIN_VOL, MAX_VOL);

    // Manaster-Koehler style start: the vol that makes d1 or d2 vanish.
    let (fs, fk) = legs(spot, strike, maturity, rate, dividend);
    let moneyness = (fs / fk).ln().abs();
    let mut vol = (2.0 * moneyness / maturity).sqrt().clamp(0.05, 1.0);

    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITERATIONS {
        let (diff, vega) = f(vol);
        residual = diff.abs();
        if diff == 0.0 {
            return Ok(vol);
        }
        if diff < 0.0 {
            lo = vol;
        } else {
            hi = vol;
        }
        let newton = vol - diff / vega;
        let next = if vega > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        let step = (next - vol).abs();
        vol = next;
        if step <= 1e-15 * vol || hi - lo <= 4.0 * f64::EPSILON * vol {
            let (diff, _) = f(vol);
            if diff.abs() <= PRICE_TOLERANCE {
                return Ok(vol);
            }
            residual = diff.abs();
            break;
        }
    }
    Err(PricingError::NoConvergence {
        iterations: MAX_ITERATIONS,
        residual,
    })
}

/// Dividend yield implied by put-call parity at one strike:
/// `q = -ln((C - P + K e^{-r tau}) / S) / tau`.
pub fn implied_dividend_yield(
    call_mid: f64,
    put_mid: f64,
    spot: f64,
    strike: f64,
    maturity: f64,
    rate: f64,
) -> Result<f64, PricingError> {
    let argument = (call_mid - put_mid + strike * (-rate * maturity).exp()) / spot;
    if !(argument > 0.0) || !argument.is_finite() {
        return Err(PricingError::ParityDegenerate { argument });
    }
    Ok(-argument.ln() / maturity)
}

/// At-the-money call approximation `S sigma sqrt(tau / 2 pi)`.
pub fn atm_price_approx(spot: f64, vol: f64, maturity: f64) -> f64 {
    spot * vol * (maturity / (2.0 * PI)).sqrt()
}

/// Relative change of the approximate ATM price when volatility moves from
/// `base_vol` to `base_vol + vol_change`. Linear in volatility, so this is
/// `vol_change / base_vol`.
pub fn atm_relative_return(vol_change: f64, base_vol: f64) -> f64 {
    // Spot and maturity cancel; unit values keep the ratio exact.
    let before = atm_price_approx(1.0, base_vol, 1.0);
    let after = atm_price_approx(1.0, base_vol + vol_change, 1.0);
    (after - before) / before
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(spot: f64, strike: f64, maturity: f64, rate: f64, dividend: f64, vol: f64) -> BsInputs {
        BsInputs {
            spot,
            strike,
            maturity,
            rate,
            dividend,
            vol,
            right: Right::Call,
        }
    }

    #[test]
    fn atm_call_matches_quadrature() {
        // Discounted lognormal payoff integrated at 30 digits.
        let p = bs_price(&call(100.0, 100.0, 1.0, 0.0, 0.0, 0.2));
        assert!((p - 7.965_567_455_405_796).abs() < 1e-6, "{p}");
    }

    #[test]
    fn zero_vol_is_discounted_forward_intrinsic() {
        let p = call(100.0, 95.0, 0.5, 0.03, 0.01, 0.0);
        let expected = 100.0 * (-0.01f64 * 0.5).exp() - 95.0 * (-0.03f64 * 0.5).exp();
        assert_eq!(bs_price(&p), expected);
        let otm = call(100.0, 120.0, 0.5, 0.03, 0.01, 0.0);
        assert_eq!(bs_price(&otm), 0.0);
    }

    #[test]
    fn parity_holds_tightly() {
        for &(k, t, r, q, v) in &[
            (100.0, 1.0, 0.0, 0.0, 0.2),
            (80.0, 0.25, 0.05, 0.02, 0.4),
            (130.0, 0.75, 0.01, 0.03, 0.1),
        ] {
            let c = call(100.0, k, t, r, q, v);
            let p = BsInputs { right: Right::Put, ..c };
            let lhs = bs_price(&c) - bs_price(&p);
            let rhs = 100.0 * (-q * t).exp() - k * (-r * t).exp();
            assert!((lhs - rhs).abs() <= 1e-12, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn implied_vol_round_trips_across_grid() {
        for i in 0..11 {
            let m = 0.8 + 0.05 * i as f64;
            for &t in &[0.25, 0.5, 0.75] {
                for right in [Right::Call, Right::Put] {
                    let inputs = BsInputs {
                        right,
                        ..call(100.0, 100.0 * m, t, 0.01, 0.015, 0.2)
                    };
                    let price = bs_price(&inputs);
                    let vol = implied_vol(price, 100.0, 100.0 * m, t, 0.01, 0.015, right).unwrap();
                    assert!((vol - 0.2).abs() <= 1e-8, "m={m} t={t} {right:?}: {vol}");
                }
            }
        }
    }

    #[test]
    fn implied_vol_rejects_bounds() {
        let (lo, hi) = price_bounds(100.0, 90.0, 0.5, 0.02, 0.0, Right::Call);
        assert!(matches!(
            implied_vol(lo, 100.0, 90.0, 0.5, 0.02, 0.0, Right::Call),
            Err(PricingError::PriceOutOfBounds { .. })
        ));
        assert!(matches!(
            implied_vol(hi, 100.0, 90.0, 0.5, 0.02, 0.0, Right::Call),
            Err(PricingError::PriceOutOfBounds { .. })
        ));
        assert_eq!(hi, 100.0);
    }

    #[test]
    fn dividend_yield_recovered_from_parity_quotes() {
        let base = call(100.0, 100.0, 0.5, 0.02, 0.015, 0.25);
        let c = bs_price(&base);
        let p = bs_price(&BsInputs { right: Right::Put, ..base });
        let q = implied_dividend_yield(c, p, 100.0, 100.0, 0.5, 0.02).unwrap();
        assert!((q - 0.015).abs() <= 1e-12, "{q}");
    }

    #[test]
    fn dividend_yield_symmetric_case_is_zero() {
        let t: f64 = 0.5;
        let r: f64 = 0.02;
        let strike = 100.0 / (-r * t).exp();
        let q = implied_dividend_yield(3.0, 3.0, 100.0, strike, t, r).unwrap();
        assert!(q.abs() < 1e-15, "{q}");
    }

    #[test]
    fn dividend_yield_degenerate() {
        let discounted = 100.0 * (-0.02f64 * 0.5).exp();
        assert!(matches!(
            implied_dividend_yield(0.0, discounted, 100.0, 100.0, 0.5, 0.02),
            Err(PricingError::ParityDegenerate { .. })
        ));
    }

    #[test]
    fn atm_approximation_values() {
        assert_eq!(atm_price_approx(100.0, 0.0, 0.25), 0.0);
        let approx = atm_price_approx(100.0, 0.2, 0.25);
        assert!((approx - 3.989_422_804_014_327).abs() < 1e-12);
        // ATM-forward strike: full Black-Scholes within 2%.
        let strike = 100.0 * (0.02f64 * 0.25).exp();
        let full = bs_price(&call(100.0, strike, 0.25, 0.02, 0.0, 0.2));
        assert!(((approx - full) / full).abs() < 0.02, "{approx} vs {full}");
    }

    #[test]
    fn atm_return_is_vol_ratio() {
        let ret = atm_relative_return(0.00218, 0.20);
        assert!((ret - 0.0109).abs() < 1e-14, "{ret}");
        assert!((atm_relative_return(0.00218, 0.15) - 0.00218 / 0.15).abs() < 1e-14);
    }

    #[test]
    fn price_increases_with_vol() {
        let mut last = 0.0;
        for i in 1..=50 {
            let p = bs_price(&call(100.0, 110.0, 0.5, 0.01, 0.0, 0.01 * i as f64));
            assert!(p > last);
            last = p;
        }
    }
}
