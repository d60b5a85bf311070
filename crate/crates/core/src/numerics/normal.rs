use statrs::distribution::{ContinuousCDF, Normal};
use libm::erfc;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// `1 - Phi(t)` through the complementary error function.
pub fn normal_upper_tail(t: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    0.5 * erfc(t / SQRT_2)
}

/// `log(1 - Phi(t))`, using the asymptotic series far in the upper tail.
pub fn log_normal_upper_tail(t: f64) -> f64 {
    if t < 35.0 {
        return normal_upper_tail(t).ln();
    }
    let t2 = t * t;
    let inv = 1.0 / t2;
    let series = 1.0 - inv * (1.0 - 3.0 * inv * (1.0 - 5.0 * inv));
    -0.5 * t2 - t.ln() - HALF_LN_2PI + series.ln()
}

pub fn normal_pdf(t: f64) -> f64 {
    (-0.5 * t * t - HALF_LN_2PI).exp()
}

pub fn log_normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let u = (x - mean) / sd;
    -0.5 * u * u - sd.ln() - HALF_LN_2PI
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}
