//! Special functions shared by the significance tests.
//!
//! One regularized incomplete gamma and one regularized incomplete beta
//! implementation back every distribution function in the crate: the central
//! and noncentral chi-square used by the bispectral tests and the Student-t
//! used by the paired t-test. Series and continued fractions iterate until
//! the relative change drops below `1e-15`, comfortably inside the `1e-12`
//! tolerance the callers rely on.

use std::f64::consts::PI;

const MAX_ITER: usize = 100_000;
const EPS: f64 = 1e-15;
const TINY: f64 = 1e-300;

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    assert!(a > 0.0, "gamma_p requires a > 0");
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        gamma_series(a, x)
    } else {
        1.0 - gamma_cont_frac(a, x)
    }
}

/// Regularized upper incomplete gamma `Q(a, x) = 1 - P(a, x)`, computed
/// directly in the upper tail so small probabilities keep full precision.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    assert!(a > 0.0, "gamma_q requires a > 0");
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_series(a, x)
    } else {
        gamma_cont_frac(a, x)
    }
}

fn gamma_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut del = 1.0 / a;
    let mut sum = del;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * EPS {
            break;
        }
    }
    (sum.ln() - x + a * x.ln() - ln_gamma(a)).exp()
}

// Modified Lentz evaluation of the continued fraction for Q(a, x).
fn gamma_cont_frac(a: f64, x: f64) -> f64 {
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    ((-x + a * x.ln() - ln_gamma(a)).exp() * h).clamp(0.0, 1.0)
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn beta_inc(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "beta_inc requires positive shapes");
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cont_frac(a, b, x) / a
    } else {
        1.0 - front * beta_cont_frac(b, a, 1.0 - x) / b
    }
}

fn beta_cont_frac(a: f64, b: f64, x: f64) -> f64 {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

pub fn chi2_cdf(x: f64, dof: f64) -> f64 {
    gamma_p(dof / 2.0, x / 2.0)
}

/// Upper tail `1 - CDF`, accurate for tiny probabilities.
pub fn chi2_sf(x: f64, dof: f64) -> f64 {
    gamma_q(dof / 2.0, x / 2.0)
}

/// Two-sided p-value of a Student-t statistic.
pub fn student_t_two_sided(t: f64, dof: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    beta_inc(dof / 2.0, 0.5, dof / (dof + t * t))
}

/// CDF of the noncentral chi-square with `dof` degrees of freedom and
/// noncentrality `lambda`, as a Poisson(`lambda/2`) mixture of central
/// chi-square CDFs. Terms are summed outward from the Poisson mode until the
/// neglected mixture mass falls below `1e-12`.
pub fn noncentral_chi2_cdf(x: f64, dof: f64, lambda: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if lambda <= 0.0 {
        return chi2_cdf(x, dof);
    }
    let mu = lambda / 2.0;
    let mode = mu.floor();
    let ln_weight = |j: f64| -mu + j * mu.ln() - ln_gamma(j + 1.0);

    let mut total = 0.0;
    let mut mass = 0.0;
    // Poisson weights decay monotonically away from the mode.
    let mut j = mode;
    loop {
        let w = ln_weight(j).exp();
        total += w * gamma_p(dof / 2.0 + j, x / 2.0);
        mass += w;
        if j == 0.0 || w < 1e-17 {
            break;
        }
        j -= 1.0;
    }
    let mut j = mode + 1.0;
    loop {
        let w = ln_weight(j).exp();
        total += w * gamma_p(dof / 2.0 + j, x / 2.0);
        mass += w;
        if 1.0 - mass < 1e-12 || w < 1e-17 {
            break;
        }
        j += 1.0;
    }
    total.clamp(0.0, 1.0)
}

/// Quantile of a continuous CDF on `[0, inf)` by bisection.
pub fn quantile_by_bisection(p: f64, cdf: impl Fn(f64) -> f64) -> f64 {
    assert!((0.0..1.0).contains(&p), "quantile level must lie in [0, 1)");
    if p == 0.0 {
        return 0.0;
    }
    let mut hi = 1.0;
    while cdf(hi) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi.max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

pub fn noncentral_chi2_quantile(p: f64, dof: f64, lambda: f64) -> f64 {
    quantile_by_bisection(p, |x| noncentral_chi2_cdf(x, dof, lambda))
}

/// Sample quantile with linear interpolation between order statistics
/// (the "type 7" definition). `sorted` must be ascending and non-empty.
pub fn sample_quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

    #[test]
    fn ln_gamma_matches_factorials() {
        let mut fact = 1.0f64;
        for n in 1..20 {
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-12, "n={n}");
            fact *= n as f64;
        }
        assert!((ln_gamma(0.5) - PI.sqrt().ln()).abs() < 1e-13);
    }

    #[test]
    fn chi2_against_reference_library() {
        for &dof in &[1.0, 2.0, 5.0, 40.0, 2048.0] {
            let reference = ChiSquared::new(dof).unwrap();
            for &q in &[0.1, 0.5, 1.0, 3.0, dof, dof * 1.3 + 2.0] {
                let ours = chi2_cdf(q, dof);
                assert!((ours - reference.cdf(q)).abs() < 1e-10, "dof={dof} x={q}");
            }
        }
    }

    #[test]
    fn chi2_two_dof_is_exponential() {
        for &x in &[0.0, 0.3, 1.0, 4.0, 25.0] {
            let closed = 1.0 - (-x / 2.0f64).exp();
            assert!((chi2_cdf(x, 2.0) - closed).abs() < 1e-13);
        }
        // deep tail keeps relative precision
        let sf = chi2_sf(200.0, 2.0);
        assert!(((sf - (-100.0f64).exp()) / sf).abs() < 1e-10);
    }

    #[test]
    fn student_t_against_reference_library() {
        for &dof in &[1.0, 4.0, 10.0, 30.0] {
            let reference = StudentsT::new(0.0, 1.0, dof).unwrap();
            for &t in &[0.0, 0.4364, 1.0, 2.776, 8.0] {
                let expected = 2.0 * (1.0 - reference.cdf(t));
                assert!((student_t_two_sided(t, dof) - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn noncentral_reduces_to_central() {
        for &x in &[0.5, 2.0, 7.0] {
            assert_eq!(noncentral_chi2_cdf(x, 2.0, 0.0), chi2_cdf(x, 2.0));
        }
    }

    #[test]
    fn noncentral_mean_via_quadrature() {
        // E[X] = dof + lambda; integrate the survival function.
        for &(dof, lambda) in &[(2.0f64, 3.0f64), (2.0, 40.0), (4.0, 0.7)] {
            let upper = dof + lambda + 40.0 * (2.0 * (dof + 2.0 * lambda)).sqrt();
            let n = 20_000;
            let h = upper / n as f64;
            let mut integral = 0.0;
            for i in 0..=n {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                integral += w * (1.0 - noncentral_chi2_cdf(i as f64 * h, dof, lambda));
            }
            integral *= h;
            assert!(
                (integral - (dof + lambda)).abs() < 1e-3 * (dof + lambda),
                "dof={dof} lambda={lambda} got {integral}"
            );
        }
    }

    #[test]
    fn noncentral_large_lambda_is_stable() {
        let lambda = 5_000.0;
        let median = noncentral_chi2_quantile(0.5, 2.0, lambda);
        assert!((median - (lambda + 2.0)).abs() < 5.0, "median {median}");
    }

    #[test]
    fn sample_quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(sample_quantile(&v, 0.25), 2.0);
        assert_eq!(sample_quantile(&v, 0.5), 3.0);
        assert!((sample_quantile(&[0.0, 1.0], 0.25) - 0.25).abs() < 1e-15);
    }
}
