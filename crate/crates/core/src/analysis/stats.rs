//! Distribution tails and the classical tests used on response data.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

/// Regularized incomplete beta `I_x(a, b)`, clamped to `[0, 1]` in `x`.
fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    beta_reg(a, b, x.clamp(0.0, 1.0))
}

/// `P(T <= t)` for Student's t with `df` degrees of freedom.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    let tail = 0.5 * reg_inc_beta(df / 2.0, 0.5, df / (df + t * t));
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// `P(|T| >= |t|)`.
pub fn student_t_two_tailed(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    reg_inc_beta(df / 2.0, 0.5, df / (df + t * t)).min(1.0)
}

/// `P(F >= f)` for the F distribution with `(d1, d2)` degrees of freedom.
pub fn f_sf(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    reg_inc_beta(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))
}

/// `P(X >= k)` for `X ~ Binomial(n, p)`.
pub fn binomial_sf(k: u64, n: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    reg_inc_beta(k as f64, (n - k + 1) as f64, p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sum_sq_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum()
}

fn check_finite(xs: &[f64]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Stats("non-finite sample".into()))
    }
}

/// Degenerate-variance convention: equal means give `t = 0, p = 1`,
/// different means give `t = ±inf, p = 0`.
fn t_from(diff: f64, se: f64, df: f64) -> TTest {
    if se == 0.0 {
        return if diff == 0.0 {
            TTest { t: 0.0, df, p: 1.0 }
        } else {
            TTest {
                t: diff.signum() * f64::INFINITY,
                df,
                p: 0.0,
            }
        };
    }
    let t = diff / se;
    TTest {
        t,
        df,
        p: student_t_two_tailed(t, df),
    }
}

/// Two-tailed one-sample t-test of `mean(xs) = mu`.
pub fn one_sample_t(xs: &[f64], mu: f64) -> Result<TTest> {
    if xs.len() < 2 {
        return Err(Error::Stats(format!("one-sample t needs 2 samples, got {}", xs.len())));
    }
    check_finite(xs)?;
    let n = xs.len() as f64;
    let s2 = sum_sq_dev(xs) / (n - 1.0);
    Ok(t_from(mean(xs) - mu, (s2 / n).sqrt(), n - 1.0))
}

/// Two-tailed pooled-variance (Student) two-sample t-test.
pub fn two_sample_t(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.is_empty() || b.is_empty() || a.len() + b.len() < 3 {
        return Err(Error::Stats("two-sample t needs nonempty groups with 3 samples total".into()));
    }
    check_finite(a)?;
    check_finite(b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let df = na + nb - 2.0;
    let sp2 = (sum_sq_dev(a) + sum_sq_dev(b)) / df;
    Ok(t_from(mean(a) - mean(b), (sp2 * (1.0 / na + 1.0 / nb)).sqrt(), df))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anova {
    pub f: f64,
    pub df_between: f64,
    pub df_within: f64,
    pub p: f64,
}

pub fn one_way_anova(groups: &[Vec<f64>]) -> Result<Anova> {
    if groups.len() < 2 {
        return Err(Error::Stats("ANOVA needs at least 2 groups".into()));
    }
    if groups.iter().any(|g| g.is_empty()) {
        return Err(Error::Stats("empty ANOVA group".into()));
    }
    if groups.iter().map(Vec::len).sum::<usize>() <= groups.len() {
        return Err(Error::Stats("ANOVA needs more samples than groups".into()));
    }
    for g in groups {
        check_finite(g)?;
    }
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    let grand = mean(&all);
    let ssb: f64 = groups
        .iter()
        .map(|g| g.len() as f64 * (mean(g) - grand).powi(2))
        .sum();
    let ssw: f64 = groups.iter().map(|g| sum_sq_dev(g)).sum();
    if ssw == 0.0 {
        return Err(Error::Stats("zero within-group variance".into()));
    }
    let dfb = (groups.len() - 1) as f64;
    let dfw = (all.len() - groups.len()) as f64;
    let f = (ssb / dfb) / (ssw / dfw);
    Ok(Anova {
        f,
        df_between: dfb,
        df_within: dfw,
        p: f_sf(f, dfb, dfw),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pearson {
    pub r: f64,
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

pub fn pearson_correlation(x: &[f64], y: &[f64]) -> Result<Pearson> {
    if x.len() != y.len() {
        return Err(Error::Stats(format!("length mismatch {} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::Stats("Pearson correlation needs 3 pairs".into()));
    }
    check_finite(x)?;
    check_finite(y)?;
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let (sxx, syy) = (sum_sq_dev(x), sum_sq_dev(y));
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Stats("zero variance".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (x.len() - 2) as f64;
    let (t, p) = if r.abs() == 1.0 {
        (r * f64::INFINITY, 0.0)
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        (t, student_t_two_tailed(t, df))
    };
    Ok(Pearson { r, t, df, p })
}

/// One-sample Kolmogorov–Smirnov test against Uniform(0, 1). Returns `(D, p)`
/// with the asymptotic Kolmogorov distribution (Stephens' small-sample correction).
pub fn ks_uniform(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Stats("K-S test on empty sample".into()));
    }
    check_finite(samples)?;
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let d = s
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    Ok((d, kolmogorov_sf(lambda)))
}

/// `Q(λ) = 2 Σ (-1)^{k-1} exp(-2 k² λ²)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let k = f64::from(k);
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as i64 % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Linear-interpolation percentile (`q` in `[0, 1]`) of sorted data.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_cdf_closed_forms() {
        // df = 1 is Cauchy, df = 2 has F(t) = 1/2 + t / (2 sqrt(2 + t^2)).
        for &t in &[-3.0, -0.4, 0.0, 1.0, 7.5] {
            let cauchy = 0.5 + f64::atan(t) / std::f64::consts::PI;
            assert!((student_t_cdf(t, 1.0) - cauchy).abs() < 1e-13);
            let two = 0.5 + t / (2.0 * (2.0 + t * t).sqrt());
            assert!((student_t_cdf(t, 2.0) - two).abs() < 1e-13);
        }
    }

    fn binomial(n: u64, k: u64) -> f64 {
        (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    }

    #[test]
    fn binomial_tail_by_summation() {
        let (n, p) = (20u64, 0.5f64);
        for k in 0..=n {
            let direct: f64 = (k..=n)
                .map(|j| binomial(n, j) * p.powi(j as i32)
                    * (1.0 - p).powi((n - j) as i32))
                .sum();
            assert!((binomial_sf(k, n, p) - direct).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn anova_fixture() {
        let a = one_way_anova(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert!((a.f - 13.5).abs() < 1e-12);
        let same = one_way_anova(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(same.f, 0.0);
        assert_eq!(same.p, 1.0);
        assert!(one_way_anova(&[vec![1.0, 1.0], vec![2.0, 2.0]]).is_err());
        assert!(one_way_anova(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn degenerate_t_tests() {
        let t = one_sample_t(&[0.0, 1.0, 0.0, 1.0], 0.5).unwrap();
        assert_eq!((t.t, t.p), (0.0, 1.0));
        let t = one_sample_t(&[1.0; 5], 0.5).unwrap();
        assert_eq!(t.p, 0.0);
        assert!(t.t.is_infinite());
        let t = two_sample_t(&[1.0; 4], &[1.0; 3]).unwrap();
        assert_eq!(t.p, 1.0);
        assert!(one_sample_t(&[1.0], 0.0).is_err());
    }

    #[test]
    fn pearson_extremes() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(pearson_correlation(&x, &neg).unwrap().r, -1.0);
        assert_eq!(pearson_correlation(&x, &x).unwrap().r, 1.0);
        assert!(pearson_correlation(&x, &[2.0; 4]).is_err());
        assert!(pearson_correlation(&x, &x[..3]).is_err());
    }

    #[test]
    fn percentiles_partition_1_to_99() {
        let xs: Vec<f64> = (1..=99).map(f64::from).collect();
        let q1 = percentile_sorted(&xs, 1.0 / 3.0);
        let q2 = percentile_sorted(&xs, 2.0 / 3.0);
        assert_eq!(xs.iter().filter(|&&x| x <= q1).count(), 33);
        assert_eq!(xs.iter().filter(|&&x| x > q1 && x <= q2).count(), 33);
    }

    #[test]
    fn ks_detects_nonuniform() {
        let uniform: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!(ks_uniform(&uniform).unwrap().1 > 0.99);
        let skewed: Vec<f64> = uniform.iter().map(|u| u * u).collect();
        assert!(ks_uniform(&skewed).unwrap().1 < 1e-6);
    }
}
