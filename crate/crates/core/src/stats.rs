//! Correlation tests, Holm correction and ordinary least squares.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use crate::error::{Error, Result};

/// Pearson correlation; `None` when either series has zero variance or
/// the lengths differ.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Two-sided p-value of Student's t with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

/// Two-sided p-value of a Pearson coefficient from `n` pairs.
pub fn pearson_p(r: f64, n: usize) -> f64 {
    let df = n as f64 - 2.0;
    if r.abs() >= 1.0 {
        return 0.0;
    }
    t_two_sided_p(r * df.sqrt() / (1.0 - r * r).sqrt(), df)
}

/// Holm step-down adjusted p-values, in the input order.
pub fn holm_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut adj = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        running = running.max(((m - rank) as f64 * p[i]).min(1.0));
        adj[i] = running;
    }
    adj
}

/// Which hypotheses Holm's procedure rejects at level `alpha`.
pub fn holm_reject(p: &[f64], alpha: f64) -> Vec<bool> {
    holm_adjust(p).into_iter().map(|a| a <= alpha).collect()
}

/// One row of a regression table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub coef: f64,
    pub std_err: f64,
    pub t: f64,
    pub p: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Ordinary least squares fit with an intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub n: usize,
    /// Intercept first, then the features in input order.
    pub coefficients: Vec<Coefficient>,
    pub rss: f64,
    pub r2: f64,
    pub adj_r2: f64,
    pub f_stat: Option<f64>,
    pub f_p: Option<f64>,
    pub df_model: usize,
    pub df_resid: usize,
    /// Gaussian log-likelihood at the maximum-likelihood variance.
    pub log_likelihood: f64,
    /// `−2·llf + 2·(k+1)` with `k+1` estimated coefficients.
    pub aic: f64,
    pub residuals: Vec<f64>,
}

impl OlsFit {
    pub fn feature(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().skip(1).find(|c| c.name == name)
    }
}

/// Fit `y ~ 1 + Σ x_j`. `columns[j]` holds feature `j` for every sample.
pub fn ols(y: &[f64], columns: &[&[f64]], names: &[String]) -> Result<OlsFit> {
    let n = y.len();
    let k = columns.len();
    if names.len() != k {
        return Err(Error::Shape("one name per feature column is required".into()));
    }
    if columns.iter().any(|c| c.len() != n) {
        return Err(Error::Shape("feature columns must match the target length".into()));
    }
    if n <= k + 1 {
        return Err(Error::Data(format!("{n} samples cannot support {} coefficients", k + 1)));
    }
    let x = DMatrix::from_fn(n, k + 1, |i, j| if j == 0 { 1.0 } else { columns[j - 1][i] });
    let yv = DVector::from_column_slice(y);
    let xtx = x.transpose() * &x;
    let inv = xtx
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical("design matrix is singular".into()))?;
    let beta = &inv * (x.transpose() * &yv);
    let fitted = &x * &beta;
    let resid: Vec<f64> = (0..n).map(|i| y[i] - fitted[i]).collect();
    let rss: f64 = resid.iter().map(|r| r * r).sum();
    let my = y.iter().sum::<f64>() / n as f64;
    let tss: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let df_resid = n - k - 1;
    let sigma2 = rss / df_resid as f64;
    let r2 = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    let adj_r2 = 1.0 - (1.0 - r2) * (n as f64 - 1.0) / df_resid as f64;
    let tcrit = if df_resid > 0 {
        StudentsT::new(0.0, 1.0, df_resid as f64)
            .map_err(|e| Error::Numerical(e.to_string()))?
            .inverse_cdf(0.975)
    } else {
        f64::NAN
    };
    let mut coefficients = Vec::with_capacity(k + 1);
    for j in 0..=k {
        let se = (sigma2 * inv[(j, j)]).max(0.0).sqrt();
        let t = if se > 0.0 { beta[j] / se } else { f64::INFINITY * beta[j].signum() };
        coefficients.push(Coefficient {
            name: if j == 0 { "const".to_string() } else { names[j - 1].clone() },
            coef: beta[j],
            std_err: se,
            t,
            p: if se > 0.0 { t_two_sided_p(t, df_resid as f64) } else { 0.0 },
            ci_low: beta[j] - tcrit * se,
            ci_high: beta[j] + tcrit * se,
        });
    }
    let (f_stat, f_p) = if k > 0 && rss > 0.0 {
        let f = ((tss - rss) / k as f64) / sigma2;
        let p = FisherSnedecor::new(k as f64, df_resid as f64)
            .map(|d| 1.0 - d.cdf(f))
            .ok();
        (Some(f), p)
    } else {
        (None, None)
    };
    let nf = n as f64;
    let log_likelihood = if rss > 0.0 {
        -nf / 2.0 * ((2.0 * std::f64::consts::PI).ln() + (rss / nf).ln() + 1.0)
    } else {
        f64::INFINITY
    };
    Ok(OlsFit {
        n,
        coefficients,
        rss,
        r2,
        adj_r2,
        f_stat,
        f_p,
        df_model: k,
        df_resid,
        log_likelihood,
        aic: -2.0 * log_likelihood + 2.0 * (k + 1) as f64,
        residuals: resid,
    })
}

/// Variance inflation factor of each column against the others.
pub fn vif(columns: &[&[f64]]) -> Vec<f64> {
    let k = columns.len();
    (0..k)
        .map(|j| {
            if k < 2 {
                return 1.0;
            }
            let others: Vec<&[f64]> = (0..k).filter(|&i| i != j).map(|i| columns[i]).collect();
            let names: Vec<String> = (0..others.len()).map(|i| format!("x{i}")).collect();
            match ols(columns[j], &others, &names) {
                Ok(fit) if fit.r2 < 1.0 - 1e-12 => 1.0 / (1.0 - fit.r2),
                _ => f64::INFINITY,
            }
        })
        .collect()
}
