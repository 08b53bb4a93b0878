use super::LimeError;

pub const MAX_SWEEPS: usize = 10_000;
pub const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub sweeps: usize,
}

fn soft_threshold(value: f64, threshold: f64) -> f64 {
    if value > threshold {
        value - threshold
    } else if value < -threshold {
        value + threshold
    } else {
        0.0
    }
}

/// Centered, column-major view of a weighted design.
pub(crate) struct Centered {
    pub columns: Vec<Vec<f64>>,
    pub x_mean: Vec<f64>,
    pub y: Vec<f64>,
    pub y_mean: f64,
    pub total_weight: f64,
}

pub(crate) fn center(x: &[Vec<f64>], y: &[f64], w: &[f64]) -> Result<Centered, LimeError> {
    let n = x.len();
    if n == 0 {
        return Err(LimeError::Fit("no samples".into()));
    }
    if y.len() != n || w.len() != n {
        return Err(LimeError::Fit(format!(
            "dimension mismatch: {} rows, {} targets, {} weights",
            n,
            y.len(),
            w.len()
        )));
    }
    let d = x[0].len();
    if x.iter().any(|row| row.len() != d) {
        return Err(LimeError::Fit("ragged design matrix".into()));
    }
    let finite = x.iter().flatten().chain(y).chain(w).all(|v| v.is_finite());
    if !finite {
        return Err(LimeError::Fit("non-finite input".into()));
    }
    if w.iter().any(|&wi| wi < 0.0) {
        return Err(LimeError::Fit("negative sample weight".into()));
    }
    let total_weight: f64 = w.iter().sum();
    if total_weight <= 0.0 {
        return Err(LimeError::Fit("all sample weights are zero".into()));
    }
    let y_mean = y.iter().zip(w).map(|(yi, wi)| yi * wi).sum::<f64>() / total_weight;
    let mut columns = Vec::with_capacity(d);
    let mut x_mean = Vec::with_capacity(d);
    for j in 0..d {
        let mean = x.iter().zip(w).map(|(row, wi)| row[j] * wi).sum::<f64>() / total_weight;
        columns.push(x.iter().map(|row| row[j] - mean).collect());
        x_mean.push(mean);
    }
    Ok(Centered {
        columns,
        x_mean,
        y: y.iter().map(|yi| yi - y_mean).collect(),
        y_mean,
        total_weight,
    })
}

/// Smallest penalty at which every coefficient is zero.
pub fn lambda_max(x: &[Vec<f64>], y: &[f64], w: &[f64]) -> Result<f64, LimeError> {
    let c = center(x, y, w)?;
    Ok(c.columns
        .iter()
        .map(|col| {
            2.0 * col
                .iter()
                .zip(&c.y)
                .zip(w)
                .map(|((xij, yi), wi)| wi * xij * yi)
                .sum::<f64>()
                .abs()
        })
        .fold(0.0, f64::max))
}

/// Minimizes `sum_i w_i (y_i - x_i . b - b0)^2 + lambda * |b|_1` by cyclic
/// coordinate descent with soft-thresholding. The intercept is unpenalized
/// and recovered from the weighted means.
pub fn fit_weighted_lasso(
    x: &[Vec<f64>],
    y: &[f64],
    w: &[f64],
    lambda: f64,
) -> Result<LassoFit, LimeError> {
    if !(lambda >= 0.0) {
        return Err(LimeError::Fit(format!("invalid penalty {lambda}")));
    }
    let c = center(x, y, w)?;
    let d = c.columns.len();
    // Columns whose weighted variance is at rounding level carry no signal.
    let floor = 1e-14 * c.total_weight;
    let denom: Vec<f64> = c
        .columns
        .iter()
        .map(|col| col.iter().zip(w).map(|(v, wi)| wi * v * v).sum())
        .collect();
    let mut beta = vec![0.0; d];
    let mut residual = c.y.clone();
    let threshold = lambda / 2.0;
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..d {
            if denom[j] <= floor {
                continue;
            }
            let col = &c.columns[j];
            let rho = col
                .iter()
                .zip(&residual)
                .zip(w)
                .map(|((xij, ri), wi)| wi * xij * ri)
                .sum::<f64>()
                + denom[j] * beta[j];
            let updated = soft_threshold(rho, threshold) / denom[j];
            let delta = updated - beta[j];
            if delta != 0.0 {
                for (ri, xij) in residual.iter_mut().zip(col) {
                    *ri -= delta * xij;
                }
                beta[j] = updated;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < TOLERANCE {
            break;
        }
    }
    let intercept = c.y_mean - c.x_mean.iter().zip(&beta).map(|(m, b)| m * b).sum::<f64>();
    Ok(LassoFit {
        weights: beta,
        intercept,
        sweeps,
    })
}

/// Weighted coefficient of determination of a fitted linear model.
pub fn weighted_r2(x: &[Vec<f64>], y: &[f64], w: &[f64], fit: &LassoFit) -> f64 {
    let total_weight: f64 = w.iter().sum();
    let y_mean = y.iter().zip(w).map(|(yi, wi)| yi * wi).sum::<f64>() / total_weight;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for ((row, yi), wi) in x.iter().zip(y).zip(w) {
        let pred = fit.intercept + row.iter().zip(&fit.weights).map(|(a, b)| a * b).sum::<f64>();
        ss_res += wi * (yi - pred).powi(2);
        ss_tot += wi * (yi - y_mean).powi(2);
    }
    if ss_tot <= f64::EPSILON * total_weight {
        if ss_res <= f64::EPSILON * total_weight {
            1.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - ss_res / ss_tot
    }
}
