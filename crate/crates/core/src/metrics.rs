//! Correlation loss and evaluation statistics.
//!
//! All correlations share one summation order, so the tape loss and the
//! plain [`plcc`] agree bit for bit: `plcc_loss(p, y) == (1 - plcc(p, y)) / 2`.

use loda_tensor::Var;

use crate::error::{Error, Result};

/// Centered copy and its sum of squares, using `mean = sum * (1/n)`.
fn centered(x: &[f64]) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let s: f64 = x.iter().sum();
    let mean = s * (1.0 / n);
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let ss: f64 = c.iter().map(|v| v * v).sum();
    (c, ss)
}

fn check_pair(pred: &[f64], label: &[f64]) -> Result<()> {
    if pred.len() != label.len() {
        return Err(Error::Contract(format!(
            "prediction length {} != label length {}",
            pred.len(),
            label.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::Contract(format!("need at least 2 samples, got {}", pred.len())));
    }
    Ok(())
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

/// Pearson linear correlation.
pub fn plcc(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_pair(pred, label)?;
    if is_constant(pred) || is_constant(label) {
        return Err(Error::Degenerate("PLCC of a constant vector".into()));
    }
    let (pc, spp) = centered(pred);
    let (yc, syy) = centered(label);
    let num: f64 = pc.iter().zip(&yc).map(|(a, b)| a * b).sum();
    Ok(num / (spp * syy).sqrt())
}

/// Correlation loss `(1 - plcc) / 2` recorded on the tape. `pred` holds `m`
/// scores in any shape; `label` is a plain vector of the same length.
pub fn plcc_loss<'t>(pred: Var<'t>, label: &[f64]) -> Result<Var<'t>> {
    let p = pred.value();
    check_pair(p.data(), label)?;
    if is_constant(p.data()) {
        return Err(Error::Degenerate("all predictions in the batch are equal".into()));
    }
    if is_constant(label) {
        return Err(Error::Degenerate("all labels in the batch are equal".into()));
    }
    let m = label.len();
    let tape = pred.tape();
    let (yc, syy) = centered(label);
    let yc = tape.constant(loda_tensor::Tensor::from_vec(&[m], yc)?);
    let flat = pred.reshape(&[m])?;
    let pc = flat.sub(&flat.mean_all())?;
    let num = pc.mul(&yc)?.sum_all();
    let den = pc.mul(&pc)?.sum_all().scale(syy).sqrt();
    Ok(num.div(&den)?.neg().add_scalar(1.0).scale(0.5))
}

/// Plain-value version of [`plcc_loss`].
pub fn plcc_loss_value(pred: &[f64], label: &[f64]) -> Result<f64> {
    Ok((1.0 - plcc(pred, label)?) * 0.5)
}

/// Fractional ranks (1-based; ties get the mean of the ranks they span).
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of fractional ranks.
/// A constant input has no ordering information and yields 0.
pub fn srcc(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_pair(pred, label)?;
    if pred.iter().chain(label).any(|v| v.is_nan()) {
        return Err(Error::Contract("SRCC of a vector containing NaN".into()));
    }
    let (rp, ry) = (fractional_ranks(pred), fractional_ranks(label));
    if is_constant(&rp) || is_constant(&ry) {
        return Ok(0.0);
    }
    plcc(&rp, &ry)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricPair {
    pub srcc: f64,
    pub plcc: f64,
}

/// Outcome of the monotone logistic mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    /// Mapped predictions.
    pub corrected: Vec<f64>,
    /// `(b1, b2, b3, b4)` in the original units when the logistic was used.
    pub beta: Option<[f64; 4]>,
    /// Which mapping was kept.
    pub kind: CorrectionKind,
    /// Set when no monotone mapping could be fitted and the identity was used.
    pub warning: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrectionKind {
    Logistic,
    Affine,
    Identity,
}

/// `b1 + (b2 - b1) / (1 + exp(-(x - b3) / b4))`.
pub fn logistic4(x: f64, beta: &[f64; 4]) -> f64 {
    let [b1, b2, b3, b4] = *beta;
    b1 + (b2 - b1) * sigmoid((x - b3) / b4)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn median(x: &[f64]) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Solve the 4x4 system `a x = b` by Gaussian elimination with partial
/// pivoting.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let s: f64 = (row + 1..4).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Parameters `(b1, ln(b2 - b1), b3, ln b4)`: every point of this space is a
/// strictly increasing logistic.
fn unpack(theta: &[f64; 4]) -> [f64; 4] {
    [theta[0], theta[0] + theta[1].exp(), theta[2], theta[3].exp()]
}

fn rss(theta: &[f64; 4], x: &[f64], y: &[f64]) -> f64 {
    let beta = unpack(theta);
    x.iter().zip(y).map(|(&xi, &yi)| (logistic4(xi, &beta) - yi).powi(2)).sum()
}

/// Levenberg-Marquardt least squares for the logistic on standardized data.
fn fit_logistic(x: &[f64], y: &[f64]) -> Option<[f64; 4]> {
    let (ymin, ymax) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (_, sx) = mean_std(x);
    if !(ymax > ymin) || !(sx > 0.0) {
        return None;
    }
    let mut theta = [ymin, (ymax - ymin).ln(), median(x), sx.ln()];
    let mut cost = rss(&theta, x, y);
    let mut lambda = 1e-3;
    for _ in 0..1000 {
        let beta = unpack(&theta);
        let (d, b4) = (beta[1] - beta[0], beta[3]);
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for (&xi, &yi) in x.iter().zip(y) {
            let z = (xi - beta[2]) / b4;
            let s = sigmoid(z);
            let ds = d * s * (1.0 - s);
            let j = [1.0, d * s, -ds / b4, -ds * z];
            let r = beta[0] + d * s - yi;
            for a in 0..4 {
                jtr[a] += j[a] * r;
                for b in 0..4 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut a = jtj;
            for k in 0..4 {
                a[k][k] += lambda * jtj[k][k].max(1e-12);
            }
            let Some(step) = solve4(a, jtr.map(|v| -v)) else {
                lambda *= 10.0;
                continue;
            };
            let cand = [theta[0] + step[0], theta[1] + step[1], theta[2] + step[2], theta[3] + step[3]];
            let c = rss(&cand, x, y);
            if c.is_finite() && c <= cost {
                let rel = (cost - c) / cost.max(f64::MIN_POSITIVE);
                let small = step.iter().zip(&theta).all(|(s, t)| s.abs() <= 1e-12 * (1.0 + t.abs()));
                theta = cand;
                cost = c;
                lambda = (lambda / 3.0).max(1e-15);
                improved = true;
                if rel < 1e-15 || small || cost == 0.0 {
                    return Some(unpack(&theta));
                }
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
    }
    let beta = unpack(&theta);
    beta.iter().all(|v| v.is_finite()).then_some(beta)
}

/// True when `f(x)` is strictly increasing along the strict order of `x`.
fn preserves_order(x: &[f64], fx: &[f64]) -> bool {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    idx.windows(2).all(|w| {
        let (a, b) = (w[0], w[1]);
        if x[a] == x[b] {
            fx[a] == fx[b]
        } else {
            fx[a] < fx[b]
        }
    })
}

/// Fit the monotone 4-parameter logistic from predictions to labels and
/// return the mapped predictions.
///
/// The logistic is kept only when it is finite, strictly order preserving
/// and at least as linear as the best increasing affine map; otherwise the
/// affine map is used, and if even that is not increasing the identity is
/// returned with a warning. PLCC on the result is therefore never below the
/// raw PLCC when the raw PLCC is positive, and SRCC never changes.
pub fn logistic_correct(pred: &[f64], label: &[f64]) -> Result<LogisticFit> {
    check_pair(pred, label)?;
    let identity = |warning: &str| LogisticFit {
        corrected: pred.to_vec(),
        beta: None,
        kind: CorrectionKind::Identity,
        warning: Some(warning.to_string()),
    };
    if is_constant(pred) {
        return Ok(identity("constant predictions; logistic correction skipped"));
    }
    if is_constant(label) {
        return Ok(identity("constant labels; logistic correction skipped"));
    }
    // Standardize both axes; the logistic family is closed under these maps.
    let (mx, sx) = mean_std(pred);
    let (my, sy) = mean_std(label);
    let xs: Vec<f64> = pred.iter().map(|v| (v - mx) / sx).collect();
    let ys: Vec<f64> = label.iter().map(|v| (v - my) / sy).collect();

    let raw = plcc(pred, label)?;
    let affine = if raw > 0.0 {
        // Least-squares line; slope has the sign of the correlation.
        let slope = raw * sy / sx;
        let corrected: Vec<f64> = pred.iter().map(|v| my + slope * (v - mx)).collect();
        Some(corrected)
    } else {
        None
    };

    if let Some(b) = fit_logistic(&xs, &ys) {
        let corrected: Vec<f64> = xs.iter().map(|&v| my + sy * logistic4(v, &b)).collect();
        if corrected.iter().all(|v| v.is_finite()) && preserves_order(pred, &corrected) {
            if let Ok(r) = plcc(&corrected, label) {
                if r >= raw {
                    // Map the standardized parameters back to the original units.
                    let beta = [my + sy * b[0], my + sy * b[1], mx + sx * b[2], sx * b[3]];
                    return Ok(LogisticFit { corrected, beta: Some(beta), kind: CorrectionKind::Logistic, warning: None });
                }
            }
        }
    }
    match affine {
        Some(corrected) => Ok(LogisticFit { corrected, beta: None, kind: CorrectionKind::Affine, warning: None }),
        None => Ok(identity("no increasing fit exists (non-positive correlation); identity used")),
    }
}

/// SRCC on raw predictions and PLCC after logistic correction. Constant
/// predictions give SRCC 0 and PLCC 0 (plus the fit warning).
pub fn evaluate_scores(pred: &[f64], label: &[f64]) -> Result<(MetricPair, Option<String>)> {
    let s = srcc(pred, label)?;
    let fit = logistic_correct(pred, label)?;
    let p = match plcc(&fit.corrected, label) {
        Ok(v) => v,
        Err(Error::Degenerate(_)) => 0.0,
        Err(e) => return Err(e),
    };
    Ok((MetricPair { srcc: s, plcc: p }, fit.warning))
}
