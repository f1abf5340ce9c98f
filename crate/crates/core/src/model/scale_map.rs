//! Monotone 4-parameter logistic from raw model output to MOS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{READOUT_OFFSET, READOUT_SCALE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScaleMap {
    Affine {
        offset: f64,
        scale: f64,
    },
    /// `lower + span / (1 + exp(-(x - center) / width))`, `span, width > 0`.
    Logistic {
        lower: f64,
        span: f64,
        center: f64,
        width: f64,
    },
}

impl ScaleMap {
    pub fn identity() -> Self {
        ScaleMap::Affine {
            offset: 0.0,
            scale: 1.0,
        }
    }

    /// The fixed training readout; used until a map is fitted.
    pub fn readout() -> Self {
        ScaleMap::Affine {
            offset: READOUT_OFFSET,
            scale: READOUT_SCALE,
        }
    }

    pub fn apply_unclamped(&self, raw: f64) -> f64 {
        match *self {
            ScaleMap::Affine { offset, scale } => offset + scale * raw,
            ScaleMap::Logistic {
                lower,
                span,
                center,
                width,
            } => lower + span * logistic((raw - center) / width),
        }
    }

    /// Derivative of the unclamped map.
    pub fn slope(&self, raw: f64) -> f64 {
        match *self {
            ScaleMap::Affine { scale, .. } => scale,
            ScaleMap::Logistic {
                span, center, width, ..
            } => {
                let s = logistic((raw - center) / width);
                span * s * (1.0 - s) / width
            }
        }
    }

    pub fn apply(&self, raw: f64) -> f64 {
        self.apply_unclamped(raw).clamp(0.0, 100.0)
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Fits the logistic by Levenberg-Marquardt in standardized raw units.
///
/// Monotonicity is structural: span and width are optimised in log space.
/// If every start diverges the targets are replaced by their isotonic
/// regression and the fit is retried.
pub fn fit_scale_map(raw: &[f64], mos: &[f64]) -> Result<ScaleMap> {
    if raw.len() != mos.len() {
        return Err(Error::invalid("raw and mos lengths differ"));
    }
    if raw.len() < 10 {
        return Err(Error::DegenerateCalibration(format!(
            "{} calibration points, need at least 10",
            raw.len()
        )));
    }
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let sd = (raw.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &r| (a.min(r), b.max(r)));
    if !(sd > 0.0) || hi - lo <= 1e-12 * hi.abs().max(1.0) {
        return Err(Error::DegenerateCalibration("constant raw outputs".into()));
    }
    let u: Vec<f64> = raw.iter().map(|r| (r - mean) / sd).collect();
    let best = best_fit(&u, mos).or_else(|| {
        let iso = isotonic(&u, mos);
        best_fit(&u, &iso)
    });
    let q = best.ok_or_else(|| Error::DegenerateCalibration("logistic fit diverged".into()))?;
    Ok(ScaleMap::Logistic {
        lower: q[0],
        span: q[1].exp(),
        center: mean + sd * q[2],
        width: sd * q[3].exp(),
    })
}

fn best_fit(u: &[f64], y: &[f64]) -> Option<[f64; 4]> {
    starts(u, y)
        .into_iter()
        .filter_map(|q0| levenberg_marquardt(u, y, q0))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(q, _)| q)
}

fn starts(u: &[f64], y: &[f64]) -> Vec<[f64; 4]> {
    let n = u.len() as f64;
    let ymin = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let ymax = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (ymax - ymin).max(1e-3);
    let mut out = vec![[ymin, span.ln(), 0.0, 0.0]];
    // Near-linear start: a wide logistic matching the least-squares slope.
    let ybar = y.iter().sum::<f64>() / n;
    let sxy: f64 = u.iter().zip(y).map(|(a, b)| a * (b - ybar)).sum();
    let sxx: f64 = u.iter().map(|a| a * a).sum();
    let slope = sxy / sxx;
    if slope > 0.0 {
        let umax = u.iter().map(|a| a.abs()).fold(0.0, f64::max);
        let w = 2.0 * umax.max(1.0);
        let s = 4.0 * slope * w;
        out.push([ybar - s / 2.0, s.ln(), 0.0, w.ln()]);
    }
    out
}

fn model_eval(q: &[f64; 4], u: f64) -> (f64, [f64; 4]) {
    let span = q[1].exp();
    let w = q[3].exp();
    let z = (u - q[2]) / w;
    let s = logistic(z);
    let ds = s * (1.0 - s);
    let f = q[0] + span * s;
    (f, [1.0, span * s, -span * ds / w, -span * ds * z])
}

fn sse(q: &[f64; 4], u: &[f64], y: &[f64]) -> f64 {
    u.iter().zip(y).map(|(a, b)| (model_eval(q, *a).0 - b).powi(2)).sum()
}

fn levenberg_marquardt(u: &[f64], y: &[f64], q0: [f64; 4]) -> Option<([f64; 4], f64)> {
    let mut q = q0;
    let mut cost = sse(&q, u, y);
    if !cost.is_finite() {
        return None;
    }
    let mut lambda = 1e-3;
    for _ in 0..500 {
        let mut a = [[0.0; 4]; 4];
        let mut g = [0.0; 4];
        for (ui, yi) in u.iter().zip(y) {
            let (f, j) = model_eval(&q, *ui);
            let r = f - yi;
            for p in 0..4 {
                g[p] += j[p] * r;
                for k in 0..4 {
                    a[p][k] += j[p] * j[k];
                }
            }
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut m = a;
            for p in 0..4 {
                m[p][p] += lambda * a[p][p].max(1e-12);
            }
            let Some(delta) = solve4(m, g.map(|v| -v)) else {
                lambda *= 4.0;
                continue;
            };
            let cand = std::array::from_fn(|p| q[p] + delta[p]);
            let c = sse(&cand, u, y);
            if c.is_finite() && c < cost {
                let rel = (cost - c) / cost.max(1e-300);
                q = cand;
                cost = c;
                lambda = (lambda / 3.0).max(1e-12);
                improved = rel > 1e-14;
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
    }
    (cost.is_finite() && q.iter().all(|v| v.is_finite())).then_some((q, cost))
}

/// Gaussian elimination with partial pivoting.
fn solve4(mut m: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for c in 0..4 {
        let p = (c..4).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs()))?;
        if m[p][c].abs() < 1e-300 {
            return None;
        }
        m.swap(c, p);
        b.swap(c, p);
        for r in c + 1..4 {
            let f = m[r][c] / m[c][c];
            for k in c..4 {
                m[r][k] -= f * m[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = [0.0; 4];
    for r in (0..4).rev() {
        let s: f64 = (r + 1..4).map(|k| m[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / m[r][r];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Pool-adjacent-violators fit of `y` as a non-decreasing function of `u`.
fn isotonic(u: &[f64], y: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..u.len()).collect();
    order.sort_by(|&a, &b| u[a].total_cmp(&u[b]).then(a.cmp(&b)));
    let mut blocks: Vec<(f64, usize)> = Vec::new();
    for &i in &order {
        blocks.push((y[i], 1));
        while blocks.len() > 1 {
            let (m2, n2) = blocks[blocks.len() - 1];
            let (m1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let n = n1 + n2;
            *blocks.last_mut().expect("nonempty") = ((m1 * n1 as f64 + m2 * n2 as f64) / n as f64, n);
        }
    }
    let mut out = vec![0.0; u.len()];
    let mut k = 0;
    for (m, n) in blocks {
        for _ in 0..n {
            out[order[k]] = m;
            k += 1;
        }
    }
    out
}
