//! Weighted cubic smoothing spline with the penalty chosen by generalized
//! cross-validation.
//!
//! Uses the Reinsch value/second-derivative representation: the fitted
//! values `g` minimize `sum w_i (y_i - g_i)^2 + alpha g' K g` with
//! `K = Q R^-1 Q'`, and the natural cubic spline through `g` is recovered
//! from the second derivatives `R^-1 Q' g`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ProfilingError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    /// Minimize the GCV score over the penalty.
    Gcv,
    /// Fixed penalty on the unit-interval-normalized abscissa.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSpline {
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
    /// Second derivatives at the knots, zero at both ends.
    pub second_derivatives: Vec<f64>,
    /// Penalty on the normalized abscissa.
    pub penalty: f64,
    pub gcv: f64,
    /// Trace of the smoother matrix.
    pub edf: f64,
}

/// Sorts by abscissa and merges exact ties (weighted mean response,
/// summed weight).
pub(crate) fn merge_ties(x: &[f64], y: &[f64], w: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let (mut xs, mut ys, mut ws): (Vec<f64>, Vec<f64>, Vec<f64>) = (vec![], vec![], vec![]);
    for i in idx {
        if xs.last() == Some(&x[i]) {
            let k = xs.len() - 1;
            let wt = ws[k] + w[i];
            ys[k] = (ys[k] * ws[k] + y[i] * w[i]) / wt;
            ws[k] = wt;
        } else {
            xs.push(x[i]);
            ys.push(y[i]);
            ws.push(w[i]);
        }
    }
    (xs, ys, ws)
}

struct Smoother {
    n: usize,
    w: DVector<f64>,
    y: DVector<f64>,
    k: DMatrix<f64>,
    r: DMatrix<f64>,
    q: DMatrix<f64>,
}

struct Solved {
    g: DVector<f64>,
    trace: f64,
    gcv: f64,
}

impl Smoother {
    fn new(t: &[f64], y: &[f64], w: &[f64]) -> Result<Self> {
        let n = t.len();
        let h: Vec<f64> = t.windows(2).map(|p| p[1] - p[0]).collect();
        let m = n - 2;
        let mut q = DMatrix::<f64>::zeros(n, m);
        let mut r = DMatrix::<f64>::zeros(m, m);
        for j in 0..m {
            // column j corresponds to interior knot j + 1
            q[(j, j)] = 1.0 / h[j];
            q[(j + 1, j)] = -1.0 / h[j] - 1.0 / h[j + 1];
            q[(j + 2, j)] = 1.0 / h[j + 1];
            r[(j, j)] = (h[j] + h[j + 1]) / 3.0;
            if j + 1 < m {
                r[(j, j + 1)] = h[j + 1] / 6.0;
                r[(j + 1, j)] = h[j + 1] / 6.0;
            }
        }
        let rchol = r
            .clone()
            .cholesky()
            .ok_or(ProfilingError::Singular("spline band matrix"))?;
        let k = &q * rchol.solve(&q.transpose());
        // weights normalized to mean one
        let wsum: f64 = w.iter().sum();
        let w = DVector::from_iterator(n, w.iter().map(|v| v * n as f64 / wsum));
        Ok(Smoother {
            n,
            w,
            y: DVector::from_column_slice(y),
            k,
            r,
            q,
        })
    }

    fn solve(&self, alpha: f64) -> Result<Solved> {
        let mut m = &self.k * alpha;
        for i in 0..self.n {
            m[(i, i)] += self.w[i];
        }
        let chol = m.cholesky().ok_or(ProfilingError::Singular("spline system"))?;
        let wy = self.w.component_mul(&self.y);
        let g = chol.solve(&wy);
        // y - g = alpha M^-1 K y and n - tr(A) = alpha tr(M^-1 K); alpha
        // cancels in the GCV ratio, which keeps it accurate near
        // interpolation where 1 - tr(A)/n suffers cancellation.
        let u = chol.solve(&(&self.k * &self.y));
        let mk = chol.solve(&self.k);
        let resid_trace: f64 = (0..self.n).map(|i| mk[(i, i)]).sum();
        let scaled_rss: f64 = (0..self.n).map(|i| self.w[i] * u[i] * u[i]).sum();
        let nf = self.n as f64;
        let gcv = if resid_trace > 0.0 {
            nf * scaled_rss / (resid_trace * resid_trace)
        } else {
            f64::INFINITY
        };
        Ok(Solved {
            g,
            trace: nf - alpha * resid_trace,
            gcv,
        })
    }

    fn second_derivatives(&self, g: &DVector<f64>) -> Vec<f64> {
        let rhs = self.q.transpose() * g;
        let inner = self
            .r
            .clone()
            .cholesky()
            .expect("band matrix factorized at construction")
            .solve(&rhs);
        let mut out = Vec::with_capacity(self.n);
        out.push(0.0);
        out.extend(inner.iter().copied());
        out.push(0.0);
        out
    }
}

impl SmoothingSpline {
    /// Fits the spline; needs at least four distinct abscissae with
    /// positive weights.
    pub fn fit(x: &[f64], y: &[f64], w: &[f64], penalty: Penalty) -> Result<Self> {
        if x.len() != y.len() || x.len() != w.len() {
            return Err(ProfilingError::InvalidParameter(
                "spline inputs differ in length".into(),
            ));
        }
        if w.iter().any(|v| !(*v > 0.0)) || x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(ProfilingError::InvalidParameter(
                "spline needs finite data and positive weights".into(),
            ));
        }
        let (xs, ys, ws) = merge_ties(x, y, w);
        if xs.len() < 4 {
            return Err(ProfilingError::InsufficientData(format!(
                "smoothing spline needs 4 distinct sizes, got {}",
                xs.len()
            )));
        }
        let x0 = xs[0];
        let span = xs[xs.len() - 1] - x0;
        let t: Vec<f64> = xs.iter().map(|v| (v - x0) / span).collect();
        let sm = Smoother::new(&t, &ys, &ws)?;

        let (alpha, solved) = match penalty {
            Penalty::Fixed(a) => (a, sm.solve(a)?),
            Penalty::Gcv => {
                let score = |la: f64| sm.solve(10f64.powf(la)).map(|s| s.gcv);
                let grid: Vec<f64> = (0..=60).map(|k| -10.0 + 0.2 * k as f64).collect();
                let mut best = (0usize, score(grid[0])?);
                for (k, &la) in grid.iter().enumerate().skip(1) {
                    let v = score(la)?;
                    if v < best.1 - 1e-15 * best.1.abs() {
                        best = (k, v);
                    }
                }
                // golden-section refinement inside the bracketing cells
                let (mut lo, mut hi) = (
                    grid[best.0.saturating_sub(1)],
                    grid[(best.0 + 1).min(grid.len() - 1)],
                );
                let phi = 0.5 * (5f64.sqrt() - 1.0);
                let mut c = hi - phi * (hi - lo);
                let mut d = lo + phi * (hi - lo);
                let (mut fc, mut fd) = (score(c)?, score(d)?);
                for _ in 0..40 {
                    if fc <= fd {
                        hi = d;
                        d = c;
                        fd = fc;
                        c = hi - phi * (hi - lo);
                        fc = score(c)?;
                    } else {
                        lo = c;
                        c = d;
                        fc = fd;
                        d = lo + phi * (hi - lo);
                        fd = score(d)?;
                    }
                }
                let la = if fc <= fd { c } else { d };
                let la = if best.1 < fc.min(fd) { grid[best.0] } else { la };
                let a = 10f64.powf(la);
                (a, sm.solve(a)?)
            }
        };

        let gamma_t = sm.second_derivatives(&solved.g);
        Ok(SmoothingSpline {
            knots: xs,
            values: solved.g.iter().copied().collect(),
            second_derivatives: gamma_t.iter().map(|v| v / (span * span)).collect(),
            penalty: alpha,
            gcv: solved.gcv,
            edf: solved.trace,
        })
    }

    pub fn range(&self) -> (f64, f64) {
        (self.knots[0], *self.knots.last().unwrap())
    }

    /// Natural cubic spline value; linear beyond the end knots.
    pub fn evaluate(&self, x: f64) -> f64 {
        let kn = &self.knots;
        let g = &self.values;
        let n = kn.len();
        if x <= kn[0] || x >= kn[n - 1] {
            let (i, j) = if x <= kn[0] { (0, 1) } else { (n - 2, n - 1) };
            let h = kn[j] - kn[i];
            // end slopes of a natural spline
            let slope = if i == 0 {
                (g[1] - g[0]) / h - h / 6.0 * self.second_derivatives[1]
            } else {
                (g[j] - g[i]) / h + h / 6.0 * self.second_derivatives[i]
            };
            let anchor = if i == 0 { 0 } else { n - 1 };
            return g[anchor] + slope * (x - kn[anchor]);
        }
        let i = kn.partition_point(|&k| k <= x).saturating_sub(1).min(n - 2);
        let h = kn[i + 1] - kn[i];
        let a = x - kn[i];
        let b = kn[i + 1] - x;
        let gam = &self.second_derivatives;
        (a * g[i + 1] + b * g[i]) / h
            - a * b / 6.0 * ((1.0 + a / h) * gam[i + 1] + (1.0 + b / h) * gam[i])
    }
}

/// Weighted least-squares line `(intercept, slope)`.
pub fn weighted_line(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64) {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(a, b)| b * (a - mx) * (a - mx)).sum();
    let sxy: f64 = x
        .iter()
        .zip(y)
        .zip(w)
        .map(|((a, c), b)| b * (a - mx) * (c - my))
        .sum();
    if sxx > 0.0 {
        let slope = sxy / sxx;
        (my - slope * mx, slope)
    } else {
        (my, 0.0)
    }
}
