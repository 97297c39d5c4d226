//! Derivative-free Nelder-Mead simplex minimization.

#[derive(Debug, Clone)]
pub struct NelderMead {
    /// Stop when the spread of function values across the simplex is below
    /// `ftol * (1 + |f_best|)` and the simplex diameter is below `xtol`.
    pub ftol: f64,
    pub xtol: f64,
    pub max_iter: usize,
    /// Edge length of the initial simplex along each axis.
    pub step: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        NelderMead {
            ftol: 1e-8,
            xtol: 1e-7,
            max_iter: 500,
            step: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl NelderMead {
    pub fn minimize<F>(&self, mut f: F, x0: &[f64]) -> Minimum
    where
        F: FnMut(&[f64]) -> f64,
    {
        let dim = x0.len();
        let mut eval = |x: &[f64]| {
            let v = f(x);
            if v.is_nan() {
                f64::INFINITY
            } else {
                v
            }
        };

        let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
        simplex.push(x0.to_vec());
        for k in 0..dim {
            let mut v = x0.to_vec();
            v[k] += self.step;
            simplex.push(v);
        }
        let mut values: Vec<f64> = simplex.iter().map(|v| eval(v)).collect();

        let mut iterations = 0;
        let mut converged = false;
        let mut centroid = vec![0.0; dim];
        let mut trial = vec![0.0; dim];
        let mut trial2 = vec![0.0; dim];

        while iterations < self.max_iter {
            // order: best first
            let mut order: Vec<usize> = (0..=dim).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            values = order.iter().map(|&i| values[i]).collect();

            let best = values[0];
            let worst = values[dim];
            let diameter = simplex[1..]
                .iter()
                .map(|v| {
                    v.iter()
                        .zip(&simplex[0])
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max)
                })
                .fold(0.0, f64::max);
            if best.is_finite()
                && (worst - best) <= self.ftol * (1.0 + best.abs())
                && diameter <= self.xtol
            {
                converged = true;
                break;
            }
            iterations += 1;

            centroid.iter_mut().for_each(|c| *c = 0.0);
            for v in &simplex[..dim] {
                for (c, x) in centroid.iter_mut().zip(v) {
                    *c += x / dim as f64;
                }
            }
            let worst_pt = simplex[dim].clone();

            for k in 0..dim {
                trial[k] = centroid[k] + (centroid[k] - worst_pt[k]);
            }
            let fr = eval(&trial);

            if fr < values[0] {
                for k in 0..dim {
                    trial2[k] = centroid[k] + 2.0 * (centroid[k] - worst_pt[k]);
                }
                let fe = eval(&trial2);
                if fe < fr {
                    simplex[dim].copy_from_slice(&trial2);
                    values[dim] = fe;
                } else {
                    simplex[dim].copy_from_slice(&trial);
                    values[dim] = fr;
                }
                continue;
            }
            if fr < values[dim - 1] {
                simplex[dim].copy_from_slice(&trial);
                values[dim] = fr;
                continue;
            }
            // contraction, outside or inside
            let outside = fr < values[dim];
            for k in 0..dim {
                trial2[k] = if outside {
                    centroid[k] + 0.5 * (trial[k] - centroid[k])
                } else {
                    centroid[k] + 0.5 * (worst_pt[k] - centroid[k])
                };
            }
            let fc = eval(&trial2);
            if (outside && fc <= fr) || (!outside && fc < values[dim]) {
                simplex[dim].copy_from_slice(&trial2);
                values[dim] = fc;
                continue;
            }
            // shrink toward the best vertex
            let best_pt = simplex[0].clone();
            for i in 1..=dim {
                for k in 0..dim {
                    simplex[i][k] = best_pt[k] + 0.5 * (simplex[i][k] - best_pt[k]);
                }
                values[i] = eval(&simplex[i]);
            }
        }

        let (ibest, _) = values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        Minimum {
            x: simplex[ibest].clone(),
            value: values[ibest],
            iterations,
            converged,
        }
    }
}
