//! Two-component 1-D Gaussian mixture: EM fit, separation test, density crossover.

use std::f64::consts::PI;

use crate::config::{EmConfig, EmInit};
use crate::error::{Error, Result};

/// Background (`b`, lower mean) and object (`o`, upper mean) components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmParams {
    pub w_b: f64,
    pub w_o: f64,
    pub mu_b: f64,
    pub mu_o: f64,
    pub sigma_b: f64,
    pub sigma_o: f64,
}

/// Fit result with the log-likelihood recorded before every M-step.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub params: GmmParams,
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

pub fn log_normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * PI).ln()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let rough = values.iter().sum::<f64>() / n;
    // second-pass correction; exact for constant input
    let mean = rough + values.iter().map(|v| v - rough).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn fit_gmm_1d(values: &[f64], cfg: &EmConfig) -> Result<GmmFit> {
    cfg.validate()?;
    if values.len() < 4 {
        return Err(Error::Argument(format!(
            "need at least 4 values to fit a mixture, got {}",
            values.len()
        )));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite value at index {i}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let spread = sorted[sorted.len() - 1] - sorted[0];
    if spread <= cfg.var_floor {
        return Err(Error::Degenerate(format!(
            "value spread {spread} is within the variance floor"
        )));
    }

    let (_, std) = mean_std(values);
    let floor_sigma = cfg.var_floor.sqrt();
    let mut p = match cfg.init {
        EmInit::Percentile => GmmParams {
            w_b: 0.5,
            w_o: 0.5,
            mu_b: percentile(&sorted, 0.25),
            mu_o: percentile(&sorted, 0.75),
            sigma_b: std.max(floor_sigma),
            sigma_o: std.max(floor_sigma),
        },
    };

    let n = values.len();
    let mut resp_b = vec![0.0; n];
    let mut trace = Vec::with_capacity(cfg.max_iters + 1);
    let mut converged = false;

    for _ in 0..cfg.max_iters {
        // E-step
        let (lw_b, lw_o) = (p.w_b.ln(), p.w_o.ln());
        let mut ll = 0.0;
        for (r, &x) in resp_b.iter_mut().zip(values) {
            let lb = lw_b + log_normal_pdf(x, p.mu_b, p.sigma_b);
            let lo = lw_o + log_normal_pdf(x, p.mu_o, p.sigma_o);
            let total = log_add_exp(lb, lo);
            *r = (lb - total).exp();
            ll += total;
        }
        if let Some(&prev) = trace.last() {
            if ll - prev < cfg.tol {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);

        // M-step
        let nb: f64 = resp_b.iter().sum();
        let no = n as f64 - nb;
        if nb <= 0.0 || no <= 0.0 {
            // one component has absorbed every point
            converged = true;
            break;
        }
        let mu_b = resp_b.iter().zip(values).map(|(r, x)| r * x).sum::<f64>() / nb;
        let mu_o = resp_b.iter().zip(values).map(|(r, x)| (1.0 - r) * x).sum::<f64>() / no;
        let var_b = resp_b
            .iter()
            .zip(values)
            .map(|(r, x)| r * (x - mu_b) * (x - mu_b))
            .sum::<f64>()
            / nb;
        let var_o = resp_b
            .iter()
            .zip(values)
            .map(|(r, x)| (1.0 - r) * (x - mu_o) * (x - mu_o))
            .sum::<f64>()
            / no;
        p = GmmParams {
            w_b: nb / n as f64,
            w_o: no / n as f64,
            mu_b,
            mu_o,
            sigma_b: var_b.max(cfg.var_floor).sqrt(),
            sigma_o: var_o.max(cfg.var_floor).sqrt(),
        };
    }

    if p.mu_b > p.mu_o {
        p = GmmParams {
            w_b: p.w_o,
            w_o: p.w_b,
            mu_b: p.mu_o,
            mu_o: p.mu_b,
            sigma_b: p.sigma_o,
            sigma_o: p.sigma_b,
        };
    }
    Ok(GmmFit {
        params: p,
        log_likelihood: trace,
        converged,
    })
}

/// True when the components are far enough apart for a crossover threshold:
/// `mu_b + k sigma_b < mu_o - k sigma_o`.
pub fn separation_test(p: &GmmParams, sep_factor: f64) -> bool {
    p.mu_b + sep_factor * p.sigma_b < p.mu_o - sep_factor * p.sigma_o
}

/// Point strictly between the means where the two component densities are equal.
pub fn solve_crossover(p: &GmmParams) -> Result<f64> {
    crossover(p, false)
}

/// As [`solve_crossover`], optionally weighting each density by its mixture weight.
pub fn crossover(p: &GmmParams, weighted: bool) -> Result<f64> {
    if p.mu_b.is_nan() || p.mu_o.is_nan() || p.mu_b >= p.mu_o {
        return Err(Error::CrossoverMiss {
            mu_b: p.mu_b,
            mu_o: p.mu_o,
        });
    }
    if !weighted && p.sigma_b == p.sigma_o {
        return Ok(0.5 * (p.mu_b + p.mu_o));
    }
    let log_ratio = if weighted { (p.w_b / p.w_o).ln() } else { 0.0 };
    let t = crossover_quadratic(p, log_ratio)?;
    Ok(polish(p, log_ratio, t))
}

/// Roots of `log(w_b p_b(t)) - log(w_o p_o(t)) = 0`, i.e. `a t^2 + b t + c = 0` with
/// `log_ratio = log(w_b / w_o)`. Degenerates to the linear case for equal sigmas.
pub(crate) fn crossover_quadratic(p: &GmmParams, log_ratio: f64) -> Result<f64> {
    let (vb, vo) = (p.sigma_b * p.sigma_b, p.sigma_o * p.sigma_o);
    let a = 1.0 / vo - 1.0 / vb;
    let b = 2.0 * (p.mu_b / vb - p.mu_o / vo);
    let c = p.mu_o * p.mu_o / vo - p.mu_b * p.mu_b / vb + 2.0 * (p.sigma_o / p.sigma_b).ln()
        + 2.0 * log_ratio;
    let inside = |t: f64| t > p.mu_b && t < p.mu_o;
    let miss = Error::CrossoverMiss {
        mu_b: p.mu_b,
        mu_o: p.mu_o,
    };

    if a == 0.0 {
        let t = -c / b;
        return if inside(t) { Ok(t) } else { Err(miss) };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Err(miss);
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let mut roots = Vec::with_capacity(2);
    if q != 0.0 {
        roots.push(q / a);
        roots.push(c / q);
    } else {
        roots.push(0.0);
    }
    // Of the admissible roots, take the one where the background density
    // hands over to the object density (difference decreasing).
    roots
        .into_iter()
        .filter(|&t| inside(t))
        .min_by(|x, y| {
            let slope = |t: f64| (t - p.mu_b) / vb - (t - p.mu_o) / vo;
            // density difference derivative is -slope; prefer the most negative derivative
            slope(*y).total_cmp(&slope(*x))
        })
        .ok_or(miss)
}

fn log_density_gap(p: &GmmParams, log_ratio: f64, t: f64) -> f64 {
    log_normal_pdf(t, p.mu_b, p.sigma_b) - log_normal_pdf(t, p.mu_o, p.sigma_o) + log_ratio
}

/// A few Newton steps on the log-density gap, kept only while they stay inside the interval
/// and reduce the residual.
fn polish(p: &GmmParams, log_ratio: f64, mut t: f64) -> f64 {
    let (vb, vo) = (p.sigma_b * p.sigma_b, p.sigma_o * p.sigma_o);
    let mut r = log_density_gap(p, log_ratio, t);
    for _ in 0..4 {
        let deriv = -(t - p.mu_b) / vb + (t - p.mu_o) / vo;
        if deriv == 0.0 || r == 0.0 {
            break;
        }
        let next = t - r / deriv;
        let rn = log_density_gap(p, log_ratio, next);
        if !(next > p.mu_b && next < p.mu_o) || rn.abs() >= r.abs() {
            break;
        }
        t = next;
        r = rn;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn params(mu_b: f64, sigma_b: f64, mu_o: f64, sigma_o: f64) -> GmmParams {
        GmmParams {
            w_b: 0.5,
            w_o: 0.5,
            mu_b,
            mu_o,
            sigma_b,
            sigma_o,
        }
    }

    /// Bisection on the log-density difference; independent of the quadratic path.
    fn bisect_crossover(p: &GmmParams) -> f64 {
        let f = |t: f64| log_normal_pdf(t, p.mu_b, p.sigma_b) - log_normal_pdf(t, p.mu_o, p.sigma_o);
        let (mut lo, mut hi) = (p.mu_b, p.mu_o);
        assert!(f(lo) > 0.0 && f(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn assert_monotone(trace: &[f64]) {
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn recovers_bimodal_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let lo = Normal::new(0.0, 1.0).unwrap();
        let hi = Normal::new(4.0, 1.0).unwrap();
        let xs: Vec<f64> = (0..5000)
            .map(|i| if i % 2 == 0 { lo.sample(&mut rng) } else { hi.sample(&mut rng) })
            .collect();
        let fit = fit_gmm_1d(&xs, &EmConfig::default()).unwrap();
        let p = fit.params;
        assert!(p.mu_b.abs() < 0.1 && (p.mu_o - 4.0).abs() < 0.1, "{p:?}");
        assert!((p.sigma_b - 1.0).abs() < 0.1 && (p.sigma_o - 1.0).abs() < 0.1);
        assert!((p.w_b - 0.5).abs() < 0.05);
        assert!((p.w_b + p.w_o - 1.0).abs() < 1e-9);
        assert_monotone(&fit.log_likelihood);
    }

    #[test]
    fn unimodal_sample_is_not_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = Normal::new(0.0, 1.0).unwrap();
        let xs: Vec<f64> = (0..2000).map(|_| n.sample(&mut rng)).collect();
        let fit = fit_gmm_1d(&xs, &EmConfig::default()).unwrap();
        assert!(fit.params.mu_b <= fit.params.mu_o);
        assert!(!separation_test(&fit.params, 1.5));
        assert_monotone(&fit.log_likelihood);
    }

    #[test]
    fn tiny_bimodal_matches_likelihood_grid() {
        let xs = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let cfg = EmConfig::default();
        let fit = fit_gmm_1d(&xs, &cfg).unwrap();
        let p = fit.params;

        // brute-force grid over candidate parameters
        let loglik = |q: &GmmParams| -> f64 {
            xs.iter()
                .map(|&x| {
                    log_add_exp(
                        q.w_b.ln() + log_normal_pdf(x, q.mu_b, q.sigma_b),
                        q.w_o.ln() + log_normal_pdf(x, q.mu_o, q.sigma_o),
                    )
                })
                .sum()
        };
        let means: Vec<f64> = (-6..=12).map(|k| k as f64 / 10.0).collect();
        let sigmas: Vec<f64> = (0..=8).map(|k| cfg.var_floor.sqrt() * 10f64.powi(k)).collect();
        let weights: Vec<f64> = (1..10).map(|k| k as f64 * 0.1).collect();
        let mut best = (f64::NEG_INFINITY, params(0.0, 1.0, 0.0, 1.0));
        for &mb in &means {
            for &mo in means.iter().filter(|&&m| m >= mb) {
                for &sb in &sigmas {
                    for &so in &sigmas {
                        for &w in &weights {
                            let q = GmmParams { w_b: w, w_o: 1.0 - w, mu_b: mb, mu_o: mo, sigma_b: sb, sigma_o: so };
                            let ll = loglik(&q);
                            if ll > best.0 {
                                best = (ll, q);
                            }
                        }
                    }
                }
            }
        }
        let g = best.1;
        assert!(g.mu_b.abs() < 1e-9 && (g.mu_o - 1.0).abs() < 1e-9);
        assert_eq!(g.sigma_b, cfg.var_floor.sqrt());
        assert!((g.w_b - 0.5).abs() < 1e-9);

        assert!(p.mu_b.abs() < 1e-6 && (p.mu_o - 1.0).abs() < 1e-6, "{p:?}");
        assert!((p.sigma_b - g.sigma_b).abs() < 1e-9 && (p.sigma_o - g.sigma_o).abs() < 1e-9);
        assert!((p.w_b - 0.5).abs() < 1e-9);
        assert!(loglik(&p) >= best.0 - 1e-6);
        assert_monotone(&fit.log_likelihood);
    }

    #[test]
    fn rejects_degenerate_and_nonfinite() {
        let cfg = EmConfig::default();
        assert!(matches!(fit_gmm_1d(&[2.0; 10], &cfg), Err(Error::Degenerate(_))));
        assert!(matches!(
            fit_gmm_1d(&[0.0, 1.0, f64::NAN, 2.0], &cfg),
            Err(Error::Data(_))
        ));
        assert!(fit_gmm_1d(&[0.0, 1.0, 2.0], &cfg).is_err());
    }

    #[test]
    fn separation_examples() {
        assert!(separation_test(&params(0.0, 1.0, 4.0, 1.0), 1.5));
        assert!(!separation_test(&params(0.0, 1.0, 2.0, 1.0), 1.5));
        assert!(!separation_test(&params(1.0, 0.01, 1.0, 0.01), 1.5));
    }

    #[test]
    fn crossover_examples() {
        assert_eq!(solve_crossover(&params(0.0, 1.0, 4.0, 1.0)).unwrap(), 2.0);
        assert_eq!(solve_crossover(&params(-1.0, 0.5, 1.0, 0.5)).unwrap(), 0.0);

        let p = params(0.0, 1.0, 3.0, 2.0);
        let t = solve_crossover(&p).unwrap();
        let oracle = bisect_crossover(&p);
        assert!((t - oracle).abs() < 1e-6, "{t} vs {oracle}");
        assert!((t - 1.418).abs() < 1e-3);
        let gap = log_normal_pdf(t, 0.0, 1.0) - log_normal_pdf(t, 3.0, 2.0);
        assert!(gap.abs() < 1e-9);
    }

    #[test]
    fn equal_sigma_quadratic_path_matches_midpoint() {
        for (mb, mo, s) in [(0.0, 4.0, 1.0), (-3.5, 7.25, 0.3), (1e-3, 2e-3, 1e-4)] {
            let p = params(mb, s, mo, s);
            let mid = solve_crossover(&p).unwrap();
            let linear = crossover_quadratic(&p, 0.0).unwrap();
            assert!((mid - linear).abs() < 1e-12, "{mid} vs {linear}");
        }
    }

    #[test]
    fn crossover_miss_when_no_interior_root() {
        // Wide object component swallows the background one: no interior crossing.
        let p = params(0.0, 0.1, 0.05, 5.0);
        assert!(matches!(solve_crossover(&p), Err(Error::CrossoverMiss { .. })));
    }

    #[test]
    fn weighted_crossover_shifts_toward_minor_component() {
        let mut p = params(0.0, 1.0, 4.0, 1.0);
        p.w_b = 0.9;
        p.w_o = 0.1;
        let t = crossover(&p, true).unwrap();
        assert!(t > 2.0 && t < 4.0);
        let gap = log_normal_pdf(t, 0.0, 1.0) + 0.9f64.ln() - log_normal_pdf(t, 4.0, 1.0) - 0.1f64.ln();
        assert!(gap.abs() < 1e-9);
    }

    #[test]
    fn percentile_interpolates() {
        let s = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&s, 0.25), 1.0);
        assert_eq!(percentile(&[0.0, 10.0], 0.75), 7.5);
    }
}
