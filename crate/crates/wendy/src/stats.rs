//! Statistical utilities: Shapiro-Wilk normality test (Royston's AS R94
//! approximation), Fornberg finite-difference weights on arbitrary stencils,
//! and two-segment changepoint detection.

use crate::types::{Result, WendyError};
use statrs::distribution::{ContinuousCDF, Normal};

/// Shapiro-Wilk test outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SWResult {
    /// Test statistic in (0, 1]; values near 1 are consistent with normality.
    pub w: f64,
    /// Approximate p-value under the normal null.
    pub p: f64,
}

/// Shapiro-Wilk test for normality, following Royston's AS R94 approximation.
///
/// Valid for 3 <= n <= 5000; larger samples reuse the large-sample
/// normalizing transformation, which extrapolates smoothly.
pub fn shapiro_wilk(sample: &[f64]) -> Result<SWResult> {
    let n = sample.len();
    if n < 3 {
        return Err(WendyError::SampleTooSmall(n));
    }
    let normal = Normal::standard();

    let mut x: Vec<f64> = sample.to_vec();
    x.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample"));
    let mean = x.iter().sum::<f64>() / n as f64;
    let ssq: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ssq <= 0.0 || x[n - 1] - x[0] < f64::EPSILON * mean.abs().max(1.0) {
        return Err(WendyError::DegenerateSample);
    }

    // Expected normal order statistics (Blom approximation) and the
    // polynomial-corrected coefficient vector a.
    let nf = n as f64;
    let m: Vec<f64> = (1..=n)
        .map(|i| normal.inverse_cdf((i as f64 - 0.375) / (nf + 0.25)))
        .collect();
    let summ2: f64 = m.iter().map(|v| v * v).sum();
    let rsn = 1.0 / nf.sqrt();
    let mut a = vec![0.0; n];
    if n == 3 {
        a[0] = std::f64::consts::FRAC_1_SQRT_2;
        a[2] = -a[0];
    } else {
        let c_last = m[n - 1] / summ2.sqrt();
        let a_n = -2.706056 * rsn.powi(5) + 4.434685 * rsn.powi(4) - 2.071190 * rsn.powi(3)
            - 0.147981 * rsn.powi(2)
            + 0.221157 * rsn
            + c_last;
        let (fac, i1) = if n > 5 {
            let c_next = m[n - 2] / summ2.sqrt();
            let a_n1 = -3.582633 * rsn.powi(5) + 5.682633 * rsn.powi(4)
                - 1.752461 * rsn.powi(3)
                - 0.293762 * rsn.powi(2)
                + 0.042981 * rsn
                + c_next;
            let fac = ((summ2 - 2.0 * m[n - 1] * m[n - 1] - 2.0 * m[n - 2] * m[n - 2])
                / (1.0 - 2.0 * a_n * a_n - 2.0 * a_n1 * a_n1))
                .sqrt();
            a[n - 2] = a_n1;
            a[1] = -a_n1;
            (fac, 2)
        } else {
            let fac = ((summ2 - 2.0 * m[n - 1] * m[n - 1]) / (1.0 - 2.0 * a_n * a_n)).sqrt();
            (fac, 1)
        };
        a[n - 1] = a_n;
        a[0] = -a_n;
        for i in i1..n - i1 {
            a[i] = m[i] / fac;
        }
    }

    let num: f64 = a.iter().zip(&x).map(|(ai, xi)| ai * xi).sum();
    let w = (num * num / ssq).min(1.0);

    let p = if n == 3 {
        let pi6 = 6.0 / std::f64::consts::PI;
        let stqr = (0.75f64).sqrt().asin();
        (pi6 * (w.sqrt().asin() - stqr)).clamp(0.0, 1.0)
    } else {
        let w1 = 1.0 - w;
        if w1 <= 1e-99 {
            1.0
        } else if n <= 11 {
            let gamma = -2.273 + 0.459 * nf;
            let arg = gamma - (w1).ln();
            if arg <= 0.0 {
                0.0
            } else {
                let y = -arg.ln();
                let mu = 0.5440 - 0.39978 * nf + 0.025054 * nf * nf - 0.0006714 * nf * nf * nf;
                let sig =
                    (1.3822 - 0.77857 * nf + 0.062767 * nf * nf - 0.0020322 * nf * nf * nf).exp();
                1.0 - normal.cdf((y - mu) / sig)
            }
        } else {
            let ln_n = nf.ln();
            let y = w1.ln();
            let mu = -1.5861 - 0.31082 * ln_n - 0.083751 * ln_n * ln_n
                + 0.0038915 * ln_n * ln_n * ln_n;
            let sig = (-0.4803 - 0.082676 * ln_n + 0.0030302 * ln_n * ln_n).exp();
            1.0 - normal.cdf((y - mu) / sig)
        }
    };

    Ok(SWResult { w, p })
}

/// Finite-difference weights on an arbitrary stencil (Fornberg's recurrence).
///
/// Returns weights `c` such that `sum_i c[i] f(stencil[i])` approximates the
/// `order`-th derivative of `f` at `center`, exact for polynomials up to
/// degree `stencil.len() - 1`.
pub fn fd_weights(order: usize, stencil: &[f64], center: f64) -> Vec<f64> {
    let n = stencil.len();
    assert!(order < n, "derivative order must be below the stencil size");
    let mut c = vec![vec![0.0; order + 1]; n];
    c[0][0] = 1.0;
    let mut c1 = 1.0;
    let mut c4 = stencil[0] - center;
    for i in 1..n {
        let mn = i.min(order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = stencil[i] - center;
        for j in 0..i {
            let c3 = stencil[i] - stencil[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.into_iter().map(|row| row[order]).collect()
}

/// Two-segment changepoint: the index `c` (first index of the second segment)
/// that minimizes the total SSE of independent least-squares lines fitted to
/// `series[..c]` and `series[c..]`. Each segment keeps at least two points;
/// ties break toward the smaller index.
pub fn changepoint(series: &[f64]) -> Result<usize> {
    let n = series.len();
    if n < 4 {
        return Err(WendyError::SeriesTooShort(n));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(WendyError::NonFiniteData(
            "changepoint series has non-finite entries".into(),
        ));
    }

    // Prefix sums make each segment's line fit O(1).
    let mut sx = vec![0.0; n + 1];
    let mut sy = vec![0.0; n + 1];
    let mut sxx = vec![0.0; n + 1];
    let mut sxy = vec![0.0; n + 1];
    let mut syy = vec![0.0; n + 1];
    for (i, &y) in series.iter().enumerate() {
        let x = i as f64;
        sx[i + 1] = sx[i] + x;
        sy[i + 1] = sy[i] + y;
        sxx[i + 1] = sxx[i] + x * x;
        sxy[i + 1] = sxy[i] + x * y;
        syy[i + 1] = syy[i] + y * y;
    }
    let seg_sse = |a: usize, b: usize| -> f64 {
        let len = (b - a) as f64;
        let dx = sx[b] - sx[a];
        let dy = sy[b] - sy[a];
        let dxx = sxx[b] - sxx[a];
        let dxy = sxy[b] - sxy[a];
        let dyy = syy[b] - syy[a];
        let den = len * dxx - dx * dx;
        if den <= 0.0 {
            return 0.0;
        }
        let slope = (len * dxy - dx * dy) / den;
        let icept = (dy - slope * dx) / len;
        (dyy - icept * dy - slope * dxy).max(0.0)
    };

    let scale = (syy[n] / n as f64).max(1.0);
    let tol = 1e-9 * scale;
    let mut best_c = 2;
    let mut best = f64::INFINITY;
    for c in 2..=n - 2 {
        let sse = seg_sse(0, c) + seg_sse(c, n);
        if sse < best - tol {
            best = sse;
            best_c = c;
        }
    }
    Ok(best_c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Reference values computed with an independent AS R94 implementation
    // (scipy.stats.shapiro).
    #[test]
    fn shapiro_wilk_matches_reference_values() {
        let cases: [(&[f64], f64, f64); 4] = [
            (
                &[148.0, 154.0, 158.0, 160.0, 161.0, 162.0, 166.0, 170.0, 182.0, 195.0, 236.0],
                0.788814694863,
                0.006703814062,
            ),
            (
                &[
                    0.00123, 0.298746, -0.274138, -0.890592, -0.454671, -0.991647, 0.060144,
                    1.340215, -0.492207, -0.620475, 0.489842, 0.356887, 0.105414, -0.930468,
                    -0.029252, 0.695303, -1.344215, -0.457616, -1.901223, -1.289538,
                ],
                0.992123177832,
                0.999644043049,
            ),
            (
                &[
                    0.197614, 0.348373, 0.883565, 0.075062, 0.060046, 1.223566, 0.772906,
                    2.195965, 0.475154, 0.521318, 1.180755, 0.526535, 0.022169, 0.293279,
                    1.014259, 0.63473, 1.396578, 0.008301, 0.903831, 0.250345, 0.355628,
                    3.074857, 1.404422, 3.795412, 1.748099, 2.243039, 0.144947, 0.302554,
                    0.238774, 1.148245,
                ],
                0.834791935826,
                0.000302702248,
            ),
            (
                &[
                    0.361264, 0.598184, 0.059252, 0.387632, 0.323036, 0.1502, 0.816338,
                    0.379446, 0.978748, 0.589992, 0.605056, 0.637997,
                ],
                0.968707818973,
                0.896805711718,
            ),
        ];
        for (sample, w_ref, p_ref) in cases {
            let r = shapiro_wilk(sample).unwrap();
            assert_relative_eq!(r.w, w_ref, max_relative = 1e-6);
            assert_relative_eq!(r.p, p_ref, max_relative = 1e-4);
        }
    }

    #[test]
    fn shapiro_wilk_rejects_degenerate_and_tiny_samples() {
        assert_eq!(
            shapiro_wilk(&[1.0, 2.0]).unwrap_err().code(),
            "sample_too_small"
        );
        assert_eq!(
            shapiro_wilk(&[2.0; 10]).unwrap_err().code(),
            "degenerate_sample"
        );
    }

    #[test]
    fn shapiro_wilk_null_calibration_and_uniformity() {
        // 1000 standard-normal samples of n = 256: the rejection rate at 5%
        // should be 5% +/- 2%, and the p-values approximately uniform
        // (Kolmogorov-Smirnov distance below 0.05).
        let n = 256;
        let seeds = 1000;
        let mut pvals = Vec::with_capacity(seeds);
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
            let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
            let sample: Vec<f64> = (0..n).map(|_| rng.sample(normal)).collect();
            pvals.push(shapiro_wilk(&sample).unwrap().p);
        }
        let reject = pvals.iter().filter(|&&p| p < 0.05).count() as f64 / seeds as f64;
        assert!(
            (0.03..=0.07).contains(&reject),
            "null rejection rate {reject} outside 5% +/- 2%"
        );
        let mut sorted = pvals.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let ks = sorted
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let lo = (p - i as f64 / seeds as f64).abs();
                let hi = ((i + 1) as f64 / seeds as f64 - p).abs();
                lo.max(hi)
            })
            .fold(0.0f64, f64::max);
        assert!(ks < 0.05, "null p-values not uniform: KS distance {ks}");
    }

    #[test]
    fn shapiro_wilk_rejects_uniform_data() {
        let n = 500;
        let mut rejected = 0;
        let seeds = 200;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let sample: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            if shapiro_wilk(&sample).unwrap().p < 1e-4 {
                rejected += 1;
            }
        }
        assert!(
            rejected as f64 >= 0.99 * seeds as f64,
            "only {rejected}/{seeds} uniform samples rejected at 1e-4"
        );
    }

    #[test]
    fn fd_weights_match_classic_stencils() {
        // Oracle: the Fornberg recurrence reproduces the textbook centered
        // differences, and order 0 gives interpolation weights.
        let w = fd_weights(1, &[-1.0, 0.0, 1.0], 0.0);
        assert_relative_eq!(w[0], -0.5, epsilon = 1e-14);
        assert_relative_eq!(w[1], 0.0, epsilon = 1e-14);
        assert_relative_eq!(w[2], 0.5, epsilon = 1e-14);

        let w = fd_weights(2, &[-1.0, 0.0, 1.0], 0.0);
        assert_relative_eq!(w[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(w[1], -2.0, epsilon = 1e-14);
        assert_relative_eq!(w[2], 1.0, epsilon = 1e-14);

        let w = fd_weights(0, &[-2.0, -1.0, 1.0, 3.0], 0.5);
        assert_relative_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn fd_weights_polynomial_exactness() {
        // Applying order-k weights to t^j recovers the k-th derivative of t^j
        // exactly for every j below the stencil size.
        let stencil: Vec<f64> = (0..15).map(|i| i as f64 - 7.0).collect();
        for order in 0..4usize {
            let w = fd_weights(order, &stencil, 0.0);
            for j in 0..stencil.len() {
                let applied: f64 = stencil
                    .iter()
                    .zip(&w)
                    .map(|(&x, &c)| c * x.powi(j as i32))
                    .sum();
                // magnitude of the cancelling terms, the natural error scale
                let scale: f64 = stencil
                    .iter()
                    .zip(&w)
                    .map(|(&x, &c)| (c * x.powi(j as i32)).abs())
                    .sum::<f64>()
                    .max(1.0);
                // d^k/dt^k t^j at 0: k! if j == k else 0.
                let expect = if j == order {
                    (1..=order).product::<usize>() as f64
                } else {
                    0.0
                };
                assert!(
                    (applied - expect).abs() / scale < 1e-10,
                    "order {order} weights on t^{j}: got {applied}, want {expect}"
                );
            }
        }
    }

    // Exhaustive-SSE brute force, written independently of the implementation.
    fn brute_force_changepoint(y: &[f64]) -> usize {
        let n = y.len();
        let line_sse = |pts: &[(f64, f64)]| -> f64 {
            let m = pts.len() as f64;
            let sx: f64 = pts.iter().map(|p| p.0).sum();
            let sy: f64 = pts.iter().map(|p| p.1).sum();
            let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
            let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
            let den = m * sxx - sx * sx;
            let slope = if den.abs() < 1e-300 { 0.0 } else { (m * sxy - sx * sy) / den };
            let icept = (sy - slope * sx) / m;
            pts.iter()
                .map(|&(x, yv)| {
                    let e = yv - slope * x - icept;
                    e * e
                })
                .sum()
        };
        let mut best = (2, f64::INFINITY);
        for c in 2..=n - 2 {
            let a: Vec<(f64, f64)> = (0..c).map(|i| (i as f64, y[i])).collect();
            let b: Vec<(f64, f64)> = (c..n).map(|i| (i as f64, y[i])).collect();
            let sse = line_sse(&a) + line_sse(&b);
            if sse < best.1 - 1e-9 {
                best = (c, sse);
            }
        }
        best.0
    }

    #[test]
    fn changepoint_matches_exhaustive_oracle_on_hockey_stick() {
        // Both regimes of this series are exactly linear; the point at index 3
        // lies on both lines, so splits 3 and 4 tie at zero SSE and the tie
        // rule picks 3.
        let y = [0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0];
        let oracle = brute_force_changepoint(&y);
        assert_eq!(oracle, 3);
        assert_eq!(changepoint(&y).unwrap(), oracle);
    }

    #[test]
    fn changepoint_tie_breaks_to_smallest_on_linear_series() {
        let y: Vec<f64> = (0..12).map(|i| 0.5 * i as f64 + 1.0).collect();
        assert_eq!(changepoint(&y).unwrap(), 2);
    }

    #[test]
    fn changepoint_finds_synthetic_knee_within_one() {
        // Two-slope generator with noise, knee at a known index.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let knee = 10 + (trial % 20);
            let n = 40;
            let y: Vec<f64> = (0..n)
                .map(|i| {
                    let base = if i < knee {
                        -2.0 * i as f64
                    } else {
                        -2.0 * knee as f64 - 0.05 * (i - knee) as f64
                    };
                    base + rng.random_range(-0.05..0.05)
                })
                .collect();
            let got = changepoint(&y).unwrap() as i64;
            assert!(
                (got - knee as i64).abs() <= 1,
                "knee at {knee}, detected {got}"
            );
        }
    }

    #[test]
    fn changepoint_rejects_short_series() {
        assert_eq!(
            changepoint(&[1.0, 2.0, 3.0]).unwrap_err().code(),
            "series_too_short"
        );
    }

    #[test]
    fn changepoint_agrees_with_oracle_on_random_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(6..40);
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert_eq!(changepoint(&y).unwrap(), brute_force_changepoint(&y));
        }
    }
}
