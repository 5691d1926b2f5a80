//! Bjøntegaard-delta comparison of rate-distortion curves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    /// PSNR in dB.
    pub quality: f64,
}

/// At least four points with strictly increasing, positive rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdCurve {
    points: Vec<RdPoint>,
}

impl RdCurve {
    pub fn new(mut points: Vec<RdPoint>) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::config(format!("an RD curve needs at least 4 points, got {}", points.len())));
        }
        if points.iter().any(|p| !(p.bpp > 0.0 && p.bpp.is_finite()) || !p.quality.is_finite()) {
            return Err(Error::config("RD points need positive finite rate and finite quality"));
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[0].bpp >= w[1].bpp) {
            return Err(Error::config("RD curve rates must be distinct"));
        }
        Ok(RdCurve { points })
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(pairs.iter().map(|&(bpp, quality)| RdPoint { bpp, quality }).collect())
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    fn log_rates(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.bpp.log10()).collect()
    }

    fn qualities(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.quality).collect()
    }
}

/// Curve model used for the integration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BdInterp {
    /// Least-squares cubic polynomial (the classical procedure).
    #[default]
    Cubic,
    /// Monotone piecewise cubic Hermite through the points.
    Pchip,
}

/// A function of one variable that can be integrated exactly.
trait Integrable {
    fn integral(&self, lo: f64, hi: f64) -> f64;
}

/// Cubic in a standardized variable `t = (x − shift) / scale`.
struct Poly {
    coef: [f64; 4],
    shift: f64,
    scale: f64,
}

impl Poly {
    fn fit(xs: &[f64], ys: &[f64], shift: f64, scale: f64) -> Result<Poly> {
        // Normal equations in the standardized variable are well conditioned
        // for the handful of points an RD curve has.
        let mut a = [[0.0; 5]; 4];
        for (&x, &y) in xs.iter().zip(ys) {
            let t = (x - shift) / scale;
            let pw = [1.0, t, t * t, t * t * t];
            for i in 0..4 {
                for j in 0..4 {
                    a[i][j] += pw[i] * pw[j];
                }
                a[i][4] += pw[i] * y;
            }
        }
        for col in 0..4 {
            let piv = (col..4)
                .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                .expect("non-empty pivot range");
            if a[piv][col].abs() < 1e-12 {
                return Err(Error::Domain("RD points do not determine a cubic".into()));
            }
            a.swap(col, piv);
            for r in 0..4 {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..5 {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        let coef = [a[0][4] / a[0][0], a[1][4] / a[1][1], a[2][4] / a[2][2], a[3][4] / a[3][3]];
        Ok(Poly { coef, shift, scale })
    }
}

impl Integrable for Poly {
    fn integral(&self, lo: f64, hi: f64) -> f64 {
        let anti = |x: f64| {
            let t = (x - self.shift) / self.scale;
            self.coef.iter().enumerate().map(|(i, c)| c * t.powi(i as i32 + 1) / (i + 1) as f64).sum::<f64>()
        };
        (anti(hi) - anti(lo)) * self.scale
    }
}

/// Fritsch–Carlson monotone cubic Hermite interpolant.
struct Pchip {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl Pchip {
    fn new(xs: &[f64], ys: &[f64]) -> Result<Pchip> {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
        let xs: Vec<f64> = idx.iter().map(|&i| xs[i]).collect();
        let ys: Vec<f64> = idx.iter().map(|&i| ys[i]).collect();
        if xs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("piecewise interpolation needs distinct abscissae".into()));
        }
        let n = xs.len();
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|k| (ys[k + 1] - ys[k]) / h[k]).collect();
        let mut slopes = vec![0.0; n];
        for k in 1..n - 1 {
            if delta[k - 1] * delta[k] > 0.0 {
                let w1 = 2.0 * h[k] + h[k - 1];
                let w2 = h[k] + 2.0 * h[k - 1];
                slopes[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
            }
        }
        let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
            let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
            if s.signum() != d0.signum() {
                0.0
            } else if d0.signum() != d1.signum() && s.abs() > 3.0 * d0.abs() {
                3.0 * d0
            } else {
                s
            }
        };
        slopes[0] = end(h[0], h[1], delta[0], delta[1]);
        slopes[n - 1] = end(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        Ok(Pchip { xs, ys, slopes })
    }
}

impl Integrable for Pchip {
    fn integral(&self, lo: f64, hi: f64) -> f64 {
        let mut total = 0.0;
        for k in 0..self.xs.len() - 1 {
            let (x0, x1) = (self.xs[k], self.xs[k + 1]);
            let (a, b) = (lo.max(x0), hi.min(x1));
            if a >= b {
                continue;
            }
            // Power-basis form in s = x − x0.
            let hk = x1 - x0;
            let d = (self.ys[k + 1] - self.ys[k]) / hk;
            let (m0, m1) = (self.slopes[k], self.slopes[k + 1]);
            let c = [self.ys[k], m0, (3.0 * d - 2.0 * m0 - m1) / hk, (m0 + m1 - 2.0 * d) / (hk * hk)];
            let anti = |s: f64| c[0] * s + c[1] * s * s / 2.0 + c[2] * s.powi(3) / 3.0 + c[3] * s.powi(4) / 4.0;
            total += anti(b - x0) - anti(a - x0);
        }
        total
    }
}

fn model(xs: &[f64], ys: &[f64], shift: f64, scale: f64, interp: BdInterp) -> Result<Box<dyn Integrable>> {
    Ok(match interp {
        BdInterp::Cubic => Box::new(Poly::fit(xs, ys, shift, scale)?),
        BdInterp::Pchip => Box::new(Pchip::new(xs, ys)?),
    })
}

/// Mean difference `test − anchor` of `y(x)` over the overlapping `x` range.
fn mean_gap(ax: &[f64], ay: &[f64], tx: &[f64], ty: &[f64], interp: BdInterp) -> Result<f64> {
    let range = |v: &[f64]| (v.iter().copied().fold(f64::INFINITY, f64::min), v.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let (alo, ahi) = range(ax);
    let (tlo, thi) = range(tx);
    let (lo, hi) = (alo.max(tlo), ahi.min(thi));
    if lo >= hi {
        return Err(Error::Domain("RD curves do not overlap".into()));
    }
    let all: Vec<f64> = ax.iter().chain(tx).copied().collect();
    let shift = all.iter().sum::<f64>() / all.len() as f64;
    let scale = (all.iter().map(|x| (x - shift).powi(2)).sum::<f64>() / all.len() as f64).sqrt().max(1e-12);
    let a = model(ax, ay, shift, scale, interp)?;
    let t = model(tx, ty, shift, scale, interp)?;
    Ok((t.integral(lo, hi) - a.integral(lo, hi)) / (hi - lo))
}

/// Average rate change of `test` against `anchor` at equal quality, in
/// percent. Negative means `test` needs fewer bits.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve, interp: BdInterp) -> Result<f64> {
    let gap = mean_gap(&anchor.qualities(), &anchor.log_rates(), &test.qualities(), &test.log_rates(), interp)?;
    Ok((10f64.powf(gap) - 1.0) * 100.0)
}

/// Average quality change of `test` against `anchor` at equal rate, in dB.
pub fn bd_psnr(anchor: &RdCurve, test: &RdCurve, interp: BdInterp) -> Result<f64> {
    mean_gap(&anchor.log_rates(), &anchor.qualities(), &test.log_rates(), &test.qualities(), interp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn anchor() -> RdCurve {
        RdCurve::from_pairs(&[(0.1, 30.0), (0.2, 33.1), (0.4, 36.0), (0.8, 38.4), (1.6, 40.2)]).unwrap()
    }

    fn map(c: &RdCurve, f: impl Fn(RdPoint) -> (f64, f64)) -> RdCurve {
        RdCurve::from_pairs(&c.points().iter().map(|&p| f(p)).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn self_comparison_is_zero() {
        for interp in [BdInterp::Cubic, BdInterp::Pchip] {
            assert_eq!(bd_rate(&anchor(), &anchor(), interp).unwrap(), 0.0);
            assert_eq!(bd_psnr(&anchor(), &anchor(), interp).unwrap(), 0.0);
        }
    }

    #[test]
    fn doubled_rate_costs_one_hundred_percent() {
        let doubled = map(&anchor(), |p| (2.0 * p.bpp, p.quality));
        for interp in [BdInterp::Cubic, BdInterp::Pchip] {
            let r = bd_rate(&anchor(), &doubled, interp).unwrap();
            assert!((r - 100.0).abs() < 1e-9, "{interp:?}: {r}");
        }
    }

    #[test]
    fn quality_offset_is_recovered() {
        let better = map(&anchor(), |p| (p.bpp, p.quality + 1.0));
        for interp in [BdInterp::Cubic, BdInterp::Pchip] {
            assert!((bd_psnr(&anchor(), &better, interp).unwrap() - 1.0).abs() < 1e-9);
            assert!(bd_rate(&anchor(), &better, interp).unwrap() < 0.0, "better curve saves rate");
        }
    }

    #[test]
    fn invalid_curves_are_rejected() {
        assert!(RdCurve::from_pairs(&[(0.1, 30.0), (0.2, 31.0), (0.3, 32.0)]).is_err());
        assert!(RdCurve::from_pairs(&[(0.1, 30.0), (0.1, 31.0), (0.3, 32.0), (0.4, 33.0)]).is_err());
        assert!(RdCurve::from_pairs(&[(0.0, 30.0), (0.2, 31.0), (0.3, 32.0), (0.4, 33.0)]).is_err());
        let far = map(&anchor(), |p| (p.bpp, p.quality + 50.0));
        assert!(matches!(bd_rate(&anchor(), &far, BdInterp::Cubic), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn self_comparison_is_zero_for_any_curve(
            steps in prop::collection::vec((0.05f64..1.0, 0.2f64..4.0), 4..8),
            start in 0.01f64..0.5,
        ) {
            let mut pairs = Vec::new();
            let (mut r, mut q) = (start, 25.0);
            for (dr, dq) in steps {
                r += dr;
                q += dq;
                pairs.push((r, q));
            }
            let c = RdCurve::from_pairs(&pairs).unwrap();
            for interp in [BdInterp::Cubic, BdInterp::Pchip] {
                prop_assert_eq!(bd_rate(&c, &c, interp).unwrap(), 0.0);
                prop_assert_eq!(bd_psnr(&c, &c, interp).unwrap(), 0.0);
            }
        }
    }
}
