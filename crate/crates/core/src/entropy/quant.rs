//! Quantization and the probability models used for rate.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{gauss_bin_mass, round_half_away, Graph, Tensor};
use crate::transforms::{ModelConfig, Net, ParamStore};

/// Probability floor applied to anything that gets coded.
pub const CODING_FLOOR: f64 = 1.0 / 65536.0;

/// `U(−½, ½)` noise of the given shape.
pub fn uniform_noise(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).expect("shape matches length")
}

/// Training relaxation `y + u`.
pub fn quantize_train(y: &Tensor, rng: &mut impl Rng) -> Tensor {
    let mut out = y.clone();
    for v in out.data_mut() {
        *v += rng.gen_range(-0.5..0.5);
    }
    out
}

/// Mean-centred rounding: returns `(ŷ, s)` with `s = round(y − μ)` and `ŷ = s + μ`.
pub fn quantize_eval(y: &[f64], mu: &[f64]) -> Result<(Vec<f64>, Vec<i32>)> {
    if y.len() != mu.len() {
        return Err(Error::shape(format!("{} values but {} means", y.len(), mu.len())));
    }
    let mut yhat = Vec::with_capacity(y.len());
    let mut sym = Vec::with_capacity(y.len());
    for (&v, &m) in y.iter().zip(mu) {
        let s = symbol(v, m);
        sym.push(s);
        yhat.push(f64::from(s) + m);
    }
    Ok((yhat, sym))
}

/// `round(v − μ)` saturated to the i32 range.
pub fn symbol(v: f64, mu: f64) -> i32 {
    let r = round_half_away(v - mu);
    if r.is_nan() {
        0
    } else {
        r.clamp(f64::from(i32::MIN), f64::from(i32::MAX)) as i32
    }
}

/// Discretized zero-mean Gaussian mass of symbol `s`, floored for coding.
pub fn gaussian_likelihood(s: i32, sigma: f64) -> f64 {
    gauss_bin_mass(f64::from(s), sigma).max(CODING_FLOOR)
}

/// Bin masses of the learned factorized prior at `zhat: [N, h, w]`, floored for coding.
pub fn factorized_likelihood(cfg: &ModelConfig, params: &ParamStore, zhat: &Tensor) -> Result<Tensor> {
    let g = Graph::inference();
    let net = Net::new(&g, cfg, params);
    let z = g.constant(zhat.clone());
    let p = net.prior_likelihood(z)?;
    Ok(g.value(p).map(|v| v.max(CODING_FLOOR)))
}

/// Information content `Σ −log2 p`.
pub fn estimate_rate(likelihoods: &[f64]) -> Result<f64> {
    let mut bits = 0.0;
    for &p in likelihoods {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Numeric(format!("likelihood {p} outside (0, 1]")));
        }
        bits -= p.log2();
    }
    Ok(bits)
}
