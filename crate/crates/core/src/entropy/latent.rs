//! The normative coding schedule for latents and hyper-latents.
//!
//! Latents are coded group by group; within a group the anchor pass precedes
//! the non-anchor pass, and inside a pass symbols go channel-major, then in
//! raster order over the selected positions. Hyper-latents are coded
//! channel-major in raster order under the learned per-channel prior.

use super::coder::{build_cdf, CdfTable, RangeDecoder, RangeEncoder, ALPHABET, TAIL};
use super::context::{ContextModel, Pass};
use super::quant::{symbol, CODING_FLOOR};
use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};
use crate::transforms::{ModelConfig, Net, ParamStore};

/// Receives the parameters of one pass and yields the pass's symbols.
pub trait PassCoder {
    /// `mu`/`sigma` cover the whole `[mk, h, w]` group; `positions` lists the
    /// offsets coded by this pass in canonical order.
    fn code_pass(&mut self, k: usize, pass: Pass, mu: &[f64], sigma: &[f64], positions: &[usize])
        -> Result<Vec<i32>>;
}

/// Drive the schedule; returns the quantized latent `ŷ` as `[M, h, w]`.
pub fn run_schedule(cm: &ContextModel, coder: &mut impl PassCoder) -> Result<Tensor> {
    let g = cm.net.g;
    let [m, h, w] = cm.latent_shape();
    let mk = cm.plan().group_size();
    let mut out = Tensor::zeros(&[m, h, w]);
    let mut decoded: Vec<Var> = Vec::new();
    for k in 0..cm.plan().len() {
        let phi_ch = cm.channel_context(k, &decoded)?;
        let mut group = Tensor::zeros(&[mk, h, w]);
        for &pass in cm.passes() {
            let phi_sp = match pass {
                Pass::NonAnchor => cm.spatial_context(k, Some(g.constant(group.clone())))?,
                _ => cm.spatial_context(k, None)?,
            };
            let (mu, sigma) = cm.params(k, phi_sp, phi_ch)?;
            let (mu, sigma) = (g.value(mu), g.value(sigma));
            let positions = cm.positions(pass);
            let syms = coder.code_pass(k, pass, mu.data(), sigma.data(), &positions)?;
            if syms.len() != positions.len() {
                return Err(Error::decode("pass produced the wrong number of symbols"));
            }
            let gd = group.data_mut();
            for (&p, &s) in positions.iter().zip(&syms) {
                gd[p] = f64::from(s) + mu.data()[p];
            }
        }
        out.data_mut()[k * mk * h * w..(k + 1) * mk * h * w].copy_from_slice(group.data());
        decoded.push(g.constant(group));
    }
    Ok(out)
}

struct Encoding<'y> {
    y: &'y Tensor,
    group_len: usize,
    enc: RangeEncoder,
    symbols: Vec<i32>,
}

impl PassCoder for Encoding<'_> {
    fn code_pass(&mut self, k: usize, _: Pass, mu: &[f64], sigma: &[f64], positions: &[usize]) -> Result<Vec<i32>> {
        let y = &self.y.data()[k * self.group_len..(k + 1) * self.group_len];
        let mut out = Vec::with_capacity(positions.len());
        for &p in positions {
            let s = symbol(y[p], mu[p]);
            self.enc.encode(s, &build_cdf(sigma[p]))?;
            out.push(s);
        }
        self.symbols.extend_from_slice(&out);
        Ok(out)
    }
}

struct Decoding<'b> {
    dec: RangeDecoder<'b>,
}

impl PassCoder for Decoding<'_> {
    fn code_pass(&mut self, _: usize, _: Pass, _: &[f64], sigma: &[f64], positions: &[usize]) -> Result<Vec<i32>> {
        positions.iter().map(|&p| self.dec.decode(&build_cdf(sigma[p]))).collect()
    }
}

/// Result of coding one latent.
#[derive(Clone, Debug)]
pub struct CodedLatent {
    pub bytes: Vec<u8>,
    pub yhat: Tensor,
    /// Symbols in coding order.
    pub symbols: Vec<i32>,
}

pub fn encode_latents(cm: &ContextModel, y: &Tensor) -> Result<CodedLatent> {
    if y.shape() != cm.latent_shape() {
        return Err(Error::shape(format!("latent {:?}, expected {:?}", y.shape(), cm.latent_shape())));
    }
    let [_, h, w] = cm.latent_shape();
    let mut e = Encoding { y, group_len: cm.plan().group_size() * h * w, enc: RangeEncoder::new(), symbols: Vec::new() };
    let yhat = run_schedule(cm, &mut e)?;
    Ok(CodedLatent { bytes: e.enc.finish(), yhat, symbols: e.symbols })
}

pub fn decode_latents(cm: &ContextModel, bytes: &[u8]) -> Result<Tensor> {
    let mut d = Decoding { dec: RangeDecoder::new(bytes)? };
    run_schedule(cm, &mut d)
}

/// Reference decoder that re-evaluates the whole conditional model for every
/// single symbol, reading one position at a time. Slow; used as an oracle
/// for the pass-parallel schedule.
pub fn decode_latents_serial(cm: &ContextModel, bytes: &[u8]) -> Result<Tensor> {
    let g = cm.net.g;
    let [m, h, w] = cm.latent_shape();
    let mk = cm.plan().group_size();
    let plane = h * w;
    let mut dec = RangeDecoder::new(bytes)?;
    let mut yhat = Tensor::zeros(&[m, h, w]);
    let mut known = vec![false; m * plane];
    for k in 0..cm.plan().len() {
        let base = k * mk * plane;
        for &pass in cm.passes() {
            for p in cm.positions(pass) {
                let c = p / plane;
                let (i, j) = ((p % plane) / w, p % w);
                // Earlier groups, exactly as decoded so far.
                let earlier: Vec<Var> = (0..k).map(|q| g.constant(yhat.narrow(q * mk, mk))).collect();
                let phi_ch = cm.channel_context(k, &earlier)?;
                // Anchors see nothing of their own group; non-anchors see its anchors.
                let phi_sp = if pass == Pass::NonAnchor {
                    let mut visible = Tensor::zeros(&[mk, h, w]);
                    for q in 0..mk * plane {
                        let (qi, qj) = ((q % plane) / w, q % w);
                        if known[base + q] && cm.mask().is_anchor(qi, qj) {
                            visible.data_mut()[q] = yhat.data()[base + q];
                        }
                    }
                    cm.spatial_context(k, Some(g.constant(visible)))?
                } else {
                    cm.spatial_context(k, None)?
                };
                let (mu, sigma) = cm.params(k, phi_sp, phi_ch)?;
                let at = (c * h + i) * w + j;
                let mu_p = g.value(mu).data()[at];
                let s = dec.decode(&build_cdf(g.value(sigma).data()[at]))?;
                yhat.data_mut()[base + p] = f64::from(s) + mu_p;
                known[base + p] = true;
            }
        }
    }
    Ok(yhat)
}

/// Per-channel tables of the factorized hyper-prior.
pub fn hyper_tables(cfg: &ModelConfig, params: &ParamStore) -> Result<Vec<CdfTable>> {
    let n = cfg.hyper_channels;
    let g = Graph::inference();
    let net = Net::new(&g, cfg, params);
    let grid: Vec<f64> = (0..n).flat_map(|_| (-TAIL..=TAIL).map(f64::from)).collect();
    let v = g.constant(Tensor::from_vec(&[n, 1, ALPHABET], grid)?);
    let lik = g.value(net.prior_likelihood(v)?);
    Ok((0..n).map(|c| CdfTable::from_pmf(lik.plane(c))).collect())
}

/// Bits the hyper-prior tables spend on `zhat`, from the quantized tables.
pub fn hyper_cost_bits(tables: &[CdfTable], zhat: &Tensor) -> f64 {
    let (_, h, w) = zhat.chw();
    zhat.data().iter().enumerate().map(|(i, &v)| tables[i / (h * w)].cost_bits(v as i32)).sum()
}

/// Code `round(z)`; returns the bytes and `ẑ`.
pub fn encode_hyper(tables: &[CdfTable], z: &Tensor) -> Result<(Vec<u8>, Tensor)> {
    let (c, h, w) = z.chw();
    if c != tables.len() {
        return Err(Error::shape(format!("{c} hyper channels but {} tables", tables.len())));
    }
    let mut enc = RangeEncoder::new();
    let mut zhat = z.clone();
    for (i, v) in zhat.data_mut().iter_mut().enumerate() {
        let s = symbol(*v, 0.0);
        enc.encode(s, &tables[i / (h * w)])?;
        *v = f64::from(s);
    }
    Ok((enc.finish(), zhat))
}

pub fn decode_hyper(tables: &[CdfTable], bytes: &[u8], shape: [usize; 3]) -> Result<Tensor> {
    let [c, h, w] = shape;
    if c != tables.len() {
        return Err(Error::shape(format!("{c} hyper channels but {} tables", tables.len())));
    }
    let mut dec = RangeDecoder::new(bytes)?;
    let data = (0..c * h * w)
        .map(|i| dec.decode(&tables[i / (h * w)]).map(f64::from))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_vec(&shape, data)
}

/// Ideal information content of already-coded latents, `Σ −log2 p` with the
/// coding floor; the rate the tables approximate.
pub fn latent_information(cm: &ContextModel, y: &Tensor) -> Result<f64> {
    struct Info<'y> {
        y: &'y Tensor,
        group_len: usize,
        bits: f64,
    }
    impl PassCoder for Info<'_> {
        fn code_pass(&mut self, k: usize, _: Pass, mu: &[f64], sigma: &[f64], pos: &[usize]) -> Result<Vec<i32>> {
            let y = &self.y.data()[k * self.group_len..(k + 1) * self.group_len];
            Ok(pos
                .iter()
                .map(|&p| {
                    let s = symbol(y[p], mu[p]);
                    self.bits -= super::quant::gaussian_likelihood(s, sigma[p]).max(CODING_FLOOR).log2();
                    s
                })
                .collect())
        }
    }
    let [_, h, w] = cm.latent_shape();
    let mut info = Info { y, group_len: cm.plan().group_size() * h * w, bits: 0.0 };
    run_schedule(cm, &mut info)?;
    Ok(info.bits)
}
