//! Checkerboard + channel-group context model and the relaxed rate used in training.

use std::ops::Range;
use std::sync::Arc;

use super::coder::SIGMA_MIN;
use super::quant::symbol;
use crate::error::{Error, Result};
use crate::nn::{Tensor, Var};
use crate::transforms::Net;

/// Floor on likelihoods inside the training rate, keeps `−log2` finite.
pub const TRAIN_LIKELIHOOD_FLOOR: f64 = 1e-9;

/// Checkerboard parity grid; `true` marks an anchor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorMask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

pub fn anchor_mask(height: usize, width: usize) -> AnchorMask {
    let cells = (0..height * width).map(|i| (i / width + i % width) % 2 == 0).collect();
    AnchorMask { height, width, cells }
}

impl AnchorMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_anchor(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.width + j]
    }

    pub fn anchors(&self) -> usize {
        self.cells.iter().filter(|&&a| a).count()
    }

    /// `channels` copies of the mask (or its complement) as 0/1 values.
    pub fn tensor(&self, channels: usize, anchors: bool) -> Tensor {
        let plane = self.cells.iter().map(|&a| if a == anchors { 1.0 } else { 0.0 });
        let data = plane.cycle().take(channels * self.cells.len()).collect();
        Tensor::from_vec(&[channels, self.height, self.width], data).expect("mask shape")
    }
}

/// Contiguous, equally sized channel groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelSlicePlan {
    groups: Vec<Range<usize>>,
}

impl ChannelSlicePlan {
    pub fn new(channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::config(format!("cannot split {channels} channels into {groups} groups")));
        }
        let m = channels / groups;
        Ok(ChannelSlicePlan { groups: (0..groups).map(|k| k * m..(k + 1) * m).collect() })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn group(&self, k: usize) -> Range<usize> {
        self.groups[k].clone()
    }

    pub fn group_size(&self) -> usize {
        self.groups[0].len()
    }
}

/// One step of the decode schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pass {
    Anchor,
    NonAnchor,
    /// Whole group at once (checkerboard context disabled).
    Full,
}

impl Pass {
    fn selects(self, anchor: bool) -> bool {
        match self {
            Pass::Anchor => anchor,
            Pass::NonAnchor => !anchor,
            Pass::Full => true,
        }
    }
}

/// Spatial context of group `k` from its masked, already decoded anchors.
pub fn spatial_ctx(net: &Net, k: usize, masked_anchors: Var) -> Result<Var> {
    net.conv(&format!("sp{k}"), masked_anchors, 1)
}

/// Channel context of group `k` from the decoded groups `0..k`, concatenated.
pub fn channel_ctx(net: &Net, k: usize, earlier: Var) -> Result<Var> {
    let want = k * net.cfg.group_channels();
    if k == 0 || net.g.shape(earlier)[0] != want {
        return Err(Error::shape(format!("group {k} needs {want} channels of earlier groups")));
    }
    let h = net.conv(&format!("ch{k}.c1"), earlier, 1)?;
    let h = net.g.gelu(h);
    net.conv(&format!("ch{k}.c2"), h, 1)
}

/// `(μ, σ)` of group `k` from whichever priors the config enables.
pub fn entropy_params(
    net: &Net,
    k: usize,
    phi_sp: Option<Var>,
    phi_ch: Option<Var>,
    lf: Option<Var>,
    psi: Var,
) -> Result<(Var, Var)> {
    let parts: Vec<Var> = [phi_sp, phi_ch, lf, Some(psi)].into_iter().flatten().collect();
    let cat = net.g.concat(&parts)?;
    let h = net.conv(&format!("ep{k}.c1"), cat, 1)?;
    let h = net.g.gelu(h);
    let h = net.conv(&format!("ep{k}.c2"), h, 1)?;
    let h = net.g.gelu(h);
    let out = net.conv(&format!("ep{k}.c3"), h, 1)?;
    let mk = net.g.shape(out)[0] / 2;
    let mu = net.g.narrow(out, 0, mk)?;
    let raw = net.g.narrow(out, mk, mk)?;
    let sigma = net.g.softplus(raw);
    Ok((mu, net.g.lower_bound(sigma, SIGMA_MIN)))
}

/// The context model of one slice, bound to its hyper-prior output `Ψ` and
/// (when enabled) the inter-slice latent `L_F`.
pub struct ContextModel<'n, 'a> {
    pub net: &'n Net<'a>,
    lf: Option<Var>,
    psi: Var,
    plan: ChannelSlicePlan,
    height: usize,
    width: usize,
    mask: AnchorMask,
}

impl<'n, 'a> ContextModel<'n, 'a> {
    pub fn new(net: &'n Net<'a>, lf: Option<Var>, psi: Var) -> Result<Self> {
        let cfg = net.cfg;
        let s = net.g.shape(psi);
        if s.len() != 3 || s[0] != 2 * cfg.latent_channels {
            return Err(Error::shape(format!("hyper features {:?} for {} latents", s, cfg.latent_channels)));
        }
        match (cfg.auxiliary, lf) {
            (true, Some(l)) => {
                let ls = net.g.shape(l);
                if ls != [cfg.inter_latent, s[1], s[2]] {
                    return Err(Error::shape(format!("inter-slice latent {:?} vs hyper {:?}", ls, s)));
                }
            }
            (true, None) => return Err(Error::shape("inter-slice latent required")),
            (false, Some(_)) => return Err(Error::shape("inter-slice latent given but auxiliary path is off")),
            (false, None) => {}
        }
        let plan = ChannelSlicePlan::new(cfg.latent_channels, cfg.effective_groups())?;
        Ok(ContextModel { net, lf, psi, plan, height: s[1], width: s[2], mask: anchor_mask(s[1], s[2]) })
    }

    pub fn plan(&self) -> &ChannelSlicePlan {
        &self.plan
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.net.cfg.latent_channels, self.height, self.width]
    }

    pub fn mask(&self) -> &AnchorMask {
        &self.mask
    }

    /// Passes per group, in decode order.
    pub fn passes(&self) -> &'static [Pass] {
        if self.net.cfg.checkerboard {
            &[Pass::Anchor, Pass::NonAnchor]
        } else {
            &[Pass::Full]
        }
    }

    /// Offsets within a `[mk, h, w]` group tensor coded by `pass`, channel-major then raster.
    pub fn positions(&self, pass: Pass) -> Vec<usize> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for c in 0..self.plan.group_size() {
            for i in 0..h {
                for j in 0..w {
                    if pass.selects(self.mask.is_anchor(i, j)) {
                        out.push((c * h + i) * w + j);
                    }
                }
            }
        }
        out
    }

    fn zeros(&self, c: usize) -> Var {
        self.net.g.constant(Tensor::zeros(&[c, self.height, self.width]))
    }

    /// `Φ_ch` for group `k`; `None` when the config has no channel context.
    pub fn channel_context(&self, k: usize, decoded: &[Var]) -> Result<Option<Var>> {
        let cfg = self.net.cfg;
        if !cfg.channelwise || self.plan.len() == 1 {
            return Ok(None);
        }
        if decoded.len() < k {
            return Err(Error::shape(format!("group {k} needs {k} decoded groups")));
        }
        if k == 0 {
            return Ok(Some(self.zeros(cfg.context_width)));
        }
        let earlier = self.net.g.concat(&decoded[..k])?;
        channel_ctx(self.net, k, earlier).map(Some)
    }

    /// `Φ_sp` for group `k`; zeros for the anchor pass, `None` without checkerboard.
    pub fn spatial_context(&self, k: usize, masked_anchors: Option<Var>) -> Result<Option<Var>> {
        if !self.net.cfg.checkerboard {
            return Ok(None);
        }
        match masked_anchors {
            None => Ok(Some(self.zeros(self.net.cfg.context_width))),
            Some(a) => spatial_ctx(self.net, k, a).map(Some),
        }
    }

    pub fn params(&self, k: usize, phi_sp: Option<Var>, phi_ch: Option<Var>) -> Result<(Var, Var)> {
        entropy_params(self.net, k, phi_sp, phi_ch, self.lf, self.psi)
    }

    /// Differentiable latent path used in training and for rate estimates.
    ///
    /// Returns `(ŷ, bits)` where `bits` is the scalar `Σ −log2 p` of the latents.
    pub fn relaxed(&self, y: Var, quant: &Relaxation) -> Result<(Var, Var)> {
        let g = self.net.g;
        if g.shape(y) != self.latent_shape() {
            return Err(Error::shape(format!("latent {:?}, expected {:?}", g.shape(y), self.latent_shape())));
        }
        let mk = self.plan.group_size();
        let anchors = Arc::new(self.mask.tensor(mk, true));
        let others = Arc::new(self.mask.tensor(mk, false));
        let mut decoded = Vec::new();
        let mut bits = Vec::new();
        for k in 0..self.plan.len() {
            let yk = g.narrow(y, k * mk, mk)?;
            let noise = quant.noise().map(|u| u.narrow(k * mk, mk));
            let phi_ch = self.channel_context(k, &decoded)?;
            let (mu, sigma) = if self.net.cfg.checkerboard {
                let sp0 = self.spatial_context(k, None)?;
                let (mu_a, sigma_a) = self.params(k, sp0, phi_ch)?;
                let qa = quant.synthesis(self.net, yk, mu_a, noise.as_ref())?;
                let masked = g.mul_const(qa, anchors.clone())?;
                let sp = self.spatial_context(k, Some(masked))?;
                let (mu_n, sigma_n) = self.params(k, sp, phi_ch)?;
                let pick = |a: Var, n: Var| -> Result<Var> {
                    let a = g.mul_const(a, anchors.clone())?;
                    let n = g.mul_const(n, others.clone())?;
                    g.add(a, n)
                };
                (pick(mu_a, mu_n)?, pick(sigma_a, sigma_n)?)
            } else {
                self.params(k, None, phi_ch)?
            };
            let yq = quant.synthesis(self.net, yk, mu, noise.as_ref())?;
            let v = quant.rate_residual(self.net, yk, yq, mu, noise.as_ref())?;
            let lik = g.gauss_likelihood(v, sigma)?;
            let nl = g.neg_log2(lik, TRAIN_LIKELIHOOD_FLOOR);
            bits.push(g.sum(nl));
            decoded.push(yq);
        }
        let yhat = g.concat(&decoded)?;
        let mut total = bits[0];
        for &b in &bits[1..] {
            total = g.add(total, b)?;
        }
        Ok((yhat, total))
    }
}

/// How the latent is quantized inside a differentiable pass.
#[derive(Clone, Debug)]
pub enum Relaxation {
    /// Rate on `y + u`; synthesis and contexts on straight-through rounding.
    Noise(Tensor),
    /// Rate, synthesis and contexts all on `y + u` with `u` fixed: a smooth
    /// surrogate for gradient checking.
    Fixed(Tensor),
    /// Hard rounding everywhere, as the coder does.
    Round,
}

impl Relaxation {
    fn noise(&self) -> Option<&Tensor> {
        match self {
            Relaxation::Noise(u) | Relaxation::Fixed(u) => Some(u),
            Relaxation::Round => None,
        }
    }

    /// Quantized value fed to contexts and synthesis.
    fn synthesis(&self, net: &Net, y: Var, mu: Var, u: Option<&Tensor>) -> Result<Var> {
        match (self, u) {
            (Relaxation::Fixed(_), Some(u)) => net.g.shift(y, u),
            _ => net.g.round_centered(y, mu),
        }
    }

    /// Mean-removed value whose bin mass gives the rate.
    fn rate_residual(&self, net: &Net, y: Var, yq: Var, mu: Var, u: Option<&Tensor>) -> Result<Var> {
        match (self, u) {
            (Relaxation::Round, _) | (_, None) => {
                // the integer symbol itself, held constant
                let (yv, mv) = (net.g.value(y), net.g.value(mu));
                let s = yv.data().iter().zip(mv.data()).map(|(&a, &m)| f64::from(symbol(a, m))).collect();
                Ok(net.g.constant(Tensor::from_vec(yv.shape(), s)?))
            }
            (Relaxation::Noise(_), Some(u)) => {
                let noisy = net.g.shift(y, u)?;
                net.g.sub(noisy, mu)
            }
            (Relaxation::Fixed(_), Some(_)) => net.g.sub(yq, mu),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_examples() {
        let m = anchor_mask(2, 2);
        assert!(m.is_anchor(0, 0) && !m.is_anchor(0, 1) && !m.is_anchor(1, 0) && m.is_anchor(1, 1));
        assert!(anchor_mask(1, 1).is_anchor(0, 0));
        assert_eq!(anchor_mask(4, 6).anchors(), 12);
        for (h, w) in [(3, 5), (7, 7), (1, 4)] {
            let a = anchor_mask(h, w).anchors();
            assert!(a.abs_diff(h * w - a) <= 1);
        }
    }

    #[test]
    fn plan_partitions_channels() {
        let p = ChannelSlicePlan::new(192, 4).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p.group(3), 144..192);
        assert!(ChannelSlicePlan::new(10, 4).is_err());
    }
}
