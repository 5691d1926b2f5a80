//! Layer recipes for every sub-network, built on a [`Graph`].

use std::cell::RefCell;
use std::collections::BTreeMap;

use super::config::ModelConfig;
use super::params::{ParamStore, FACTORIZED_FILTERS};
use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Unary, Var};

/// Multi-scale inter-slice contexts from the previous buffer.
#[derive(Clone, Copy, Debug)]
pub struct InterContext {
    pub e1: Var,
    pub e2: Var,
    pub e3: Var,
    pub lf: Var,
}

/// Decoder-side inter-slice contexts.
#[derive(Clone, Copy, Debug)]
pub struct InterSynthesis {
    pub d1: Var,
    pub d2: Var,
    pub mf: Var,
}

/// Parameters bound into one graph. Each parameter becomes a single leaf,
/// created on first use, so gradients can be collected by name afterwards.
pub struct Net<'a> {
    pub g: &'a Graph,
    pub cfg: &'a ModelConfig,
    params: &'a ParamStore,
    leaves: RefCell<BTreeMap<String, Var>>,
}

impl<'a> Net<'a> {
    pub fn new(g: &'a Graph, cfg: &'a ModelConfig, params: &'a ParamStore) -> Self {
        Net { g, cfg, params, leaves: RefCell::new(BTreeMap::new()) }
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(&v) = self.leaves.borrow().get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Compatibility(format!("missing parameter {name}")))?;
        let v = self.g.param_shared(t.clone());
        self.leaves.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter leaves created so far, by name.
    pub fn leaves(&self) -> BTreeMap<String, Var> {
        self.leaves.borrow().clone()
    }

    /// Same-padded convolution with the kernel size taken from the weight.
    pub fn conv(&self, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        let k = self.g.shape(w)[2];
        self.g.conv2d(x, w, Some(b), stride, k / 2)
    }

    /// Exact ×2 transposed convolution.
    pub fn deconv(&self, name: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        let k = self.g.shape(w)[2];
        self.g.conv_transpose2d(x, w, Some(b), 2, k / 2, 1)
    }

    /// GDN (`inverse = false`) or IGDN.
    pub fn gdn(&self, name: &str, x: Var, inverse: bool) -> Result<Var> {
        let beta = self.param(&format!("{name}.beta"))?;
        let gamma = self.param(&format!("{name}.gamma"))?;
        let sq = self.g.unary(x, Unary::Square);
        let norm = self.g.conv2d(sq, gamma, Some(beta), 1, 0)?;
        let f = self.g.unary(norm, if inverse { Unary::Sqrt } else { Unary::Rsqrt });
        self.g.mul(x, f)
    }

    fn residual(&self, name: &str, x: Var) -> Result<Var> {
        let h = self.conv(&format!("{name}.a"), x, 1)?;
        let h = self.g.gelu(h);
        let h = self.conv(&format!("{name}.b"), h, 1)?;
        self.g.add(x, h)
    }

    fn down_step(&self, conv: &str, res: &str, x: Var) -> Result<Var> {
        let h = self.conv(conv, x, 2)?;
        let h = self.g.gelu(h);
        self.residual(res, h)
    }

    fn up_step(&self, deconv: &str, res: &str, x: Var) -> Result<Var> {
        let h = self.deconv(deconv, x)?;
        let h = self.g.gelu(h);
        self.residual(res, h)
    }

    fn check_channels(&self, what: &str, x: Var, c: usize) -> Result<()> {
        let s = self.g.shape(x);
        if s.len() != 3 || s[0] != c {
            return Err(Error::shape(format!("{what}: expected {c} channels, got {:?}", s)));
        }
        Ok(())
    }

    fn check_match(&self, what: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.g.shape(a), self.g.shape(b));
        if sa[1..] != sb[1..] {
            return Err(Error::shape(format!("{what}: {:?} does not match {:?}", sb, sa)));
        }
        Ok(())
    }

    /// Inter-slice analysis of the previous buffer.
    pub fn f_a(&self, prev: Var) -> Result<InterContext> {
        self.check_channels("inter-slice buffer", prev, self.cfg.buffer_channels)?;
        let s = self.g.shape(prev);
        if s[1] % 16 != 0 || s[2] % 16 != 0 {
            return Err(Error::shape(format!("buffer {:?} is not a multiple of 16", s)));
        }
        let e1 = self.down_step("fa.c1", "fa.r1", prev)?;
        let e2 = self.down_step("fa.c2", "fa.r2", e1)?;
        let e3 = self.down_step("fa.c3", "fa.r3", e2)?;
        let lf = self.conv("fa.c4", e3, 2)?;
        Ok(InterContext { e1, e2, e3, lf })
    }

    /// Current-slice analysis; `ctx` injects `E1..E3` after stages 1–3.
    pub fn g_a(&self, x: Var, ctx: Option<&InterContext>) -> Result<Var> {
        self.check_channels("slice", x, 1)?;
        let mut h = x;
        for stage in 1..=3 {
            h = self.conv(&format!("ga.c{stage}"), h, 2)?;
            h = self.gdn(&format!("ga.gdn{stage}"), h, false)?;
            if let Some(c) = ctx {
                let e = [c.e1, c.e2, c.e3][stage - 1];
                self.check_match("encoder context", h, e)?;
                h = self.g.concat(&[h, e])?;
            }
        }
        self.conv("ga.c4", h, 2)
    }

    pub fn h_a(&self, y: Var) -> Result<Var> {
        self.check_channels("latent", y, self.cfg.latent_channels)?;
        let h = self.conv("ha.c1", y, 1)?;
        let h = self.g.gelu(h);
        let h = self.conv("ha.c2", h, 2)?;
        let h = self.g.gelu(h);
        self.conv("ha.c3", h, 2)
    }

    /// Hyper synthesis to `2M` channels at the latent size `(lh, lw)`.
    pub fn h_s(&self, z: Var, lh: usize, lw: usize) -> Result<Var> {
        self.check_channels("hyper-latent", z, self.cfg.hyper_channels)?;
        let h = self.deconv("hs.t1", z)?;
        let h = self.g.gelu(h);
        let h = self.deconv("hs.t2", h)?;
        let h = self.g.gelu(h);
        let s = self.g.shape(h);
        if s[1] < lh || s[2] < lw {
            return Err(Error::shape(format!("hyper-latent too small for {lh}x{lw} latents")));
        }
        let h = self.g.crop(h, lh, lw)?;
        self.conv("hs.c3", h, 1)
    }

    /// Inter-slice synthesis from the latent-resolution feature.
    pub fn f_s(&self, lf: Var) -> Result<InterSynthesis> {
        self.check_channels("inter-slice latent", lf, self.cfg.inter_latent)?;
        let d1 = self.up_step("fs.t1", "fs.r1", lf)?;
        let d2 = self.up_step("fs.t2", "fs.r2", d1)?;
        let h = self.conv("fs.p1", d2, 1)?;
        let h = self.g.pixel_shuffle(h, 2)?;
        let h = self.g.gelu(h);
        let h = self.conv("fs.p2", h, 1)?;
        let mf = self.g.pixel_shuffle(h, 2)?;
        Ok(InterSynthesis { d1, d2, mf })
    }

    /// Current-slice synthesis to the machine-vision feature `M_x`.
    pub fn g_s(&self, yhat: Var, syn: Option<&InterSynthesis>) -> Result<Var> {
        self.check_channels("latent", yhat, self.cfg.latent_channels)?;
        let mut h = yhat;
        for stage in 1..=3 {
            h = self.deconv(&format!("gs.t{stage}"), h)?;
            h = self.gdn(&format!("gs.igdn{stage}"), h, true)?;
            if let (Some(s), true) = (syn, stage < 3) {
                let d = [s.d1, s.d2][stage - 1];
                self.check_match("decoder context", h, d)?;
                h = self.g.concat(&[h, d])?;
            }
        }
        self.deconv("gs.t4", h)
    }

    /// Gated fusion of the current-slice and inter-slice features into `F_t`.
    pub fn fuse(&self, mx: Var, mf: Var) -> Result<Var> {
        let (sx, sf) = (self.g.shape(mx), self.g.shape(mf));
        if sx != sf || sx[0] != self.cfg.buffer_channels {
            return Err(Error::shape(format!("fusion inputs {:?} and {:?}", sx, sf)));
        }
        let cat = self.g.concat(&[mx, mf])?;
        let gate = self.conv("fu.gate", cat, 1)?;
        let gate = self.g.sigmoid(gate);
        let cand = self.conv("fu.cand", cat, 1)?;
        let cand = self.g.tanh(cand);
        self.g.mul(gate, cand)
    }

    pub fn reconstruct(&self, f: Var) -> Result<Var> {
        self.check_channels("inter-slice buffer", f, self.cfg.buffer_channels)?;
        let h = self.conv("rc.c1", f, 1)?;
        let h = self.g.gelu(h);
        let h = self.conv("rc.c2", h, 1)?;
        let h = self.g.gelu(h);
        self.conv("rc.c3", h, 1)
    }

    /// Logit of the learned per-channel CDF, evaluated elementwise on `v: [N, h, w]`.
    pub fn prior_logits(&self, v: Var) -> Result<Var> {
        let s = self.g.shape(v);
        self.check_channels("hyper-latent", v, self.cfg.hyper_channels)?;
        let mut h = self.g.reshape(v, &[s[0], 1, s[1] * s[2]])?;
        for i in 0..=FACTORIZED_FILTERS.len() {
            let m = self.param(&format!("fp.h{i}"))?;
            let m = self.g.softplus(m);
            h = self.g.chan_matmul(m, h)?;
            let b = self.param(&format!("fp.b{i}"))?;
            h = self.g.add_bias(h, b)?;
            if i < FACTORIZED_FILTERS.len() {
                let a = self.param(&format!("fp.a{i}"))?;
                let ta = self.g.tanh(a);
                let th = self.g.tanh(h);
                let t = self.g.mul_bias(th, ta)?;
                h = self.g.add(h, t)?;
            }
        }
        self.g.reshape(h, &s)
    }

    /// Bin mass `C(v + ½) − C(v − ½)` of the factorized prior.
    pub fn prior_likelihood(&self, v: Var) -> Result<Var> {
        let s = self.g.shape(v);
        let upper = self.g.shift(v, &Tensor::full(&s, 0.5))?;
        let lower = self.g.shift(v, &Tensor::full(&s, -0.5))?;
        let lu = self.prior_logits(upper)?;
        let ll = self.prior_logits(lower)?;
        let cu = self.g.sigmoid(lu);
        let cl = self.g.sigmoid(ll);
        self.g.sub(cu, cl)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::config::Geometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn gdn_single(beta: f64, gamma: f64, x: f64, inverse: bool) -> f64 {
        let mut cfg = ModelConfig::debug();
        cfg.width = 1;
        let mut p = ParamStore::init(&cfg, 0).unwrap();
        p.set("ga.gdn1.beta", Tensor::full(&[1], beta));
        p.set("ga.gdn1.gamma", Tensor::full(&[1, 1, 1, 1], gamma));
        let g = Graph::inference();
        let net = Net::new(&g, &cfg, &p);
        let xv = g.constant(Tensor::full(&[1, 1, 1], x));
        let y = net.gdn("ga.gdn1", xv, inverse).unwrap();
        g.value(y).data()[0]
    }

    #[test]
    fn gdn_examples() {
        assert_eq!(gdn_single(0.7, 0.3, 0.0, false), 0.0);
        assert_eq!(gdn_single(1.0, 0.0, 0.37, false), 0.37);
        assert!((gdn_single(1.0, 1.0, 1.0, false) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((gdn_single(1.0, 1.0, 1.0, true) - std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    fn shapes_for(cfg: &ModelConfig, h: usize, w: usize) {
        let geo = Geometry::new(h, w).unwrap();
        let p = ParamStore::init(cfg, 5).unwrap();
        let g = Graph::inference();
        let net = Net::new(&g, cfg, &p);
        let buf = g.constant(random(&[cfg.buffer_channels, h, w], 1));
        let x = g.constant(random(&[1, h, w], 2).map(|v| v.abs()));
        let (lh, lw) = geo.latent();
        let ctx = if cfg.auxiliary { Some(net.f_a(buf).unwrap()) } else { None };
        if let Some(c) = &ctx {
            let ce = cfg.enc_context;
            assert_eq!(g.shape(c.e1), [ce, h / 2, w / 2]);
            assert_eq!(g.shape(c.e2), [ce, h / 4, w / 4]);
            assert_eq!(g.shape(c.e3), [ce, h / 8, w / 8]);
            assert_eq!(g.shape(c.lf), [cfg.inter_latent, lh, lw]);
        }
        let y = net.g_a(x, ctx.as_ref()).unwrap();
        assert_eq!(g.shape(y), [cfg.latent_channels, lh, lw]);
        let z = net.h_a(y).unwrap();
        let (hh, hw) = geo.hyper();
        assert_eq!(g.shape(z), [cfg.hyper_channels, hh, hw]);
        let psi = net.h_s(z, lh, lw).unwrap();
        assert_eq!(g.shape(psi), [2 * cfg.latent_channels, lh, lw]);
        let syn = ctx.as_ref().map(|c| net.f_s(c.lf).unwrap());
        if let Some(s) = &syn {
            assert_eq!(g.shape(s.d1), [cfg.dec_context, h / 8, w / 8]);
            assert_eq!(g.shape(s.d2), [cfg.dec_context, h / 4, w / 4]);
            assert_eq!(g.shape(s.mf), [cfg.buffer_channels, h, w]);
        }
        let mx = net.g_s(y, syn.as_ref()).unwrap();
        assert_eq!(g.shape(mx), [cfg.buffer_channels, h, w]);
        let mf = syn.map(|s| s.mf).unwrap_or_else(|| g.constant(Tensor::zeros(&[cfg.buffer_channels, h, w])));
        let f = net.fuse(mx, mf).unwrap();
        assert!(g.value(f).data().iter().all(|v| v.abs() < 1.0));
        let xr = net.reconstruct(f).unwrap();
        assert_eq!(g.shape(xr), [1, h, w]);
        for v in [y, z, psi, mx, f, xr] {
            assert!(g.value(v).all_finite());
        }
        let lik = net.prior_likelihood(z).unwrap();
        assert!(g.value(lik).data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn shape_algebra_across_sizes() {
        for &(h, w) in &[(32, 32), (48, 64), (64, 64), (96, 48)] {
            shapes_for(&ModelConfig::debug(), h, w);
            shapes_for(&ModelConfig::debug().without_auxiliary(), h, w);
        }
    }

    #[test]
    fn desk_shapes_at_64() {
        shapes_for(&ModelConfig::desk(), 64, 64);
    }

    #[test]
    fn transforms_are_deterministic() {
        let cfg = ModelConfig::debug();
        let p = ParamStore::init(&cfg, 9).unwrap();
        let run = || {
            let g = Graph::inference();
            let net = Net::new(&g, &cfg, &p);
            let buf = g.constant(random(&[cfg.buffer_channels, 32, 32], 3));
            let c = net.f_a(buf).unwrap();
            let x = g.constant(random(&[1, 32, 32], 4));
            let y = net.g_a(x, Some(&c)).unwrap();
            let s = net.f_s(c.lf).unwrap();
            let mx = net.g_s(y, Some(&s)).unwrap();
            g.value(mx).bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_fusion_inputs_with_zero_bias_give_zero_buffer() {
        let cfg = ModelConfig::debug();
        let mut p = ParamStore::init(&cfg, 2).unwrap();
        let c = cfg.buffer_channels;
        p.set("fu.cand.b", Tensor::zeros(&[c]));
        let g = Graph::inference();
        let net = Net::new(&g, &cfg, &p);
        let z = g.constant(Tensor::zeros(&[c, 16, 16]));
        let f = net.fuse(z, z).unwrap();
        assert_eq!(g.value(f).max_abs(), 0.0);
    }

    #[test]
    fn mismatched_context_is_a_shape_error() {
        let cfg = ModelConfig::debug();
        let p = ParamStore::init(&cfg, 2).unwrap();
        let g = Graph::inference();
        let net = Net::new(&g, &cfg, &p);
        let buf = g.constant(random(&[cfg.buffer_channels, 32, 32], 3));
        let c = net.f_a(buf).unwrap();
        let x = g.constant(random(&[1, 64, 64], 4));
        assert!(matches!(net.g_a(x, Some(&c)), Err(Error::Shape(_))));
        let bad = g.constant(random(&[3, 32, 32], 3));
        assert!(matches!(net.f_a(bad), Err(Error::Shape(_))));
    }

    #[test]
    fn prior_cdf_is_monotone() {
        let cfg = ModelConfig::debug();
        let p = ParamStore::init(&cfg, 4).unwrap();
        let g = Graph::inference();
        let net = Net::new(&g, &cfg, &p);
        let n = cfg.hyper_channels;
        let grid: Vec<f64> = (0..n).flat_map(|_| (0..41).map(|i| -10.0 + 0.5 * i as f64)).collect();
        let v = g.constant(Tensor::from_vec(&[n, 1, 41], grid).unwrap());
        let l = g.value(net.prior_logits(v).unwrap());
        for c in 0..n {
            let row = l.plane(c);
            assert!(row.windows(2).all(|w| w[1] > w[0]));
        }
    }
}
