//! Named parameter storage, initialization and the checkpoint file.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "VVCK" | version u8 (=1) | json_len u32 | json {"config": ModelConfig, "meta": {..}}
//! count u32 | count × ( name_len u16 | name | ndim u8 | dims u32×ndim | data f64×Π dims )
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VVCK";
pub const CHECKPOINT_VERSION: u8 = 1;
/// Lower bound of GDN `β` maintained by projection after each update.
pub const GDN_BETA_MIN: f64 = 1e-6;

/// Hidden widths of the per-channel factorized density.
pub const FACTORIZED_FILTERS: [usize; 3] = [3, 3, 3];

#[derive(Clone, Copy, Debug)]
enum Init {
    /// `U(−b, b)` with `b = 1/sqrt(fan_in)`.
    Uniform(usize),
    Const(f64),
    Identity(f64),
    /// Factorized-density bias, `U(−0.5, 0.5)`.
    HalfUniform,
}

/// Expected name, shape and initializer of every parameter for a config.
struct Layout {
    entries: Vec<(String, Vec<usize>, Init)>,
}

impl Layout {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let fan = cin * k * k;
        self.entries.push((format!("{name}.w"), vec![cout, cin, k, k], Init::Uniform(fan)));
        self.entries.push((format!("{name}.b"), vec![cout], Init::Uniform(fan)));
    }

    fn deconv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let fan = (cin * k * k / 4).max(1);
        self.entries.push((format!("{name}.w"), vec![cin, cout, k, k], Init::Uniform(fan)));
        self.entries.push((format!("{name}.b"), vec![cout], Init::Uniform(fan)));
    }

    fn gdn(&mut self, name: &str, c: usize) {
        self.entries.push((format!("{name}.beta"), vec![c], Init::Const(1.0)));
        self.entries.push((format!("{name}.gamma"), vec![c, c, 1, 1], Init::Identity(0.1)));
    }

    fn residual(&mut self, name: &str, c: usize) {
        self.conv(&format!("{name}.a"), c, c, 3);
        self.conv(&format!("{name}.b"), c, c, 3);
    }

    fn build(cfg: &ModelConfig) -> Self {
        let mut l = Layout { entries: Vec::new() };
        let (m, n, w) = (cfg.latent_channels, cfg.hyper_channels, cfg.width);
        let (ce, cd, cl, buf) = (cfg.enc_context, cfg.dec_context, cfg.inter_latent, cfg.buffer_channels);
        let (e_in, d_in) = if cfg.auxiliary { (ce, cd) } else { (0, 0) };

        if cfg.auxiliary {
            l.conv("fa.c1", buf, ce, 5);
            l.residual("fa.r1", ce);
            l.conv("fa.c2", ce, ce, 5);
            l.residual("fa.r2", ce);
            l.conv("fa.c3", ce, ce, 5);
            l.residual("fa.r3", ce);
            l.conv("fa.c4", ce, cl, 5);

            l.deconv("fs.t1", cl, cd, 5);
            l.residual("fs.r1", cd);
            l.deconv("fs.t2", cd, cd, 5);
            l.residual("fs.r2", cd);
            l.conv("fs.p1", cd, 4 * cd, 3);
            l.conv("fs.p2", cd, 4 * buf, 3);
        }

        l.conv("ga.c1", 1, w, 5);
        l.gdn("ga.gdn1", w);
        l.conv("ga.c2", w + e_in, w, 5);
        l.gdn("ga.gdn2", w);
        l.conv("ga.c3", w + e_in, w, 5);
        l.gdn("ga.gdn3", w);
        l.conv("ga.c4", w + e_in, m, 5);

        l.conv("ha.c1", m, n, 3);
        l.conv("ha.c2", n, n, 5);
        l.conv("ha.c3", n, n, 5);
        let mid = 3 * m / 2;
        l.deconv("hs.t1", n, m, 5);
        l.deconv("hs.t2", m, mid, 5);
        l.conv("hs.c3", mid, 2 * m, 3);

        let mut dims = vec![1];
        dims.extend(FACTORIZED_FILTERS);
        dims.push(1);
        let scale = 10f64.powf(1.0 / (dims.len() - 1) as f64);
        for i in 0..dims.len() - 1 {
            let h0 = (1.0 / scale / dims[i + 1] as f64).exp_m1().ln();
            l.entries.push((format!("fp.h{i}"), vec![n, dims[i + 1], dims[i]], Init::Const(h0)));
            l.entries.push((format!("fp.b{i}"), vec![n, dims[i + 1], 1], Init::HalfUniform));
            if i + 2 < dims.len() {
                l.entries.push((format!("fp.a{i}"), vec![n, dims[i + 1], 1], Init::Const(0.0)));
            }
        }

        l.deconv("gs.t1", m, w, 5);
        l.gdn("gs.igdn1", w);
        l.deconv("gs.t2", w + d_in, w, 5);
        l.gdn("gs.igdn2", w);
        l.deconv("gs.t3", w + d_in, w, 5);
        l.gdn("gs.igdn3", w);
        l.deconv("gs.t4", w, buf, 5);

        l.conv("fu.gate", 2 * buf, buf, 3);
        l.conv("fu.cand", 2 * buf, buf, 3);

        let cr = cfg.recon_width;
        l.conv("rc.c1", buf, cr, 3);
        l.conv("rc.c2", cr, cr, 3);
        l.conv("rc.c3", cr, 1, 3);

        let groups = cfg.effective_groups();
        let mk = cfg.group_channels();
        let ctx = cfg.context_width;
        for k in 0..groups {
            if cfg.checkerboard {
                l.conv(&format!("sp{k}"), mk, ctx, 5);
            }
            if cfg.channelwise && k > 0 {
                l.conv(&format!("ch{k}.c1"), k * mk, ctx, 3);
                l.conv(&format!("ch{k}.c2"), ctx, ctx, 3);
            }
            let hid = cfg.param_hidden;
            l.conv(&format!("ep{k}.c1"), cfg.param_inputs(), hid, 1);
            l.conv(&format!("ep{k}.c2"), hid, hid, 1);
            l.conv(&format!("ep{k}.c3"), hid, 2 * mk, 1);
        }
        l
    }
}

/// All learnable tensors of a model, keyed by layer path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Arc<Tensor>>,
}

impl ParamStore {
    /// Freshly initialized parameters for `cfg`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in Layout::build(cfg).entries {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Uniform(fan) => {
                    let b = 1.0 / (fan as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-b..b)).collect()
                }
                Init::Const(v) => vec![v; n],
                Init::Identity(v) => {
                    let c = shape[0];
                    (0..n).map(|i| if i / c == i % c { v } else { 0.0 }).collect()
                }
                Init::HalfUniform => (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            };
            tensors.insert(name, Arc::new(Tensor::from_vec(&shape, data)?));
        }
        Ok(ParamStore { tensors })
    }

    /// Same names and shapes, all zero.
    pub fn zeros_like(&self) -> Self {
        let tensors = self.tensors.iter().map(|(k, t)| (k.clone(), Arc::new(Tensor::zeros(t.shape())))).collect();
        ParamStore { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arc<Tensor>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn set(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), Arc::new(t));
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    /// Checks names/shapes against the layout of `cfg` and the GDN constraints.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let layout = Layout::build(cfg);
        if layout.entries.len() != self.tensors.len() {
            return Err(Error::Compatibility(format!(
                "expected {} tensors, found {}",
                layout.entries.len(),
                self.tensors.len()
            )));
        }
        for (name, shape, _) in &layout.entries {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::Compatibility(format!("missing tensor {name}")))?;
            if t.shape() != &shape[..] {
                return Err(Error::Compatibility(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            if !t.all_finite() {
                return Err(Error::Config(format!("tensor {name} holds non-finite values")));
            }
        }
        for (name, t) in &self.tensors {
            if name.ends_with(".beta") && t.data().iter().any(|&b| b <= 0.0) {
                return Err(Error::Config(format!("{name}: GDN beta must be positive")));
            }
            if name.ends_with(".gamma") && t.data().iter().any(|&g| g < 0.0) {
                return Err(Error::Config(format!("{name}: GDN gamma must be non-negative")));
            }
        }
        Ok(())
    }

    /// Project GDN parameters back into their feasible set.
    pub fn project(&mut self) {
        for (name, t) in self.tensors.iter_mut() {
            if name.ends_with(".beta") {
                Arc::make_mut(t).data_mut().iter_mut().for_each(|b| *b = b.max(GDN_BETA_MIN));
            } else if name.ends_with(".gamma") {
                Arc::make_mut(t).data_mut().iter_mut().for_each(|g| *g = g.max(0.0));
            }
        }
    }

    pub(crate) fn write_tensors(&self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.shape().len() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    pub(crate) fn read_tensors(r: &mut impl Read) -> Result<Self> {
        let count = read_u32(r)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u16(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::format("tensor name is not UTF-8"))?;
            let mut nd = [0u8; 1];
            r.read_exact(&mut nd)?;
            let shape: Vec<usize> = (0..nd[0]).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<_>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format("tensor too large"))?;
            let mut raw = Vec::new();
            r.by_ref().take(n as u64 * 8).read_to_end(&mut raw)?;
            if raw.len() != n * 8 {
                return Err(Error::format(format!("tensor {name} truncated")));
            }
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.insert(name, Arc::new(Tensor::from_vec(&shape, data)?));
        }
        Ok(ParamStore { tensors })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
}

/// Architecture plus weights, with free-form metadata (λ, distortion convention, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ParamStore) -> Self {
        Checkpoint { config, params, meta: BTreeMap::new() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&Header { config: self.config.clone(), meta: self.meta.clone() })
            .expect("checkpoint header serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.push(CHECKPOINT_VERSION);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        self.params.write_tensors(&mut buf);
        buf
    }

    pub fn from_reader(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic[..4] != CHECKPOINT_MAGIC {
            return Err(Error::format("missing checkpoint magic"));
        }
        if magic[4] != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {}", magic[4])));
        }
        let len = read_u32(&mut r)? as usize;
        let mut json = Vec::new();
        r.by_ref().take(len as u64).read_to_end(&mut json)?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
        header.config.validate()?;
        let params = ParamStore::read_tensors(&mut r)?;
        params.validate(&header.config)?;
        Ok(Checkpoint { config: header.config, params, meta: header.meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(BufReader::new(File::open(path)?))
    }

    /// Digest of the architecture and the weights (metadata excluded).
    pub fn model_id(&self) -> u64 {
        model_id(&self.config, &self.params)
    }
}

pub fn model_id(config: &ModelConfig, params: &ParamStore) -> u64 {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    let mut buf = Vec::new();
    params.write_tensors(&mut buf);
    h.update(&buf);
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let cfg = ModelConfig::debug();
        let mut ck = Checkpoint::new(cfg.clone(), ParamStore::init(&cfg, 7).unwrap());
        ck.meta.insert("lambda".into(), serde_json::json!(2048.0));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_reader(&bytes[..]).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.model_id(), ck.model_id());
    }

    #[test]
    fn ablations_change_layout_and_model_id() {
        let base = ModelConfig::debug();
        let p = ParamStore::init(&base, 1).unwrap();
        for variant in [base.clone().without_auxiliary(), base.clone().without_checkerboard()] {
            assert!(matches!(p.validate(&variant), Err(Error::Compatibility(_))));
            let q = ParamStore::init(&variant, 1).unwrap();
            assert_ne!(model_id(&variant, &q), model_id(&base, &p));
        }
        let aux_off = ParamStore::init(&base.clone().without_auxiliary(), 1).unwrap();
        assert!(aux_off.names().all(|n| !n.starts_with("fa.") && !n.starts_with("fs.")));
    }

    #[test]
    fn non_positive_beta_is_rejected_on_load() {
        let cfg = ModelConfig::debug();
        let mut p = ParamStore::init(&cfg, 3).unwrap();
        p.get_mut("ga.gdn1.beta").unwrap().data_mut()[0] = 0.0;
        let bytes = Checkpoint::new(cfg.clone(), p.clone()).to_bytes();
        assert!(matches!(Checkpoint::from_reader(&bytes[..]), Err(Error::Config(_))));
        p.project();
        p.validate(&cfg).unwrap();
    }

    #[test]
    fn truncated_checkpoint_fails_cleanly() {
        let cfg = ModelConfig::debug();
        let bytes = Checkpoint::new(cfg.clone(), ParamStore::init(&cfg, 3).unwrap()).to_bytes();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_reader(&bytes[..cut]).is_err());
        }
    }
}
