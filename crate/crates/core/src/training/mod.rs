//! Rate-distortion training with backpropagation through each slice group.

pub mod config;
pub mod forward;
pub mod optim;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::TrainConfig;
pub use forward::{forward_group, rd_loss, GroupForward, GroupTerms, QuantMode};
pub use optim::Adam;

use crate::analytics::psnr;
use crate::codec::{decode_volume, encode_volume, DecodeMode};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::par;
use crate::transforms::{Checkpoint, Model, ModelConfig, ParamStore, LATENT_STRIDE};
use crate::volume::{load_vvol, normalize, pad_to_multiple, NormalizedSlice, Volume};

/// Everything needed to resume training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam: Adam,
    pub step: u64,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

const STATE_MAGIC: &[u8; 4] = b"VVTS";

#[derive(Serialize, Deserialize)]
struct StateHeader {
    step: u64,
    epoch: usize,
    adam_t: u64,
    seed: [u8; 32],
    word_pos: String,
}

impl TrainState {
    pub fn new(params: ParamStore, seed: u64) -> Self {
        let adam = Adam::new(&params);
        TrainState { params, adam, step: 0, epoch: 0, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = StateHeader {
            step: self.step,
            epoch: self.epoch,
            adam_t: self.adam.t,
            seed: self.rng.get_seed(),
            word_pos: self.rng.get_word_pos().to_string(),
        };
        let json = serde_json::to_vec(&header).expect("state header serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(STATE_MAGIC);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for store in [&self.params, &self.adam.m, &self.adam.v] {
            store.write_tensors(&mut buf);
        }
        buf
    }

    pub fn from_reader(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != STATE_MAGIC {
            return Err(Error::format("missing training-state magic"));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut json = Vec::new();
        r.by_ref().take(u64::from(u32::from_le_bytes(len))).read_to_end(&mut json)?;
        let h: StateHeader =
            serde_json::from_slice(&json).map_err(|e| Error::format(format!("training state: {e}")))?;
        let params = ParamStore::read_tensors(&mut r)?;
        let m = ParamStore::read_tensors(&mut r)?;
        let v = ParamStore::read_tensors(&mut r)?;
        let mut rng = ChaCha8Rng::from_seed(h.seed);
        rng.set_word_pos(h.word_pos.parse().map_err(|_| Error::format("bad rng position"))?);
        let adam = Adam { t: h.adam_t, m, v, ..Adam::new(&params) };
        Ok(TrainState { params, adam, step: h.step, epoch: h.epoch, rng })
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
}

/// Metrics of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub bpp_est: f64,
    pub mse: f64,
    /// Before clipping.
    pub grad_norm: f64,
}

/// Slices of one training volume, padded to the latent stride.
#[derive(Clone, Debug)]
struct TrainVolume {
    slices: Vec<NormalizedSlice>,
}

/// Random contiguous sub-sequence with a 16-aligned square crop.
fn sample_group(vols: &[TrainVolume], stride: usize, crop: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let v = &vols[rng.gen_range(0..vols.len())];
    let (h, w) = (v.slices[0].height, v.slices[0].width);
    let len = stride.min(v.slices.len());
    let start = rng.gen_range(0..=v.slices.len() - len);
    let (ch, cw) = (crop.min(h), crop.min(w));
    let oy = LATENT_STRIDE * rng.gen_range(0..=(h - ch) / LATENT_STRIDE);
    let ox = LATENT_STRIDE * rng.gen_range(0..=(w - cw) / LATENT_STRIDE);
    v.slices[start..start + len]
        .iter()
        .map(|s| {
            let mut d = Vec::with_capacity(ch * cw);
            for y in oy..oy + ch {
                d.extend_from_slice(&s.values[y * w + ox..y * w + ox + cw]);
            }
            Tensor::from_vec(&[1, ch, cw], d).expect("crop shape")
        })
        .collect()
}

fn prepare(v: &Volume) -> TrainVolume {
    TrainVolume { slices: normalize(v).iter().map(|s| pad_to_multiple(s, LATENT_STRIDE).0).collect() }
}

/// One optimizer update over `groups` (gradients summed), each forwarded from a zero buffer.
pub fn train_step(
    model_cfg: &ModelConfig,
    lambda: f64,
    lr: f64,
    clip_norm: f64,
    groups: &[Vec<Tensor>],
    state: &mut TrainState,
) -> Result<StepMetrics> {
    let seeds: Vec<u64> = groups.iter().map(|_| state.rng.gen()).collect();
    let jobs: Vec<(&Vec<Tensor>, u64)> = groups.iter().zip(seeds).collect();
    let params = &state.params;
    let outs = par::map(&jobs, |(g, seed)| {
        forward_group(model_cfg, params, g, lambda, QuantMode::Noise, &mut ChaCha8Rng::seed_from_u64(*seed), true)
    });
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    let (mut loss, mut bpp, mut mse) = (0.0, 0.0, 0.0);
    let mut rates = Vec::new();
    for out in outs {
        let out = out?;
        loss += out.loss;
        bpp += out.terms.mean_bpp();
        mse += out.terms.mean_mse();
        rates.push((out.terms.bits_y.clone(), out.terms.bits_z.clone()));
        for (k, g) in out.grads {
            match grads.get_mut(&k) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    grads.insert(k, g);
                }
            }
        }
    }
    let grad_norm = grads.values().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::Numeric(format!(
            "training diverged at step {}: loss {loss}, grad norm {grad_norm}, per-slice rate bits (y, z) {:?}",
            state.step, rates
        )));
    }
    if clip_norm > 0.0 && grad_norm > clip_norm {
        let k = clip_norm / grad_norm;
        grads.values_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= k));
    }
    state.adam.update(&mut state.params, &grads, lr);
    state.step += 1;
    let n = groups.len() as f64;
    Ok(StepMetrics { step: state.step, loss, bpp_est: bpp / n, mse: mse / n, grad_norm })
}

/// Real-coder evaluation of a model on one volume.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    /// Coded bits per pixel.
    pub bpp_real: f64,
    /// Noise-relaxed rate estimate in bits per pixel.
    pub bpp_est: f64,
    pub psnr: f64,
    /// MSE on `[0, 1]` samples of the decoded volume.
    pub mse: f64,
    /// Mean RD cost per slice with the real rate.
    pub loss: f64,
}

/// Encode, decode and measure; the rate estimate uses a fixed noise seed.
pub fn evaluate(model: &Model, v: &Volume, gop_stride: usize, lambda: f64) -> Result<EvalReport> {
    let coded = encode_volume(model, v, gop_stride)?;
    let decoded = decode_volume(model, &coded.container, DecodeMode::Pixels)?;
    let out = decoded.volume.expect("pixel mode yields a volume");
    let max = f64::from(v.max_value());
    let mse = v.samples().iter().zip(out.samples()).map(|(&a, &b)| (f64::from(a) - f64::from(b)) / max).map(|d| d * d).sum::<f64>()
        / v.samples().len() as f64;
    let p = psnr(v.samples(), out.samples(), v.max_value())?;
    let bpp_real = coded.bpp();
    let tv = prepare(v);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut est_bits = 0.0;
    for start in (0..tv.slices.len()).step_by(gop_stride) {
        let end = (start + gop_stride).min(tv.slices.len());
        let xs: Vec<Tensor> = tv.slices[start..end]
            .iter()
            .map(|s| Tensor::from_vec(&[1, s.height, s.width], s.values.clone()).expect("slice shape"))
            .collect();
        let f = forward_group(&model.config, &model.params, &xs, lambda, QuantMode::Noise, &mut rng, false)?;
        est_bits += f.terms.bits_y.iter().chain(&f.terms.bits_z).sum::<f64>();
    }
    let bpp_est = est_bits / (f64::from(coded.container.header.width) * f64::from(coded.container.header.height) * v.depth() as f64);
    Ok(EvalReport { bpp_real, bpp_est, psnr: p, mse, loss: bpp_real + lambda * mse })
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub bpp_est: f64,
    pub bpp_real: Option<f64>,
    pub psnr: Option<f64>,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "step,loss,bpp_est,bpp_real,psnr";

    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!("{},{:.6},{:.6},{},{}", self.step, self.loss, self.bpp_est, opt(self.bpp_real), opt(self.psnr))
    }
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Checkpoint with the lowest evaluated RD cost.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<LogRow>,
    pub final_eval: EvalReport,
    pub state: TrainState,
}

/// A training run in progress.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model_cfg: ModelConfig,
    pub state: TrainState,
    data: Vec<TrainVolume>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, params: Option<ParamStore>, volumes: &[Volume]) -> Result<Self> {
        cfg.validate()?;
        let model_cfg = cfg.model_config()?;
        if volumes.is_empty() {
            return Err(Error::config("training dataset is empty"));
        }
        let params = match params {
            Some(p) => {
                p.validate(&model_cfg)?;
                p
            }
            None => ParamStore::init(&model_cfg, cfg.seed)?,
        };
        let state = TrainState::new(params, cfg.seed);
        Ok(Trainer { data: volumes.iter().map(prepare).collect(), cfg, model_cfg, state })
    }

    pub fn resume(cfg: TrainConfig, state: TrainState, volumes: &[Volume]) -> Result<Self> {
        let mut t = Self::new(cfg, Some(state.params.clone()), volumes)?;
        t.state = state;
        Ok(t)
    }

    /// Optimizer steps per epoch.
    pub fn steps_per_epoch(&self) -> usize {
        self.cfg.steps_per_epoch.unwrap_or_else(|| {
            let groups: usize = self.data.iter().map(|v| v.slices.len().div_ceil(self.cfg.gop_stride)).sum();
            groups.div_ceil(self.cfg.batch).max(1)
        })
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let groups: Vec<Vec<Tensor>> = (0..self.cfg.batch)
            .map(|_| sample_group(&self.data, self.cfg.gop_stride, self.cfg.crop, &mut self.state.rng))
            .collect();
        let lr = self.cfg.lr_at(self.state.epoch);
        train_step(&self.model_cfg, self.cfg.lambda, lr, self.cfg.clip_norm, &groups, &mut self.state)
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(self.model_cfg.clone(), self.state.params.clone())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.model_cfg.clone(), self.state.params.clone());
        ck.meta.insert("lambda".into(), serde_json::json!(self.cfg.lambda));
        ck.meta.insert("distortion".into(), serde_json::json!("mse on [0,1] samples; rate in bits per pixel"));
        ck.meta.insert("step".into(), serde_json::json!(self.state.step));
        ck.meta.insert("epoch".into(), serde_json::json!(self.state.epoch));
        ck
    }

    /// Run the remaining epochs, evaluating on `eval` and keeping the best
    /// checkpoint. Artifacts go to `out_dir` when given.
    pub fn run(&mut self, eval: &Volume, out_dir: Option<&Path>) -> Result<TrainReport> {
        if let Some(d) = out_dir {
            fs::create_dir_all(d)?;
        }
        let mut log = Vec::new();
        let mut best: Option<(f64, Checkpoint)> = None;
        let mut last_eval = None;
        let per_epoch = self.steps_per_epoch();
        while self.state.epoch < self.cfg.epochs {
            let mut last = None;
            for _ in 0..per_epoch {
                last = Some(self.step()?);
            }
            self.state.epoch += 1;
            let m = last.expect("at least one step per epoch");
            let mut row = LogRow { step: m.step, loss: m.loss, bpp_est: m.bpp_est, bpp_real: None, psnr: None };
            let due = self.cfg.eval_every > 0 && self.state.epoch % self.cfg.eval_every == 0;
            if due || self.state.epoch == self.cfg.epochs {
                let r = evaluate(&self.model()?, eval, self.cfg.gop_stride, self.cfg.lambda)?;
                row.bpp_real = Some(r.bpp_real);
                row.psnr = Some(r.psnr);
                if best.as_ref().is_none_or(|(l, _)| r.loss < *l) {
                    best = Some((r.loss, self.checkpoint()));
                }
                last_eval = Some(r);
            }
            log.push(row);
            if let Some(d) = out_dir {
                write_log(&d.join("log.csv"), &log)?;
                self.checkpoint().save(d.join("last.ckpt"))?;
                if let Some((_, b)) = &best {
                    b.save(d.join("best.ckpt"))?;
                }
                self.state.save(d.join("state.bin"))?;
            }
        }
        let final_eval = match last_eval {
            Some(r) => r,
            None => evaluate(&self.model()?, eval, self.cfg.gop_stride, self.cfg.lambda)?,
        };
        let last = self.checkpoint();
        let best = best.map(|(_, c)| c).unwrap_or_else(|| last.clone());
        Ok(TrainReport { best, last, log, final_eval, state: self.state.clone() })
    }
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", LogRow::CSV_HEADER)?;
    for r in rows {
        writeln!(w, "{}", r.csv())?;
    }
    w.flush()?;
    Ok(())
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<Volume>> {
    paths.iter().map(load_vvol).collect()
}

/// Train from a config file's description, writing artifacts to `out_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainReport> {
    let volumes = load_all(&cfg.train)?;
    if volumes.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    let eval = match &cfg.eval {
        Some(p) => load_vvol(p)?,
        None => volumes[0].clone(),
    };
    let init = match &cfg.init {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    match init {
        Some(ck) => finetune_on(&ck, cfg, &volumes, &eval),
        None => Trainer::new(cfg.clone(), None, &volumes)?.run(&eval, Some(&cfg.out_dir)),
    }
}

/// Continue from `ck`'s weights with a fresh optimizer.
pub fn finetune(ck: &Checkpoint, cfg: &TrainConfig) -> Result<TrainReport> {
    let volumes = load_all(&cfg.train)?;
    if volumes.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    let eval = match &cfg.eval {
        Some(p) => load_vvol(p)?,
        None => volumes[0].clone(),
    };
    finetune_on(ck, cfg, &volumes, &eval)
}

fn finetune_on(ck: &Checkpoint, cfg: &TrainConfig, volumes: &[Volume], eval: &Volume) -> Result<TrainReport> {
    let want = cfg.model_config()?;
    if ck.config != want {
        return Err(Error::Compatibility("checkpoint architecture differs from the training config".into()));
    }
    Trainer::new(cfg.clone(), Some(ck.params.clone()), volumes)?.run(eval, Some(&cfg.out_dir))
}

/// Analytic vs central-difference derivatives of the smooth RD loss for a
/// sample of coordinates. Returns `(name, index, analytic, numeric)` rows.
pub fn gradient_check(
    cfg: &ModelConfig,
    params: &ParamStore,
    slices: &[Tensor],
    lambda: f64,
    per_tensor: usize,
    step: f64,
    seed: u64,
) -> Result<Vec<(String, usize, f64, f64)>> {
    let noise_seed = seed ^ 0x9e37_79b9_7f4a_7c15;
    let loss_at = |p: &ParamStore| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        Ok(forward_group(cfg, p, slices, lambda, QuantMode::Smooth, &mut rng, false)?.loss)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let base = forward_group(cfg, params, slices, lambda, QuantMode::Smooth, &mut rng, true)?;
    let mut pick = ChaCha8Rng::seed_from_u64(seed);
    let mut targets = Vec::new();
    for (name, t) in params.iter() {
        for _ in 0..per_tensor.min(t.len()) {
            targets.push((name.clone(), pick.gen_range(0..t.len())));
        }
    }
    let rows = par::map(&targets, |(name, i)| -> Result<(String, usize, f64, f64)> {
        let mut p = params.clone();
        let orig = p.get(name).expect("sampled from params").data()[*i];
        let mut at = |delta: f64| -> Result<f64> {
            p.get_mut(name).expect("present").data_mut()[*i] = orig + delta;
            loss_at(&p)
        };
        // Fourth-order central stencil.
        let numeric = (8.0 * (at(step)? - at(-step)?) - (at(2.0 * step)? - at(-2.0 * step)?)) / (12.0 * step);
        let analytic = base.grads.get(name).map_or(0.0, |g| g.data()[*i]);
        Ok((name.clone(), *i, analytic, numeric))
    });
    rows.into_iter().collect()
}
