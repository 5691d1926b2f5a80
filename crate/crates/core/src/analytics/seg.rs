//! Segmentation on decoded features or pixels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{dice, dice_per_slice, hd95, hd95_empty_sentinel, LabelVolume, Spacing};
use crate::codec::{decode_volume, Container, DecodeMode};
use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};
use crate::par;
use crate::training::Adam;
use crate::transforms::{Model, ParamStore};
use crate::volume::{normalize, Volume};

/// Anything mapping a `[C, H, W]` feature map to `[classes, H, W]` logits.
pub trait SegmentationHead: Sync {
    fn in_channels(&self) -> usize;
    fn classes(&self) -> usize;
    fn logits(&self, features: &Tensor) -> Result<Tensor>;
}

/// Per-slice `M_x` of every slice in `container`, without pixel reconstruction.
pub fn extract_features(container: &Container, model: &Model) -> Result<Vec<Tensor>> {
    Ok(decode_volume(model, container, DecodeMode::Features)?.features)
}

/// Slices as single-channel `[1, H, W]` maps in `[0, 1]`.
pub fn pixel_features(v: &Volume) -> Vec<Tensor> {
    normalize(v)
        .into_iter()
        .map(|s| Tensor::from_vec(&[1, s.height, s.width], s.values).expect("slice shape"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentationReport {
    pub dice: Vec<f64>,
    pub hd95: Vec<f64>,
    /// Means over the foreground classes (all classes if there is only one).
    pub mean_dice: f64,
    pub mean_hd95: f64,
    /// What an HD95 entry holds when exactly one mask is empty.
    pub hd95_empty_sentinel: f64,
    pub per_slice_dice: bool,
    #[serde(skip)]
    pub prediction: LabelVolume,
}

fn foreground_mean(v: &[f64]) -> f64 {
    let fg = if v.len() > 1 { &v[1..] } else { v };
    fg.iter().sum::<f64>() / fg.len() as f64
}

/// Argmax the head's logits per voxel and score against `gt`.
pub fn evaluate_segmentation(
    features: &[Tensor],
    head: &dyn SegmentationHead,
    gt: &LabelVolume,
    spacing: Spacing,
    per_slice_dice: bool,
) -> Result<SegmentationReport> {
    if features.len() != gt.depth() {
        return Err(Error::shape(format!("{} feature slices for depth {}", features.len(), gt.depth())));
    }
    if head.classes() != gt.classes() {
        return Err(Error::config(format!("head predicts {} classes, labels have {}", head.classes(), gt.classes())));
    }
    for f in features {
        let (c, h, w) = f.chw();
        if c != head.in_channels() {
            return Err(Error::config(format!("features have {c} channels, head expects {}", head.in_channels())));
        }
        if (h, w) != (gt.height(), gt.width()) {
            return Err(Error::shape(format!("{h}x{w} features for {}x{} labels", gt.height(), gt.width())));
        }
    }
    let slices = par::map(features, |f| head.logits(f).map(|l| argmax(&l)));
    let mut labels = Vec::with_capacity(gt.labels().len());
    for s in slices {
        labels.extend(s?);
    }
    let pred = LabelVolume::new(gt.width(), gt.height(), gt.depth(), gt.classes(), labels)?;
    let classes: Vec<usize> = (0..gt.classes()).collect();
    let dice_v = classes
        .iter()
        .map(|&c| if per_slice_dice { dice_per_slice(&pred, gt, c) } else { dice(&pred, gt, c) })
        .collect::<Result<Vec<_>>>()?;
    let hd = par::map(&classes, |&c| hd95(&pred, gt, c, spacing)).into_iter().collect::<Result<Vec<_>>>()?;
    Ok(SegmentationReport {
        mean_dice: foreground_mean(&dice_v),
        mean_hd95: foreground_mean(&hd),
        dice: dice_v,
        hd95: hd,
        hd95_empty_sentinel: hd95_empty_sentinel([gt.depth(), gt.height(), gt.width()], spacing),
        per_slice_dice,
        prediction: pred,
    })
}

fn argmax(logits: &Tensor) -> Vec<u8> {
    let (k, h, w) = logits.chw();
    let p = h * w;
    let d = logits.data();
    (0..p)
        .map(|i| (0..k).max_by(|&a, &b| d[a * p + i].total_cmp(&d[b * p + i])).unwrap_or(0) as u8)
        .collect()
}

/// Small U-shaped encoder-decoder: two full-resolution convolutions, one
/// half-resolution stage and a skip connection.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceHead {
    pub in_channels: usize,
    pub classes: usize,
    pub width: usize,
    /// Includes the fixed input standardization (`norm.mean`, `norm.std`).
    pub params: ParamStore,
}

const HEAD_MAGIC: &[u8; 4] = b"VVSH";

#[derive(Serialize, Deserialize)]
struct HeadHeader {
    in_channels: usize,
    classes: usize,
    width: usize,
}

impl ReferenceHead {
    pub fn new(in_channels: usize, classes: usize, width: usize, seed: u64) -> Result<Self> {
        if in_channels == 0 || classes < 2 || width == 0 {
            return Err(Error::config("segmentation head needs ≥1 input channel, ≥2 classes and width ≥1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::default();
        let c = width;
        let mut conv = |name: &str, shape: [usize; 4], fan: usize| {
            let bound = (1.0 / fan as f64).sqrt();
            let n: usize = shape.iter().product();
            let w = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            p.set(&format!("{name}.w"), Tensor::from_vec(&shape, w).expect("sized"));
            let bias_len = if name == "up" { shape[1] } else { shape[0] };
            p.set(&format!("{name}.b"), Tensor::zeros(&[bias_len]));
        };
        conv("e1", [c, in_channels, 3, 3], in_channels * 9);
        conv("e2", [2 * c, c, 3, 3], c * 9);
        conv("e3", [2 * c, 2 * c, 3, 3], 2 * c * 9);
        conv("up", [2 * c, c, 5, 5], 2 * c * 25);
        conv("d1", [c, 2 * c, 3, 3], 2 * c * 9);
        conv("out", [classes, c, 1, 1], c);
        p.set("norm.mean", Tensor::zeros(&[in_channels]));
        p.set("norm.std", Tensor::full(&[in_channels], 1.0));
        Ok(ReferenceHead { in_channels, classes, width, params: p })
    }

    /// Set the input standardization from per-channel statistics of `data`.
    pub fn fit_normalization(&mut self, data: &[Tensor]) {
        let c = self.in_channels;
        let (mut s, mut s2, mut n) = (vec![0.0; c], vec![0.0; c], 0usize);
        for t in data {
            for (ch, (a, b)) in s.iter_mut().zip(s2.iter_mut()).enumerate() {
                let plane = t.plane(ch);
                *a += plane.iter().sum::<f64>();
                *b += plane.iter().map(|v| v * v).sum::<f64>();
            }
            n += t.chw().1 * t.chw().2;
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = s.iter().map(|a| a / n).collect();
        let std: Vec<f64> = s2.iter().zip(&mean).map(|(b, m)| (b / n - m * m).max(0.0).sqrt().max(1e-6)).collect();
        self.params.set("norm.mean", Tensor::from_vec(&[c], mean).expect("sized"));
        self.params.set("norm.std", Tensor::from_vec(&[c], std).expect("sized"));
    }

    fn standardize(&self, f: &Tensor) -> Tensor {
        let (c, h, w) = f.chw();
        let mean = self.params.get("norm.mean").expect("head has norm.mean");
        let std = self.params.get("norm.std").expect("head has norm.std");
        let mut out = f.clone();
        for ch in 0..c {
            let (m, s) = (mean.data()[ch], std.data()[ch]);
            out.data_mut()[ch * h * w..(ch + 1) * h * w].iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        out
    }

    fn forward(&self, g: &Graph, x: &Tensor, leaves: &mut Vec<(String, Var)>) -> Result<Var> {
        let (_, h, w) = x.chw();
        let mut p = |name: &str| {
            let v = g.param_shared(self.params.get(name).expect("head parameter").clone());
            leaves.push((name.to_string(), v));
            v
        };
        let x = g.constant(self.standardize(x));
        let e1w = p("e1.w");
        let e1b = p("e1.b");
        let e1 = g.gelu(g.conv2d(x, e1w, Some(e1b), 1, 1)?);
        let (e2w, e2b) = (p("e2.w"), p("e2.b"));
        let e2 = g.gelu(g.conv2d(e1, e2w, Some(e2b), 2, 1)?);
        let (e3w, e3b) = (p("e3.w"), p("e3.b"));
        let e3 = g.gelu(g.conv2d(e2, e3w, Some(e3b), 1, 1)?);
        let (uw, ub) = (p("up.w"), p("up.b"));
        let up = g.conv_transpose2d(e3, uw, Some(ub), 2, 2, 1)?;
        let up = g.gelu(g.crop(up, h, w)?);
        let cat = g.concat(&[e1, up])?;
        let (dw, db) = (p("d1.w"), p("d1.b"));
        let d1 = g.gelu(g.conv2d(cat, dw, Some(db), 1, 1)?);
        let (ow, ob) = (p("out.w"), p("out.b"));
        g.conv2d(d1, ow, Some(ob), 1, 0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = HeadHeader { in_channels: self.in_channels, classes: self.classes, width: self.width };
        let json = serde_json::to_vec(&header).expect("head header serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(HEAD_MAGIC);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        self.params.write_tensors(&mut buf);
        buf
    }

    pub fn from_reader(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != HEAD_MAGIC {
            return Err(Error::format("not a segmentation head file"));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut json = Vec::new();
        r.by_ref().take(u64::from(u32::from_le_bytes(len))).read_to_end(&mut json)?;
        let h: HeadHeader = serde_json::from_slice(&json).map_err(|e| Error::format(format!("head header: {e}")))?;
        let params = ParamStore::read_tensors(&mut r)?;
        let fresh = ReferenceHead::new(h.in_channels, h.classes, h.width, 0)?;
        for (name, t) in fresh.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(Error::Compatibility(format!("head parameter {name} missing or misshapen"))),
            }
        }
        if params.len() != fresh.params.len() {
            return Err(Error::Compatibility("unexpected head parameters".into()));
        }
        Ok(ReferenceHead { in_channels: h.in_channels, classes: h.classes, width: h.width, params })
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

impl SegmentationHead for ReferenceHead {
    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn logits(&self, features: &Tensor) -> Result<Tensor> {
        if features.chw().0 != self.in_channels {
            return Err(Error::config(format!("features have {} channels, head expects {}", features.chw().0, self.in_channels)));
        }
        let g = Graph::inference();
        let out = self.forward(&g, features, &mut Vec::new())?;
        Ok((*g.value(out)).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadTrainConfig {
    pub steps: usize,
    /// Slices per step.
    pub batch: usize,
    pub lr: f64,
    pub width: usize,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        HeadTrainConfig { steps: 300, batch: 4, lr: 3e-3, width: 16, seed: 0 }
    }
}

/// Fit a [`ReferenceHead`] by per-pixel cross-entropy on `(features, labels)`
/// slice pairs. Returns the head and the loss after every step.
pub fn train_reference_head(
    samples: &[(Tensor, Vec<u8>)],
    classes: usize,
    cfg: &HeadTrainConfig,
) -> Result<(ReferenceHead, Vec<f64>)> {
    let first = samples.first().ok_or_else(|| Error::config("no segmentation training samples"))?;
    let cin = first.0.chw().0;
    for (f, l) in samples {
        let (c, h, w) = f.chw();
        if c != cin || l.len() != h * w {
            return Err(Error::shape("segmentation samples disagree in channels or size"));
        }
    }
    let mut head = ReferenceHead::new(cin, classes, cfg.width, cfg.seed)?;
    let feats: Vec<Tensor> = samples.iter().map(|s| s.0.clone()).collect();
    head.fit_normalization(&feats);
    let labels: Vec<Arc<Vec<usize>>> =
        samples.iter().map(|s| Arc::new(s.1.iter().map(|&l| usize::from(l)).collect())).collect();
    let mut adam = Adam::new(&head.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e9);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let picks: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..samples.len())).collect();
        let outs = par::map(&picks, |&i| -> Result<(f64, Vec<(String, Tensor)>)> {
            let g = Graph::new();
            let mut leaves = Vec::new();
            let logits = head.forward(&g, &samples[i].0, &mut leaves)?;
            let loss = g.softmax_xent(logits, labels[i].clone())?;
            let grads = g.backward(loss)?;
            let named = leaves.into_iter().filter_map(|(n, v)| grads.get(v).map(|t| (n, t.clone()))).collect();
            Ok((g.scalar(loss), named))
        });
        let mut acc = std::collections::BTreeMap::<String, Tensor>::new();
        let mut total = 0.0;
        for o in outs {
            let (l, named) = o?;
            total += l;
            for (n, t) in named {
                match acc.get_mut(&n) {
                    Some(a) => a.add_assign(&t),
                    None => {
                        acc.insert(n, t);
                    }
                }
            }
        }
        if !total.is_finite() {
            return Err(Error::Numeric("segmentation head training diverged".into()));
        }
        adam.update(&mut head.params, &acc, cfg.lr);
        losses.push(total / cfg.batch as f64);
    }
    Ok((head, losses))
}

/// Slice-wise `(features, labels)` pairs for training.
pub fn slice_samples(features: &[Tensor], labels: &LabelVolume) -> Result<Vec<(Tensor, Vec<u8>)>> {
    if features.len() != labels.depth() {
        return Err(Error::shape(format!("{} feature slices for depth {}", features.len(), labels.depth())));
    }
    Ok(features.iter().enumerate().map(|(z, f)| (f.clone(), labels.slice(z).to_vec())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::phantom;

    /// Returns one-hot logits of the ground truth, whatever it is fed.
    struct Oracle<'a>(&'a LabelVolume, std::sync::atomic::AtomicUsize);

    impl SegmentationHead for Oracle<'_> {
        fn in_channels(&self) -> usize {
            1
        }
        fn classes(&self) -> usize {
            self.0.classes()
        }
        fn logits(&self, f: &Tensor) -> Result<Tensor> {
            let z = f.data()[0] as usize;
            let (h, w) = (self.0.height(), self.0.width());
            let mut t = Tensor::zeros(&[self.classes(), h, w]);
            for (i, &l) in self.0.slice(z).iter().enumerate() {
                t.data_mut()[usize::from(l) * h * w + i] = 1.0;
            }
            self.1.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            Ok(t)
        }
    }

    #[test]
    fn ground_truth_logits_score_perfectly() {
        let p = phantom(24, 24, 3, 1);
        let feats: Vec<Tensor> = (0..3).map(|z| Tensor::full(&[1, 24, 24], z as f64)).collect();
        let head = Oracle(&p.labels, Default::default());
        let r = evaluate_segmentation(&feats, &head, &p.labels, [1.0; 3], false).unwrap();
        assert!(r.dice.iter().all(|&d| d == 1.0));
        assert!(r.hd95.iter().all(|&d| d == 0.0));
        assert_eq!(r.mean_dice, 1.0);
        assert_eq!(head.1.into_inner(), 3);
    }

    #[test]
    fn channel_mismatch_is_a_configuration_error() {
        let p = phantom(16, 16, 2, 1);
        let head = ReferenceHead::new(16, 4, 4, 0).unwrap();
        let err = evaluate_segmentation(&pixel_features(&p.volume), &head, &p.labels, [1.0; 3], false).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(matches!(head.logits(&Tensor::zeros(&[1, 16, 16])), Err(Error::Config(_))));
    }

    #[test]
    fn head_output_matches_input_size_and_round_trips() {
        let head = ReferenceHead::new(3, 4, 4, 2).unwrap();
        for (h, w) in [(16, 16), (15, 9)] {
            assert_eq!(head.logits(&Tensor::full(&[3, h, w], 0.3)).unwrap().shape(), &[4, h, w]);
        }
        let back = ReferenceHead::from_reader(&head.to_bytes()[..]).unwrap();
        assert_eq!(back, head);
        assert!(ReferenceHead::from_reader(&b"VVSX"[..]).is_err());
    }

    #[test]
    fn reference_head_learns_pixel_phantoms() {
        let train: Vec<_> = (0..2).map(|s| phantom(32, 32, 4, 10 + s)).collect();
        let mut samples = Vec::new();
        for p in &train {
            samples.extend(slice_samples(&pixel_features(&p.volume), &p.labels).unwrap());
        }
        let cfg = HeadTrainConfig { steps: 120, batch: 2, lr: 1e-2, width: 8, seed: 1 };
        let (head, losses) = train_reference_head(&samples, 4, &cfg).unwrap();
        assert!(losses.last().unwrap() < &(losses[0] * 0.5));
        let test = phantom(32, 32, 4, 99);
        let r = evaluate_segmentation(&pixel_features(&test.volume), &head, &test.labels, [1.0; 3], false).unwrap();
        assert!(r.mean_dice > 0.6, "mean DICE {}", r.mean_dice);
    }
}
