//! The recurrent slice loop: per-slice coding, buffer lifecycle, whole volumes.

pub mod container;

pub use container::{
    read_container, scan_container, write_container, Container, ContainerHeader, ContainerSummary, SliceChunk,
};

use crate::entropy::{
    decode_hyper, decode_latents, encode_hyper, encode_latents, hyper_tables, CdfTable, ContextModel,
};
use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};
use crate::par;
use crate::transforms::{Geometry, InterSynthesis, Model, Net, LATENT_STRIDE};
use crate::volume::{crop, denormalize, normalize, pad_to_multiple, CropRecord, NormalizedSlice, Volume};

/// Coded size of one slice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SliceStats {
    pub z_bytes: usize,
    pub y_bytes: usize,
    /// Pixels of the coded (padded) slice.
    pub pixels: usize,
}

impl SliceStats {
    pub fn bits(&self) -> f64 {
        (self.z_bytes + self.y_bytes) as f64 * 8.0
    }

    pub fn bpp(&self) -> f64 {
        self.bits() / self.pixels as f64
    }

    pub fn bpp_y(&self) -> f64 {
        self.y_bytes as f64 * 8.0 / self.pixels as f64
    }

    pub fn bpp_z(&self) -> f64 {
        self.z_bytes as f64 * 8.0 / self.pixels as f64
    }
}

/// What the decoder side of one slice produced.
#[derive(Clone, Debug)]
pub struct SliceOutput {
    pub yhat: Tensor,
    /// Current-slice decoding feature `M_x`, `[buffer, H, W]`.
    pub mx: Tensor,
    /// Updated inter-slice buffer `F_t`.
    pub buffer: Tensor,
    /// Reconstructed slice `[1, H, W]`, when pixels were requested.
    pub pixels: Option<Tensor>,
}

fn slice_tensor(x: &NormalizedSlice) -> Result<Tensor> {
    Tensor::from_vec(&[1, x.height, x.width], x.values.clone())
}

/// Coding state for one group of slices: the model, the padded geometry,
/// and the buffer carried between slices.
pub struct CodecSession<'m> {
    model: &'m Model,
    geometry: Geometry,
    gop_stride: usize,
    index: usize,
    buffer: Tensor,
    z_tables: Vec<CdfTable>,
}

impl<'m> CodecSession<'m> {
    pub fn new(model: &'m Model, geometry: Geometry, gop_stride: usize) -> Result<Self> {
        if gop_stride == 0 {
            return Err(Error::config("group stride must be at least 1"));
        }
        let z_tables = hyper_tables(&model.config, &model.params)?;
        let buffer = Self::initial_buffer(model, geometry);
        Ok(CodecSession { model, geometry, gop_stride, index: 0, buffer, z_tables })
    }

    fn initial_buffer(model: &Model, geo: Geometry) -> Tensor {
        Tensor::zeros(&[model.config.buffer_channels, geo.height, geo.width])
    }

    pub fn buffer(&self) -> &Tensor {
        &self.buffer
    }

    /// Slices coded since the last reset.
    pub fn position_in_group(&self) -> usize {
        self.index % self.gop_stride
    }

    /// Start the next slice, resetting the buffer at group boundaries.
    fn begin(&mut self) {
        if self.index % self.gop_stride == 0 {
            self.buffer = Self::initial_buffer(self.model, self.geometry);
        }
    }

    fn check_slice(&self, x: &NormalizedSlice) -> Result<()> {
        if (x.height, x.width) != (self.geometry.height, self.geometry.width) {
            return Err(Error::shape(format!(
                "slice {}x{} in a {}x{} session",
                x.height, x.width, self.geometry.height, self.geometry.width
            )));
        }
        Ok(())
    }

    /// Decoder-side synthesis shared by both ends: `M_x`, `F_t`, and optionally pixels.
    fn synthesize(&self, net: &Net, yhat: Var, syn: Option<&InterSynthesis>, pixels: bool) -> Result<SliceOutput> {
        let g = net.g;
        let mx = net.g_s(yhat, syn)?;
        let mf = match syn {
            Some(s) => s.mf,
            None => g.constant(Tensor::zeros(&g.shape(mx))),
        };
        let f = net.fuse(mx, mf)?;
        let pixels = if pixels {
            self.model.note_reconstruct();
            Some((*g.value(net.reconstruct(f)?)).clone())
        } else {
            None
        };
        Ok(SliceOutput {
            yhat: (*g.value(yhat)).clone(),
            mx: (*g.value(mx)).clone(),
            buffer: (*g.value(f)).clone(),
            pixels,
        })
    }

    /// Code one padded slice and advance the buffer exactly as the decoder will.
    pub fn encode_slice(&mut self, x: &NormalizedSlice) -> Result<(SliceChunk, SliceStats, SliceOutput)> {
        self.check_slice(x)?;
        self.begin();
        let cfg = &self.model.config;
        let g = Graph::inference();
        let net = Net::new(&g, cfg, &self.model.params);
        let prev = g.constant(self.buffer.clone());
        let ctx = if cfg.auxiliary { Some(net.f_a(prev)?) } else { None };
        let xv = g.constant(slice_tensor(x)?);
        let y = net.g_a(xv, ctx.as_ref())?;
        let z = net.h_a(y)?;
        let (z_bytes, zhat) = encode_hyper(&self.z_tables, &g.value(z))?;
        let (lh, lw) = self.geometry.latent();
        let psi = net.h_s(g.constant(zhat), lh, lw)?;
        let cm = ContextModel::new(&net, ctx.map(|c| c.lf), psi)?;
        let coded = encode_latents(&cm, &g.value(y))?;
        let syn = match &ctx {
            Some(c) => Some(net.f_s(c.lf)?),
            None => None,
        };
        let out = self.synthesize(&net, g.constant(coded.yhat), syn.as_ref(), false)?;
        self.buffer = out.buffer.clone();
        self.index += 1;
        let stats = SliceStats { z_bytes: z_bytes.len(), y_bytes: coded.bytes.len(), pixels: x.height * x.width };
        Ok((SliceChunk { z: z_bytes, y: coded.bytes }, stats, out))
    }

    /// Decode one slice; pixels are reconstructed only when asked for.
    pub fn decode_slice(&mut self, chunk: &SliceChunk, pixels: bool) -> Result<SliceOutput> {
        self.begin();
        let cfg = &self.model.config;
        let g = Graph::inference();
        let net = Net::new(&g, cfg, &self.model.params);
        let prev = g.constant(self.buffer.clone());
        let ctx = if cfg.auxiliary { Some(net.f_a(prev)?) } else { None };
        let (hh, hw) = self.geometry.hyper();
        let zhat = decode_hyper(&self.z_tables, &chunk.z, [cfg.hyper_channels, hh, hw])?;
        let (lh, lw) = self.geometry.latent();
        let psi = net.h_s(g.constant(zhat), lh, lw)?;
        let cm = ContextModel::new(&net, ctx.map(|c| c.lf), psi)?;
        let yhat = decode_latents(&cm, &chunk.y)?;
        let syn = match &ctx {
            Some(c) => Some(net.f_s(c.lf)?),
            None => None,
        };
        let out = self.synthesize(&net, g.constant(yhat), syn.as_ref(), pixels)?;
        if !out.buffer.all_finite() {
            return Err(Error::decode("decoded buffer is not finite"));
        }
        self.buffer = out.buffer.clone();
        self.index += 1;
        Ok(out)
    }
}

/// Padded geometry for a volume's slices.
pub fn padded_geometry(width: usize, height: usize) -> Result<Geometry> {
    Geometry::new(height.div_ceil(LATENT_STRIDE) * LATENT_STRIDE, width.div_ceil(LATENT_STRIDE) * LATENT_STRIDE)
}

/// Container plus per-slice sizes from [`encode_volume`].
#[derive(Clone, Debug)]
pub struct EncodedVolume {
    pub container: Container,
    pub stats: Vec<SliceStats>,
}

impl EncodedVolume {
    /// Mean coded bits per pixel over the original (unpadded) area.
    pub fn bpp(&self) -> f64 {
        let bits: f64 = self.stats.iter().map(|s| s.bits()).sum();
        bits / (self.container.header.pixels_per_slice() * self.stats.len() as f64)
    }
}

/// Encode every slice, resetting the buffer every `gop_stride` slices.
/// Groups are independent and run in parallel.
pub fn encode_volume(model: &Model, v: &Volume, gop_stride: usize) -> Result<EncodedVolume> {
    encode_volume_with(model, v, gop_stride, |_, _| {})
}

/// As [`encode_volume`], handing each slice's decoder-side output to `observe`.
pub fn encode_volume_with(
    model: &Model,
    v: &Volume,
    gop_stride: usize,
    observe: impl Fn(usize, &SliceOutput) + Sync,
) -> Result<EncodedVolume> {
    if gop_stride == 0 {
        return Err(Error::config("group stride must be at least 1"));
    }
    let geo = padded_geometry(v.width(), v.height())?;
    let slices: Vec<NormalizedSlice> = normalize(v).iter().map(|s| pad_to_multiple(s, LATENT_STRIDE).0).collect();
    let starts: Vec<usize> = (0..slices.len()).step_by(gop_stride).collect();
    let groups = par::map(&starts, |&start| -> Result<Vec<(SliceChunk, SliceStats)>> {
        let mut session = CodecSession::new(model, geo, gop_stride)?;
        let end = (start + gop_stride).min(slices.len());
        (start..end)
            .map(|t| {
                let (chunk, stats, out) = session.encode_slice(&slices[t]).map_err(|e| e.at_slice(t))?;
                observe(t, &out);
                Ok((chunk, stats))
            })
            .collect()
    });
    let mut chunks = Vec::with_capacity(slices.len());
    let mut stats = Vec::with_capacity(slices.len());
    for group in groups {
        for (c, s) in group? {
            chunks.push(c);
            stats.push(s);
        }
    }
    let header = ContainerHeader {
        width: v.width() as u32,
        height: v.height() as u32,
        depth: v.depth() as u32,
        bit_depth: v.bit_depth(),
        gop_stride: gop_stride as u32,
        model_id: model.id(),
        groups: model.config.effective_groups() as u32,
        latent_channels: model.config.latent_channels as u32,
    };
    Ok(EncodedVolume { container: Container { header, chunks }, stats })
}

/// What to produce when decoding a container.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Pixels,
    /// `M_x` only; the reconstruction head is never run.
    Features,
    Both,
}

impl DecodeMode {
    fn pixels(self) -> bool {
        self != DecodeMode::Features
    }

    fn features(self) -> bool {
        self != DecodeMode::Pixels
    }
}

#[derive(Clone, Debug)]
pub struct DecodedVolume {
    pub volume: Option<Volume>,
    /// Per-slice `M_x` cropped to the original slice size.
    pub features: Vec<Tensor>,
}

/// Reject containers produced by a different model.
pub fn check_compatible(model: &Model, h: &ContainerHeader) -> Result<()> {
    if h.model_id != model.id() {
        return Err(Error::Compatibility(format!(
            "container was coded with model {:016x}, checkpoint is {:016x}",
            h.model_id,
            model.id()
        )));
    }
    if h.groups as usize != model.config.effective_groups() || h.latent_channels as usize != model.config.latent_channels
    {
        return Err(Error::Compatibility("channel layout differs from the checkpoint".into()));
    }
    Ok(())
}

fn crop_tensor(t: &Tensor, rec: CropRecord) -> Tensor {
    let (c, _, w) = t.chw();
    let mut out = Vec::with_capacity(c * rec.height * rec.width);
    for ch in 0..c {
        let plane = t.plane(ch);
        for y in 0..rec.height {
            out.extend_from_slice(&plane[y * w..y * w + rec.width]);
        }
    }
    Tensor::from_vec(&[c, rec.height, rec.width], out).expect("crop shape")
}

pub fn decode_volume(model: &Model, c: &Container, mode: DecodeMode) -> Result<DecodedVolume> {
    decode_volume_with(model, c, mode, |_, _| {})
}

/// Decode every group independently, handing each slice's output to `observe`.
pub fn decode_volume_with(
    model: &Model,
    c: &Container,
    mode: DecodeMode,
    observe: impl Fn(usize, &SliceOutput) + Sync,
) -> Result<DecodedVolume> {
    let h = &c.header;
    h.validate()?;
    check_compatible(model, h)?;
    if c.chunks.len() != h.depth as usize {
        return Err(Error::format(format!("{} chunks for depth {}", c.chunks.len(), h.depth)));
    }
    let (w, ht) = (h.width as usize, h.height as usize);
    let geo = padded_geometry(w, ht)?;
    let rec = CropRecord { height: ht, width: w };
    let stride = h.gop_stride as usize;
    let starts: Vec<usize> = (0..c.chunks.len()).step_by(stride).collect();
    let groups = par::map(&starts, |&start| -> Result<Vec<(Option<Vec<u16>>, Option<Tensor>)>> {
        let mut session = CodecSession::new(model, geo, stride)?;
        let end = (start + stride).min(c.chunks.len());
        (start..end)
            .map(|t| {
                let out = session.decode_slice(&c.chunks[t], mode.pixels()).map_err(|e| e.at_slice(t))?;
                observe(t, &out);
                let pixels = out.pixels.as_ref().map(|p| {
                    let s = NormalizedSlice { height: geo.height, width: geo.width, values: p.data().to_vec() };
                    denormalize(&crop(&s, rec), h.bit_depth)
                });
                let features = mode.features().then(|| crop_tensor(&out.mx, rec));
                Ok((pixels, features))
            })
            .collect()
    });
    let mut slices = Vec::new();
    let mut features = Vec::new();
    for group in groups {
        for (p, f) in group? {
            slices.extend(p);
            features.extend(f);
        }
    }
    let volume = if mode.pixels() { Some(Volume::from_slices(w, ht, h.bit_depth, &slices)?) } else { None };
    Ok(DecodedVolume { volume, features })
}
