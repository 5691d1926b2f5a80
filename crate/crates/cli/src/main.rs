//! `volcodec`: encode, decode, train and evaluate volumetric image codecs.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 model error.

mod failure;
mod features;
mod rd;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use volcodec::analytics::{
    evaluate_segmentation, pixel_features, psnr, slice_samples, train_reference_head, BdInterp, HeadTrainConfig,
    LabelVolume, ReferenceHead,
};
use volcodec::codec::{decode_volume, encode_volume, read_container, write_container, DecodeMode};
use volcodec::nn::Tensor;
use volcodec::training::{train, TrainConfig};
use volcodec::transforms::Model;
use volcodec::volume::{load_vvol, save_vvol, Volume};

use failure::{Context, Failure, Outcome};

/// Default directory for checkpoints named by a relative path or omitted.
const CHECKPOINT_DIR_ENV: &str = "VOLCODEC_CHECKPOINT_DIR";
const DEFAULT_CHECKPOINT: &str = "best.ckpt";

#[derive(Parser, Debug)]
#[command(name = "volcodec", version, about = "Learned inter-slice codec for volumetric grayscale images")]
struct Cli {
    /// Print one JSON object on stdout instead of human-readable text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compress a VVOL volume into a VVMC container.
    Encode(EncodeArgs),
    /// Decode a container into pixels or decoder features.
    Decode(DecodeArgs),
    /// Train a codec from a JSON config.
    Train(TrainArgs),
    /// Build RD tables and BD figures against an anchor curve.
    EvalRd(EvalRdArgs),
    /// Train the reference segmentation head.
    TrainSeg(TrainSegArgs),
    /// Score a segmentation head on features or pixels.
    EvalSeg(EvalSegArgs),
    /// Render RD curves to SVG (the data is copied next to it as CSV).
    Plot(PlotArgs),
    /// Write a synthetic labelled phantom volume.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct CheckpointArg {
    /// Model checkpoint; relative names are also looked up in $VOLCODEC_CHECKPOINT_DIR.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    checkpoint: CheckpointArg,
    #[arg(long)]
    output: PathBuf,
    /// Slices per independently decodable group.
    #[arg(long, default_value_t = 16)]
    gop: usize,
    /// Decode the written container and report PSNR.
    #[arg(long)]
    verify: bool,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("target").required(true).args(["output", "features"]))]
struct DecodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    checkpoint: CheckpointArg,
    /// Write reconstructed pixels to this VVOL file.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Write per-slice decoder features to this directory; pixels are never reconstructed.
    #[arg(long)]
    features: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON training config; a "preset" key picks the base values.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args, Debug)]
struct EvalRdArgs {
    /// Anchor curve CSV (exactly one curve).
    #[arg(long)]
    anchor: PathBuf,
    /// Test curve CSVs with precomputed points.
    #[arg(long, num_args = 1..)]
    curves: Vec<PathBuf>,
    /// CSV manifest with columns curve,checkpoint,container,source; each row is decoded and scored.
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Directory for rd.csv and bd.csv.
    #[arg(long)]
    out: PathBuf,
    /// Curve fit used for the BD integrals.
    #[arg(long, value_enum, default_value_t = Interp::Cubic)]
    interp: Interp,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum Interp {
    Cubic,
    Pchip,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["features", "pixels"]))]
struct SegInput {
    /// Feature dump directory written by `decode --features`.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Decoded (or original) VVOL volume.
    #[arg(long)]
    pixels: Option<PathBuf>,
    /// Label volume (VVOL with one class index per voxel).
    #[arg(long)]
    labels: PathBuf,
    /// Number of classes; defaults to the largest label plus one.
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainSegArgs {
    #[command(flatten)]
    input: SegInput,
    /// Where to write the trained head.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvalSegArgs {
    #[command(flatten)]
    input: SegInput,
    #[arg(long)]
    head: PathBuf,
    /// Voxel spacing as depth,row,col.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [1.0, 1.0, 1.0])]
    spacing: Vec<f64>,
    /// Average DICE over slices instead of over the volume.
    #[arg(long)]
    per_slice: bool,
    /// Also write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long, num_args = 1.., required = true)]
    curves: Vec<PathBuf>,
    /// Output image (.svg).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Also write the organ labels here.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    depth: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Repeat this slice of the phantom through the whole depth.
    #[arg(long)]
    repeat_slice: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let json_mode = cli.json;
    let result = match cli.command {
        Command::Encode(a) => cmd_encode(a, json_mode),
        Command::Decode(a) => cmd_decode(a, json_mode),
        Command::Train(a) => cmd_train(a, json_mode),
        Command::EvalRd(a) => cmd_eval_rd(a, json_mode),
        Command::TrainSeg(a) => cmd_train_seg(a, json_mode),
        Command::EvalSeg(a) => cmd_eval_seg(a, json_mode),
        Command::Plot(a) => cmd_plot(a, json_mode),
        Command::Synth(a) => cmd_synth(a, json_mode),
    };
    match result {
        Ok(summary) => {
            if json_mode {
                println!("{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {f}");
            if json_mode {
                println!("{}", json!({ "error": f.message(), "exit_code": f.code() }));
            }
            f.exit()
        }
    }
}

fn resolve_checkpoint(arg: &CheckpointArg) -> Outcome<PathBuf> {
    let dir = std::env::var_os(CHECKPOINT_DIR_ENV).map(PathBuf::from);
    match (&arg.checkpoint, dir) {
        (Some(p), Some(d)) if p.is_relative() && !p.exists() => Ok(d.join(p)),
        (Some(p), _) => Ok(p.clone()),
        (None, Some(d)) => Ok(d.join(DEFAULT_CHECKPOINT)),
        (None, None) => Err(Failure::Usage(format!("--checkpoint is required when ${CHECKPOINT_DIR_ENV} is unset"))),
    }
}

fn load_model(arg: &CheckpointArg) -> Outcome<Model> {
    let path = resolve_checkpoint(arg)?;
    if !path.exists() {
        return Err(Failure::Model(format!("{}: checkpoint not found", path.display())));
    }
    // Unreadable weights are a model problem, whatever the library calls them.
    Model::load(&path).map_err(|e| Failure::Model(format!("{}: {e}", path.display())))
}

fn read_volume(path: &Path) -> Outcome<Volume> {
    load_vvol(path).data(path.display())
}

fn cmd_encode(a: EncodeArgs, json_mode: bool) -> Outcome<Value> {
    if a.gop == 0 {
        return Err(Failure::Usage("--gop must be at least 1".into()));
    }
    let v = read_volume(&a.input)?;
    let model = load_model(&a.checkpoint)?;
    let coded = encode_volume(&model, &v, a.gop).context("encode")?;
    write_container(&coded.container, &a.output).context(a.output.display())?;
    let psnr_db = if a.verify {
        let out = decode_volume(&model, &coded.container, DecodeMode::Pixels).context("verify")?;
        let rec = out.volume.expect("pixel decode yields a volume");
        Some(psnr(v.samples(), rec.samples(), v.max_value()).context("verify")?)
    } else {
        None
    };
    let slices: Vec<Value> = coded
        .stats
        .iter()
        .enumerate()
        .map(|(z, s)| json!({ "slice": z, "bytes": s.z_bytes + s.y_bytes, "bpp": s.bpp(), "bpp_y": s.bpp_y(), "bpp_z": s.bpp_z() }))
        .collect();
    let summary = json!({
        "output": a.output,
        "slices": v.depth(),
        "bytes": coded.container.to_bytes().context("encode")?.len(),
        "bpp": coded.bpp(),
        "psnr": psnr_db,
        "per_slice": slices,
    });
    if !json_mode {
        println!("{:>5} {:>8} {:>9} {:>9} {:>9}", "slice", "bytes", "bpp", "bpp_y", "bpp_z");
        for (z, s) in coded.stats.iter().enumerate() {
            println!("{z:>5} {:>8} {:>9.4} {:>9.4} {:>9.4}", s.z_bytes + s.y_bytes, s.bpp(), s.bpp_y(), s.bpp_z());
        }
        let mut compact = summary.clone();
        compact.as_object_mut().expect("object").remove("per_slice");
        println!("{compact}");
    }
    Ok(summary)
}

fn cmd_decode(a: DecodeArgs, json_mode: bool) -> Outcome<Value> {
    let container = read_container(&a.input).data(a.input.display())?;
    let model = load_model(&a.checkpoint)?;
    let h = container.header;
    let summary = if let Some(dir) = &a.features {
        let out = decode_volume(&model, &container, DecodeMode::Features).context("decode")?;
        let files = features::write_dump(dir, &out.features, model.id())?;
        json!({ "features": dir, "files": files.len(), "width": h.width, "height": h.height,
                "channels": out.features.first().map(|f| f.chw().0),
                "reconstruct_calls": model.reconstruct_calls() })
    } else {
        let path = a.output.as_ref().expect("clap requires --output or --features");
        let out = decode_volume(&model, &container, DecodeMode::Pixels).context("decode")?;
        let v = out.volume.expect("pixel decode yields a volume");
        save_vvol(&v, path).context(path.display())?;
        json!({ "output": path, "width": v.width(), "height": v.height(), "depth": v.depth(),
                "reconstruct_calls": model.reconstruct_calls() })
    };
    if !json_mode {
        println!("{summary}");
    }
    Ok(summary)
}

fn cmd_train(a: TrainArgs, json_mode: bool) -> Outcome<Value> {
    let text = fs::read_to_string(&a.config).context(a.config.display())?;
    let cfg = TrainConfig::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", a.config.display())))?;
    for p in cfg.train.iter().chain(&cfg.eval) {
        if !p.exists() {
            return Err(Failure::Data(format!("{}: training volume not found", p.display())));
        }
    }
    let report = train(&cfg).context("train")?;
    let e = report.final_eval;
    let summary = json!({
        "out_dir": cfg.out_dir,
        "steps": report.state.step,
        "epochs": report.state.epoch,
        "final": { "bpp_real": e.bpp_real, "bpp_est": e.bpp_est, "psnr": e.psnr, "loss": e.loss },
    });
    if !json_mode {
        println!("{summary}");
    }
    Ok(summary)
}

#[derive(serde::Deserialize)]
struct PairRow {
    curve: String,
    checkpoint: PathBuf,
    container: PathBuf,
    source: PathBuf,
}

/// Decode each manifest row and measure its rate and PSNR.
fn score_pairs(manifest: &Path) -> Outcome<rd::Curves> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(manifest)
        .map_err(|e| Failure::Data(format!("{}: {e}", manifest.display())))?;
    let mut curves = rd::Curves::default();
    for row in r.deserialize::<PairRow>() {
        let row = row.map_err(|e| Failure::Data(format!("{}: {e}", manifest.display())))?;
        let at = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        let model = load_model(&CheckpointArg { checkpoint: Some(at(&row.checkpoint)) })?;
        let container_path = at(&row.container);
        let c = read_container(&container_path).data(container_path.display())?;
        let src = read_volume(&at(&row.source))?;
        let out = decode_volume(&model, &c, DecodeMode::Pixels).context(container_path.display())?;
        let rec = out.volume.expect("pixel decode yields a volume");
        if (rec.width(), rec.height(), rec.depth()) != (src.width(), src.height(), src.depth()) {
            return Err(Failure::Data(format!("{}: shape differs from its source", container_path.display())));
        }
        let bits: usize = c.chunks.iter().map(|k| k.len()).sum::<usize>() * 8;
        let bpp = bits as f64 / (c.header.pixels_per_slice() * f64::from(c.header.depth));
        let q = psnr(src.samples(), rec.samples(), src.max_value()).data(container_path.display())?;
        curves.push(&row.curve, bpp, q);
    }
    Ok(curves)
}

fn cmd_eval_rd(a: EvalRdArgs, json_mode: bool) -> Outcome<Value> {
    let anchor = rd::read_curves(&a.anchor)?;
    if anchor.0.len() != 1 {
        return Err(Failure::Data(format!("{}: anchor file must hold exactly one curve", a.anchor.display())));
    }
    let (anchor_name, anchor_pts) = &anchor.0[0];
    let mut tests = rd::Curves::default();
    for p in &a.curves {
        tests.extend(rd::read_curves(p)?);
    }
    if let Some(m) = &a.pairs {
        tests.extend(score_pairs(m)?);
    }
    let interp = match a.interp {
        Interp::Cubic => BdInterp::Cubic,
        Interp::Pchip => BdInterp::Pchip,
    };
    fs::create_dir_all(&a.out).context(a.out.display())?;
    let mut all = anchor.clone();
    all.extend(tests.clone());
    // The measured points are kept even when a curve cannot be fitted.
    rd::write_rows(&a.out.join("rd.csv"), &all.rows())?;
    let table = rd::bd_table((anchor_name, anchor_pts), &tests, interp)?;
    rd::write_bd(&a.out.join("bd.csv"), &table)?;
    if !json_mode {
        println!("{:<24} {:>10} {:>10}", "curve", "BD-rate %", "BD-PSNR");
        for r in &table {
            println!("{:<24} {:>10.3} {:>10.4}", r.curve, r.bd_rate, r.bd_psnr);
        }
    }
    Ok(json!({ "anchor": anchor_name, "bd": table, "rd_csv": a.out.join("rd.csv"), "bd_csv": a.out.join("bd.csv") }))
}

fn read_labels(path: &Path, classes: Option<usize>) -> Outcome<LabelVolume> {
    let v = read_volume(path)?;
    let max = v.samples().iter().copied().max().unwrap_or(0) as usize;
    let classes = classes.unwrap_or(max + 1).max(2);
    if max >= classes || classes > 256 {
        return Err(Failure::Data(format!("{}: label {max} does not fit {classes} classes", path.display())));
    }
    let labels = v.samples().iter().map(|&l| l as u8).collect();
    LabelVolume::new(v.width(), v.height(), v.depth(), classes, labels).data(path.display())
}

fn seg_inputs(s: &SegInput) -> Outcome<(Vec<Tensor>, LabelVolume)> {
    let feats = match (&s.features, &s.pixels) {
        (Some(dir), _) => features::read_dump(dir)?,
        (None, Some(p)) => pixel_features(&read_volume(p)?),
        (None, None) => unreachable!("clap requires one source"),
    };
    let labels = read_labels(&s.labels, s.classes)?;
    Ok((feats, labels))
}

fn cmd_train_seg(a: TrainSegArgs, json_mode: bool) -> Outcome<Value> {
    let (feats, labels) = seg_inputs(&a.input)?;
    let samples = slice_samples(&feats, &labels).data("segmentation samples")?;
    let cfg = HeadTrainConfig { steps: a.steps, batch: a.batch.max(1), lr: a.lr, width: a.width, seed: a.seed };
    let (head, losses) = train_reference_head(&samples, labels.classes(), &cfg).context("train head")?;
    head.save(&a.out).context(a.out.display())?;
    let summary = json!({ "out": a.out, "steps": losses.len(), "first_loss": losses.first(), "last_loss": losses.last(),
                          "in_channels": head.in_channels, "classes": head.classes });
    if !json_mode {
        println!("{summary}");
    }
    Ok(summary)
}

fn cmd_eval_seg(a: EvalSegArgs, json_mode: bool) -> Outcome<Value> {
    let (feats, labels) = seg_inputs(&a.input)?;
    let head = ReferenceHead::load(&a.head).map_err(|e| Failure::Model(format!("{}: {e}", a.head.display())))?;
    let spacing = [a.spacing[0], a.spacing[1], a.spacing[2]];
    let report = evaluate_segmentation(&feats, &head, &labels, spacing, a.per_slice).context("evaluate")?;
    let summary = serde_json::to_value(&report).expect("report serializes");
    if let Some(p) = &a.out {
        fs::write(p, serde_json::to_vec_pretty(&summary).expect("json")).context(p.display())?;
    }
    if !json_mode {
        println!("{:>5} {:>8} {:>10}", "class", "DICE", "HD95");
        for (c, (d, h)) in report.dice.iter().zip(&report.hd95).enumerate() {
            println!("{c:>5} {d:>8.4} {h:>10.3}");
        }
        println!("mean over foreground: DICE {:.4}, HD95 {:.3}", report.mean_dice, report.mean_hd95);
    }
    Ok(summary)
}

fn cmd_plot(a: PlotArgs, json_mode: bool) -> Outcome<Value> {
    if a.out.extension().is_none_or(|e| e != "svg") {
        return Err(Failure::Usage(format!("{}: only .svg output is supported", a.out.display())));
    }
    let mut curves = rd::Curves::default();
    for p in &a.curves {
        curves.extend(rd::read_curves(p)?);
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).context(dir.display())?;
    }
    rd::write_svg(&a.out, &curves)?;
    let data = a.out.with_extension("csv");
    rd::write_rows(&data, &curves.rows())?;
    let summary = json!({ "image": a.out, "data": data, "curves": curves.0.len() });
    if !json_mode {
        println!("{summary}");
    }
    Ok(summary)
}

fn cmd_synth(a: SynthArgs, json_mode: bool) -> Outcome<Value> {
    if a.width == 0 || a.height == 0 || a.depth == 0 {
        return Err(Failure::Usage("dimensions must be positive".into()));
    }
    let depth = if a.repeat_slice.is_some() { a.depth.max(1) } else { a.depth };
    let p = volcodec::synth::phantom(a.width, a.height, depth, a.seed);
    let (volume, labels) = match a.repeat_slice {
        Some(z) if z >= depth => return Err(Failure::Usage(format!("--repeat-slice {z} is outside depth {depth}"))),
        Some(z) => {
            let lab = p.labels.slice(z).iter().map(|&l| u16::from(l)).collect::<Vec<_>>();
            let lv = Volume::from_slices(a.width, a.height, 8, &vec![lab; a.depth]).context("labels")?;
            (volcodec::synth::repeat_slice(&p.volume, z, a.depth), lv)
        }
        None => {
            let lv = Volume::new(a.width, a.height, a.depth, 8, p.labels.labels().iter().map(|&l| u32::from(l)).collect())
                .context("labels")?;
            (p.volume, lv)
        }
    };
    save_vvol(&volume, &a.out).context(a.out.display())?;
    if let Some(l) = &a.labels {
        save_vvol(&labels, l).context(l.display())?;
    }
    let summary = json!({ "out": a.out, "labels": a.labels, "width": a.width, "height": a.height, "depth": a.depth });
    if !json_mode {
        println!("{summary}");
    }
    Ok(summary)
}
