//! The `favae` command line. Exit codes: 0 success, 1 invalid arguments or
//! inputs, 2 failure while running.

use crate::config::{parse_range, Settings};
use crate::fsutil::{atomic_write, parallel_map};
use crate::manifest::DatasetManifest;
use crate::{pnm, report, tensor_file};
use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use favae_core::audit::{audit_report, top_k};
use favae_core::diffusion::{diffusion_train, generate_images, Denoiser, DiffusionConfig, DiffusionTrainConfig};
use favae_core::favae::{train, FaVaeModel, LossBreakdown, TrainObserver};
use favae_core::features::RandomFeatureStack;
use favae_core::fusion::{extract_latents, FusedLatent, Standardizer};
use favae_core::rng::Rng;
use favae_core::spectrum::{average_spectra, band_energy, log_view, radial_profile};
use favae_core::synth::{planted_noise_set, texture};
use favae_core::wavelet::{dwt2_haar, idwt2_haar, normalize_subbands, NormParams, NormScheme, SubbandSet};
use favae_core::{ImageTensor, Tensor, ValueRange};
use serde_json::json;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0:#}")]
    Invalid(anyhow::Error),
    #[error("{0:#}")]
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<favae_core::Error> for Failure {
    fn from(e: favae_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<tensor_file::TensorFileError> for Failure {
    fn from(e: tensor_file::TensorFileError) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn invalid(msg: impl std::fmt::Display) -> Failure {
    Failure::Invalid(anyhow!("{msg}"))
}

fn must_exist(p: &Path) -> CmdResult {
    if p.exists() {
        Ok(())
    } else {
        Err(invalid(format_args!("{} does not exist", p.display())))
    }
}

fn range_arg(s: &str) -> Result<ValueRange, Failure> {
    parse_range(s).map_err(Failure::Invalid)
}

fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    atomic_write(path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn write_tensors(path: &Path, t: &[(String, Tensor<f32>)]) -> CmdResult {
    tensor_file::write(path, t)?;
    Ok(())
}

fn write_image(path: &Path, img: &ImageTensor) -> CmdResult {
    pnm::write(path, img).with_context(|| format!("cannot write image {}", path.display()))?;
    Ok(())
}

fn create_dir(p: &Path) -> CmdResult {
    std::fs::create_dir_all(p).with_context(|| format!("cannot create {}", p.display()))?;
    Ok(())
}

fn json_bytes(v: &serde_json::Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s.into_bytes()
}

fn image_ext(channels: usize) -> &'static str {
    if channels == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

fn tensor<'a>(t: &'a [(String, Tensor<f32>)], name: &str, file: &Path) -> anyhow::Result<&'a Tensor<f32>> {
    tensor_file::get(t, name).with_context(|| format!("{} has no tensor {name:?}", file.display()))
}

#[derive(Parser, Debug)]
#[command(name = "favae", version, about = "Frequency-aware VAE: wavelets, training, auditing, spectra and latent diffusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Haar transform of one image into four subbands
    Dwt(DwtArgs),
    /// Rebuild an image from the output of `dwt`
    Idwt(IdwtArgs),
    /// Train a model on a dataset
    Train(TrainArgs),
    /// Reconstruct a dataset with a trained model
    Reconstruct(ReconstructArgs),
    /// Compare originals with reconstructions
    Audit(AuditArgs),
    /// Averaged power spectrum of reconstruction residuals
    Spectrum(SpectrumArgs),
    /// Encode a dataset into standardized fused latents
    ExtractLatents(ExtractArgs),
    /// Train the latent noise predictor
    TrainDiff(TrainDiffArgs),
    /// Generate images from noise
    Sample(SampleArgs),
    /// Finite-difference gradient checks of every layer
    GradCheck(GradCheckArgs),
    /// Write a synthetic texture or planted-noise dataset
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct DwtArgs {
    /// Input PPM or PGM
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Pixel range the image is mapped to
    #[arg(long, default_value = "unit")]
    pub range: String,
    /// Store normalized subbands (each in [-0.5, 0.5])
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Args, Debug)]
pub struct IdwtArgs {
    /// Directory written by `dwt`
    #[arg(long)]
    pub in_dir: PathBuf,
    /// Output PPM or PGM
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Manifest file or image directory
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// TOML settings file; flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: Settings,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    /// Directory written by `train`
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    /// Originals and reconstructions (manifests or directories), paired by position
    #[arg(long, num_args = 2, value_names = ["ORIG", "RECON"])]
    pub pairs: Vec<PathBuf>,
    /// JSON report path; text and CSV versions are written beside it
    #[arg(long)]
    pub report: PathBuf,
    /// Also list the k classes with the largest NMSE
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long, default_value = "unit")]
    pub range: String,
    /// Seed of the frozen feature extractor
    #[arg(long, default_value_t = favae_core::features::DEFAULT_FEATURE_SEED)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SpectrumArgs {
    #[arg(long, num_args = 2, value_names = ["ORIG", "RECON"])]
    pub pairs: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Radial profile bins
    #[arg(long, default_value_t = 16)]
    pub bins: usize,
    /// Normalized radius separating the low and high bands
    #[arg(long, default_value_t = 0.5)]
    pub cutoff: f64,
    /// Offset inside the logarithm of the heatmap
    #[arg(long, default_value_t = 1e-12)]
    pub log_eps: f64,
    #[arg(long, default_value = "unit")]
    pub range: String,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Latent file to write
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainDiffArgs {
    /// File written by `extract-latents`
    #[arg(long)]
    pub latents: PathBuf,
    /// Denoiser file to write
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub timesteps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub beta_start: f64,
    #[arg(long, default_value_t = 0.02)]
    pub beta_end: f64,
    /// Channel width of the noise predictor
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 32)]
    pub time_dim: usize,
    /// Optional CSV of the per-step loss
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// File written by `train-diff`
    #[arg(long)]
    pub denoiser: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Images (textures) or images per class (planted noise)
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated noise sigmas, one class each; writes `orig/` and
    /// `noisy/` with class manifests instead of textures
    #[arg(long, value_delimiter = ',')]
    pub planted: Option<Vec<f64>>,
}

/// Parse `args` (including the program name) and run the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> CmdResult {
    match cmd {
        Command::Dwt(a) => dwt(a),
        Command::Idwt(a) => idwt(a),
        Command::Train(a) => train_cmd(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Audit(a) => audit(a),
        Command::Spectrum(a) => spectrum(a),
        Command::ExtractLatents(a) => extract(a),
        Command::TrainDiff(a) => train_diff(a),
        Command::Sample(a) => sample(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Synth(a) => synth(a),
    }
}

const BAND_NAMES: [&str; 4] = ["ll", "lh", "hl", "hh"];

fn dwt(a: DwtArgs) -> CmdResult {
    let range = range_arg(&a.range)?;
    must_exist(&a.input)?;
    let img = pnm::read(&a.input).map_err(|e| invalid(format_args!("{}: {e}", a.input.display())))?;
    let img = img.into_image(range)?;
    let mut s = dwt2_haar(&img)?;
    if a.normalize {
        s = normalize_subbands(&s, NormScheme::AffinePerSubband)?;
    }
    create_dir(&a.out_dir)?;
    let named: Vec<_> = BAND_NAMES.iter().zip(s.bands()).map(|(n, b)| (n.to_string(), b.clone())).collect();
    write_tensors(&a.out_dir.join("subbands.bin"), &named)?;
    for (n, b) in &named {
        write_file(&a.out_dir.join(format!("{n}.pgm")), &pnm::tensor_heatmap(b))?;
    }
    let [c, h, w] = img.shape();
    let meta = json!({ "channels": c, "height": h, "width": w, "range": range.name(), "normalized": a.normalize });
    write_file(&a.out_dir.join("meta.json"), &json_bytes(&meta))?;
    println!("{}x{}x{} -> 4 subbands of {}x{}x{} in {}", c, h, w, c, h / 2, w / 2, a.out_dir.display());
    Ok(())
}

fn idwt(a: IdwtArgs) -> CmdResult {
    let (bin, meta_path) = (a.in_dir.join("subbands.bin"), a.in_dir.join("meta.json"));
    must_exist(&bin)?;
    must_exist(&meta_path)?;
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(&meta_path).context("cannot read meta.json")?).context("invalid meta.json")?;
    let range = meta["range"].as_str().and_then(ValueRange::parse).ok_or_else(|| anyhow!("meta.json has no valid range"))?;
    let normalized = meta["normalized"].as_bool().unwrap_or(false);
    let t = tensor_file::read(&bin)?;
    let b = |n: &str| tensor(&t, n, &bin).cloned();
    let mut s = SubbandSet::new(b("ll")?, b("lh")?, b("hl")?, b("hh")?)?;
    s.source_range = Some(range);
    if normalized {
        s.norm_state = Some(NormParams::affine_for(range));
        s = favae_core::wavelet::denormalize_subbands(&s)?;
    }
    let img = ImageTensor::clamped(idwt2_haar(&s)?.into_tensor(), range)?;
    write_image(&a.out, &img)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn resolve_settings(config: Option<&Path>, flags: &Settings) -> Result<Settings, Failure> {
    let base = match config {
        Some(p) => {
            must_exist(p)?;
            Settings::load(p).map_err(Failure::Invalid)?
        }
        None => Settings::default(),
    };
    let s = base.overlay(flags);
    s.resolve().map_err(Failure::Invalid)?;
    Ok(s)
}

fn load_dataset(path: &Path, range: ValueRange) -> Result<(DatasetManifest, Vec<ImageTensor>), Failure> {
    must_exist(path)?;
    let m = DatasetManifest::open(path).map_err(Failure::Invalid)?;
    let images = m.load(range).map_err(Failure::Invalid)?;
    Ok((m, images))
}

/// Rebuild a trained model from its directory.
pub fn load_model(dir: &Path) -> Result<FaVaeModel, Failure> {
    let (cfg, bin) = (dir.join("model.cfg"), dir.join("model.bin"));
    must_exist(&cfg)?;
    must_exist(&bin)?;
    let (m, _) = Settings::load(&cfg).and_then(|s| s.resolve()).map_err(Failure::Invalid)?;
    let mut model = FaVaeModel::new(m, 0)?;
    model.load_named(&tensor_file::read(&bin)?).with_context(|| format!("{} does not match {}", bin.display(), cfg.display()))?;
    Ok(model)
}

struct CheckpointWriter {
    dir: PathBuf,
    steps: usize,
}

impl TrainObserver for CheckpointWriter {
    fn on_step(&mut self, losses: &[LossBreakdown]) -> favae_core::Result<()> {
        if let Some(l) = losses.first() {
            let step = l.step + 1;
            if step % 50 == 0 || step == self.steps {
                let totals: Vec<String> = losses.iter().map(|l| format!("{} {:.5}", l.branch.name(), l.total)).collect();
                eprintln!("step {step}/{}: {}", self.steps, totals.join(", "));
            }
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, step: usize, model: &FaVaeModel) -> favae_core::Result<()> {
        let path = self.dir.join(format!("step_{step:06}.bin"));
        tensor_file::write(&path, &model.named_tensors()).map_err(|e| favae_core::Error::Data(e.to_string()))
    }
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let settings = resolve_settings(a.config.as_deref(), &a.settings)?;
    let (m, t) = settings.resolve().map_err(Failure::Invalid)?;
    let (_, images) = load_dataset(&a.data, m.range)?;
    for img in &images {
        m.check_image(img.height(), img.width()).map_err(|e| invalid(e))?;
        if img.channels() != m.channels {
            return Err(invalid(format_args!("images have {} channels but the model expects {}", img.channels(), m.channels)));
        }
    }
    create_dir(&a.out_dir)?;
    let ckpt = a.out_dir.join("checkpoints");
    if t.checkpoint_every > 0 {
        create_dir(&ckpt)?;
    }
    write_file(&a.out_dir.join("model.cfg"), Settings::from_resolved(&m, &t).to_toml().as_bytes())?;
    let model = FaVaeModel::new(m, t.seed)?;
    eprintln!("training {} parameters on {} images for {} steps", model.param_count(), images.len(), t.steps);
    let mut obs = CheckpointWriter { dir: ckpt, steps: t.steps };
    let (model, log) = train(model, &images, t, None, &mut obs)?;
    write_tensors(&a.out_dir.join("model.bin"), &model.named_tensors())?;
    write_file(&a.out_dir.join("loss_log.csv"), report::loss_csv(&log).as_bytes())?;
    println!("wrote {}", a.out_dir.display());
    Ok(())
}

fn reconstruct(a: ReconstructArgs) -> CmdResult {
    let model = load_model(&a.model)?;
    let (manifest, images) = load_dataset(&a.data, model.config.range)?;
    let recon: Vec<ImageTensor> = parallel_map(&images, |x| model.reconstruct(x)).into_iter().collect::<favae_core::Result<_>>()?;
    create_dir(&a.out_dir)?;
    let mut listing = String::new();
    let mut seen = std::collections::HashSet::new();
    for (e, img) in manifest.entries.iter().zip(&recon) {
        let stem = e.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let name = format!("{stem}.{}", image_ext(img.channels()));
        if !seen.insert(name.clone()) {
            return Err(invalid(format_args!("two inputs map to the output name {name}")));
        }
        write_image(&a.out_dir.join(&name), img)?;
        match e.class {
            Some(c) => listing.push_str(&format!("{name},{c}\n")),
            None => listing.push_str(&format!("{name}\n")),
        }
    }
    write_file(&a.out_dir.join("manifest.txt"), listing.as_bytes())?;
    println!("reconstructed {} images into {}", recon.len(), a.out_dir.display());
    Ok(())
}

type Pairs = (DatasetManifest, Vec<(ImageTensor, ImageTensor)>);

fn load_pairs(paths: &[PathBuf], range: ValueRange) -> Result<Pairs, Failure> {
    let (orig_m, orig) = load_dataset(&paths[0], range)?;
    let (_, recon) = load_dataset(&paths[1], range)?;
    if orig.len() != recon.len() {
        return Err(invalid(format_args!("{} originals but {} reconstructions", orig.len(), recon.len())));
    }
    for (i, (x, y)) in orig.iter().zip(&recon).enumerate() {
        if x.shape() != y.shape() {
            return Err(invalid(format_args!("pair {i}: shapes {:?} and {:?} differ", x.shape(), y.shape())));
        }
    }
    Ok((orig_m, orig.into_iter().zip(recon).collect()))
}

fn audit(a: AuditArgs) -> CmdResult {
    let range = range_arg(&a.range)?;
    let (manifest, pairs) = load_pairs(&a.pairs, range)?;
    let labels = manifest.labels();
    if a.top_k.is_some() && labels.iter().any(Option::is_none) {
        return Err(invalid("--top-k needs class ids in the original manifest"));
    }
    let stack = RandomFeatureStack::new(pairs[0].0.channels(), a.seed);
    let r = audit_report(&pairs, &labels, &stack, &stack)?;
    let top = a.top_k.map(|k| top_k(&r.per_class, k)).transpose().map_err(|e| invalid(e))?;
    write_file(&a.report, &json_bytes(&report::audit_json(&r, top.as_deref())))?;
    let text = report::audit_text(&r, top.as_deref());
    write_file(&a.report.with_extension("txt"), text.as_bytes())?;
    if !r.per_class.is_empty() {
        write_file(&a.report.with_extension("csv"), report::class_csv(&r.per_class).as_bytes())?;
    }
    print!("{text}");
    Ok(())
}

fn pow2_floor(n: usize) -> usize {
    1 << (usize::BITS - 1 - n.leading_zeros())
}

fn spectrum(a: SpectrumArgs) -> CmdResult {
    let range = range_arg(&a.range)?;
    if a.bins == 0 || !(a.cutoff > 0.0 && a.cutoff < 1.0) || !(a.log_eps > 0.0) {
        return Err(invalid("--bins must be positive, --cutoff in (0, 1) and --log-eps positive"));
    }
    let (_, pairs) = load_pairs(&a.pairs, range)?;
    let h = pairs.iter().map(|p| p.0.height()).min().unwrap_or(0);
    let w = pairs.iter().map(|p| p.0.width()).min().unwrap_or(0);
    let (ch, cw) = (pow2_floor(h), pow2_floor(w));
    let cropped = pairs.iter().any(|(x, _)| x.height() != ch || x.width() != cw);
    let pairs: Vec<_> = pairs
        .iter()
        .map(|(x, y)| Ok((x.center_crop(ch, cw)?, y.center_crop(ch, cw)?)))
        .collect::<favae_core::Result<_>>()?;
    let grid = average_spectra(&pairs)?;
    let (low, high) = band_energy(&grid, a.cutoff)?;
    let profile = radial_profile(&grid, a.bins)?;
    create_dir(&a.out_dir)?;
    write_file(&a.out_dir.join("spectrum.csv"), report::spectrum_csv(&grid).as_bytes())?;
    let lv = log_view(&grid, a.log_eps)?;
    write_file(&a.out_dir.join("spectrum.pgm"), &pnm::heatmap(&lv.psd, lv.height, lv.width))?;
    let mut radial = String::from("radius,mean_power,population\n");
    for b in &profile {
        radial.push_str(&format!("{:e},{:e},{}\n", b.radius, b.mean_power, b.population));
    }
    write_file(&a.out_dir.join("radial.csv"), radial.as_bytes())?;
    let meta = json!({
        "pairs": pairs.len(),
        "height": ch,
        "width": cw,
        "center_cropped": cropped,
        "cutoff": a.cutoff,
        "low_energy": low,
        "high_energy": high,
        "total_energy": grid.total(),
    });
    write_file(&a.out_dir.join("meta.json"), &json_bytes(&meta))?;
    if cropped {
        println!("center-cropped to {ch}x{cw} (spectra need power-of-two sizes)");
    }
    println!("band energy at cutoff {}: low {low:e}, high {high:e}", a.cutoff);
    Ok(())
}

fn extract(a: ExtractArgs) -> CmdResult {
    let model = load_model(&a.model)?;
    let (_, images) = load_dataset(&a.data, model.config.range)?;
    let set = extract_latents(&model, &images).map_err(|e| invalid(e))?;
    let data = Tensor::stack(&set.latents.iter().map(|l| l.data.clone()).collect::<Vec<_>>())?;
    let out = vec![
        ("latents".to_string(), data),
        ("split_index".to_string(), Tensor::from_vec(&[1], vec![set.latents[0].split_index as f32])),
        ("standardizer.mean".to_string(), Tensor::from_vec(&[set.standardizer.mean.len()], set.standardizer.mean.clone())),
        ("standardizer.std".to_string(), Tensor::from_vec(&[set.standardizer.std.len()], set.standardizer.std.clone())),
    ];
    write_tensors(&a.out, &out)?;
    println!("wrote {} latents of shape {:?} to {}", set.latents.len(), set.latents[0].data.shape(), a.out.display());
    Ok(())
}

fn read_standardizer(t: &[(String, Tensor<f32>)], file: &Path) -> anyhow::Result<Standardizer> {
    Ok(Standardizer { mean: tensor(t, "standardizer.mean", file)?.data().to_vec(), std: tensor(t, "standardizer.std", file)?.data().to_vec() })
}

fn train_diff(a: TrainDiffArgs) -> CmdResult {
    if a.steps == 0 || a.batch == 0 || !(a.lr > 0.0) || a.timesteps == 0 || a.width == 0 || a.time_dim < 2 {
        return Err(invalid("steps, batch, lr, timesteps and width must be positive and time-dim at least 2"));
    }
    if !(0.0 < a.beta_start && a.beta_start <= a.beta_end && a.beta_end < 1.0) {
        return Err(invalid("need 0 < beta-start <= beta-end < 1"));
    }
    must_exist(&a.latents)?;
    let t = tensor_file::read(&a.latents)?;
    let z = tensor(&t, "latents", &a.latents)?;
    let split = tensor(&t, "split_index", &a.latents)?.data()[0] as usize;
    let std = read_standardizer(&t, &a.latents)?;
    if z.rank() != 4 {
        return Err(invalid(format_args!("latents must be (N, C, h, w), got {:?}", z.shape())));
    }
    let latents: Vec<FusedLatent> = (0..z.shape()[0]).map(|i| FusedLatent { data: z.index0(i), split_index: split }).collect();
    // The betas are stored as f32, so train with the values that will be read back.
    let cfg = DiffusionConfig {
        timesteps: a.timesteps,
        beta_start: a.beta_start as f32 as f64,
        beta_end: a.beta_end as f32 as f64,
        width: a.width,
        time_dim: a.time_dim,
    };
    let tc = DiffusionTrainConfig { steps: a.steps, batch: a.batch, lr: a.lr, seed: a.seed };
    let (den, losses) = diffusion_train(&latents, cfg, tc)?;
    let mut out = den.named_tensors();
    out.push((
        "meta.config".into(),
        Tensor::from_vec(&[5], vec![cfg.timesteps as f32, cfg.beta_start as f32, cfg.beta_end as f32, cfg.width as f32, cfg.time_dim as f32]),
    ));
    out.push(("meta.grid".into(), Tensor::from_vec(&[2], vec![z.shape()[2] as f32, z.shape()[3] as f32])));
    out.push(("meta.split".into(), Tensor::from_vec(&[1], vec![split as f32])));
    out.push(("standardizer.mean".into(), Tensor::from_vec(&[std.mean.len()], std.mean.clone())));
    out.push(("standardizer.std".into(), Tensor::from_vec(&[std.std.len()], std.std.clone())));
    write_tensors(&a.out, &out)?;
    if let Some(p) = &a.loss_log {
        let mut s = String::from("step,loss\n");
        for (i, l) in losses.iter().enumerate() {
            s.push_str(&format!("{i},{l:e}\n"));
        }
        write_file(p, s.as_bytes())?;
    }
    let k = losses.len().min(100);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("loss {:.4} -> {:.4} (means of the first and last {k} steps)", mean(&losses[..k]), mean(&losses[losses.len() - k..]));
    Ok(())
}

fn sample(a: SampleArgs) -> CmdResult {
    if a.n == 0 {
        return Err(invalid("--n must be positive"));
    }
    let model = load_model(&a.model)?;
    must_exist(&a.denoiser)?;
    let t = tensor_file::read(&a.denoiser)?;
    let c = tensor(&t, "meta.config", &a.denoiser)?.data().to_vec();
    if c.len() != 5 {
        return Err(invalid(format_args!("{}: meta.config must hold 5 values", a.denoiser.display())));
    }
    let cfg = DiffusionConfig { timesteps: c[0] as usize, beta_start: c[1] as f64, beta_end: c[2] as f64, width: c[3] as usize, time_dim: c[4] as usize };
    let grid = tensor(&t, "meta.grid", &a.denoiser)?.data().to_vec();
    let std = read_standardizer(&t, &a.denoiser)?;
    let mut den = Denoiser::new(cfg, std.mean.len(), 0)?;
    den.load_named(&t)?;
    let images = generate_images(&den, &model, &std, a.n, (grid[0] as usize, grid[1] as usize), a.seed).map_err(|e| match e {
        favae_core::Error::Config(_) => invalid(e),
        e => e.into(),
    })?;
    create_dir(&a.out_dir)?;
    for (i, img) in images.iter().enumerate() {
        write_image(&a.out_dir.join(format!("sample_{i:03}.{}", image_ext(img.channels()))), img)?;
    }
    println!("wrote {} samples to {}", images.len(), a.out_dir.display());
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> CmdResult {
    let results = favae_core::nn::gradcheck::run_suite(a.seed)?;
    let (mut max32, mut max64) = (0.0f64, 0.0f64);
    for r in &results {
        println!("{:<24} f32 {:.3e}  f64 {:.3e}  {}", r.name, r.rel_err_f32, r.rel_err_f64, if r.passed() { "ok" } else { "FAIL" });
        max32 = max32.max(r.rel_err_f32);
        max64 = max64.max(r.rel_err_f64);
    }
    println!("max relative error: f32 {max32:.3e}, f64 {max64:.3e}");
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Failure::Runtime(anyhow!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn synth(a: SynthArgs) -> CmdResult {
    if a.n == 0 || a.size < 2 || a.size % 2 != 0 || !(a.channels == 1 || a.channels == 3) {
        return Err(invalid("need --n > 0, an even --size >= 2 and 1 or 3 channels"));
    }
    let mut rng = Rng::new(a.seed);
    let ext = image_ext(a.channels);
    match &a.planted {
        None => {
            create_dir(&a.out_dir)?;
            for i in 0..a.n {
                let img = texture(&mut rng, a.channels, a.size)?;
                write_image(&a.out_dir.join(format!("tex_{i:04}.{ext}")), &img)?;
            }
            println!("wrote {} textures to {}", a.n, a.out_dir.display());
        }
        Some(sigmas) => {
            if sigmas.is_empty() || sigmas.iter().any(|s| !(*s >= 0.0)) {
                return Err(invalid("--planted needs non-negative sigmas"));
            }
            let classes: Vec<(usize, f64)> = sigmas.iter().copied().enumerate().collect();
            let set = planted_noise_set(&mut rng, &classes, a.n, [a.channels, a.size, a.size])?;
            let (orig, noisy) = (a.out_dir.join("orig"), a.out_dir.join("noisy"));
            create_dir(&orig)?;
            create_dir(&noisy)?;
            let mut listing = String::new();
            for (i, ((x, y), c)) in set.pairs.iter().zip(&set.labels).enumerate() {
                let name = format!("img_{i:04}.{ext}");
                write_image(&orig.join(&name), x)?;
                write_image(&noisy.join(&name), y)?;
                listing.push_str(&format!("{name},{c}\n"));
            }
            write_file(&orig.join("manifest.txt"), listing.as_bytes())?;
            write_file(&noisy.join("manifest.txt"), listing.as_bytes())?;
            println!("wrote {} pairs in {} classes to {}", set.pairs.len(), classes.len(), a.out_dir.display());
        }
    }
    Ok(())
}
