//! Command-line workflows. The `qrnn3d` binary is a thin wrapper over
//! [`run_from`], so every subcommand can also be driven in-process.
//!
//! Each written artifact gets a `<file>.meta.json` sidecar recording the
//! command, its settings and the seed. Output paths are left out of the
//! sidecar so that repeated runs produce identical files wherever they
//! are written.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::seq::SliceRandom;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{config_err, Error, Result};
use crate::gcs::{layer_gcs, relative_band_histogram, relative_bands, DEFAULT_EPSILON};
use crate::hsio::{extract_patches, gen_synthetic, normalize, read_hsi, write_hsi, Augmentation, HsiCube};
use crate::metrics::{psnr_per_band, sam, ssim};
use crate::net::{build_network, build_random_network, read_weights, NetworkConfig};
use crate::noise::{stream, NoiseRegime, NoiseSpec};
use crate::qru::{Direction, QruUnit, Sampling, UnitKind, UnitSpec};
use crate::tensor::{FeatureTensor, Shape};
use crate::train::{
    grad_check_conv, grad_check_model, grad_check_unit, load_checkpoint, train, AdamState, GradCheckReport,
    TrainOptions,
};

/// Environment variable holding the default worker-thread count.
pub const THREADS_ENV: &str = "QRNN3D_THREADS";

const DATA_SPLIT: u64 = 201;

#[derive(Debug, Parser)]
#[command(name = "qrnn3d", version, about = "Hyperspectral denoising with 3D quasi-recurrent networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints plus a training log.
    Train(TrainArgs),
    /// Denoise a cube with trained weights.
    Denoise(DenoiseArgs),
    /// Corrupt a cube with Gaussian noise or one of the complex cases.
    AddNoise(AddNoiseArgs),
    /// Compare estimates against a reference and write a metrics CSV.
    Eval(EvalArgs),
    /// Spectral contribution analysis of one recurrent layer.
    Gcs(GcsArgs),
    /// Finite-difference check of every layer type and a small network.
    Gradcheck(GradcheckArgs),
    /// Write a seeded synthetic cube.
    GenSynthetic(GenArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop before this epoch.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Resume from the checkpoint in `--out` taken after this many epochs.
    #[arg(long)]
    pub resume_epoch: Option<usize>,
    /// Training cubes (replaces `data.inputs`).
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub weights: PathBuf,
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct AddNoiseArgs {
    /// Complex noise case 1–5.
    #[arg(long, conflicts_with = "sigma", required_unless_present = "sigma")]
    pub case: Option<u8>,
    /// i.i.d. Gaussian σ on the 0–255 scale.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub reference: PathBuf,
    /// `NAME=PATH`, repeatable.
    #[arg(long = "estimate", required = true)]
    pub estimates: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GcsArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// `first` (first bidirectional layer) or a zero-based layer index.
    #[arg(long, default_value = "first")]
    pub layer: String,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Output prefix; writes `<prefix>.csv`, `.pgm`, `.relative.csv`, `.histogram.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 31)]
    pub bands: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    pub output: PathBuf,
}

/// Configure the global worker pool from [`THREADS_ENV`], if set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count")))?;
        // A pool may already exist when driven in-process; keep it.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parse `args` (program name first) and run the command.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    run(cli)
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Denoise(a) => cmd_denoise(a),
        Command::AddNoise(a) => cmd_add_noise(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gcs(a) => cmd_gcs(a),
        Command::Gradcheck(a) => cmd_gradcheck(a).map(|_| ()),
        Command::GenSynthetic(a) => cmd_gen(a),
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_meta(artifact: &Path, command: &str, seed: Option<u64>, settings: serde_json::Value) -> Result<()> {
    let meta = json!({
        "tool": "qrnn3d",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": seed,
        "settings": settings,
    });
    fs::write(sidecar(artifact, ".meta.json"), serde_json::to_string_pretty(&meta).expect("json") + "\n")?;
    Ok(())
}

fn to_json(v: &impl Serialize) -> serde_json::Value {
    serde_json::to_value(v).expect("serialisable")
}

/// Training and validation patches for a run configuration. Cubes outside
/// `[0, 1]` are min-max normalised first. Patches are shuffled with the run
/// seed and the last `data.validation` of them are held out.
pub fn prepare_patches(cfg: &RunConfig) -> Result<(Vec<HsiCube>, Vec<HsiCube>)> {
    let d = &cfg.data;
    let mut sources = Vec::new();
    if d.inputs.is_empty() {
        let [h, w, b] = d.synthetic_extent;
        for k in 0..d.synthetic_scenes {
            sources.push((format!("synthetic-{k}"), gen_synthetic(h, w, b, cfg.seed.wrapping_add(k as u64))));
        }
    } else {
        for p in &d.inputs {
            let cube = read_hsi(p)?;
            let (lo, hi) = cube.min_max();
            let cube = if lo < 0.0 || hi > 1.0 { normalize(&cube)?.0 } else { cube };
            sources.push((p.display().to_string(), cube));
        }
    }
    let augment = if d.augment { Augmentation::standard() } else { Augmentation::none() };
    let mut patches = Vec::new();
    for (name, cube) in &sources {
        patches.extend(extract_patches(cube, name, d.patch_size, d.patch_stride, &augment)?.patches);
    }
    patches.shuffle(&mut stream(cfg.seed, DATA_SPLIT, 0));
    if patches.len() <= d.validation {
        return config_err(format!("{} patches leave none for training after holding out {}", patches.len(), d.validation));
    }
    let held = patches.split_off(patches.len() - d.validation);
    Ok((patches, held))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.end_epoch = Some(e);
    }
    if let Some(m) = a.max_steps {
        cfg.train.max_steps = Some(m);
    }
    if !a.inputs.is_empty() {
        cfg.data.inputs = a.inputs.clone();
    }
    cfg.validate()?;
    let schedule = cfg.train.schedule.build()?;
    let net = cfg.model.network()?;
    let (data, validation) = prepare_patches(&cfg)?;
    info!("{} training patches, {} held out", data.len(), validation.len());
    fs::create_dir_all(&a.out)?;
    let (mut model, mut adam, start_epoch) = match a.resume_epoch {
        Some(e) => {
            let (m, opt) = load_checkpoint(&a.out, e)?;
            if m.config.layers != net.layers {
                return config_err("checkpoint architecture differs from the configured model");
            }
            (m, opt, e)
        }
        None => {
            let m = build_network(&net, cfg.seed)?;
            let opt = AdamState::for_model(&m);
            (m, opt, 0)
        }
    };
    let options = TrainOptions {
        seed: cfg.seed,
        start_epoch,
        end_epoch: cfg.train.end_epoch,
        max_steps: cfg.train.max_steps,
        checkpoint_dir: Some(a.out.clone()),
        validation,
    };
    let log = train(&mut model, &mut adam, &data, &schedule, &options)?;
    let log_path = a.out.join("train_log.csv");
    fs::write(&log_path, log.to_csv())?;
    fs::write(a.out.join("run.toml"), cfg.to_toml())?;
    write_meta(&log_path, "train", Some(cfg.seed), json!({ "config": to_json(&cfg), "start_epoch": start_epoch }))?;
    println!("trained {} epochs ({} steps); log in {}", log.records.len(), log.total_steps(), log_path.display());
    Ok(())
}

fn cmd_denoise(a: DenoiseArgs) -> Result<()> {
    let model = read_weights(&a.weights)?;
    let cube = read_hsi(&a.input)?;
    let shape = Shape::new(1, 1, cube.height(), cube.width(), cube.bands());
    model.check_input(shape)?;
    let out = HsiCube::from_tensor(&model.predict(&cube.to_tensor())?, 0)?;
    write_hsi(&a.output, &out)?;
    write_meta(
        &a.output,
        "denoise",
        None,
        json!({ "weights": a.weights, "input": a.input, "network": to_json(&model.config) }),
    )?;
    println!("denoised {}x{}x{} cube", cube.height(), cube.width(), cube.bands());
    Ok(())
}

fn cmd_add_noise(a: AddNoiseArgs) -> Result<()> {
    let regime = match (a.case, a.sigma) {
        (Some(c), None) => NoiseRegime::Case(c),
        (None, Some(s)) => NoiseRegime::IidGaussian { sigma: s },
        _ => return config_err("give exactly one of --case or --sigma"),
    };
    let spec = NoiseSpec { regime, seed: a.seed };
    let cube = read_hsi(&a.input)?;
    let (noisy, report) = spec.apply(&cube)?;
    write_hsi(&a.output, &noisy)?;
    fs::write(sidecar(&a.output, ".report.json"), report.to_json() + "\n")?;
    write_meta(&a.output, "add-noise", Some(a.seed), json!({ "noise": to_json(&spec), "input": a.input }))?;
    println!("{} corrupted; {} sparse corruptions", regime, report.sparse_count());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let reference = read_hsi(&a.reference)?;
    let image = a.reference.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
    let bands = reference.bands();
    let mut csv = String::from("image,method,metric,value");
    for b in 1..=bands {
        csv.push_str(&format!(",psnr_band_{b}"));
    }
    csv.push('\n');
    let blanks = ",".repeat(bands);
    for e in &a.estimates {
        let (name, path) = e
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("estimate {e:?} is not NAME=PATH")))?;
        let est = read_hsi(path)?;
        let per_band = psnr_per_band(&est, &reference)?;
        let mean = per_band.iter().sum::<f64>() / bands as f64;
        csv.push_str(&format!("{image},{name},psnr,{mean:.6}"));
        for v in &per_band {
            csv.push_str(&format!(",{v:.6}"));
        }
        csv.push('\n');
        csv.push_str(&format!("{image},{name},ssim,{:.6}{blanks}\n", ssim(&est, &reference)?));
        csv.push_str(&format!("{image},{name},sam,{:.6}{blanks}\n", sam(&est, &reference)?));
    }
    fs::write(&a.out, &csv)?;
    write_meta(&a.out, "eval", None, json!({ "reference": a.reference, "estimates": a.estimates }))?;
    println!("wrote {} metric rows", 3 * a.estimates.len());
    Ok(())
}

fn cmd_gcs(a: GcsArgs) -> Result<()> {
    let model = read_weights(&a.weights)?;
    let layer = match a.layer.as_str() {
        "first" => model
            .first_bidirectional()
            .ok_or_else(|| Error::Config("model has no bidirectional recurrent layer".into()))?,
        s => s.parse().map_err(|_| Error::Config(format!("layer {s:?} is neither `first` nor an index")))?,
    };
    let mut matrices = Vec::new();
    for (k, input) in a.inputs.iter().enumerate() {
        let cube = read_hsi(input)?;
        let g = layer_gcs(&model, &cube.to_tensor(), layer, a.epsilon)?;
        let stem = if a.inputs.len() == 1 { a.out.clone() } else { sidecar(&a.out, &format!(".{k}")) };
        fs::write(sidecar(&stem, ".csv"), g.combined.to_csv())?;
        fs::write(sidecar(&stem, ".pgm"), g.combined.to_pgm())?;
        let mut rel = String::from("band,total,forward,backward,own\n");
        for (j, c) in relative_bands(&g.combined).iter().enumerate() {
            rel.push_str(&format!("{},{},{},{},{}\n", j + 1, c.total, c.forward, c.backward, c.own as u8));
        }
        fs::write(sidecar(&stem, ".relative.csv"), rel)?;
        matrices.push(g.combined);
    }
    let hist = relative_band_histogram(&matrices)?;
    let hist_path = sidecar(&a.out, ".histogram.csv");
    fs::write(&hist_path, hist.to_csv())?;
    write_meta(
        &hist_path,
        "gcs",
        None,
        json!({ "weights": a.weights, "layer": layer, "epsilon": a.epsilon, "inputs": a.inputs }),
    )?;
    println!("layer {layer}: {} band observations", hist.observations());
    Ok(())
}

/// Run the reduced gradient suite and return every report by name.
pub fn gradient_suite(tolerance: f64, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut tensor = |shape: Shape| FeatureTensor::<f32>::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let x = tensor(Shape::new(1, 2, 6, 6, 5));
    let small = tensor(Shape::new(1, 2, 3, 3, 4));
    let net_in = tensor(Shape::new(1, 1, 4, 4, 4));
    let mut out = Vec::new();
    let unit = |kind, direction, sampling, k: u64| {
        let spec = UnitSpec { kind, cin: 2, cout: 3, direction, sampling };
        QruUnit::he_init(spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(k)))
    };
    let cases = [
        ("qru3d-forward", unit(UnitKind::Qru3d, Direction::Forward, Sampling::Same, 1)),
        ("qru3d-backward", unit(UnitKind::Qru3d, Direction::Backward, Sampling::Same, 2)),
        ("qru3d-bidirectional", unit(UnitKind::Qru3d, Direction::Bidirectional, Sampling::Same, 3)),
        ("qru3d-down", unit(UnitKind::Qru3d, Direction::Forward, Sampling::Down, 4)),
        ("qru3d-up", unit(UnitKind::Qru3d, Direction::Backward, Sampling::Up, 5)),
        ("qru2d", unit(UnitKind::Qru2d, Direction::Forward, Sampling::Same, 6)),
        ("c3d", unit(UnitKind::C3d, Direction::Forward, Sampling::Same, 7)),
    ];
    let conv_kernel = match &cases[0].1.params {
        crate::qru::UnitParams::Gated { main, .. } => main.wz.clone(),
        _ => unreachable!("qru3d units are gated"),
    };
    let down = Sampling::Down.conv_spec([3, 3, 3]);
    out.push(("conv3d".into(), grad_check_conv(&x, &conv_kernel, &Sampling::Same.conv_spec([3, 3, 3]), None, tolerance, seed)?));
    out.push(("conv3d-strided".into(), grad_check_conv(&x, &conv_kernel, &down, None, tolerance, seed)?));
    out.push(("tconv3d".into(), grad_check_conv(&small, &conv_kernel, &down, Some([1, 1, 0]), tolerance, seed)?));
    for (name, u) in &cases {
        let input = if u.spec.sampling == Sampling::Up { &small } else { &x };
        out.push((name.to_string(), grad_check_unit(u, input, tolerance, seed)?));
    }
    let desk = build_random_network(&NetworkConfig::desk(), seed)?;
    out.push(("desk-network".into(), grad_check_model(&desk, &net_in, tolerance, seed)?));
    Ok(out)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let reports = gradient_suite(a.tolerance, a.seed)?;
    let mut ok = true;
    for (name, r) in &reports {
        println!("{:<22} {} max rel {:.3e}", name, if r.passed() { "pass" } else { "FAIL" }, r.max_rel_error());
        ok &= r.passed();
    }
    if let Some(p) = &a.out {
        let body: Vec<_> = reports.iter().map(|(n, r)| json!({ "name": n, "report": to_json(r) })).collect();
        fs::write(p, serde_json::to_string_pretty(&body).expect("json") + "\n")?;
        write_meta(p, "gradcheck", Some(a.seed), json!({ "tolerance": a.tolerance }))?;
    }
    if ok {
        Ok(true)
    } else {
        Err(Error::State(format!("gradient check exceeded tolerance {:e}", a.tolerance)))
    }
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    if a.height == 0 || a.width == 0 || a.bands == 0 {
        return config_err("extents must be positive");
    }
    let cube = gen_synthetic(a.height, a.width, a.bands, a.seed);
    write_hsi(&a.output, &cube)?;
    write_meta(
        &a.output,
        "gen-synthetic",
        Some(a.seed),
        json!({ "height": a.height, "width": a.width, "bands": a.bands }),
    )?;
    println!("wrote {}x{}x{} synthetic cube", a.height, a.width, a.bands);
    Ok(())
}
