//! The `deepbound` command line: dataset generation, training, profiling,
//! calibration, attacks, transfer evaluation, detection, differential maps
//! and report tables.
//!
//! Every subcommand also reads `key = value` lines from `--config FILE`;
//! flags given on the command line win over the file.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attack::{
    bim_attack, clipping_attack, d2b_attack, calibrate_epsilon, run_batch, search_step, two_step_attack, AttackConfig,
    AttackResult, BarrierKind, BimConfig, ClipConfig, Mode, SearchConfig, Throttle, ThrottlePlane, TwoStepConfig,
};
use crate::bounds::BoundKind;
use crate::data::{generate_dataset, LabeledDataset};
use crate::detect::{calibrate_threshold, differential_map, divergence_score, transfer_eval, Squeezer};
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::metrics::{pixel_distances, read_metrics_csv, ssim, write_metrics_csv, MetricsRecord};
use crate::model::{Arch, ModelSpec};
use crate::plane::{enumerate_planes, Plane};
use crate::ppm::save_ppm;
use crate::profile::{profile_planes, read_profile, select_planes, write_density_csv, write_profile, PlaneProfile};
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig};
use crate::weights::{load_model, save_model};

#[derive(Debug, Parser)]
#[command(name = "deepbound", version, about = "Adversarial examples under per-neuron quantile bounds")]
pub struct Cli {
    /// `key = value` defaults for the subcommand's flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Render the textured-shape dataset as PPM files plus manifest.csv.
    #[command(args_override_self = true)]
    Generate(GenerateArgs),
    /// Train a model on the first 80% of a dataset directory.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Profile every plane, rank by normality and store the top planes.
    #[command(args_override_self = true)]
    Profile(ProfileArgs),
    /// Derive per-plane epsilon from the pixel-bounded attack.
    #[command(args_override_self = true)]
    Calibrate(CalibrateArgs),
    /// Attack every sample of a dataset directory.
    #[command(args_override_self = true)]
    Attack(AttackArgs),
    /// Success rate of stored adversarial samples on another model.
    #[command(args_override_self = true)]
    Evaluate(EvaluateArgs),
    /// Feature-squeezing detection of stored adversarial samples.
    #[command(args_override_self = true)]
    Detect(DetectArgs),
    /// Scaled pixel-difference images of stored adversarial samples.
    #[command(args_override_self = true)]
    Diff(DiffArgs),
    /// Aggregate tables and success/in-bound curves over attack runs.
    #[command(args_override_self = true)]
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub arch: Arch,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.02)]
    pub lr: f32,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Number of planes to store.
    #[arg(long, default_value_t = 3)]
    pub top: usize,
    /// Neurons per stored plane written to the density table.
    #[arg(long, default_value_t = 16)]
    pub density_neurons: usize,
    #[arg(long, default_value_t = 32)]
    pub density_bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Model whose planes are bounded.
    #[arg(long)]
    pub reference: PathBuf,
    /// Model attacked; defaults to the reference model.
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long)]
    pub profiles: PathBuf,
    /// Plane ids or names, comma separated; defaults to every stored profile.
    #[arg(long, value_delimiter = ',')]
    pub planes: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.04)]
    pub bim_eps: f64,
    #[arg(long, default_value = "untargeted")]
    pub mode: Mode,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    D2b,
    Bim,
    Clip,
    TwoStep,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::D2b => "d2b",
            Method::Bim => "bim",
            Method::Clip => "clip",
            Method::TwoStep => "two-step",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SearchMode {
    /// One step for all samples, searched on the first `probe-samples`.
    Shared,
    /// A separate search for every sample.
    PerSample,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long, value_enum, default_value = "d2b")]
    pub method: Method,
    /// Model attacked.
    #[arg(long)]
    pub target: PathBuf,
    /// Model whose planes are bounded; defaults to the target model.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Stored plane profiles; optional for `bim`.
    #[arg(long)]
    pub profiles: Option<PathBuf>,
    /// Plane ids or names, comma separated; defaults to every stored profile.
    #[arg(long, value_delimiter = ',')]
    pub planes: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    /// Attack the first N samples only.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, default_value = "untargeted")]
    pub mode: Mode,
    #[arg(long, default_value = "quantile")]
    pub bound: BoundKind,
    /// Absolute bound epsilon.
    #[arg(long, conflicts_with = "eps_rel")]
    pub eps: Option<f64>,
    /// Epsilon as a percentage of the calibrated base value.
    #[arg(long)]
    pub eps_rel: Option<f64>,
    /// Output of `calibrate`, needed with `--eps-rel`.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, default_value_t = 50)]
    pub patience: usize,
    /// Fixed sign-step size; searched when absent.
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long, value_enum, default_value = "shared")]
    pub search: SearchMode,
    #[arg(long, default_value_t = 0.0)]
    pub search_lo: f64,
    #[arg(long, default_value_t = 0.01)]
    pub search_hi: f64,
    #[arg(long, default_value_t = 20)]
    pub probes: usize,
    #[arg(long, default_value_t = 25)]
    pub probe_iters: usize,
    #[arg(long, default_value_t = 8)]
    pub probe_samples: usize,
    #[arg(long, default_value = "poly")]
    pub barrier: BarrierKind,
    #[arg(long, default_value_t = 1e5)]
    pub barrier_k: f64,
    #[arg(long, default_value_t = 200.0)]
    pub barrier_b: f64,
    #[arg(long, default_value_t = 1e6)]
    pub linear_k: f64,
    #[arg(long, default_value_t = 0.95)]
    pub linear_b: f64,
    /// Smoothing weight.
    #[arg(long, default_value_t = 10.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 8)]
    pub max_recoveries: usize,
    /// Pixel `l_inf` radius of `bim`.
    #[arg(long, default_value_t = 0.04)]
    pub pixel_eps: f64,
    /// `bim` step; `pixel-eps / 10` when absent.
    #[arg(long)]
    pub bim_step: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub bim_iters: usize,
    /// Outer iterations of `two-step`.
    #[arg(long, default_value_t = 100)]
    pub outer: usize,
    #[arg(long, default_value_t = 10)]
    pub inner: usize,
    /// Target-value step of `two-step` as a fraction of interval width.
    #[arg(long, default_value_t = 0.1)]
    pub value_step: f64,
    /// Label of this run in the metrics table.
    #[arg(long)]
    pub setting: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model the stored samples are evaluated on.
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory of `attack`.
    #[arg(long)]
    pub attack: PathBuf,
    #[arg(long, default_value = "untargeted")]
    pub mode: Mode,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Benign samples; the first half calibrates the threshold.
    #[arg(long)]
    pub benign: PathBuf,
    /// Output directory of `attack`.
    #[arg(long)]
    pub attack: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = Squeezer::standard())]
    pub squeezers: Vec<Squeezer>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiffArgs {
    /// Output directory of `attack`.
    #[arg(long)]
    pub attack: PathBuf,
    /// Dataset the attack ran on.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    pub scale: f32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directories of `attack`.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Splices `--config` file entries in front of the subcommand's own flags,
/// so later command-line flags override them.
pub fn expand_config(args: Vec<String>) -> Result<Vec<String>> {
    let mut path = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            path = Some(it.next().ok_or_else(|| Error::Usage("--config needs a file".into()))?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else { return Ok(rest) };
    let text = fs::read_to_string(&path)?;
    let mut injected = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("{path}:{}: expected key = value", n + 1)))?;
        let (key, value) = (key.trim().replace('_', "-"), value.trim());
        match value {
            "true" => injected.push(format!("--{key}")),
            "false" => {}
            _ => {
                injected.push(format!("--{key}"));
                injected.push(value.to_string());
            }
        }
    }
    // Program name, then the subcommand, then file entries, then the rest.
    let at = rest.iter().skip(1).position(|a| !a.starts_with('-')).map_or(rest.len(), |i| i + 2);
    rest.splice(at..at, injected);
    Ok(rest)
}

/// Parses `args` (program name first) and runs the command.
pub fn run(args: Vec<String>) -> Result<()> {
    let cli = match Cli::try_parse_from(expand_config(args)?) {
        Ok(cli) => cli,
        // --help and --version
        Err(e) if !e.use_stderr() => {
            e.print()?;
            return Ok(());
        }
        Err(e) => {
            let msg = e.render().to_string();
            return Err(Error::Usage(msg.trim_start_matches("error: ").trim_end().to_string()));
        }
    };
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Profile(a) => cmd_profile(&a),
        Command::Calibrate(a) => cmd_calibrate(&a),
        Command::Attack(a) => cmd_attack(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Detect(a) => cmd_detect(&a),
        Command::Diff(a) => cmd_diff(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let ds = generate_dataset(a.seed, a.per_class)?;
    ds.export(&a.out)?;
    println!("wrote {} images to {}", ds.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let data = LabeledDataset::import(&a.data)?;
    let cfg = TrainConfig { epochs: a.epochs, lr: a.lr, batch_size: a.batch_size, seed: a.seed, ..TrainConfig::default() };
    let (model, report) = train(&ModelSpec::new(a.arch), &data, &cfg)?;
    if let Some(dir) = a.out.parent() {
        fs::create_dir_all(dir)?;
    }
    save_model(&model, &a.out)?;
    println!("accuracy {:.4} final_loss {:.4}", report.accuracy, report.final_loss);
    Ok(())
}

fn profile_path(dir: &Path, plane: usize) -> PathBuf {
    dir.join(format!("plane_{plane:03}.dbp"))
}

fn cmd_profile(a: &ProfileArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let data = LabeledDataset::import(&a.data)?;
    let planes = enumerate_planes(&model.graph);
    if a.top > planes.len() {
        log::warn!("requested {} planes but the model has {}; keeping all", a.top, planes.len());
    }
    let profiles = profile_planes(&model, &data.images, &planes)?;
    let selected = select_planes(&profiles, a.top);
    fs::create_dir_all(&a.out)?;

    let mut wtr = csv::Writer::from_path(a.out.join("normality.csv"))?;
    wtr.write_record(["plane", "name", "neurons", "score", "rank"])?;
    for (p, prof) in planes.iter().zip(&profiles) {
        let rank = selected.iter().position(|&s| s == p.id).map_or(String::new(), |r| (r + 1).to_string());
        wtr.write_record([p.id.to_string(), p.name.clone(), p.neuron_count.to_string(), format!("{:e}", prof.aggregate), rank])?;
    }
    wtr.flush()?;

    for &id in &selected {
        let prof = &profiles[id];
        write_profile(prof, BufWriter::new(File::create(profile_path(&a.out, id))?))?;
        let neurons: Vec<usize> = (0..a.density_neurons.min(prof.neuron_count())).collect();
        let w = BufWriter::new(File::create(a.out.join(format!("density_{id:03}.csv")))?);
        write_density_csv(prof, &neurons, a.density_bins, w)?;
        println!("plane {id} {} score {:e}", planes[id].name, prof.aggregate);
    }
    Ok(())
}

/// Stored profiles for the requested planes (all stored ones by default), in
/// plane-id order.
fn load_profiles(dir: &Path, planes: &[Plane], wanted: &[String]) -> Result<Vec<PlaneProfile>> {
    let ids: Vec<usize> = if wanted.is_empty() {
        let mut ids: Vec<usize> = planes.iter().map(|p| p.id).filter(|&id| profile_path(dir, id).exists()).collect();
        ids.sort_unstable();
        ids
    } else {
        wanted.iter().map(|w| resolve_plane(planes, w)).collect::<Result<_>>()?
    };
    if ids.is_empty() {
        return Err(Error::Usage(format!("no plane profiles in {}", dir.display())));
    }
    ids.iter()
        .map(|&id| {
            let path = profile_path(dir, id);
            let prof = read_profile(BufReader::new(File::open(&path).map_err(|e| {
                Error::Usage(format!("missing profile {} ({e}); run `deepbound profile` first", path.display()))
            })?))?;
            if prof.plane != id || prof.neuron_count() != planes[id].neuron_count {
                return Err(Error::Usage(format!("{} does not match plane {}", path.display(), planes[id].name)));
            }
            Ok(prof)
        })
        .collect()
}

fn resolve_plane(planes: &[Plane], s: &str) -> Result<usize> {
    let found = match s.parse::<usize>() {
        Ok(id) => planes.get(id),
        Err(_) => planes.iter().find(|p| p.name == s),
    };
    found.map(|p| p.id).ok_or_else(|| Error::Usage(format!("unknown plane {s:?}")))
}

fn samples_of(data: &LabeledDataset, n: Option<usize>) -> Vec<(Tensor, usize)> {
    let n = n.unwrap_or(data.len()).min(data.len());
    data.images[..n].iter().cloned().zip(data.labels[..n].iter().copied()).collect()
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<()> {
    let reference = load_model(&a.reference)?;
    let target = a.target.as_deref().map(load_model).transpose()?;
    let target = target.as_ref().unwrap_or(&reference);
    let planes = enumerate_planes(&reference.graph);
    let profiles = load_profiles(&a.profiles, &planes, &a.planes)?;
    let data = LabeledDataset::import(&a.data)?;
    let samples = samples_of(&data, Some(a.samples));
    let pairs: Vec<(&Plane, &PlaneProfile)> = profiles.iter().map(|p| (&planes[p.plane], p)).collect();
    let base = calibrate_epsilon(&reference, &pairs, target, &samples, &BimConfig::with_eps(a.mode, a.bim_eps))?;

    if let Some(dir) = a.out.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut wtr = csv::Writer::from_path(&a.out)?;
    wtr.write_record(["plane", "name", "eps_base"])?;
    for ((plane, _), eps) in pairs.iter().zip(&base) {
        wtr.write_record([plane.id.to_string(), plane.name.clone(), format!("{eps}")])?;
        println!("plane {} {} eps_base {eps:.6}", plane.id, plane.name);
    }
    wtr.flush()?;
    Ok(())
}

fn read_calibration(path: &Path) -> Result<BTreeMap<usize, f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let bad = || Error::Format(format!("bad calibration row in {}", path.display()));
        let id: usize = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let eps: f64 = rec.get(2).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        out.insert(id, eps);
    }
    Ok(out)
}

fn sample_name(id: usize) -> String {
    format!("sample_{id:05}")
}

fn cmd_attack(a: &AttackArgs) -> Result<()> {
    let target = load_model(&a.target)?;
    let reference = a.reference.as_deref().map(load_model).transpose()?;
    if reference.is_some() && matches!(a.method, Method::Clip | Method::TwoStep) {
        return Err(Error::Usage(format!("{} modifies the attacked model's dataflow; omit --reference", a.method.name())));
    }
    let reference = reference.as_ref().unwrap_or(&target);
    let planes = enumerate_planes(&reference.graph);
    let data = LabeledDataset::import(&a.data)?;
    let samples = samples_of(&data, a.samples);

    let profiles = match (&a.profiles, a.method) {
        (Some(dir), _) => load_profiles(dir, &planes, &a.planes)?,
        (None, Method::Bim) => Vec::new(),
        (None, m) => return Err(Error::Usage(format!("--profiles is required for {}", m.name()))),
    };
    let eps: Vec<f64> = match (a.eps, a.eps_rel) {
        _ if profiles.is_empty() => Vec::new(),
        (Some(e), _) => vec![e; profiles.len()],
        (None, Some(pct)) => {
            let path = a.calibration.as_ref().ok_or_else(|| {
                Error::Usage("--eps-rel needs --calibration; run `deepbound calibrate` first".into())
            })?;
            let base = read_calibration(path)?;
            profiles
                .iter()
                .map(|p| {
                    base.get(&p.plane)
                        .map(|b| b * pct / 100.0)
                        .ok_or_else(|| Error::Usage(format!("no calibration for plane {}", p.plane)))
                })
                .collect::<Result<_>>()?
        }
        (None, None) => return Err(Error::Usage("set --eps or --eps-rel".into())),
    };
    let throttle = if profiles.is_empty() {
        None
    } else {
        let tps = profiles
            .iter()
            .zip(&eps)
            .map(|(p, &eps)| ThrottlePlane { plane: &planes[p.plane], profile: p, kind: a.bound, eps })
            .collect();
        Some(Throttle::new(reference, tps)?)
    };

    let results: Vec<AttackResult> = match a.method {
        Method::D2b => {
            let throttle = throttle.as_ref().expect("profiles checked above");
            let weights = LossWeights {
                barrier_k: a.barrier_k,
                barrier_b: a.barrier_b,
                linear_k: a.linear_k,
                linear_b: a.linear_b,
                alpha: a.alpha,
            };
            let mut cfg = AttackConfig {
                mode: a.mode,
                weights,
                barrier: a.barrier,
                max_iters: a.iters,
                patience: a.patience,
                step: a.step.unwrap_or(0.0),
                search: None,
                max_recoveries: a.max_recoveries,
            };
            let search = SearchConfig { lo: a.search_lo, hi: a.search_hi, probes: a.probes, probe_iters: a.probe_iters };
            match (a.step, a.search) {
                (Some(_), _) => {}
                (None, SearchMode::PerSample) => cfg.search = Some(search),
                (None, SearchMode::Shared) => {
                    let probes = &samples[..a.probe_samples.clamp(1, samples.len().max(1)).min(samples.len())];
                    let found = search_step(probes, &target, throttle, &cfg, (search.lo, search.hi), search.probes, search.probe_iters)?;
                    println!("step {} (searched on {} samples{})", found.step, probes.len(), if found.warning { ", no feasible step" } else { "" });
                    cfg.step = found.step;
                }
            }
            run_batch(&samples, |x, l| d2b_attack(x, l, &target, throttle, &cfg))?
        }
        Method::Bim => {
            let cfg = BimConfig {
                mode: a.mode,
                eps: a.pixel_eps,
                step: a.bim_step.unwrap_or(a.pixel_eps / 10.0),
                iters: a.bim_iters,
            };
            run_batch(&samples, |x, l| bim_attack(x, l, &target, &cfg, throttle.as_ref()))?
        }
        Method::Clip => {
            let throttle = throttle.as_ref().expect("profiles checked above");
            let cfg = ClipConfig { mode: a.mode, iters: a.iters, step: a.step.unwrap_or(ClipConfig::default().step) };
            run_batch(&samples, |x, l| clipping_attack(x, l, &target, throttle, &cfg))?
        }
        Method::TwoStep => {
            let throttle = throttle.as_ref().expect("profiles checked above");
            let cfg = TwoStepConfig {
                mode: a.mode,
                outer: a.outer,
                inner: a.inner,
                value_step: a.value_step,
                step: a.step.unwrap_or(TwoStepConfig::default().step),
            };
            run_batch(&samples, |x, l| two_step_attack(x, l, &target, throttle, &cfg))?
        }
    };

    let setting = a.setting.clone().unwrap_or_else(|| match (a.method, a.eps, a.eps_rel) {
        (Method::Bim, _, _) => format!("pixel-eps={}", a.pixel_eps),
        (_, Some(e), _) => format!("{}-eps={e}", a.bound),
        (_, None, Some(p)) => format!("{}-eps-rel={p}", a.bound),
        _ => String::new(),
    });
    let plane_ids: Vec<usize> = profiles.iter().map(|p| p.plane).collect();
    write_attack_outputs(&a.out, a.method.name(), &setting, &plane_ids, &samples, &results)?;

    let n = results.len().max(1) as f64;
    println!(
        "{} {}: {} samples, success {:.3}, feasible {:.3}",
        a.method.name(),
        setting,
        results.len(),
        results.iter().filter(|r| r.success).count() as f64 / n,
        results.iter().filter(|r| r.feasible).count() as f64 / n,
    );
    Ok(())
}

fn write_attack_outputs(
    out: &Path,
    method: &str,
    setting: &str,
    plane_ids: &[usize],
    samples: &[(Tensor, usize)],
    results: &[AttackResult],
) -> Result<()> {
    let (adv_dir, trace_dir) = (out.join("adv"), out.join("trace"));
    fs::create_dir_all(&adv_dir)?;
    fs::create_dir_all(&trace_dir)?;
    let mut records = Vec::with_capacity(results.len());
    for (id, ((x, label), r)) in samples.iter().zip(results).enumerate() {
        let name = sample_name(id);
        r.x_adv.write_dbt(BufWriter::new(File::create(adv_dir.join(format!("{name}.dbt")))?))?;
        save_ppm(&r.x_adv, &adv_dir.join(format!("{name}.ppm")))?;
        r.write_trace_csv(BufWriter::new(File::create(trace_dir.join(format!("{name}.csv")))?))?;
        let (l2, linf) = pixel_distances(x, &r.x_adv)?;
        records.push(MetricsRecord {
            sample: id,
            method: method.to_string(),
            setting: setting.to_string(),
            label: *label,
            l2,
            linf,
            quantile_distances: plane_ids.iter().copied().zip(r.quantile_distances.iter().copied()).collect(),
            ssim: ssim(x, &r.x_adv)?,
            confidence: r.confidence,
            success: r.success,
            feasible: r.feasible,
            occupancy: r.occupancy,
            iterations: r.iterations,
            consistent: r.consistent,
        });
    }
    write_metrics_csv(&records, BufWriter::new(File::create(out.join("metrics.csv"))?))
}

fn read_run(dir: &Path) -> Result<Vec<MetricsRecord>> {
    let path = dir.join("metrics.csv");
    let f = File::open(&path).map_err(|e| Error::Usage(format!("{} is not an attack output ({e})", dir.display())))?;
    read_metrics_csv(BufReader::new(f))
}

fn load_adv(dir: &Path, sample: usize) -> Result<Tensor> {
    Tensor::read_dbt(BufReader::new(File::open(dir.join("adv").join(format!("{}.dbt", sample_name(sample))))?))
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let records = read_run(&a.attack)?;
    let adv: Vec<(Tensor, usize)> =
        records.iter().map(|r| Ok((load_adv(&a.attack, r.sample)?, r.label))).collect::<Result<_>>()?;
    let rate = transfer_eval(&adv, &model, a.mode)?;
    let mut wtr = csv::Writer::from_path(&a.out)?;
    wtr.write_record(["sample", "label", "success"])?;
    for (r, (x, label)) in records.iter().zip(&adv) {
        let hit = transfer_eval(&[(x.clone(), *label)], &model, a.mode)?.unwrap_or(0.0) > 0.0;
        wtr.write_record([r.sample.to_string(), label.to_string(), (hit as u8).to_string()])?;
    }
    wtr.flush()?;
    match rate {
        Some(r) => println!("transfer success {r:.4} over {} samples", adv.len()),
        None => println!("transfer success absent (no samples)"),
    }
    Ok(())
}

fn cmd_detect(a: &DetectArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let benign = LabeledDataset::import(&a.benign)?;
    if benign.len() < 2 {
        return Err(Error::Usage("detection needs at least two benign samples".into()));
    }
    let records = read_run(&a.attack)?;
    let cut = benign.len() / 2;
    let score = |x: &Tensor| divergence_score(&model, x, &a.squeezers);
    let calib: Vec<f64> = benign.images[..cut].iter().map(score).collect::<Result<_>>()?;
    let threshold = calibrate_threshold(&calib)?;
    let flag = |s: f64| !a.squeezers.is_empty() && s > threshold;

    let mut wtr = csv::Writer::from_path(&a.out)?;
    wtr.write_record(["kind", "sample", "score", "flagged"])?;
    let mut benign_flags = 0usize;
    for (i, x) in benign.images.iter().enumerate().skip(cut) {
        let s = score(x)?;
        benign_flags += flag(s) as usize;
        wtr.write_record(["benign".to_string(), i.to_string(), format!("{s}"), (flag(s) as u8).to_string()])?;
    }
    let (mut adv_flags, mut adv_total) = (0usize, 0usize);
    for r in records.iter().filter(|r| r.success) {
        let s = score(&load_adv(&a.attack, r.sample)?)?;
        adv_flags += flag(s) as usize;
        adv_total += 1;
        wtr.write_record(["adversarial".to_string(), r.sample.to_string(), format!("{s}"), (flag(s) as u8).to_string()])?;
    }
    wtr.flush()?;
    let held = benign.len() - cut;
    println!("threshold {threshold:.6}");
    println!("benign flagged {benign_flags}/{held}");
    println!("adversarial flagged {adv_flags}/{adv_total}");
    Ok(())
}

fn cmd_diff(a: &DiffArgs) -> Result<()> {
    let data = LabeledDataset::import(&a.data)?;
    let records = read_run(&a.attack)?;
    fs::create_dir_all(&a.out)?;
    for r in &records {
        let x = data.images.get(r.sample).ok_or_else(|| Error::Usage(format!("sample {} not in dataset", r.sample)))?;
        let map = differential_map(x, &load_adv(&a.attack, r.sample)?, a.scale)?;
        save_ppm(&map, &a.out.join(format!("diff_{:05}.ppm", r.sample)))?;
    }
    println!("wrote {} difference maps", records.len());
    Ok(())
}

#[derive(Default)]
struct Group {
    n: usize,
    confidence: f64,
    success: usize,
    l2: f64,
    linf: f64,
    qd: BTreeMap<usize, f64>,
    ssim: f64,
    feasible: usize,
    occupancy: f64,
    consistent: bool,
    /// Per iteration: samples counted, successes, in-bound iterates.
    curve: Vec<(usize, usize, usize)>,
}

/// `(success, feasible)` per trace row.
fn read_trace(path: &Path) -> Result<Vec<(bool, bool)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let flag = |s: Option<&str>| s == Some("1");
    rdr.records().map(|r| r.map(|r| (flag(r.get(7)), flag(r.get(6)))).map_err(Error::from)).collect()
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let mut groups: BTreeMap<(String, String), Group> = BTreeMap::new();
    for dir in &a.input {
        if !dir.is_dir() {
            return Err(Error::Usage(format!("{} is not a directory", dir.display())));
        }
        if !dir.join("metrics.csv").exists() {
            log::warn!("{} holds no metrics.csv; skipping", dir.display());
            continue;
        }
        for r in read_run(dir)? {
            let g = groups.entry((r.method.clone(), r.setting.clone())).or_insert_with(|| Group { consistent: true, ..Group::default() });
            g.n += 1;
            g.confidence += r.confidence;
            g.success += r.success as usize;
            g.l2 += r.l2;
            g.linf += r.linf;
            for (p, v) in &r.quantile_distances {
                *g.qd.entry(*p).or_default() += v;
            }
            g.ssim += r.ssim;
            g.feasible += r.feasible as usize;
            g.occupancy += r.occupancy;
            g.consistent &= r.consistent;

            let trace = read_trace(&dir.join("trace").join(format!("{}.csv", sample_name(r.sample))))?;
            let len = trace.len();
            if g.curve.len() < len {
                g.curve.resize(len, (0, 0, 0));
            }
            for (i, (s, f)) in trace.into_iter().enumerate() {
                let c = &mut g.curve[i];
                *c = (c.0 + 1, c.1 + s as usize, c.2 + f as usize);
            }
            // A finished run keeps its final state for later iterations.
            let last = (r.success as usize, r.feasible as usize);
            for c in g.curve.iter_mut().skip(len) {
                *c = (c.0 + 1, c.1 + last.0, c.2 + last.1);
            }
        }
    }
    if groups.is_empty() {
        log::warn!("no attack results found; writing empty tables");
    }
    fs::create_dir_all(&a.out)?;

    let mut agg = csv::Writer::from_path(a.out.join("aggregates.csv"))?;
    agg.write_record([
        "method",
        "setting",
        "samples",
        "mean_confidence",
        "success_rate",
        "mean_l2",
        "mean_linf",
        "mean_quantile_distances",
        "mean_ssim",
        "feasible_rate",
        "mean_occupancy",
        "consistent",
    ])?;
    let mut curves = csv::Writer::from_path(a.out.join("curves.csv"))?;
    curves.write_record(["method", "setting", "iteration", "success_rate", "inbound_rate"])?;
    for ((method, setting), g) in &groups {
        let n = g.n as f64;
        let qd = g.qd.iter().map(|(p, v)| format!("{p}:{}", v / n)).collect::<Vec<_>>().join(";");
        agg.write_record([
            method.clone(),
            setting.clone(),
            g.n.to_string(),
            format!("{}", g.confidence / n),
            format!("{}", g.success as f64 / n),
            format!("{}", g.l2 / n),
            format!("{}", g.linf / n),
            qd,
            format!("{}", g.ssim / n),
            format!("{}", g.feasible as f64 / n),
            format!("{}", g.occupancy / n),
            (g.consistent as u8).to_string(),
        ])?;
        for (i, &(_, s, f)) in g.curve.iter().enumerate() {
            curves.write_record([
                method.clone(),
                setting.clone(),
                i.to_string(),
                format!("{}", s as f64 / n),
                format!("{}", f as f64 / n),
            ])?;
        }
    }
    agg.flush()?;
    curves.flush()?;
    println!("{} groups", groups.len());
    Ok(())
}
