//! Command line entry points. [`run`] maps every outcome to an exit status:
//! 0 success, 1 replay mismatch, 2 config error, 3 input error,
//! 4 divergence, 5 theory-check failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::{OracleSpec, RunConfig};
use crate::denoiser::{Denoiser, EmpiricalDataOracle, GaussianDataOracle};
use crate::dig::DigTrace;
use crate::error::{Error, Result};
use crate::guidance::ModalityStack;
use crate::io::{load_image, load_image_expect, save_image, sha256_file, write_text, ExternalDenoiser};
use crate::metrics::{fusion_report, reports_to_csv, reports_to_table, GrayImage};
use crate::sampler::{fuse, gain_trace};
use crate::schedule::NoiseSchedule;
use crate::tensor::ImageTensor;
use crate::theory::{self, bench_prior, make_instance, InstanceKind, TheorySuite, PRIOR_PIXEL_VAR};

pub const EXIT_MISMATCH: i32 = 1;
pub const EXIT_THEORY: i32 = 5;

#[derive(Debug, Parser)]
#[command(
    name = "dig2dig",
    version,
    about = "Diffusion image fusion with dynamic information-gain guidance"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fuse one set of modality images (or matching files in input directories).
    Fuse(RunArgs),
    /// Cumulative gain curves with mean and variance over seeds.
    DigTrace(RunArgs),
    /// Quality metrics of fused images.
    Metrics(MetricsArgs),
    /// Run the error-bound mechanism checks on the synthetic bench.
    ValidateTheory(RunArgs),
    /// Re-run a fuse from its manifest and compare outputs byte for byte.
    Replay(ReplayArgs),
}

/// Flags shared by the run commands. Each flag overrides the config file.
#[derive(Debug, Args, Default)]
pub struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Infrared image (two-modality shorthand).
    #[arg(long)]
    pub ir: Option<PathBuf>,
    /// Visible image (two-modality shorthand).
    #[arg(long)]
    pub vis: Option<PathBuf>,
    /// Comma separated modality images or directories.
    #[arg(long)]
    pub inputs: Option<String>,
    #[arg(long)]
    pub names: Option<String>,
    #[arg(long)]
    pub reference: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub steps: Option<String>,
    /// `uniform` or `coarse_to_fine`.
    #[arg(long)]
    pub spacing: Option<String>,
    #[arg(long)]
    pub dig_interval: Option<String>,
    /// `l1`, `l2` or `ssim`.
    #[arg(long)]
    pub dig_distance: Option<String>,
    /// `RxC` or `global`.
    #[arg(long)]
    pub patch_grid: Option<String>,
    #[arg(long)]
    pub temperature: Option<String>,
    #[arg(long)]
    pub autoscale: Option<String>,
    /// `shared` or `independent`.
    #[arg(long)]
    pub noise_sharing: Option<String>,
    /// `dynamic`, `static-equal` or `static-fixed=w1,w2,...`.
    #[arg(long)]
    pub weight_mode: Option<String>,
    #[arg(long)]
    pub guidance_scale: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub seeds_for_bands: Option<String>,
    /// `gaussian`, `empirical[:DIR]`, `spectral` or `external:DIR`.
    #[arg(long)]
    pub oracle: Option<String>,
    #[arg(long)]
    pub external_timeout: Option<String>,
    /// Also write report.csv next to each fused image.
    #[arg(long)]
    pub metrics: bool,
    /// `masked_complement` or `structure_texture`.
    #[arg(long)]
    pub synthetic: Option<String>,
    #[arg(long)]
    pub synthetic_size: Option<String>,
    #[arg(long)]
    pub instances: Option<String>,
    #[arg(long)]
    pub instance_kind: Option<String>,
    #[arg(long)]
    pub instance_size: Option<String>,
    #[arg(long)]
    pub permutations: Option<String>,
    /// Any config key as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Comma separated fused images.
    #[arg(long, required = true)]
    pub fused: String,
    /// Comma separated source images.
    #[arg(long)]
    pub inputs: Option<String>,
    #[arg(long)]
    pub ir: Option<PathBuf>,
    #[arg(long)]
    pub vis: Option<PathBuf>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// manifest.txt written by `fuse`.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

impl RunArgs {
    /// Config file first, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(p) = &self.config {
            cfg.apply_file(p)?;
        }
        match (&self.ir, &self.vis, &self.inputs) {
            (Some(_), Some(_), Some(_)) => return Err(Error::Config("use either --ir/--vis or --inputs".into())),
            (Some(ir), Some(vis), None) => {
                cfg.inputs = vec![ir.clone(), vis.clone()];
                cfg.names = vec!["ir".into(), "vis".into()];
            }
            (None, None, Some(list)) => cfg.set("inputs", list)?,
            (None, None, None) => {}
            _ => return Err(Error::Config("--ir and --vis must be given together".into())),
        }
        let pairs: [(&str, &Option<String>); 23] = [
            ("names", &self.names),
            ("reference", &self.reference),
            ("out", &self.out),
            ("steps", &self.steps),
            ("spacing", &self.spacing),
            ("dig_interval", &self.dig_interval),
            ("dig_distance", &self.dig_distance),
            ("patch_grid", &self.patch_grid),
            ("temperature", &self.temperature),
            ("autoscale", &self.autoscale),
            ("noise_sharing", &self.noise_sharing),
            ("weight_mode", &self.weight_mode),
            ("guidance_scale", &self.guidance_scale),
            ("seed", &self.seed),
            ("seeds_for_bands", &self.seeds_for_bands),
            ("oracle", &self.oracle),
            ("external_timeout", &self.external_timeout),
            ("synthetic", &self.synthetic),
            ("synthetic_size", &self.synthetic_size),
            ("instances", &self.instances),
            ("instance_kind", &self.instance_kind),
            ("instance_size", &self.instance_size),
            ("permutations", &self.permutations),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        if self.metrics {
            cfg.metrics = true;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }
}

/// Parses `argv` (including the program name), runs, and returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Fuse(a) => a.resolve().and_then(|c| cmd_fuse(&c)).map(|_| 0),
        Command::DigTrace(a) => a.resolve().and_then(|c| cmd_dig_trace(&c)).map(|_| 0),
        Command::Metrics(a) => cmd_metrics(a).map(|_| 0),
        Command::ValidateTheory(a) => a.resolve().and_then(|c| cmd_validate_theory(&c)),
        Command::Replay(a) => cmd_replay(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn split_paths(list: &str) -> Vec<PathBuf> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(PathBuf::from)
        .collect()
}

fn load_stack(paths: &[PathBuf], names: Vec<String>) -> Result<ModalityStack> {
    let first = load_image(&paths[0])?;
    let (h, w, _) = first.shape();
    let mut images = vec![first];
    for p in &paths[1..] {
        images.push(load_image_expect(p, h, w)?);
    }
    if images.iter().any(|i| i.channels() != images[0].channels()) {
        return Err(Error::Input {
            path: paths[0].clone(),
            reason: "modalities mix grayscale and RGB".into(),
        });
    }
    ModalityStack::new(images, names)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "ppm" | "pnm"))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Denoiser selected by the config for images shaped like `ms`.
pub fn build_denoiser(cfg: &RunConfig, ms: &ModalityStack) -> Result<Arc<dyn Denoiser>> {
    let (h, w, c) = ms.shape();
    Ok(match &cfg.oracle {
        OracleSpec::Spectral => Arc::new(bench_prior(h, w, c)?),
        OracleSpec::Gaussian => {
            let mut mu = ImageTensor::zeros(h, w, c);
            for img in ms.images() {
                mu = mu.add(img)?;
            }
            Arc::new(GaussianDataOracle::new(
                mu.scale(1.0 / ms.len() as f64),
                PRIOR_PIXEL_VAR,
            )?)
        }
        OracleSpec::Empirical(None) => Arc::new(EmpiricalDataOracle::new(ms.images().to_vec())?),
        OracleSpec::Empirical(Some(dir)) => {
            let atoms = list_images(dir)?
                .iter()
                .map(|p| load_image_expect(p, h, w))
                .collect::<Result<Vec<_>>>()?;
            if atoms.is_empty() {
                return Err(Error::Input {
                    path: dir.clone(),
                    reason: "no images for the empirical oracle".into(),
                });
            }
            Arc::new(EmpiricalDataOracle::new(atoms)?)
        }
        OracleSpec::External(dir) => Arc::new(ExternalDenoiser::new(dir, cfg.timeout()?)?),
    })
}

fn manifest_text(cfg: &RunConfig, wall: f64, out: &Path, outputs: &[&str]) -> Result<String> {
    let mut m = String::from("#schema=dig2dig.manifest.v1\n");
    let _ = writeln!(m, "version = {}", crate::VERSION);
    let _ = writeln!(m, "platform = {}-{}", std::env::consts::ARCH, std::env::consts::OS);
    let _ = writeln!(m, "seed = {}", cfg.fusion.seed);
    let _ = writeln!(m, "config = config.txt");
    let _ = writeln!(m, "wall_time_s = {wall:.6}");
    for (i, p) in cfg.inputs.iter().enumerate() {
        let _ = writeln!(m, "input.{i} = {}", p.display());
        let _ = writeln!(m, "input_sha256.{i} = {}", sha256_file(p)?);
    }
    for name in outputs {
        let _ = writeln!(m, "output_sha256.{name} = {}", sha256_file(&out.join(name))?);
    }
    Ok(m)
}

/// Fuses one modality set into `cfg.out`.
fn fuse_one(cfg: &RunConfig, shared: Option<&Arc<dyn Denoiser>>) -> Result<()> {
    let start = Instant::now();
    let names = cfg.modality_names()?;
    let ms = load_stack(&cfg.inputs, names)?;
    let s = cfg.schedule()?;
    let d = match shared {
        Some(d) => d.clone(),
        None => build_denoiser(cfg, &ms)?,
    };
    let out = fuse(&ms, d.as_ref(), &s, &cfg.fusion)?;
    create_dir(&cfg.out)?;
    save_image(&cfg.out.join("fused.png"), &out.image)?;
    write_text(&cfg.out.join("trace.csv"), &out.trace.to_csv())?;
    write_text(&cfg.out.join("config.txt"), &cfg.to_text())?;
    let mut outputs = vec!["fused.png", "trace.csv"];
    if cfg.metrics {
        let fused = GrayImage::from_model(&load_image(&cfg.out.join("fused.png"))?)?;
        let sources = ms
            .images()
            .iter()
            .map(GrayImage::from_model)
            .collect::<Result<Vec<_>>>()?;
        let reference = match &cfg.reference {
            Some(p) => Some(GrayImage::from_model(&load_image(p)?)?),
            None => None,
        };
        let report = fusion_report("fused.png", &fused, &sources, reference.as_ref())?;
        write_text(&cfg.out.join("report.csv"), &reports_to_csv(&[report]))?;
        outputs.push("report.csv");
    }
    let wall = start.elapsed().as_secs_f64();
    write_text(
        &cfg.out.join("manifest.txt"),
        &manifest_text(cfg, wall, &cfg.out, &outputs)?,
    )?;
    Ok(())
}

pub fn cmd_fuse(cfg: &RunConfig) -> Result<()> {
    if cfg.inputs.is_empty() {
        return Err(Error::Config("fuse needs at least one input".into()));
    }
    let mut cfg = cfg.clone();
    cfg.inputs = cfg.inputs.iter().map(|p| absolute(p)).collect();
    if cfg.inputs.iter().all(|p| p.is_dir()) {
        return fuse_batch(&cfg);
    }
    fuse_one(&cfg, None)
}

/// Directory inputs: files with the same name across directories form one
/// set, fused into `out/<stem>/` on the worker pool.
fn fuse_batch(cfg: &RunConfig) -> Result<()> {
    let files = list_images(&cfg.inputs[0])?;
    let mut jobs = Vec::new();
    for f in &files {
        let name = f.file_name().expect("listed files have names");
        let inputs: Vec<PathBuf> = cfg.inputs.iter().map(|d| d.join(name)).collect();
        if let Some(missing) = inputs.iter().find(|p| !p.is_file()) {
            return Err(Error::Input {
                path: missing.clone(),
                reason: "no matching file in this modality directory".into(),
            });
        }
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        let mut job = cfg.clone();
        job.inputs = inputs;
        job.out = cfg.out.join(stem);
        jobs.push(job);
    }
    if jobs.is_empty() {
        return Err(Error::Input {
            path: cfg.inputs[0].clone(),
            reason: "no images found".into(),
        });
    }
    // One exchange directory needs one adapter so request ids stay unique.
    let shared: Option<Arc<dyn Denoiser>> = match &cfg.oracle {
        OracleSpec::External(dir) => Some(Arc::new(ExternalDenoiser::new(dir, cfg.timeout()?)?)),
        _ => None,
    };
    jobs.par_iter().try_for_each(|job| fuse_one(job, shared.as_ref()))
}

/// Per-record mean and variance of cumulative gains across traces.
pub fn cum_dig_csv(traces: &[DigTrace]) -> Result<String> {
    let first = traces
        .first()
        .ok_or(Error::InsufficientPopulation { need: 1, got: 0 })?;
    let n = traces.len();
    let mut out = String::from(
        "#schema=dig2dig.cumdig.v1\nrecord,t,modality,patch_row,patch_col,mean_cum_dig,var_cum_dig,seeds\n",
    );
    let l = first.layout;
    for (r, rec) in first.records.iter().enumerate() {
        for (k, name) in first.names.iter().enumerate() {
            for p in 0..l.patches() {
                let vals: Vec<f64> = traces.iter().map(|tr| tr.records[r].cum_dig[k][p]).collect();
                let mean = vals.iter().sum::<f64>() / n as f64;
                let var = if n > 1 {
                    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
                } else {
                    0.0
                };
                let (pr, pc) = if l.is_global() {
                    (-1, -1)
                } else {
                    ((p / l.cols) as i64, (p % l.cols) as i64)
                };
                let _ = writeln!(out, "{r},{},{name},{pr},{pc},{mean:.10e},{var:.10e},{n}", rec.t);
            }
        }
    }
    Ok(out)
}

fn synthetic_stack(cfg: &RunConfig) -> Result<(ModalityStack, Arc<dyn Denoiser>)> {
    let kind = cfg.synthetic.as_deref().unwrap_or("masked_complement");
    let size = cfg.synthetic_size;
    match kind {
        "structure_texture" => {
            let (ms, _) = theory::structure_texture_pair(size, cfg.fusion.seed)?;
            Ok((ms, Arc::new(bench_prior(size, size, 1)?)))
        }
        other => {
            let kind: InstanceKind = other.parse()?;
            let inst = make_instance(kind, size, size, 1, cfg.fusion.seed)?;
            Ok((inst.modalities, inst.denoiser))
        }
    }
}

pub fn cmd_dig_trace(cfg: &RunConfig) -> Result<()> {
    if cfg.seeds_for_bands == 0 {
        return Err(Error::Config("seeds_for_bands must be at least 1".into()));
    }
    let (ms, d) = if cfg.inputs.is_empty() || cfg.synthetic.is_some() {
        synthetic_stack(cfg)?
    } else {
        let ms = load_stack(&cfg.inputs, cfg.modality_names()?)?;
        let d = build_denoiser(cfg, &ms)?;
        (ms, d)
    };
    let s = cfg.schedule()?;
    let traces = (0..cfg.seeds_for_bands as u64)
        .into_par_iter()
        .map(|i| {
            let mut f = cfg.fusion.clone();
            f.seed = cfg.fusion.seed.wrapping_add(i);
            gain_trace(&ms, d.as_ref(), &s, &f)
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(&cfg.out)?;
    write_text(&cfg.out.join("cum_dig.csv"), &cum_dig_csv(&traces)?)?;
    write_text(&cfg.out.join("trace.csv"), &traces[0].to_csv())?;
    write_text(&cfg.out.join("config.txt"), &cfg.to_text())?;
    Ok(())
}

pub fn cmd_metrics(a: &MetricsArgs) -> Result<()> {
    let sources: Vec<PathBuf> = match (&a.ir, &a.vis, &a.inputs) {
        (Some(ir), Some(vis), None) => vec![ir.clone(), vis.clone()],
        (None, None, Some(list)) => split_paths(list),
        _ => return Err(Error::Config("give sources as --ir/--vis or --inputs".into())),
    };
    if sources.is_empty() {
        return Err(Error::Config("no source images".into()));
    }
    let gray = |p: &Path| load_image(p).and_then(|x| GrayImage::from_model(&x));
    let src = sources.iter().map(|p| gray(p)).collect::<Result<Vec<_>>>()?;
    let reference = a.reference.as_deref().map(gray).transpose()?;
    let reports = split_paths(&a.fused)
        .iter()
        .map(|p| fusion_report(&p.display().to_string(), &gray(p)?, &src, reference.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    create_dir(&a.out)?;
    write_text(&a.out.join("report.csv"), &reports_to_csv(&reports))?;
    let table = reports_to_table(&reports);
    write_text(&a.out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn theory_suite(cfg: &RunConfig) -> TheorySuite {
    TheorySuite {
        kind: cfg.instance_kind,
        size: cfg.instance_size,
        instances: cfg.instances,
        permutations: cfg.permutations,
        seed: cfg.fusion.seed,
        fusion: cfg.fusion.clone(),
        ..TheorySuite::default()
    }
}

/// Returns 0 when every mechanism check passes, [`EXIT_THEORY`] otherwise.
pub fn cmd_validate_theory(cfg: &RunConfig) -> Result<i32> {
    let s: NoiseSchedule = cfg.schedule()?;
    let outcome = theory::run_suite(&theory_suite(cfg), &s)?;
    create_dir(&cfg.out)?;
    let summary = outcome.summary();
    write_text(&cfg.out.join("ledger.csv"), &outcome.ledger_csv())?;
    write_text(&cfg.out.join("covariance.csv"), &outcome.covariance_csv())?;
    write_text(&cfg.out.join("summary.txt"), &summary)?;
    write_text(&cfg.out.join("config.txt"), &cfg.to_text())?;
    print!("{summary}");
    let ok = outcome.covariance_mechanism() && outcome.dynamic_beats_static() && outcome.anti_dig_dominance();
    Ok(if ok { 0 } else { EXIT_THEORY })
}

/// `key = value` lines of a manifest.
pub fn parse_manifest(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// Returns 0 when all recorded outputs are reproduced, [`EXIT_MISMATCH`] otherwise.
pub fn cmd_replay(a: &ReplayArgs) -> Result<i32> {
    let text = std::fs::read_to_string(&a.manifest).map_err(|e| Error::Io {
        path: a.manifest.clone(),
        source: e,
    })?;
    let m = parse_manifest(&text);
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let config = m
        .get("config")
        .ok_or_else(|| Error::Config("manifest lacks `config`".into()))?;
    let mut cfg = RunConfig::default();
    cfg.apply_file(&base.join(config))?;
    for (i, p) in cfg.inputs.iter().enumerate() {
        let want = m
            .get(&format!("input_sha256.{i}"))
            .ok_or_else(|| Error::Config(format!("manifest lacks input_sha256.{i}")))?;
        if &sha256_file(p)? != want {
            return Err(Error::Input {
                path: p.clone(),
                reason: "content differs from the manifest hash".into(),
            });
        }
    }
    cfg.out = a.out.clone();
    fuse_one(&cfg, None)?;
    let mut identical = true;
    for (k, want) in m.iter().filter(|(k, _)| k.starts_with("output_sha256.")) {
        let name = &k["output_sha256.".len()..];
        let got = sha256_file(&a.out.join(name))?;
        let same = &got == want;
        identical &= same;
        println!("{name}: {}", if same { "identical" } else { "DIFFERS" });
    }
    Ok(if identical { 0 } else { EXIT_MISMATCH })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "steps = 40\nseed = 3\n").unwrap();
        let args = RunArgs {
            config: Some(p),
            steps: Some("12".into()),
            ..RunArgs::default()
        };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.fusion.total_steps, 12);
        assert_eq!(cfg.fusion.seed, 3);
    }

    #[test]
    fn ir_vis_shorthand_names_modalities() {
        let args = RunArgs {
            ir: Some("a.png".into()),
            vis: Some("b.png".into()),
            ..RunArgs::default()
        };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.modality_names().unwrap(), vec!["ir", "vis"]);
        let bad = RunArgs {
            ir: Some("a.png".into()),
            ..RunArgs::default()
        };
        assert!(bad.resolve().is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["dig2dig", "fuse", "--nonsense"]), 2);
        assert_eq!(run(["dig2dig", "fuse", "--steps", "x"]), 2);
        assert_eq!(run(["dig2dig", "--version"]), 0);
    }
}
