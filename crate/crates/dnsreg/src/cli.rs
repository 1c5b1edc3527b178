//! Command-line front end. [`run`] returns the process exit code: 0 on
//! success, 1 on runtime failure, 2 on usage errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use dnsreg_core::baseline::mind;
use dnsreg_core::contrastive::{running_loss, train, ContrastiveConfig};
use dnsreg_core::masrnet::{MasrNet, NetConfig};
use dnsreg_core::metrics::{angle_grid, landscape_argmax, landscape_argmin, similarity_heatmap};
use dnsreg_core::phantom;
use dnsreg_core::registration::{register, Metric};
use dnsreg_core::volume::warp;
use dnsreg_core::{BinaryMask, Dims, FeatureField, Volume};

use crate::checkpoint::{self, Checkpoint};
use crate::config::FileConfig;
use crate::container::{self, ValueKind};
use crate::error::{Error, Result};
use crate::io::{read_volume, write_volume};
use crate::pipeline::{self, Case, DEFAULT_SMOOTHNESS};

#[derive(Debug, Parser)]
#[command(name = "dnsreg", version, about = "Multimodal deformable registration with deep self-similarity descriptors")]
pub struct Cli {
    /// Master seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads. Computation is currently sequential, so results do
    /// not depend on this value.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: u32,

    /// TOML configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic phantoms, optionally with a deformed second modality.
    Phantom(PhantomArgs),
    /// Contrastive training of the descriptor network.
    Train(TrainArgs),
    /// Register a moving image onto a fixed image.
    Register(RegisterArgs),
    /// Dice, HD95, folding and endpoint error of a registration.
    Eval(EvalArgs),
    /// Descriptor similarity between one marked voxel and a whole image.
    Heatmap(HeatmapArgs),
    /// Similarity cost over a grid of rotations of the moving image.
    Landscape(LandscapeArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Edge length in voxels; a multiple of 8.
    #[arg(long, default_value_t = 48)]
    pub size: usize,
    /// Also write a second modality warped by a random deformation, the
    /// warped labels and the displacement registration should recover.
    #[arg(long)]
    pub pair: bool,
    /// Largest displacement of the random deformation, in voxels.
    #[arg(long, default_value_t = 6.0)]
    pub amplitude: f64,
    /// Smoothing of the random deformation, in voxels.
    #[arg(long, default_value_t = DEFAULT_SMOOTHNESS)]
    pub smoothness: f64,
    /// Use the contrast-inverted phantom as the second modality instead of
    /// a random intensity map.
    #[arg(long, requires = "pair")]
    pub inverted: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NetSize {
    /// Full widths.
    Full,
    /// Narrow widths for desk-scale runs.
    Desk,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training volumes, or directories whose intensity volumes are all used.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Directory for `last.masr`, `best.masr` and `trace.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub net: Option<NetSize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Dns,
    Mind,
    Nmi,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Metric {
        match m {
            MetricArg::Dns => Metric::Dns,
            MetricArg::Mind => Metric::Mind,
            MetricArg::Nmi => Metric::Nmi,
        }
    }
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long, value_enum)]
    pub metric: Option<MetricArg>,
    /// Trained network, required by the dns metric.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Iterations per level, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub iterations: Option<Vec<usize>>,
    /// Output displacement field (`.json` container).
    #[arg(long)]
    pub out: PathBuf,
    /// Per-iteration loss trace as CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// The moving image warped onto the fixed grid.
    #[arg(long)]
    pub warped: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub fixed_labels: PathBuf,
    #[arg(long)]
    pub moving_labels: PathBuf,
    /// Displacement applied to the moving labels; none means identity.
    #[arg(long)]
    pub field: Option<PathBuf>,
    /// Reference displacement for the endpoint error.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Fixed intensity image; restricts the endpoint error to its foreground.
    #[arg(long)]
    pub fixed: Option<PathBuf>,
    /// Also write the table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Descriptor {
    Dns,
    Mind,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Marked voxel `i,j,k` in the source image.
    #[arg(long, value_parser = parse_voxel)]
    pub at: [usize; 3],
    #[arg(long, value_enum, default_value_t = Descriptor::Dns)]
    pub descriptor: Descriptor,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Similarity volume (`.json` container or `.nii`).
    #[arg(long)]
    pub out: PathBuf,
    /// Every voxel as `i,j,k,similarity` rows.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn parse_voxel(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected i,j,k, got {s:?}"));
    }
    let mut c = [0usize; 3];
    for (x, p) in c.iter_mut().zip(parts) {
        *x = p.trim().parse().map_err(|e| format!("{p:?}: {e}"))?;
    }
    Ok(c)
}

#[derive(Debug, Args)]
pub struct LandscapeArgs {
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long, value_enum)]
    pub metric: Option<MetricArg>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = -30.0, allow_hyphen_values = true)]
    pub min: f64,
    #[arg(long, default_value_t = 30.0, allow_hyphen_values = true)]
    pub max: f64,
    #[arg(long, default_value_t = 5.0)]
    pub step: f64,
    /// `angle1,angle2,cost` rows.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            let code = e.exit_code();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(Error::Usage(msg)) => {
            let e = Cli::command().error(clap::error::ErrorKind::MissingRequiredArgument, msg);
            let _ = write!(err, "{}", e.render());
            2
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    match &cli.command {
        Command::Phantom(a) => phantom_cmd(cli, a, out),
        Command::Train(a) => train_cmd(cli, &cfg, a, out),
        Command::Register(a) => register_cmd(&cfg, a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Heatmap(a) => heatmap_cmd(a, out),
        Command::Landscape(a) => landscape_cmd(&cfg, a, out),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn phantom_cmd(cli: &Cli, a: &PhantomArgs, out: &mut dyn Write) -> Result<()> {
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let dims = Dims::cube(a.size);
    let mut table = String::from("name,seed\n");
    for (i, seed) in phantom::corpus_seeds(cli.seed, a.count).into_iter().enumerate() {
        let name = format!("phantom_{i:03}");
        let file = |suffix: &str| a.out.join(format!("{name}{suffix}.json"));
        if a.pair {
            let case = if a.inverted {
                Case::inverted(seed, dims, a.amplitude, a.smoothness)?
            } else {
                Case::generate(seed, dims, a.amplitude, a.smoothness)?
            };
            container::save_volume(&file(""), &case.fixed)?;
            container::save_labels(&file("_labels"), &case.phantom.labels, case.fixed.spacing)?;
            container::save_volume(&file("_moving"), &case.moving)?;
            container::save_labels(&file("_moving_labels"), &case.moving_labels, case.moving.spacing)?;
            container::save_field(&file("_truth"), &case.truth)?;
        } else {
            let ph = phantom::generate(seed, dims)?;
            container::save_volume(&file(""), &ph.volume)?;
            container::save_labels(&file("_labels"), &ph.labels, ph.volume.spacing)?;
        }
        table.push_str(&format!("{name},{seed}\n"));
    }
    emit(out, &table)
}

/// Intensity volumes among `inputs`, expanding directories in name order.
fn collect_volumes(inputs: &[PathBuf]) -> Result<Vec<Volume>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| matches!(f.extension().and_then(|e| e.to_str()), Some("json" | "nii")))
                .collect();
            entries.sort();
            for f in entries {
                let is_intensity = f.extension().and_then(|e| e.to_str()) == Some("nii")
                    || container::read_container(&f).map(|c| c.sidecar.kind == ValueKind::Intensity).unwrap_or(false);
                if is_intensity {
                    files.push(f);
                }
            }
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::Usage("no training volumes found".into()));
    }
    files.iter().map(|f| read_volume(f).map(|v| v.normalized())).collect()
}

fn train_cmd(cli: &Cli, cfg: &FileConfig, a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let corpus = collect_volumes(&a.inputs)?;
    let net_config = match a.net {
        Some(NetSize::Full) => NetConfig::default(),
        Some(NetSize::Desk) => NetConfig::desk(),
        None => cfg.network.clone().unwrap_or_default(),
    };
    let mut tc: ContrastiveConfig = cfg.training.clone();
    if let Some(s) = a.steps {
        tc.max_steps = Some(s);
        if a.epochs.is_none() {
            tc.epochs = s.div_ceil(corpus.len()).max(tc.epochs);
        }
    }
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    if let Some(s) = a.samples {
        tc.samples = s;
    }
    if let Some(t) = a.temperature {
        tc.temperature = t;
    }
    if let Some(l) = a.learning_rate {
        tc.learning_rate = l;
    }
    tc.validate()?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let net = MasrNet::new(net_config, cli.seed)?;
    let outcome = train(net, &corpus, &tc, cli.seed, |r| {
        eprintln!("step {} loss {:.4} pos {:.3} neg {:.3}", r.step, r.loss, r.pos_sim_mean, r.neg_sim_mean);
    })?;
    let mut csv = String::from("step,loss,pos_sim_mean,neg_sim_mean\n");
    for r in &outcome.trace {
        csv.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.pos_sim_mean, r.neg_sim_mean));
    }
    write_file(&a.out.join("trace.csv"), &csv)?;
    let steps = outcome.trace.len().to_string();
    let extra = [("seed", cli.seed.to_string()), ("steps", steps)];
    checkpoint::save_checkpoint(&a.out.join("last.masr"), &Checkpoint::of(&outcome.last, &extra))?;
    let best = MasrNet::from_params(outcome.last.config().clone(), outcome.best.clone())?;
    checkpoint::save_checkpoint(&a.out.join("best.masr"), &Checkpoint::of(&best, &extra))?;
    let running = running_loss(&outcome.trace);
    emit(
        out,
        &format!(
            "steps,{}\ninitial_loss,{}\nfinal_running_loss,{}\nbest_running_loss,{}\n",
            outcome.trace.len(),
            outcome.trace.first().map_or(f64::NAN, |r| r.loss),
            running.last().copied().unwrap_or(f64::NAN),
            outcome.best_running_loss
        ),
    )
}

fn load_net(path: Option<&PathBuf>, needed: bool, flag: &str) -> Result<Option<MasrNet>> {
    match path {
        Some(p) => Ok(Some(checkpoint::load_network(p)?)),
        None if needed => Err(Error::Usage(format!("the dns metric requires {flag} <CHECKPOINT>"))),
        None => Ok(None),
    }
}

fn register_cmd(cfg: &FileConfig, a: &RegisterArgs, out: &mut dyn Write) -> Result<()> {
    let mut rc = cfg.registration.clone();
    if let Some(m) = a.metric {
        rc.metric = m.into();
    }
    if let Some(it) = &a.iterations {
        rc.iterations = it.clone();
    }
    let checkpoint = a.checkpoint.clone().or_else(|| rc.checkpoint.as_ref().map(PathBuf::from));
    rc.validate()?;
    let net = load_net(checkpoint.as_ref(), rc.metric == Metric::Dns, "--checkpoint")?;
    let fixed = read_volume(&a.fixed)?.normalized();
    let moving = read_volume(&a.moving)?.normalized();
    let result = register(&fixed, &moving, &rc, net.as_ref())?;
    container::save_field(&a.out, &result.field)?;
    if let Some(p) = &a.trace {
        let mut csv = String::from("level,iteration,similarity,regularity,total\n");
        for r in &result.trace {
            csv.push_str(&format!("{},{},{},{},{}\n", r.level, r.iteration, r.similarity, r.regularity, r.total));
        }
        write_file(p, &csv)?;
    }
    if let Some(p) = &a.warped {
        write_volume(p, &warp(&moving, &result.field)?)?;
    }
    let last = result.trace.last();
    emit(
        out,
        &format!(
            "metric,{}\niterations,{}\nfinal_total,{}\nwall_seconds,{:.3}\n",
            rc.metric,
            result.trace.len(),
            last.map_or(f64::NAN, |r| r.total),
            result.wall_seconds.unwrap_or(f64::NAN)
        ),
    )
}

fn eval_cmd(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let (fixed, spacing) = container::load_labels(&a.fixed_labels)?;
    let (moving, _) = container::load_labels(&a.moving_labels)?;
    let field = a.field.as_deref().map(container::load_field).transpose()?;
    let truth = a.truth.as_deref().map(container::load_field).transpose()?;
    let mask = match &a.fixed {
        Some(p) => Some(BinaryMask::foreground(&read_volume(p)?.normalized(), dnsreg_core::contrastive::FOREGROUND_THRESHOLD)),
        None => None,
    };
    let rows = pipeline::evaluate(&fixed, &moving, field.as_ref(), truth.as_ref(), mask.as_ref(), spacing)?;
    let mut csv = String::from("metric,label,value\n");
    for r in rows {
        csv.push_str(&format!("{},{},{}\n", r.metric, r.label, r.value));
    }
    if let Some(p) = &a.out {
        write_file(p, &csv)?;
    }
    emit(out, &csv)
}

fn heatmap_cmd(a: &HeatmapArgs, out: &mut dyn Write) -> Result<()> {
    let net = load_net(a.checkpoint.as_ref(), a.descriptor == Descriptor::Dns, "--checkpoint")?;
    let source = read_volume(&a.source)?.normalized();
    let target = read_volume(&a.target)?.normalized();
    let describe = |v: &Volume| -> Result<FeatureField> {
        Ok(match &net {
            Some(n) => n.forward(v)?,
            None => mind(v),
        })
    };
    let h = similarity_heatmap(&describe(&source)?, &describe(&target)?, a.at)?;
    write_volume(&a.out, &h)?;
    if let Some(p) = &a.csv {
        let mut csv = String::from("i,j,k,similarity\n");
        for (idx, v) in h.data.iter().enumerate() {
            let c = h.dims.coords(idx);
            csv.push_str(&format!("{},{},{},{}\n", c[0], c[1], c[2], v));
        }
        write_file(p, &csv)?;
    }
    let (best, value) = h.data.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
    let c = h.dims.coords(best);
    emit(out, &format!("peak,{},{},{},{}\n", c[0], c[1], c[2], value))
}

fn landscape_cmd(cfg: &FileConfig, a: &LandscapeArgs, out: &mut dyn Write) -> Result<()> {
    let metric: Metric = a.metric.map(Into::into).unwrap_or(cfg.registration.metric);
    let checkpoint = a.checkpoint.clone().or_else(|| cfg.registration.checkpoint.as_ref().map(PathBuf::from));
    let net = load_net(checkpoint.as_ref(), metric == Metric::Dns, "--checkpoint")?;
    let angles = angle_grid(a.min, a.max, a.step)?;
    let fixed = read_volume(&a.fixed)?.normalized();
    let moving = read_volume(&a.moving)?.normalized();
    let rows = pipeline::landscape(&fixed, &moving, metric, net.as_ref(), &cfg.registration, &angles)?;
    let mut csv = String::from("angle1,angle2,cost\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.angle1, r.angle2, r.cost));
    }
    write_file(&a.out, &csv)?;
    let best = if pipeline::lower_is_better(metric) { landscape_argmin(&rows) } else { landscape_argmax(&rows) };
    match best {
        Some(b) => emit(out, &format!("metric,{metric}\nbest_angle1,{}\nbest_angle2,{}\nbest_cost,{}\n", b.angle1, b.angle2, b.cost)),
        None => Err(Error::Usage("empty angle grid".into())),
    }
}
