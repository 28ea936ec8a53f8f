//! Command-line front end: `gen-data`, `train`, `eval`, `predict`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dense_comparison::SupportExample;
use crate::episodes::{annotate, Annotation, Phase, ShapeDataset};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::files::write_atomic;
use crate::fusion::Fusion;
use crate::model::{InferenceOptions, Model};
use crate::pnm::{confidence_to_pnm, image_to_pnm, load_image, load_mask, mask_to_pnm};
use crate::training::{loss_curve_csv, train, TrainProgress};

/// Environment variable that sets the worker thread count.
pub const THREADS_ENV: &str = "FEWSEG_THREADS";

#[derive(Debug, Parser)]
#[command(name = "fewseg", version, about = "Few-shot segmentation on synthetic shapes")]
pub struct Cli {
    /// Run configuration file (`section.key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.epochs=2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write episode images, masks and a manifest.
    GenData(GenDataArgs),
    /// Warm up the backbone and train episodically.
    Train(TrainArgs),
    /// Score a checkpoint on sampled episodes.
    Eval(EvalArgs),
    /// Segment one query image from support image/mask pairs.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub episodes: usize,
    #[arg(long, default_value = "test")]
    pub phase: Phase,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `bbox` also writes box masks next to the pixel masks.
    #[arg(long, default_value = "pixel")]
    pub annotation: Annotation,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Output directory for `model.ck` and `loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from `model.ck` in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory for `report.txt` and `report.kv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub fusion: Option<Fusion>,
    #[arg(long)]
    pub annotation: Option<Annotation>,
    /// Comma-separated query scales, e.g. `0.7,1,1.3`.
    #[arg(long)]
    pub scales: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub phase: Option<Phase>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Support pair as `IMAGE.ppm:MASK.pgm`; repeat for k-shot.
    #[arg(long = "support", required = true)]
    pub supports: Vec<String>,
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub fusion: Option<Fusion>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub scales: Option<String>,
    /// Also write `iter_<t>.pgm` for the initial prediction and every refinement.
    #[arg(long)]
    pub dump_iterations: bool,
}

pub fn load_run_config(cli: &Cli) -> Result<RunConfig> {
    let mut run = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        run.apply_text(&text)?;
    }
    for kv in &cli.overrides {
        run.apply_override(kv)?;
    }
    run.validate()?;
    Ok(run)
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn std::io::Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::config(e.to_string()))?;
    execute(&cli, out)
}

/// Runs a parsed command line; progress lines go to `out`.
pub fn execute(cli: &Cli, out: &mut dyn std::io::Write) -> Result<()> {
    configure_threads();
    let mut run = load_run_config(cli)?;
    let say = |out: &mut dyn std::io::Write, s: String| {
        let _ = writeln!(out, "{s}");
    };
    match &cli.command {
        Command::GenData(a) => {
            let manifest = cmd_gen_data(&run, a)?;
            say(out, format!("wrote {}", manifest.display()));
        }
        Command::Train(a) => {
            let ck = cmd_train(&run, a, &mut |s| say(out, s))?;
            say(out, format!("wrote {}", ck.display()));
        }
        Command::Eval(a) => {
            let report = cmd_eval(&mut run, a)?;
            let _ = write!(out, "{}", report.to_table());
        }
        Command::Predict(a) => {
            let written = cmd_predict(&run, a)?;
            for p in written {
                say(out, format!("wrote {}", p.display()));
            }
        }
    }
    Ok(())
}

pub fn cmd_gen_data(run: &RunConfig, a: &GenDataArgs) -> Result<PathBuf> {
    let dataset = ShapeDataset::new(run.dataset.clone())?;
    let seed = a.seed.unwrap_or(run.eval.seed);
    let fp = run.fingerprint();
    create_dir(&a.out)?;
    let list = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
    let mut m = String::new();
    let _ = writeln!(m, "fingerprint = {fp}");
    let _ = writeln!(m, "seed = {seed}");
    let _ = writeln!(m, "phase = {}", a.phase);
    let _ = writeln!(m, "k = {}", a.k);
    let _ = writeln!(m, "annotation = {}", a.annotation);
    let _ = writeln!(m, "split.test_index = {}", dataset.split.test_split_index);
    let _ = writeln!(m, "split.train = {}", list(&dataset.split.train_classes));
    let _ = writeln!(m, "split.test = {}", list(&dataset.split.test_classes));
    let _ = writeln!(m, "episodes = {}", a.episodes);
    let comment = format!("fingerprint {fp}");
    let c = Some(comment.as_str());
    for i in 0..a.episodes {
        let ep = dataset.episode_at(a.phase, a.k, seed, i as u64)?;
        let dir_name = format!("episode_{i:05}");
        let dir = a.out.join(&dir_name);
        create_dir(&dir)?;
        let mut files = Vec::new();
        let boxed = match a.annotation {
            Annotation::BoundingBox => Some(annotate(&ep, Annotation::BoundingBox)?),
            Annotation::Pixel => None,
        };
        for (j, s) in ep.support.iter().enumerate() {
            image_to_pnm(&s.image, c)?.save(&dir.join(format!("support_{j}.ppm")))?;
            mask_to_pnm(&s.mask, c).save(&dir.join(format!("support_{j}_mask.pgm")))?;
            files.push(format!("{dir_name}/support_{j}.ppm:{dir_name}/support_{j}_mask.pgm"));
            if let Some(b) = &boxed {
                mask_to_pnm(&b.support[j].mask, c).save(&dir.join(format!("support_{j}_bbox.pgm")))?;
                files.push(format!("bbox:{dir_name}/support_{j}_bbox.pgm"));
            }
        }
        image_to_pnm(&ep.query_image, c)?.save(&dir.join("query.ppm"))?;
        mask_to_pnm(&ep.query_mask, c).save(&dir.join("query_mask.pgm"))?;
        let split_name = if dataset.split.phase_of(ep.class_id) == Some(Phase::Test) {
            "test"
        } else {
            "train"
        };
        let _ = writeln!(
            m,
            "episode.{i} = class {} split {split_name} support {} query {dir_name}/query.ppm query_mask {dir_name}/query_mask.pgm",
            ep.class_id,
            files.join(" ")
        );
    }
    let path = a.out.join("manifest.txt");
    write_atomic(&path, m.as_bytes())?;
    Ok(path)
}

pub fn cmd_train(run: &RunConfig, a: &TrainArgs, log: &mut dyn FnMut(String)) -> Result<PathBuf> {
    let dataset = ShapeDataset::new(run.dataset.clone())?;
    create_dir(&a.out)?;
    let ck_path = a.out.join("model.ck");
    let canonical = run.canonical();
    let (mut model, mut progress) = if a.resume && ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        if ck.config != canonical {
            return Err(Error::Checkpoint(format!(
                "{} was written under a different configuration",
                ck_path.display()
            )));
        }
        let progress = ck
            .progress(run.train.lr, run.train.momentum)?
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no training progress".into()))?;
        (Model::from_state(run.model.clone(), ck.state)?, progress)
    } else {
        (Model::new(run.model.clone(), run.train.seed)?, TrainProgress::new(&run.train))
    };
    let summary = train(&run.train, &dataset, &mut model, &mut progress, |m, p| {
        if let Some(last) = p.loss_curve.last() {
            log(format!("epoch {} loss {:.5}", last.epoch, last.loss));
        }
        Checkpoint::new(canonical.clone(), m.state.clone())
            .with_progress(p)
            .save(&ck_path)
    })?;
    let csv = format!("# fingerprint {}\n{}", run.fingerprint(), loss_curve_csv(&summary.loss_curve));
    write_atomic(&a.out.join("loss.csv"), csv.as_bytes())?;
    if let Some((miou, base)) = summary.validation {
        log(format!(
            "validation meanIoU {:.2}% (all-foreground {:.2}%)",
            miou * 100.0,
            base * 100.0
        ));
    }
    Ok(ck_path)
}

/// Loads a checkpoint; its stored configuration fixes the architecture.
pub fn load_model(path: &Path, run: &RunConfig) -> Result<Model> {
    let ck = Checkpoint::load(path)?;
    let stored = RunConfig::parse_text(&ck.config)
        .map_err(|e| Error::Checkpoint(format!("stored configuration is invalid: {e}")))?;
    if stored.model_canonical() != run.model_canonical() {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch between {} and the current configuration",
            path.display()
        )));
    }
    Model::from_state(stored.model, ck.state)
}

fn parse_scales(s: &str) -> Result<Vec<f64>> {
    let v = s
        .split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("invalid scale {x:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if v.is_empty() {
        return Err(Error::config("no scales given"));
    }
    Ok(v)
}

pub fn cmd_eval(run: &mut RunConfig, a: &EvalArgs) -> Result<EvalReport> {
    let e = &mut run.eval;
    if let Some(k) = a.k {
        e.k = k;
    }
    if let Some(f) = a.fusion {
        e.fusion = f;
    }
    if let Some(m) = a.annotation {
        e.annotation = m;
    }
    if let Some(s) = &a.scales {
        e.scales = parse_scales(s)?;
    }
    if let Some(t) = a.iterations {
        e.iterations = t;
    }
    if let Some(n) = a.episodes {
        e.episodes = n;
    }
    if let Some(s) = a.seed {
        e.seed = s;
    }
    if let Some(p) = a.phase {
        e.phase = p;
    }
    run.validate()?;
    let model = load_model(&a.checkpoint, run)?;
    let dataset = ShapeDataset::new(run.dataset.clone())?;
    let mut report = evaluate(&model, &dataset, &run.eval)?;
    report.config_fingerprint = run.fingerprint();
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_atomic(&dir.join("report.txt"), report.to_table().as_bytes())?;
        write_atomic(&dir.join("report.kv"), report.to_key_values().as_bytes())?;
    }
    Ok(report)
}

pub fn cmd_predict(run: &RunConfig, a: &PredictArgs) -> Result<Vec<PathBuf>> {
    let model = load_model(&a.checkpoint, run)?;
    let supports = a
        .supports
        .iter()
        .map(|s| {
            let (img, mask) = s
                .split_once(':')
                .ok_or_else(|| Error::config(format!("support {s:?} is not IMAGE:MASK")))?;
            SupportExample::new(load_image(Path::new(img))?, load_mask(Path::new(mask))?)
        })
        .collect::<Result<Vec<_>>>()?;
    let query = load_image(&a.query)?;
    let opts = InferenceOptions {
        fusion: a.fusion.unwrap_or(run.eval.fusion),
        iterations: a.iterations.unwrap_or(run.eval.iterations),
        scales: match &a.scales {
            Some(s) => parse_scales(s)?,
            None => run.eval.scales.clone(),
        },
    };
    let seg = model.segment(&supports, &query, &opts)?;
    if a.dump_iterations && seg.steps.is_empty() {
        return Err(Error::config("--dump-iterations needs scale 1 among the scales"));
    }
    create_dir(&a.out)?;
    let comment = format!("fingerprint {}", run.fingerprint());
    let c = Some(comment.as_str());
    let (_, h, w) = query.chw()?;
    let mut written = Vec::new();
    let mask_path = a.out.join("mask.pgm");
    mask_to_pnm(&seg.mask, c).save(&mask_path)?;
    written.push(mask_path);
    if a.dump_iterations {
        for (t, map) in seg.steps.iter().enumerate() {
            let p = a.out.join(format!("iter_{t}.pgm"));
            confidence_to_pnm(&map.resized(h, w)?, c).save(&p)?;
            written.push(p);
        }
    }
    Ok(written)
}
