use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::info;

use dgc::checkpoint::Checkpoint;
use dgc::config::RunConfig;
use dgc::data::pgm::write_pgm;
use dgc::data::split::{read_split_list, write_split_list};
use dgc::data::{load_manifest, split_from_lists, split_three, Dataset, Manifest, Record};
use dgc::experiment::{run_compare, SyntheticData};
use dgc::gradcheck::{run_suite, SuiteConfig};
use dgc::metrics::svg::roc_svg;
use dgc::metrics::RocReport;
use dgc::model::Mode;
use dgc::trainer::{evaluate, train, write_history_csv};
use dgc::Error;

#[derive(Parser)]
#[command(name = "dgc", version, about = "Generative multi-label image classifier: data, training, evaluation, ablation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config file (key = value); unspecified keys take preset defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base seed; overrides `seed` in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = "dgc-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset: PGM images, manifest.csv and patient split lists.
    GenData,
    /// Train one model and keep the epoch with the best validation mean AUC.
    Train {
        /// Manifest CSV (image_path, patient_id, one 0/1 column per label)
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        /// Directory holding train.txt and val.txt patient lists.
        /// Defaults to the manifest's directory when those files exist there;
        /// otherwise the manifest is split by patient with the config fractions.
        #[arg(long, value_name = "DIR")]
        split_dir: Option<PathBuf>,
        /// Overrides `mode` in the config.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
    },
    /// Score a checkpoint on a manifest with noise-free inference.
    Eval {
        /// Checkpoint written by `train`
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Manifest CSV with ground-truth labels
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        /// Only evaluate patients listed in this file.
        #[arg(long, value_name = "PATH")]
        patients: Option<PathBuf>,
        /// Also write roc.svg.
        #[arg(long)]
        svg: bool,
    },
    /// Train generative and deterministic models on paired seeds and
    /// compare them on a noise-injected synthetic test split.
    Compare {
        /// Number of paired seeds per model
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Finite-difference gradient suite; exits nonzero on any failure.
    GradCheck {
        /// Random instances per case
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "generative" => Ok(Mode::Generative),
        "deterministic" => Ok(Mode::Deterministic),
        _ => Err(format!("unknown mode {s:?} (generative or deterministic)")),
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

/// Output directory plus the sidecar log that holds everything
/// time-dependent.
struct Out {
    dir: PathBuf,
    log: File,
}

impl Out {
    fn create(dir: &Path, command: &str) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        let log = fs::OpenOptions::new().create(true).append(true).open(dir.join("run.log"))?;
        let mut out = Self { dir: dir.to_path_buf(), log };
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        out.note(&format!("start unix_time={now} command={command}"));
        Ok(out)
    }

    fn note(&mut self, line: &str) {
        let _ = writeln!(self.log, "{line}");
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn writer(&self, name: &str) -> Result<BufWriter<File>, Failure> {
        let p = self.path(name);
        File::create(&p).map(BufWriter::new).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", p.display())))
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn header(cfg: &RunConfig, command: &str) -> Vec<String> {
    let mut h = vec![format!("command = \"{command}\"")];
    h.extend(cfg.header_lines());
    h
}

fn gen_data(cfg: &RunConfig, out: &mut Out) -> Outcome {
    let data = SyntheticData::generate(cfg)?;
    let images_dir = out.path("images");
    fs::create_dir_all(&images_dir)?;
    let mut manifest = Manifest::new(data.manifest.label_names().to_vec());
    for (img, r) in data.images.iter().zip(data.manifest.records()) {
        write_pgm(&images_dir.join(&r.image_path), img)?;
        manifest.push(Record { image_path: format!("images/{}", r.image_path), ..r.clone() })?;
    }
    let h = header(cfg, "gen-data");
    manifest.save(&out.path("manifest.csv"), &h)?;
    for (name, part) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        write_split_list(&out.path(&format!("{name}.txt")), part, &h)?;
    }
    println!(
        "wrote {} images ({} train / {} val / {} test) to {}",
        manifest.len(),
        data.train.len(),
        data.val.len(),
        data.test.len(),
        out.dir.display()
    );
    Ok(())
}

fn train_val(cfg: &RunConfig, manifest: &Manifest, manifest_path: &Path, split_dir: Option<&Path>) -> Result<(Manifest, Manifest), Failure> {
    let default_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let dir = split_dir.or_else(|| default_dir.join("train.txt").exists().then_some(default_dir));
    match dir {
        Some(d) => {
            info!("using patient lists from {}", d.display());
            let lists = [read_split_list(&d.join("train.txt"))?, read_split_list(&d.join("val.txt"))?];
            let mut parts = split_from_lists(manifest, &lists)?.into_iter();
            Ok((parts.next().unwrap(), parts.next().unwrap()))
        }
        None => {
            info!("splitting {} by patient with fractions {:?}", manifest_path.display(), cfg.split_fractions);
            let (tr, va, _) = split_three(manifest, cfg.split_fractions, cfg.split_seed())?;
            Ok((tr, va))
        }
    }
}

fn train_cmd(cfg: &mut RunConfig, out: &mut Out, manifest_path: &Path, split_dir: Option<&Path>, mode: Option<Mode>) -> Outcome {
    if let Some(m) = mode {
        cfg.mode = m;
    }
    let manifest = load_manifest(manifest_path)?;
    let (tr, va) = train_val(cfg, &manifest, manifest_path, split_dir)?;
    let pp = cfg.preprocess_config();
    let (train_set, val_set) = (Dataset::load(tr, &pp)?, Dataset::load(va, &pp)?);
    info!("{} training and {} validation images", train_set.len(), val_set.len());
    let outcome = train(&cfg.train_config()?, &train_set, &val_set)?;
    for r in &outcome.history {
        out.note(&format!("epoch {} wall_seconds={:.3}", r.epoch, r.wall_seconds));
    }
    outcome.best.save(&out.path("checkpoint.dgc"))?;
    let h = header(cfg, "train");
    write_history_csv(&outcome.history, out.writer("history.csv")?, &h)?;
    println!(
        "{} model: best epoch {} of {}, validation mean AUC {:.4}; checkpoint at {}",
        cfg.mode.name(),
        outcome.best.epoch,
        outcome.history.len(),
        outcome.best.metric,
        out.path("checkpoint.dgc").display()
    );
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, out: &mut Out, checkpoint: &Path, manifest_path: &Path, patients: Option<&Path>, svg: bool) -> Outcome {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut manifest = load_manifest(manifest_path)?;
    if let Some(p) = patients {
        manifest = split_from_lists(&manifest, &[read_split_list(p)?])?.remove(0);
    }
    let data = Dataset::load(manifest, &cfg.preprocess_config())?;
    let report = evaluate(&ckpt.model, &data)?;

    let c = &ckpt.config;
    let mut h = header(cfg, "eval");
    h.extend([
        format!("checkpoint.mode = \"{}\"", c.mode.name()),
        format!("checkpoint.epoch = {}", ckpt.epoch),
        format!("checkpoint.metric = {}", ckpt.metric),
        format!("checkpoint.init_seed = {}", c.init_seed),
        format!("checkpoint.shuffle_seed = {}", c.shuffle_seed),
        format!("checkpoint.noise_seed = {}", c.noise_seed),
    ]);
    report.write_roc_csv(out.writer("roc.csv")?, &h)?;
    report.write_auc_csv(out.writer("auc.csv")?, c.mode.name(), &h)?;
    if svg {
        fs::write(out.path("roc.svg"), roc_svg(&report, &format!("{} model, epoch {}", c.mode.name(), ckpt.epoch)))?;
    }
    print_report(&report);
    Ok(())
}

fn print_report(report: &RocReport) {
    for l in &report.labels {
        match l.auc {
            Some(a) => println!("{:20} {a:.4}", l.name),
            None => println!("{:20} n/a (single class)", l.name),
        }
    }
    match report.mean_auc {
        Some(m) => println!("{:20} {m:.4}", "mean"),
        None => println!("{:20} n/a", "mean"),
    }
}

fn compare_cmd(cfg: &RunConfig, out: &mut Out, seeds: usize) -> Outcome {
    if seeds == 0 {
        return Err(Failure::Usage("--seeds must be positive".into()));
    }
    let started = Instant::now();
    let outcome = run_compare(cfg, seeds)?;
    out.note(&format!("compare wall_seconds={:.3}", started.elapsed().as_secs_f64()));
    let mut h = header(cfg, "compare");
    h.push(format!("compare.seeds = {seeds}"));

    outcome.comparison.write_csv(out.writer("comparison.csv")?, &h)?;
    let table = outcome.comparison.render();
    fs::write(out.path("comparison.txt"), &table)?;

    let mut runs = out.writer("runs.csv")?;
    for line in &h {
        writeln!(runs, "# {line}")?;
    }
    writeln!(runs, "mode,seed,best_epoch,val_mean_auc,test_mean_auc")?;
    for r in &outcome.runs {
        let val = r.best.metric;
        let test = r.test.mean_auc.map_or(String::new(), |m| m.to_string());
        writeln!(runs, "{},{},{},{val},{test}", r.mode.name(), r.seed, r.best.epoch)?;
        let mut run_h = h.clone();
        run_h.push(format!("run.seed = {}", r.seed));
        r.test.write_auc_csv(out.writer(&format!("auc_{}_{}.csv", r.mode.name(), r.seed))?, r.mode.name(), &run_h)?;
    }
    runs.flush()?;

    print!("{table}");
    let mean = |m: Mode| outcome.comparison.mean_auc(m.name()).and_then(|c| c.mean);
    if let (Some(g), Some(d)) = (mean(Mode::Generative), mean(Mode::Deterministic)) {
        let verdict = if g >= d - 0.02 { "holds" } else { "fails" };
        println!("\nnon-inferiority (generative >= deterministic - 0.02): {verdict} ({g:.4} vs {d:.4}, delta {:+.4})", g - d);
    }
    Ok(())
}

fn grad_check_cmd(out: &mut Out, seeds: u64) -> Outcome {
    if seeds == 0 {
        return Err(Failure::Usage("--seeds must be positive".into()));
    }
    let started = Instant::now();
    let results = run_suite(&SuiteConfig { seeds, ..Default::default() })?;
    out.note(&format!("grad-check wall_seconds={:.3}", started.elapsed().as_secs_f64()));
    let mut csv = out.writer("gradcheck.csv")?;
    writeln!(csv, "# command = \"grad-check\"\n# seeds = {seeds}")?;
    writeln!(csv, "case,compared,below_resolution,kinks,max_rel_error,failures")?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status} {:28} compared {:6}  absolute {:5}  kinks {:4}  max rel {:.2e}",
            r.name, r.compared, r.below_resolution, r.kinks, r.max_rel_error
        );
        for f in r.failures.iter().take(5) {
            println!("     {f}");
        }
        writeln!(csv, "{},{},{},{},{:e},{}", r.name, r.compared, r.below_resolution, r.kinks, r.max_rel_error, r.failures.len())?;
        failed += usize::from(!r.passed());
    }
    csv.flush()?;
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} gradient cases failed", results.len())));
    }
    println!("all {} cases passed over {seeds} seeds", results.len());
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let mut cfg = load_config(&cli.common)?;
    let name = match &cli.command {
        Command::GenData => "gen-data",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Compare { .. } => "compare",
        Command::GradCheck { .. } => "grad-check",
    };
    let mut out = Out::create(&cli.common.out, name)?;
    let started = Instant::now();
    let result = match &cli.command {
        Command::GenData => gen_data(&cfg, &mut out),
        Command::Train { manifest, split_dir, mode } => train_cmd(&mut cfg, &mut out, manifest, split_dir.as_deref(), *mode),
        Command::Eval { checkpoint, manifest, patients, svg } => {
            eval_cmd(&cfg, &mut out, checkpoint, manifest, patients.as_deref(), *svg)
        }
        Command::Compare { seeds } => compare_cmd(&cfg, &mut out, *seeds),
        Command::GradCheck { seeds } => grad_check_cmd(&mut out, *seeds),
    };
    let status = if result.is_ok() { "ok" } else { "failed" };
    out.note(&format!("end command={name} status={status} wall_seconds={:.3}", started.elapsed().as_secs_f64()));
    result
}

fn one_line(msg: &str) -> String {
    msg.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join("; ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("dgc: configuration error: {}", one_line(&msg));
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("dgc: {}", one_line(&msg));
            ExitCode::from(2)
        }
    }
}
