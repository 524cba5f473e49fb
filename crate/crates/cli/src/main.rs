use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use xmodal::config::PipelineConfig;
use xmodal::eval::{evaluate, parse_shot, write_cmc_csv, EvalReport, SearchMode};
use xmodal::gradcheck::{gradcheck, GradTarget};
use xmodal::io::{load_dataset, save_dataset};
use xmodal::mining::{mine_batch, write_pentaplets_csv};
use xmodal::pipeline::{
    compare_losses, load_model, run_pipeline, save_history, save_model, write_json, RunManifest,
    StageError,
};
use xmodal::seed::derive_seed;
use xmodal::trainer::{export_embeddings, generate_synthetic, init_model, train, LossKind};
use xmodal::{pairwise_distances, CmBatch, Error};

#[derive(Parser, Debug)]
#[command(
    name = "xmodal",
    version,
    about = "Cross-modality metric learning on embedding vectors"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Root seed; every stage seed derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for outputs whose path is not given explicitly.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic two-modality dataset.
    Synth {
        /// Configuration holding the synthetic-data keys (defaults to --config).
        #[arg(long)]
        spec_file: Option<PathBuf>,
        /// Output dataset (.emb, or .csv). Default: <out-dir>/dataset.emb
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train an embedding model on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Objective override: id, ht, hti, hp or hpi.
        #[arg(long)]
        loss: Option<String>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Default: <out-dir>/model.json
        #[arg(long)]
        out_model: Option<PathBuf>,
        /// Default: <out-dir>/history.csv
        #[arg(long)]
        out_history: Option<PathBuf>,
    },
    /// Run a dataset through a trained model.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Default: <out-dir>/embeddings.emb
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mine the hardest pentaplet of every anchor in a cm-batch file.
    Mine {
        /// Dataset whose records, in order, form P blocks of [K RGB | K IR].
        #[arg(long)]
        batch_file: PathBuf,
        /// Default: <out-dir>/pentaplets.csv
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// trip, htrip, hgt, hct, hp, id, hpi or model.
        #[arg(long)]
        loss: String,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Optional JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-modality retrieval evaluation of an embedding file.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// all or indoor.
        #[arg(long)]
        mode: Option<String>,
        /// single, multi or a gallery count per identity and camera.
        #[arg(long)]
        shot: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        /// Default: <out-dir>/report.json
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write (rank, rate) pairs.
        #[arg(long)]
        cmc_csv: Option<PathBuf>,
    },
    /// synth -> train -> export -> eval into <out-dir>.
    Pipeline,
    /// Train one model per objective (and margin) and tabulate the results.
    CompareLosses {
        /// Comma-separated objectives, overriding the config.
        #[arg(long)]
        losses: Option<String>,
        /// Comma-separated margins to sweep, overriding the config.
        #[arg(long)]
        margins: Option<String>,
    },
}

/// A failed command: the stage it failed in and why.
struct Failure {
    stage: &'static str,
    error: Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}: {}", self.stage, self.error)
    }
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        Failure {
            stage: e.stage,
            error: e.source,
        }
    }
}

trait At<T> {
    fn at(self, stage: &'static str) -> Result<T, Failure>;
}

impl<T> At<T> for xmodal::Result<T> {
    fn at(self, stage: &'static str) -> Result<T, Failure> {
        self.map_err(|error| Failure { stage, error })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.error.exit_code() as u8)
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig, Failure> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(Error::from).at("config")?;
            PipelineConfig::parse(&text).at("config")?
        }
        None => PipelineConfig::default(),
    };
    Ok(match seed {
        Some(s) => cfg.reseeded(s),
        None => cfg,
    })
}

fn parse_arg<T: FromStr<Err = Error>>(s: &Option<String>) -> Result<Option<T>, Failure> {
    s.as_deref().map(T::from_str).transpose().at("config")
}

fn ensure_parent(path: &Path) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::from).at("io")?;
    }
    Ok(())
}

/// `<path>.manifest.json`, next to the command's first output.
fn manifest_path(first_output: &Path) -> PathBuf {
    let mut name = first_output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    first_output.with_file_name(name)
}

fn write_manifest(
    command: &str,
    cfg: &PipelineConfig,
    inputs: &[&Path],
    outputs: &[&Path],
    started: Instant,
) -> Result<(), Failure> {
    RunManifest::new(command, cfg.to_kv_string(), cfg.stage_seeds())
        .finish(inputs, outputs, started, &manifest_path(outputs[0]))
        .at("write")
}

fn print_report(r: &EvalReport) {
    println!(
        "rank1 {:.4}  rank10 {:.4}  rank20 {:.4}  mAP {:.4}  ({} trials, {} skipped probes)",
        r.rank1, r.rank10, r.rank20, r.map, r.trials, r.skipped_probes
    );
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let g = &cli.global;
    let started = Instant::now();
    let out_or =
        |p: &Option<PathBuf>, name: &str| p.clone().unwrap_or_else(|| g.out_dir.join(name));
    match &cli.command {
        Command::Synth { spec_file, out } => {
            let cfg = load_config(spec_file.as_deref().or(g.config.as_deref()), g.seed)?;
            let out = out_or(out, "dataset.emb");
            let ds = generate_synthetic(&cfg.synth).at("synth")?;
            ensure_parent(&out)?;
            save_dataset(&out, &ds).at("write")?;
            write_manifest("synth", &cfg, &[], &[&out], started)?;
            log::info!("wrote {} records to {}", ds.len(), out.display());
        }
        Command::Train {
            data,
            loss,
            iterations,
            out_model,
            out_history,
        } => {
            let mut cfg = load_config(g.config.as_deref(), g.seed)?;
            if let Some(l) = parse_arg::<LossKind>(loss)? {
                cfg.train.objective = l;
            }
            if let Some(n) = iterations {
                cfg.train.iterations = *n;
            }
            cfg.train.validate().at("config")?;
            let ds = load_dataset(data).at("load")?;
            let net = init_model(&ds, &cfg.train).at("train")?;
            let outcome = train(&ds, net, &cfg.train).at("train")?;
            let (model_path, history_path) = (
                out_or(out_model, "model.json"),
                out_or(out_history, "history.csv"),
            );
            ensure_parent(&model_path)?;
            ensure_parent(&history_path)?;
            save_model(&model_path, &outcome.model).at("write")?;
            save_history(&history_path, &outcome.history).at("write")?;
            write_manifest(
                "train",
                &cfg,
                &[data],
                &[&model_path, &history_path],
                started,
            )?;
            if let Some(last) = outcome.history.last() {
                println!(
                    "final loss {:.6}  hp {:.6}  id {:.6}",
                    last.loss, last.hp, last.id
                );
            }
        }
        Command::Export { model, data, out } => {
            let cfg = load_config(g.config.as_deref(), g.seed)?;
            let net = load_model(model).at("load")?;
            let ds = load_dataset(data).at("load")?;
            let emb = export_embeddings(&net.model, &ds).at("export")?;
            let out = out_or(out, "embeddings.emb");
            ensure_parent(&out)?;
            save_dataset(&out, &emb).at("write")?;
            write_manifest("export", &cfg, &[model, data], &[&out], started)?;
        }
        Command::Mine { batch_file, report } => {
            let cfg = load_config(g.config.as_deref(), g.seed)?;
            let ds = load_dataset(batch_file).at("load")?;
            let batch = CmBatch::from_ordered_dataset(&ds).at("mine")?;
            let all: Vec<usize> = (0..ds.len()).collect();
            let dmat = pairwise_distances(&ds.gather(&all)).at("mine")?;
            let mined = mine_batch(&batch, &dmat).at("mine")?;
            let report = out_or(report, "pentaplets.csv");
            ensure_parent(&report)?;
            let file = File::create(&report).map_err(Error::from).at("write")?;
            write_pentaplets_csv(BufWriter::new(file), &mined).at("write")?;
            write_manifest("mine", &cfg, &[batch_file], &[&report], started)?;
            println!(
                "{} anchors (P = {}, K = {})",
                mined.len(),
                batch.spec.p,
                batch.spec.k
            );
        }
        Command::Gradcheck {
            loss,
            instances,
            out,
        } => {
            let cfg = load_config(g.config.as_deref(), g.seed)?;
            let target: GradTarget = loss.parse().at("config")?;
            let seed = derive_seed(cfg.seed, "gradcheck");
            let report = gradcheck(target, seed, *instances).at("gradcheck")?;
            println!(
                "{}: max relative error {:.3e} over {} instances ({} rejected), tolerance {:.0e}",
                target,
                report.max_relative_error,
                report.instances,
                report.rejected,
                report.tolerance
            );
            if let Some(out) = out {
                ensure_parent(out)?;
                write_json(out, &report).at("write")?;
                write_manifest("gradcheck", &cfg, &[], &[out], started)?;
            }
            if !report.passed() {
                return Err(Failure {
                    stage: "gradcheck",
                    error: Error::Numerical(format!(
                        "{target}: relative error {:.3e} exceeds {:.0e}",
                        report.max_relative_error, report.tolerance
                    )),
                });
            }
        }
        Command::Eval {
            data,
            mode,
            shot,
            trials,
            out,
            cmc_csv,
        } => {
            let cfg = load_config(g.config.as_deref(), g.seed)?;
            let mut protocol = cfg.protocol.clone();
            if let Some(m) = parse_arg::<SearchMode>(mode)? {
                protocol.mode = m;
            }
            if let Some(s) = shot {
                protocol.shot_count = parse_shot(s).at("config")?;
            }
            if let Some(t) = trials {
                protocol.trials = *t;
            }
            protocol.validate().at("config")?;
            let ds = load_dataset(data).at("load")?;
            let report = evaluate(&ds, &protocol).at("eval")?;
            let out = out_or(out, "report.json");
            ensure_parent(&out)?;
            write_json(&out, &report).at("write")?;
            let mut outputs: Vec<&Path> = vec![&out];
            if let Some(c) = cmc_csv {
                ensure_parent(c)?;
                let file = File::create(c).map_err(Error::from).at("write")?;
                write_cmc_csv(BufWriter::new(file), &report.cmc).at("write")?;
                outputs.push(c);
            }
            write_manifest("eval", &cfg, &[data], &outputs, started)?;
            print_report(&report);
        }
        Command::Pipeline => {
            let cfg = load_config(g.config.as_deref(), g.seed)?;
            let outcome = run_pipeline(&cfg, &g.out_dir)?;
            print_report(&outcome.report);
        }
        Command::CompareLosses { losses, margins } => {
            let mut cfg = load_config(g.config.as_deref(), g.seed)?;
            if let Some(l) = losses {
                let text = format!("losses = {l}\n");
                cfg.losses = PipelineConfig::parse(&text).at("config")?.losses;
            }
            if let Some(m) = margins {
                let text = format!("margins = {m}\n");
                cfg.margins = PipelineConfig::parse(&text).at("config")?.margins;
            }
            let rows = compare_losses(&cfg, &g.out_dir)?;
            println!(
                "{:<5} {:>7} {:>7} {:>7} {:>9}",
                "loss", "margin", "rank1", "mAP", "final hp"
            );
            for r in rows {
                println!(
                    "{:<5} {:>7} {:>7.4} {:>7.4} {:>9.4}",
                    r.loss, r.margin, r.rank1, r.map, r.final_hp
                );
            }
        }
    }
    Ok(())
}
