use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use tessef::config::KeyValue;
use tessef::formats::{read_annotations, read_features, write_annotations};
use tessef::metrics::{evaluate, EvalSettings, EvaluationReport};
use tessef::synth::{write_corpus, SynthConfig};
use tessef::train::{
    self, config_hash, infer_all, list_pairs, load_split, sweep_thresholds, Checkpoint, HeadKind, Model, TrainConfig,
};
use tessef::Error;

const SEED_ENV: &str = "TESSEF_SEED";

#[derive(Parser)]
#[command(name = "tessef", version, about = "Filler-word event detection with an exact neural semi-CRF")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into DIR/{train,val,test}.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train on DIR/train, select on DIR/val, report on DIR/test.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; the resolved config goes next to it as `<out>.cfg`.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write one annotation CSV per feature file.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A `.fseq` file or a directory of them.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Framewise threshold; defaults to the one stored at training time.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Score predicted CSVs against references.
    Eval {
        /// A CSV file or a directory of CSVs.
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Length of each sequence in seconds.
        #[arg(long, default_value_t = 2.0)]
        duration: f64,
        #[arg(long, default_value_t = 0.2)]
        collar: f64,
        #[arg(long, default_value_t = 0.05)]
        segment_len: f64,
        /// Classes always reported, comma separated.
        #[arg(long, default_value = "filler,speech,music")]
        classes: String,
    },
    /// Precision and recall of the framewise head at every threshold, as CSV.
    SweepThreshold {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split directory with `.fseq` and `.csv` pairs.
        #[arg(long)]
        data: PathBuf,
        /// Output file; standard output if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle, gradient and mode-equivalence self-checks.
    Verify,
}

enum Failure {
    Usage(String),
    Data(String),
    Verify(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Verify(_) => 3,
        }
    }

    fn line(&self) -> String {
        let (kind, msg) = match self {
            Failure::Usage(m) => ("usage", m),
            Failure::Data(m) => ("data", m),
            Failure::Verify(m) => ("verify", m),
        };
        format!("error kind={kind} message={:?}", msg.replace('\n', " "))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Contract(_) => Failure::Usage(msg),
            _ => Failure::Data(msg),
        }
    }
}

type Outcome = Result<(), Failure>;

fn resolve<C: KeyValue>(mut cfg: C, args: &ConfigArgs, seed_key: bool) -> Result<C, Failure> {
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    }
    if seed_key {
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.set("seed", &seed)
                .map_err(|e| Failure::Usage(format!("{SEED_ENV}: {e}")))?;
        }
    }
    for s in &args.set {
        cfg.apply_override(s)?;
    }
    eprint!("# resolved config\n{}", cfg.to_text());
    Ok(cfg)
}

fn sidecar(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    fs::write(path, bytes).map_err(|e| Error::from(e).at_path(path).into())
}

fn load_model(ckpt: &Path) -> Result<(Model, Checkpoint), Failure> {
    let cfg_path = sidecar(ckpt);
    let text = fs::read_to_string(&cfg_path).map_err(|e| Failure::Data(format!("{}: {e}", cfg_path.display())))?;
    let mut cfg = TrainConfig::default();
    cfg.apply_text(&text)
        .map_err(|e| Failure::Data(format!("{}: {e}", cfg_path.display())))?;
    let ck = Checkpoint::load(ckpt)?;
    if ck.config_hash != config_hash(&cfg.to_text()) {
        return Err(Failure::Data(format!(
            "{}: config hash does not match {}",
            ckpt.display(),
            cfg_path.display()
        )));
    }
    let model = Model::from_checkpoint(&cfg, &ck).map_err(|e| Failure::Data(format!("{}: {e}", ckpt.display())))?;
    Ok((model, ck))
}

fn gen_data(out: &Path, args: &ConfigArgs) -> Outcome {
    let cfg = resolve(SynthConfig::default(), args, true)?;
    write_corpus(&cfg, out)?;
    Ok(())
}

fn run_train(data: &Path, out: &Path, args: &ConfigArgs) -> Outcome {
    let cfg = resolve(TrainConfig::default(), args, true)?;
    cfg.validate()?;
    let train_set = load_split(&cfg, &data.join("train"))?;
    let val_set = load_split(&cfg, &data.join("val"))?;
    let outcome = train::train(&cfg, &train_set, &val_set, |e| eprintln!("{}", e.line()))?;
    eprintln!("best_epoch={}", outcome.best_epoch);
    outcome.checkpoint.save(out)?;
    write_file(&sidecar(out), cfg.to_text().as_bytes())?;
    let log: String = outcome.log.iter().map(|e| e.line() + "\n").collect();
    let mut log_path = out.as_os_str().to_owned();
    log_path.push(".log");
    write_file(Path::new(&log_path), log.as_bytes())?;
    let test_dir = data.join("test");
    if test_dir.is_dir() {
        let test_set = load_split(&cfg, &test_dir)?;
        let report = train::evaluate_model(&outcome.model, &test_set, outcome.threshold)?;
        eprint!("{}", report.table());
        println!("{}", report.to_json());
    }
    Ok(())
}

fn feature_files(input: &Path) -> Result<Vec<(String, PathBuf)>, Failure> {
    if input.is_dir() {
        Ok(list_pairs(input)?.into_iter().map(|(id, f, _)| (id, f)).collect())
    } else {
        let stem = input
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Failure::Usage(format!("{}: not a feature file", input.display())))?;
        Ok(vec![(stem.to_string(), input.to_path_buf())])
    }
}

fn decode(ckpt: &Path, input: &Path, out: &Path, threshold: Option<f64>) -> Outcome {
    let (model, ck) = load_model(ckpt)?;
    let threshold = match model.config.head {
        HeadKind::SemiCrf => None,
        HeadKind::Framewise => Some(
            threshold
                .or_else(|| ck.scalar("meta.threshold"))
                .ok_or_else(|| Failure::Usage("framewise checkpoint has no threshold; pass --threshold".into()))?,
        ),
    };
    let files = feature_files(input)?;
    fs::create_dir_all(out).map_err(|e| Error::from(e).at_path(out))?;
    files.par_iter().try_for_each(|(id, path)| -> Result<(), Error> {
        let features = read_features(path)?;
        let x = model.prepare(&features).map_err(|e| e.at_path(path))?;
        let events = model.events(&model.infer(&x)?, threshold)?;
        write_annotations(&out.join(format!("{id}.csv")), &events)
    })?;
    eprintln!("decoded {} files into {}", files.len(), out.display());
    Ok(())
}

fn csv_files(path: &Path) -> Result<Vec<(String, PathBuf)>, Failure> {
    if path.is_dir() {
        let rd = fs::read_dir(path).map_err(|e| Error::from(e).at_path(path))?;
        let mut out = Vec::new();
        for entry in rd {
            let p = entry.map_err(|e| Error::from(e).at_path(path))?.path();
            if p.extension().and_then(|e| e.to_str()) == Some("csv") {
                let name = p.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                out.push((name, p));
            }
        }
        out.sort();
        Ok(out)
    } else {
        Ok(vec![(String::new(), path.to_path_buf())])
    }
}

fn run_eval(reference: &Path, pred: &Path, settings: EvalSettings, duration: f64, classes: &str) -> Outcome {
    let classes: Vec<String> = classes.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
    let pairs: Vec<(PathBuf, PathBuf)> = match (reference.is_dir(), pred.is_dir()) {
        (true, true) => csv_files(reference)?
            .into_iter()
            .map(|(name, r)| (r, pred.join(name)))
            .collect(),
        (false, false) => vec![(reference.to_path_buf(), pred.to_path_buf())],
        _ => return Err(Failure::Usage("--ref and --pred must both be files or both be directories".into())),
    };
    let reports = pairs
        .par_iter()
        .map(|(r, p)| -> Result<EvaluationReport, Error> {
            let r_events = read_annotations(r)?;
            let p_events = read_annotations(p)?;
            evaluate(&r_events, &p_events, duration, &settings, &classes).map_err(|e| e.at_path(r))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut total = EvaluationReport::default();
    for rep in &reports {
        total.merge(rep);
    }
    eprint!("{}", total.table());
    println!("{}", total.to_json());
    Ok(())
}

fn sweep(ckpt: &Path, data: &Path, out: Option<&Path>) -> Outcome {
    let (model, _) = load_model(ckpt)?;
    if model.config.head != HeadKind::Framewise {
        return Err(Failure::Usage("sweep-threshold needs a framewise checkpoint".into()));
    }
    let examples = load_split(&model.config, data)?;
    let outputs = infer_all(&model, &examples)?;
    let mut text = String::from("threshold,event_precision,event_recall,event_f1,segment_precision,segment_recall,segment_f1\n");
    for (t, rep) in sweep_thresholds(&model, &examples, &outputs)? {
        let (e, s) = (rep.event.micro(), rep.segment.micro());
        text.push_str(&format!(
            "{t:.2},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            e.precision(),
            e.recall(),
            e.f1(),
            s.precision(),
            s.recall(),
            s.f1()
        ));
    }
    match out {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn verify() -> Outcome {
    let results = tessef::verify::run_all();
    for r in &results {
        println!("{}", r.line());
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verify(format!("failed checks: {}", failed.join(","))))
    }
}

fn dispatch(cli: Cli) -> Outcome {
    match cli.command {
        Command::GenData { out, cfg } => gen_data(&out, &cfg),
        Command::Train { data, out, cfg } => run_train(&data, &out, &cfg),
        Command::Decode {
            checkpoint,
            input,
            out,
            threshold,
        } => decode(&checkpoint, &input, &out, threshold),
        Command::Eval {
            reference,
            pred,
            duration,
            collar,
            segment_len,
            classes,
        } => run_eval(&reference, &pred, EvalSettings { collar, segment_len }, duration, &classes),
        Command::SweepThreshold { checkpoint, data, out } => sweep(&checkpoint, &data, out.as_deref()),
        Command::Verify => verify(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().to_string();
            eprintln!("{}", Failure::Usage(first).line());
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.code())
        }
    }
}
