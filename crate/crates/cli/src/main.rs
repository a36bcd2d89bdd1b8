use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sofd::dataio::{self, Sample};
use sofd::eval::{self, DiagnosisReport};
use sofd::pipeline::{self, config::documented_keys, RunConfig, Variant};
use sofd::Error;

#[derive(Parser)]
#[command(name = "sofd", version, about = "Semi-supervised open-set fault diagnosis", after_help = config_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Label a raw plant CSV and write one prepared file per speed.
    /// The raw file is given with `--data`.
    Ingest {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a synthetic dataset as a prepared file.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the full pipeline.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run one or more ablation variants and collect their metrics.
    Ablate {
        /// Variants to run: full, no_fusion, no_consistency, raw_feature_space.
        #[arg(long, value_delimiter = ',', default_value = "full,no_fusion,no_consistency")]
        variants: Vec<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a prediction file against a truth file (`id,label`, 1-based;
    /// the largest label is the unknown class).
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Number of classes including unknown; inferred when omitted.
        #[arg(long)]
        classes: Option<usize>,
        /// Write the metrics as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize report.json files found under the given directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Write the long-format metrics CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train_m0.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    speed: Option<u8>,
    /// Dataset file; sets dataset.path.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; sets output_dir. An empty value disables writing.
    #[arg(long = "out-dir")]
    out_dir: Option<String>,
    /// Use the built-in synthetic demo configuration as the base.
    #[arg(long)]
    synthetic: bool,
}

fn config_help() -> String {
    let mut s = String::from("Configuration keys (TOML sections or --set overrides):\n");
    for (key, default) in documented_keys() {
        let shown = if default.len() > 40 { format!("{}...", default.chars().take(37).collect::<String>()) } else { default };
        let _ = writeln!(s, "  {key:<36} {shown}");
    }
    s
}

impl ConfigArgs {
    fn load(&self) -> sofd::Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(speed) = self.speed {
            overrides.push(format!("dataset.speed={speed}"));
        }
        if let Some(d) = &self.data {
            overrides.push(format!("dataset.path={}", toml_string(&d.to_string_lossy())));
        }
        if let Some(o) = &self.out_dir {
            overrides.push(format!("output_dir={}", toml_string(o)));
        }
        let base = match &self.config {
            Some(path) => std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?,
            None if self.synthetic => RunConfig::synthetic_demo().to_toml()?,
            None => String::new(),
        };
        RunConfig::from_toml_with_overrides(&base, &overrides)
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 3 })
        }
    }
}

fn execute(command: Command) -> sofd::Result<()> {
    match command {
        Command::Ingest { out, cfg } => {
            let data = cfg.data.clone().ok_or_else(|| Error::Config("ingest needs --data".into()))?;
            ingest(&data, &out, &cfg.load()?)
        }
        Command::Synth { out, cfg } => {
            let c = cfg.load()?;
            let mut spec = c.synthetic.spec();
            spec.speed = c.dataset.speed.unwrap_or(1);
            let samples = dataio::generate_synthetic(&spec)?;
            dataio::write_prepared(&out, &samples)?;
            log::info!("wrote {} samples to {}", samples.len(), out.display());
            Ok(())
        }
        Command::Run { cfg } => {
            let c = cfg.load()?;
            let art = pipeline::run(&c)?;
            match &art.output_dir {
                Some(dir) => println!("{}", dir.join("report.json").display()),
                None => print!("{}", art.report.to_json()?),
            }
            Ok(())
        }
        Command::Ablate { variants, cfg } => {
            let base = cfg.load()?;
            let mut reports = Vec::new();
            for name in &variants {
                let v = Variant::parse(name).ok_or_else(|| Error::Config(format!("unknown variant '{name}'")))?;
                let mut c = base.clone();
                if !c.output_dir.is_empty() {
                    c.output_dir = Path::new(&base.output_dir).join(v.name()).to_string_lossy().into_owned();
                }
                log::info!("running variant {}", v.name());
                reports.push(pipeline::run_ablation(&c, v)?.report);
            }
            let csv = eval::long_csv(&reports);
            if !base.output_dir.is_empty() {
                let p = Path::new(&base.output_dir).join("ablation.csv");
                std::fs::write(&p, &csv).map_err(|e| Error::Io { path: p, source: e })?;
            }
            print!("{csv}");
            Ok(())
        }
        Command::Evaluate { pred, truth, classes, out } => {
            let p = read_labels(&pred)?;
            let t = read_labels(&truth)?;
            if p.len() != t.len() {
                return Err(Error::Schema(format!("{} predictions for {} truth rows", p.len(), t.len())));
            }
            let p: std::collections::HashMap<usize, usize> = p.into_iter().collect();
            let mut y_true = Vec::with_capacity(t.len());
            let mut y_pred = Vec::with_capacity(t.len());
            for (id, label) in &t {
                let guess = p.get(id).ok_or_else(|| Error::Schema(format!("no prediction for id {id}")))?;
                y_true.push(label - 1);
                y_pred.push(guess - 1);
            }
            let n = classes.unwrap_or_else(|| y_true.iter().chain(&y_pred).max().map_or(1, |m| m + 1));
            let cm = eval::confusion_matrix(&y_true, &y_pred, n)?;
            let (ur, acc, f1, flags) = eval::metrics(&cm);
            println!("u_recall {ur}");
            println!("acc {acc}");
            println!("macro_f1 {f1}");
            for f in &flags {
                println!("flag {f}");
            }
            if let Some(path) = out {
                let json = serde_json::json!({
                    "u_recall": ur, "acc": acc, "macro_f1": f1, "confusion": cm, "flags": flags,
                });
                std::fs::write(&path, format!("{json:#}\n")).map_err(|e| Error::Io { path, source: e })?;
            }
            Ok(())
        }
        Command::Report { dirs, csv } => {
            let mut reports = Vec::new();
            for d in &dirs {
                collect_reports(d, &mut reports)?;
            }
            if reports.is_empty() {
                return Err(Error::Empty("no report.json found".into()));
            }
            print!("{}", summary_table(&reports));
            if let Some(p) = csv {
                std::fs::write(&p, eval::long_csv(&reports)).map_err(|e| Error::Io { path: p, source: e })?;
            }
            Ok(())
        }
    }
}

fn ingest(data: &Path, out: &Path, cfg: &RunConfig) -> sofd::Result<()> {
    let records = dataio::load_raw(data, &cfg.dataset.schema)?;
    let total = records.len();
    let (samples, unassigned) = dataio::prepare_samples(records, &cfg.dataset.schema)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    let mut speeds: Vec<u8> = samples.iter().map(|s| s.speed).collect();
    speeds.sort_unstable();
    speeds.dedup();
    let mut summary = String::from("speed,class,count\n");
    for speed in speeds {
        let subset: Vec<Sample> = samples.iter().filter(|s| s.speed == speed).cloned().collect();
        dataio::write_prepared(&out.join(format!("speed{speed}.csv")), &subset)?;
        let mut counts = std::collections::BTreeMap::new();
        for s in &subset {
            *counts.entry(s.label.unwrap_or(0)).or_insert(0usize) += 1;
        }
        for (class, n) in counts {
            let _ = writeln!(summary, "{speed},{class},{n}");
        }
    }
    let p = out.join("summary.csv");
    std::fs::write(&p, &summary).map_err(|e| Error::Io { path: p, source: e })?;
    log::info!("{total} rows read, {unassigned} unassigned, {} labeled", samples.len());
    print!("{summary}");
    Ok(())
}

fn read_labels(path: &Path) -> sofd::Result<Vec<(usize, usize)>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(Error::from)?;
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row?;
        let parse = |c: usize| -> sofd::Result<usize> {
            row.get(c).and_then(|v| v.parse().ok()).filter(|&v: &usize| c == 0 || v >= 1).ok_or_else(|| {
                Error::Malformed { row: i + 1, column: c.to_string(), message: "expected a 1-based integer".into() }
            })
        };
        out.push((parse(0)?, parse(1)?));
    }
    Ok(out)
}

fn collect_reports(dir: &Path, out: &mut Vec<DiagnosisReport>) -> sofd::Result<()> {
    let direct = dir.join("report.json");
    if direct.is_file() {
        out.push(eval::read_report(&direct)?);
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    let mut subdirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    subdirs.sort();
    for d in subdirs {
        collect_reports(&d, out)?;
    }
    Ok(())
}

fn summary_table(reports: &[DiagnosisReport]) -> String {
    let mut s = format!("{:<18} {:>5} {:>8} {:>8} {:>8} {:>6} {:>6}\n", "variant", "speed", "UR", "ACC", "F1", "|Dp|", "|Ds|");
    for r in reports {
        let speed = r.speed.map_or("-".to_string(), |v| v.to_string());
        let _ = writeln!(
            s,
            "{:<18} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>6} {:>6}",
            r.variant, speed, r.u_recall, r.acc, r.macro_f1, r.pseudo_count, r.reliable_count
        );
    }
    s
}
