use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use deid_core::adversary::{signal_attacks, td_detection, SignalAttackKind, TdBackend};
use deid_core::asi::{self, train_asi, SpeakerModel};
use deid_core::audio::{load_wav, save_wav};
use deid_core::config::GlobalConfig;
use deid_core::corpus::Utterance;
use deid_core::harness::{
    cvae_training_set, load_records, read_rows, render_report, run_experiment, summarize, CorpusSource, Resources,
    RunOptions, Session, SummaryRow,
};
use deid_core::{Error, Result};

#[derive(Parser)]
#[command(name = "deid", version, about = "Adversarial voice de-identification toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Configuration file (TOML); defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the experiment, the speaker models and the CVAEs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Override one key, e.g. `--set deid.conv.alpha=4000`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a speaker model on the corpus.
    TrainAsi {
        #[arg(long, default_value = "xvector")]
        arch: String,
        /// Checkpoint path; `<models_dir>/<arch>.ckpt` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export embeddings of WAV files (CSV or JSONL by extension).
    Embed {
        #[arg(long)]
        model: String,
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the target-generation CVAE of a speaker model.
    TrainCvae {
        #[arg(long)]
        model: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// De-identify one recording; writes the WAV and a JSON trial record.
    Deidentify {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Enrolled label of the speaker; identified when omitted.
        #[arg(long)]
        label: Option<usize>,
    },
    /// Apply a signal attack or score temporal-dependency detection.
    Attack {
        /// bandpass, requantize, mel_retransform, psychoacoustic_filter or td.
        #[arg(long)]
        kind: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the configured experiment into the run directory.
    Evaluate {
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        force: bool,
    },
    /// Print summary tables recomputed from a run's records.
    Report,
    /// Run the built-in invariant checks.
    Selftest,
}

fn load_config(g: &Global) -> Result<GlobalConfig> {
    let mut cfg = match &g.config {
        Some(p) => GlobalConfig::load(p)?,
        None => GlobalConfig::from_env()?,
    };
    for kv in &g.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg = cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = g.seed {
        cfg.harness.seed = s;
        cfg.asi.seed = s;
        cfg.cvae.seed = s;
    }
    if let Some(d) = &g.run_dir {
        cfg.io.run_dir = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(cfg: &GlobalConfig) -> Result<PathBuf> {
    cfg.io
        .run_dir
        .clone()
        .ok_or_else(|| Error::Config("no run directory (use --run-dir or io.run_dir)".into()))
}

fn resources(cfg: &GlobalConfig, with_cvaes: bool) -> Result<Resources> {
    let mut res = Resources::new(CorpusSource::from_config(cfg)?);
    res.load_models(&cfg.io.models_dir, &cfg.harness.model_ids())?;
    if with_cvaes && cfg.harness.method == "conv" {
        std::fs::create_dir_all(&cfg.io.models_dir).map_err(|e| Error::io(&cfg.io.models_dir, e))?;
        res.prepare_cvaes(cfg, Some(&cfg.io.models_dir))?;
    }
    res.transcriber = cfg.io.transcriber.build()?;
    Ok(res)
}

fn out(text: &str) {
    use std::io::Write;
    // A closed pipe (e.g. `| head`) is not an error worth reporting.
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print(v: serde_json::Value) {
    out(&(serde_json::to_string_pretty(&v).expect("json") + "\n"));
}

fn model(cfg: &GlobalConfig, id: &str) -> Result<Arc<dyn SpeakerModel>> {
    let mut res = Resources::new(CorpusSource::Synth(cfg.audio.synth.clone()));
    res.load_models(&cfg.io.models_dir, &[id.to_string()])?;
    res.model(id)
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::TrainAsi { arch, out } => {
            let corpus = CorpusSource::from_config(&cfg)?;
            let labels: Vec<usize> = (0..corpus.num_speakers()).collect();
            // Probes stay unseen by the speaker model.
            let data = corpus.select(&labels, [0, cfg.harness.probes[0]])?;
            let tcfg = deid_core::asi::AsiTrainConfig { architecture: arch.clone(), ..cfg.asi.clone() };
            let (m, report) = train_asi(&data, &tcfg)?;
            let out = out.unwrap_or_else(|| cfg.io.models_dir.join(format!("{arch}.ckpt")));
            if let Some(d) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            m.save(&out)?;
            print(json!({ "checkpoint": out, "report": report }));
        }
        Command::Embed { model: id, inputs, out } => {
            let m = model(&cfg, &id)?;
            let mut rows = Vec::new();
            for p in &inputs {
                rows.push((p.display().to_string(), m.extract_embedding(&load_wav(p)?)?));
            }
            match out.extension().and_then(|e| e.to_str()) {
                Some("jsonl") => asi::export::write_jsonl(&out, &rows)?,
                _ => asi::export::write_csv(&out, &rows)?,
            }
            print(json!({ "embeddings": rows.len(), "out": out }));
        }
        Command::TrainCvae { model: id, out } => {
            let m = model(&cfg, &id)?;
            let corpus = CorpusSource::from_config(&cfg)?;
            let data = cvae_training_set(m.as_ref(), &corpus, &cfg.harness)?;
            let (cvae, stats) = deid_core::cvae::train_cvae(&data, &cfg.cvae)?;
            let out = out.unwrap_or_else(|| cfg.io.models_dir.join(format!("{id}.cvae")));
            cvae.save(&out)?;
            print(json!({ "checkpoint": out, "final_epoch": stats.last() }));
        }
        Command::Deidentify { input, out, label } => {
            let res = resources(&cfg, true)?;
            let session = Session::new(&cfg, &res)?;
            let wave = load_wav(&input)?;
            let label = match label {
                Some(l) => l,
                None => session.identify(&cfg.harness.models[0], &wave)?.0,
            };
            let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let u = Utterance { id: stem.clone(), label, wave, text: None };
            let seed = deid_core::harness::unit_seed(cfg.harness.seed, &stem);
            let (w, records) = session.deidentify(0, &u, seed)?;
            save_wav(&out, &w)?;
            let sidecar = out.with_extension("json");
            let text = serde_json::to_string_pretty(&records[0]).map_err(|e| Error::Data(e.to_string()))?;
            std::fs::write(&sidecar, text + "\n").map_err(|e| Error::io(&sidecar, e))?;
            print(json!({ "out": out, "record": sidecar, "success": records[0].success }));
        }
        Command::Attack { kind, input, out } => {
            let w = load_wav(&input)?;
            if kind == "td" {
                let m = model(&cfg, &cfg.harness.models[0])?;
                let t = cfg.io.transcriber.build()?;
                let backend = TdBackend { model: m.as_ref(), transcriber: t.as_deref() };
                let s = td_detection(backend, &w, &cfg.attacks.td)?;
                print(json!({
                    "td_score": s,
                    "ratio": cfg.attacks.td.split_ratio,
                    "adversarial": s >= cfg.attacks.td.threshold,
                }));
            } else {
                let k: SignalAttackKind = serde_json::from_value(json!(kind))
                    .map_err(|_| Error::Argument(format!("unknown attack kind `{kind}`")))?;
                let attacked = signal_attacks(&cfg.attacks.signal)?.get(k.id())?.apply(&w)?;
                let out = out.ok_or_else(|| Error::Argument("signal attacks need --out".into()))?;
                save_wav(&out, &attacked)?;
                print(json!({ "out": out, "kind": k.id() }));
            }
        }
        Command::Evaluate { resume, force } => {
            let dir = run_dir(&cfg)?;
            let res = resources(&cfg, true)?;
            let report = run_experiment(&cfg, &res, &RunOptions { run_dir: dir.clone(), resume, force })?;
            out(&render_report(&report.summary));
            print(json!({ "run_dir": dir, "status": report.status }));
        }
        Command::Report => {
            let dir = run_dir(&cfg)?;
            let summary = summarize(&load_records(&dir)?)?;
            let persisted: Vec<SummaryRow> = read_rows(&dir.join("summary.csv"))?;
            if !same_rows(&persisted, &summary.rows) {
                return Err(Error::State(format!(
                    "{}: summary.csv differs from the summary recomputed from records.jsonl",
                    dir.display()
                )));
            }
            out(&render_report(&summary));
        }
        Command::Selftest => {
            let mut failed = 0;
            for c in deid_core::selftest::run() {
                match &c.outcome {
                    Ok(msg) => out(&format!("PASS {}: {msg}\n", c.name)),
                    Err(e) => {
                        failed += 1;
                        out(&format!("FAIL {}: {e}\n", c.name));
                    }
                }
            }
            if failed > 0 {
                return Err(Error::State(format!("{failed} self-test check(s) failed")));
            }
        }
    }
    Ok(())
}

/// Row equality up to the decimal round trip of the CSV file.
fn same_rows(a: &[SummaryRow], b: &[SummaryRow]) -> bool {
    let text = |rows: &[SummaryRow]| -> Vec<String> { rows.iter().map(|r| serde_json::to_string(r).unwrap()).collect() };
    a.len() == b.len() && text(a) == text(b)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::from(exit_code(&e))
        }
    }
}
