//! Command line and REST front end.

pub mod config;
pub mod mock_llm;
pub mod pipeline;
pub mod server;

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use heart2mind_core::contest::{AuditLog, CaseStore, ContestService, MockScript};
use heart2mind_core::hrv;
use heart2mind_core::mstft::{save_checkpoint, Hyperparams, MstftModel};
use heart2mind_core::signal_store::{
    records_from_csv, records_from_rri, replay_schedule, CardiacRecord, DeviceKind, Profile, Sex, SignalStore,
};
use heart2mind_core::trainer::{aggregate_probability, run_cv, train, TrainConfig};
use heart2mind_core::windowing::{load_hrv_acc, synth_dataset, Label, ParticipantSeries, Protocol, MANIFEST_FILE};

use crate::config::ServiceConfig;
use crate::pipeline::{explain_window, score_windows, select_window, Pipeline, SCHEMA_VERSION};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "heart2mind", version, about = "RRI-based classification, explanation discrepancies, HRV metrics and contestation")]
pub struct Cli {
    /// Config file (TOML).
    #[arg(long, global = true, env = "HEART2MIND_CONFIG")]
    pub config: Option<PathBuf>,
    /// Overrides `data_dir` from the config.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Write the JSON result here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-size architecture and training schedule.
    Full,
    /// Small model and short schedule for a single CPU.
    Desk,
    /// Tiny model for smoke tests.
    Reduced,
}

impl Preset {
    pub fn configs(self) -> (Hyperparams, TrainConfig) {
        match self {
            Preset::Full => (Hyperparams::default(), TrainConfig::default()),
            Preset::Desk => (Hyperparams::desk(), TrainConfig::desk()),
            Preset::Reduced => (Hyperparams::reduced(), TrainConfig::desk()),
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// `synth` or a directory of per-participant RRI files.
    #[arg(long, default_value = "synth")]
    pub data: String,
    /// Participants per class for synthetic data.
    #[arg(long, default_value_t = 6)]
    pub n_per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Windows per participant per epoch.
    #[arg(long)]
    pub max_windows: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct SourceArgs {
    /// Closed session in the local store.
    #[arg(long, conflicts_with = "rri")]
    pub session: Option<String>,
    /// RRI file: one value (ms) per line, or a session CSV export.
    #[arg(long)]
    pub rri: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic cohort.
    Synth {
        #[arg(long, default_value_t = 6)]
        n_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write one RRI file per participant plus a manifest here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Also store each participant as a closed session.
        #[arg(long)]
        import: bool,
    },
    /// Train on the whole dataset and save a checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Cross-validated evaluation.
    Evaluate {
        #[arg(long, value_parser = parse_protocol)]
        protocol: Protocol,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Participant-level prediction.
    Predict {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Attention/gradient explanations and their discrepancy regions for one window.
    Explain {
        #[command(flatten)]
        source: SourceArgs,
        /// Window index; defaults to the most confident window.
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Baseline and regional HRV metrics.
    Hrv {
        #[command(flatten)]
        source: SourceArgs,
        /// JSON with `regions` (`start`/`end`, optional `explained_start`) or a list of `[start, end]` pairs.
        #[arg(long)]
        regions: Option<PathBuf>,
    },
    /// Diagnose a session and contest the prediction, or act on an existing case.
    Contest {
        #[arg(long, conflicts_with = "case", required_unless_present = "case")]
        session: Option<String>,
        #[arg(long)]
        case: Option<String>,
        #[arg(long)]
        window: Option<usize>,
        /// Recompute the diagnosis and open a new case.
        #[arg(long)]
        fresh: bool,
        /// Chat message to send; repeatable.
        #[arg(long = "message")]
        messages: Vec<String>,
        /// Ask the chat model for its final decision.
        #[arg(long)]
        finalize: bool,
        /// Clinician decision.
        #[arg(long = "override", requires_all = ["reason", "clinician"])]
        override_decision: Option<Label>,
        #[arg(long)]
        reason: Option<String>,
        #[arg(long)]
        clinician: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the REST service.
    Serve {
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Replay a recorded CSV as a live session.
    Replay {
        #[arg(long)]
        csv: PathBuf,
        /// Playback speed relative to real time; omitted means no waiting.
        #[arg(long)]
        speed: Option<f64>,
        /// Base URL of a running service; the local store is used otherwise.
        #[arg(long)]
        target: Option<String>,
        #[arg(long, default_value = "replay")]
        name: String,
        #[arg(long, default_value_t = 40)]
        age: u32,
        #[arg(long, value_parser = parse_sex, default_value = "undisclosed")]
        sex: Sex,
        #[arg(long)]
        label: Option<Label>,
    },
    /// Scripted chat-completions endpoint.
    MockLlm {
        #[arg(long, default_value = "127.0.0.1:8089")]
        listen: String,
        /// JSON script: `{"cases": {"<case id>": "retain|overturn|undetermined"}, "default": ...}`.
        #[arg(long)]
        script: Option<PathBuf>,
    },
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse()
}

fn parse_sex(s: &str) -> Result<Sex, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown sex `{s}`"))
}

/// Usage errors exit with 2, everything else with 1.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Domain(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Domain(e.into())
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(CliError::Domain(e)) => {
            eprintln!("error: {e:#}");
            EXIT_DOMAIN
        }
    }
}

fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> Result<(), CliError> {
    let mut v = serde_json::to_value(value)?;
    if let Some(obj) = v.as_object_mut() {
        obj.entry("schema_version").or_insert(json!(SCHEMA_VERSION));
    }
    let text = serde_json::to_string_pretty(&v)?;
    match out {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("cannot write {}", p.display()))?,
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}")?;
        }
    }
    Ok(())
}

fn load_config(cli: &Cli) -> Result<ServiceConfig, CliError> {
    let mut cfg = ServiceConfig::load(cli.config.as_deref())?;
    if let Some(d) = &cli.data_dir {
        cfg.data_dir = d.clone();
    }
    Ok(cfg)
}

fn open_store(cfg: &ServiceConfig) -> Result<SignalStore, CliError> {
    Ok(SignalStore::open_from_env(cfg.data_dir.join("sessions"))?)
}

fn dataset(args: &DataArgs, t: usize) -> Result<Vec<ParticipantSeries>, CliError> {
    if args.data == "synth" {
        return Ok(synth_dataset(args.n_per_class, args.seed));
    }
    let (series, report) = load_hrv_acc(Path::new(&args.data), t)?;
    for e in &report.excluded {
        log::warn!("excluded {}: {}", e.file, e.reason);
    }
    Ok(series)
}

fn train_setup(args: &DataArgs) -> (Hyperparams, TrainConfig) {
    let (hyper, mut tc) = args.preset.configs();
    tc.seed = args.seed;
    if let Some(e) = args.epochs {
        tc.epochs = e;
    }
    if let Some(m) = args.max_windows {
        tc.max_windows_per_participant = Some(m);
    }
    (hyper, tc)
}

fn read_rri_file(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    if text.lines().next().is_some_and(|l| l.contains("rri_ms")) {
        let records = records_from_csv(text.as_bytes())?;
        return Ok(records.iter().filter(|r| r.rri_plausible()).filter_map(|r| r.rri_ms).collect());
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Domain(anyhow::anyhow!("{} line {}: not a number", path.display(), i + 1)))
        })
        .collect()
}

fn source_rri(cfg: &ServiceConfig, source: &SourceArgs) -> Result<(Vec<f64>, Option<String>), CliError> {
    match (&source.session, &source.rri) {
        (Some(id), _) => Ok((open_store(cfg)?.rri_series(id)?, Some(id.clone()))),
        (None, Some(p)) => Ok((read_rri_file(p)?, None)),
        (None, None) => Err(usage("one of --session or --rri is required")),
    }
}

fn model_from(cfg: &ServiceConfig, checkpoint: &Option<PathBuf>) -> Result<MstftModel, CliError> {
    Ok(server::load_model(checkpoint.as_deref().unwrap_or(&cfg.checkpoint))?)
}

/// Regions from an explain/bundle JSON file or a plain pair list, in recording beat indices.
fn read_regions(path: &Path) -> Result<Vec<(usize, usize)>, CliError> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let v: Value = serde_json::from_str(&text).with_context(|| format!("{} is not JSON", path.display()))?;
    let pair = |x: &Value| -> Option<(usize, usize)> {
        match x {
            Value::Array(a) if a.len() == 2 => Some((a[0].as_u64()? as usize, a[1].as_u64()? as usize)),
            Value::Object(o) => Some((o.get("start")?.as_u64()? as usize, o.get("end")?.as_u64()? as usize)),
            _ => None,
        }
    };
    let (list, offset) = match &v {
        Value::Array(a) => (a.clone(), 0),
        Value::Object(o) => {
            let sae = o.get("sae").unwrap_or(&v);
            let list = sae.get("regions").and_then(Value::as_array).cloned();
            let offset = o
                .get("explained_start")
                .or_else(|| o.get("window_start"))
                .and_then(Value::as_u64)
                .unwrap_or(0) as usize;
            (list.with_context(|| format!("{}: no `regions` list", path.display()))?, offset)
        }
        _ => return Err(anyhow::anyhow!("{}: expected an object or a list", path.display()).into()),
    };
    list.iter()
        .map(|x| pair(x).map(|(s, e)| (s + offset, e + offset)))
        .collect::<Option<Vec<_>>>()
        .with_context(|| format!("{}: malformed region", path.display()))
        .map_err(Into::into)
}

fn contest_service(cfg: &ServiceConfig) -> Result<ContestService, CliError> {
    Ok(ContestService::new(
        CaseStore::open(&cfg.data_dir.join("cases"))?,
        Arc::new(AuditLog::open(&cfg.data_dir.join("audit.ndjson"))?),
        server::make_backend(cfg)?,
        cfg.llm.clone(),
    ))
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let out = cli.out.clone();
    let out = out.as_deref();
    match &cli.command {
        Command::Synth {
            n_per_class,
            seed,
            out_dir,
            import,
        } => {
            let data = synth_dataset(*n_per_class, *seed);
            let mut rows = Vec::new();
            let store = if *import { Some(open_store(&load_config(&cli)?)?) } else { None };
            if let Some(dir) = out_dir {
                fs::create_dir_all(dir)?;
            }
            let mut manifest = String::from("file,label\n");
            for p in &data {
                let mut row = json!({ "participant_id": p.participant_id, "label": p.label, "n_beats": p.rri.len() });
                if let Some(dir) = out_dir {
                    let file = format!("{}.txt", p.participant_id);
                    let body: String = p.rri.iter().map(|r| format!("{r:.3}\n")).collect();
                    fs::write(dir.join(&file), body)?;
                    manifest.push_str(&format!("{file},{}\n", p.label));
                    row["file"] = json!(file);
                }
                if let Some(store) = &store {
                    let profile = Profile {
                        name: p.participant_id.clone(),
                        age: 40,
                        sex: Sex::Undisclosed,
                    };
                    let (id, _) = store.import_session(&profile, DeviceKind::Synthetic, &records_from_rri(&p.rri), Some(p.label))?;
                    row["session_id"] = json!(id);
                }
                rows.push(row);
            }
            if let Some(dir) = out_dir {
                fs::write(dir.join(MANIFEST_FILE), manifest)?;
            }
            eprintln!("generated {} participants", data.len());
            emit(out, &json!({ "seed": seed, "participants": rows }))
        }
        Command::Train { data, checkpoint } => {
            let cfg = load_config(&cli)?;
            let (hyper, tc) = train_setup(data);
            let series = dataset(data, hyper.t)?;
            let mut model = MstftModel::new(hyper, data.seed)?;
            let outcome = train(&mut model, &series, &tc)?;
            let path = checkpoint.clone().unwrap_or(cfg.checkpoint);
            save_checkpoint(&model, &path)?;
            let checksum = heart2mind_core::mstft::model_checksum(&model);
            eprintln!(
                "trained {} epochs on {} windows; checkpoint {}",
                outcome.loss_history.len(),
                outcome.n_train_windows,
                path.display()
            );
            emit(out, &json!({ "checkpoint": path, "model_checksum": checksum, "training": outcome }))
        }
        Command::Evaluate { protocol, data } => {
            let (hyper, tc) = train_setup(data);
            let series = dataset(data, hyper.t)?;
            let cv = run_cv(&series, *protocol, &hyper, &tc)?;
            let a = &cv.report.aggregate;
            eprintln!(
                "accuracy {:.3} precision {:.3} recall {:.3} f1 {:.3} auc {}",
                a.accuracy,
                a.precision,
                a.recall,
                a.f1,
                a.auc.map_or("n/a".into(), |v| format!("{v:.3}"))
            );
            emit(out, &cv.report)
        }
        Command::Predict { source, checkpoint } => {
            let cfg = load_config(&cli)?;
            let (rri, session) = source_rri(&cfg, source)?;
            let model = model_from(&cfg, checkpoint)?;
            let scored = score_windows(&model, &rri, cfg.max_windows)?;
            let (probability, prediction) = aggregate_probability(&scored.probs)?;
            eprintln!("{prediction} (p={probability:.3}) over {} windows", scored.probs.len());
            emit(
                out,
                &json!({
                    "session_id": session,
                    "prediction": prediction,
                    "probability": probability,
                    "window_starts": scored.starts,
                    "window_probabilities": scored.probs,
                }),
            )
        }
        Command::Explain {
            source,
            window,
            checkpoint,
        } => {
            let cfg = load_config(&cli)?;
            let (rri, session) = source_rri(&cfg, source)?;
            let model = model_from(&cfg, checkpoint)?;
            let scored = score_windows(&model, &rri, cfg.max_windows)?;
            let index = select_window(&scored.probs, *window)?;
            let result = explain_window(&model, &rri, &scored, index, &cfg.sae)?;
            eprintln!(
                "window {index}: {} discrepancy region(s){}",
                result.regions.len(),
                if result.flagged { ", flagged for review" } else { "" }
            );
            let mut v = serde_json::to_value(&result)?;
            v["session_id"] = json!(session);
            v["window_index"] = json!(index);
            v["window_start"] = json!(scored.starts[index]);
            emit(out, &v)
        }
        Command::Hrv { source, regions } => {
            let cfg = load_config(&cli)?;
            let (rri, session) = source_rri(&cfg, source)?;
            let f_r = hrv::baseline_metrics(&rri)?;
            let regions = match regions {
                Some(p) => read_regions(p)?,
                None => Vec::new(),
            };
            let f_d = hrv::region_metrics(&rri, &regions)?;
            eprintln!("{} beats, {} region(s)", rri.len(), f_d.len());
            emit(out, &json!({ "session_id": session, "f_r": f_r, "f_d": f_d }))
        }
        Command::Contest {
            session,
            case,
            window,
            fresh,
            messages,
            finalize,
            override_decision,
            reason,
            clinician,
            checkpoint,
        } => {
            let cfg = load_config(&cli)?;
            let (svc, case_id, bundle) = match (session, case) {
                (Some(sid), _) => {
                    let model = model_from(&cfg, checkpoint)?;
                    let state = server::build_state(&cfg, model, server::make_backend(&cfg)?)?;
                    let bundle = state.pipeline.run(sid, *window, *fresh)?;
                    (state.contest, bundle.case_id.clone(), Some(bundle))
                }
                (None, Some(c)) => (Arc::new(contest_service(&cfg)?), c.clone(), None),
                (None, None) => return Err(usage("one of --session or --case is required")),
            };
            let mut exchanges = Vec::new();
            for m in messages {
                let (reply, metrics, _) = svc.message(&case_id, m)?;
                exchanges.push(json!({ "message": m, "reply": reply, "metrics": metrics }));
            }
            let mut outcome = None;
            if *finalize {
                let (o, _) = svc.finalize(&case_id)?;
                eprintln!(
                    "finalization: {:?}{}",
                    o.decision,
                    if o.escalated { " (escalated to clinician)" } else { "" }
                );
                outcome = Some(o);
            }
            if let Some(d) = override_decision {
                svc.override_case(
                    &case_id,
                    *d,
                    reason.as_deref().unwrap_or_default(),
                    clinician.as_deref().unwrap_or_default(),
                )?;
            }
            let case = svc.get(&case_id)?;
            eprintln!("case {case_id}: {:?}", case.status);
            emit(
                out,
                &json!({ "case": case, "bundle": bundle, "exchanges": exchanges, "finalization": outcome }),
            )
        }
        Command::Serve { listen, checkpoint } => {
            let mut cfg = load_config(&cli)?;
            if let Some(l) = listen {
                cfg.listen = l.clone();
            }
            if let Some(c) = checkpoint {
                cfg.checkpoint = c.clone();
            }
            cfg.validate()?;
            runtime()?.block_on(server::serve(cfg))?;
            Ok(())
        }
        Command::Replay {
            csv,
            speed,
            target,
            name,
            age,
            sex,
            label,
        } => {
            let file = fs::File::open(csv).with_context(|| format!("cannot open {}", csv.display()))?;
            let records = records_from_csv(std::io::BufReader::new(file))?;
            let schedule = replay_schedule(records, speed.unwrap_or(f64::INFINITY))?;
            let profile = Profile {
                name: name.clone(),
                age: *age,
                sex: *sex,
            };
            let summary = match target {
                Some(url) => replay_remote(url, &profile, *label, &schedule)?,
                None => {
                    let store = open_store(&load_config(&cli)?)?;
                    let id = store.open_session(&profile, DeviceKind::Synthetic)?;
                    if label.is_some() {
                        store.set_label(&id, *label)?;
                    }
                    for (delay, r) in &schedule {
                        if !delay.is_zero() {
                            std::thread::sleep(*delay);
                        }
                        store.ingest_record(&id, *r)?;
                    }
                    serde_json::to_value(store.close_session(&id)?)?
                }
            };
            eprintln!("replayed {} records", schedule.len());
            emit(out, &summary)
        }
        Command::MockLlm { listen, script } => {
            let script: MockScript = match script {
                Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?)
                    .with_context(|| format!("invalid script {}", p.display()))?,
                None => MockScript::default(),
            };
            runtime()?.block_on(mock_llm::serve(listen, script))?;
            Ok(())
        }
    }
}

fn replay_remote(
    base: &str,
    profile: &Profile,
    label: Option<Label>,
    schedule: &[(std::time::Duration, CardiacRecord)],
) -> Result<Value, CliError> {
    let base = base.trim_end_matches('/');
    let http = reqwest::blocking::Client::new();
    let check = |r: reqwest::blocking::Response| -> anyhow::Result<Value> {
        let status = r.status();
        let body: Value = r.json()?;
        if !status.is_success() {
            bail!("service returned {status}: {body}");
        }
        Ok(body)
    };
    let created = check(http.post(format!("{base}/sessions")).json(&json!({ "profile": profile, "label": label, "device_kind": "synthetic" })).send()?)?;
    let id = created["session_id"].as_str().context("no session_id in response")?.to_string();
    let mut batch = String::new();
    let mut pending = 0;
    let flush = |batch: &mut String| -> anyhow::Result<()> {
        if !batch.is_empty() {
            check(http.post(format!("{base}/sessions/{id}/records")).body(std::mem::take(batch)).send()?)?;
        }
        Ok(())
    };
    for (delay, r) in schedule {
        if !delay.is_zero() {
            flush(&mut batch)?;
            pending = 0;
            std::thread::sleep(*delay);
        }
        batch.push_str(&serde_json::to_string(r)?);
        batch.push('\n');
        pending += 1;
        if pending >= 256 {
            flush(&mut batch)?;
            pending = 0;
        }
    }
    flush(&mut batch)?;
    Ok(check(http.post(format!("{base}/sessions/{id}/close")).send()?)?)
}

/// Hook for wiring a loaded model straight into a [`Pipeline`]; used by tests.
pub fn pipeline_for(cfg: &ServiceConfig, model: MstftModel) -> anyhow::Result<Arc<Pipeline>> {
    Ok(server::build_state(cfg, model, server::make_backend(cfg)?)?.pipeline)
}
