//! `hwtraj` command-line driver.
//!
//! Exit codes: 0 success, 1 a stage failed, 2 usage or configuration
//! error. Failures are written to stderr as one JSON object.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hwtraj::dataset::{
    detections_file_name, read_detections, read_recording_meta, validate, write_detections, write_recording,
    write_recording_meta, DatasetIssue, RecordingFileSet,
};
use hwtraj::fmt::fmt_f64;
use hwtraj::pipeline::{
    cut_ins_csv, dataset_stats, episodes_csv, extract_all, run_parallel, track_recording, write_extract_outputs,
    write_stats_outputs, PipelineConfig, StageError,
};
use hwtraj::surround::compute_surround;
use hwtraj::synth::{corrupt, generate_truth, ScenarioScript, ScriptError, Truth};
use serde::Serialize;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "hwtraj", version, about = "Highway trajectory pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML pipeline configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Worker threads, 0 = one per CPU.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Replaces the seed of a synthetic scenario.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Detections directory to recording tables.
    Track,
    /// Recordings directory to episodes, fits, cut-ins and statistics.
    Extract,
    /// Scenario script to a detection stream and truth files.
    Synth,
    /// Checks a recordings directory.
    Validate,
    /// Recordings directory to statistics only.
    Stats,
}

/// A failed command, reported as JSON.
#[derive(Debug, Serialize)]
struct Failure {
    error: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    details: Option<serde_json::Value>,
    #[serde(skip)]
    code: u8,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { error: "Usage", message: message.into(), details: None, code: 2 }
    }

    fn failed(error: &'static str, message: impl Into<String>) -> Self {
        Failure { error, message: message.into(), details: None, code: 1 }
    }

    fn with(mut self, details: impl Serialize) -> Self {
        self.details = serde_json::to_value(details).ok();
        self
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::failed("Io", format!("{}: {e}", path.display()))
}

fn dataset_failure(issue: DatasetIssue) -> Failure {
    Failure::failed("Dataset", issue.to_string()).with(&issue)
}

fn stage_failures(failures: &[&StageError]) -> Failure {
    let names: Vec<&str> = failures.iter().map(|f| f.source_path.as_str()).collect();
    Failure::failed("StageFailure", format!("{} recording(s) failed: {}", failures.len(), names.join(", "))).with(failures)
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            PipelineConfig::from_toml_str(&text)
                .map_err(|e| Failure { error: "Config", ..Failure::usage(format!("{}: {e}", path.display())) })?
        }
        None => PipelineConfig::default(),
    };
    if cli.input.is_some() {
        cfg.input.clone_from(&cli.input);
    }
    if cli.output.is_some() {
        cfg.output.clone_from(&cli.output);
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if cli.seed_override.is_some() {
        cfg.seed_override = cli.seed_override;
    }
    cfg.validate().map_err(|e| Failure { error: "Config", ..Failure::usage(e) })?;
    Ok(cfg)
}

fn required(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf, Failure> {
    path.clone().ok_or_else(|| Failure::usage(format!("--{flag} is required (or set `{flag}` in the config)")))
}

fn input_dir(cfg: &PipelineConfig) -> Result<PathBuf, Failure> {
    let dir = required(&cfg.input, "input")?;
    if !dir.is_dir() {
        return Err(Failure::failed("MissingInput", format!("{} is not a directory", dir.display())));
    }
    Ok(dir)
}

fn recordings(dir: &Path) -> Result<Vec<RecordingFileSet>, Failure> {
    let sets = RecordingFileSet::discover(dir).map_err(|e| io_failure(dir, e))?;
    if sets.is_empty() {
        return Err(Failure::failed("EmptyInput", format!("no *_recordingMeta.csv in {}", dir.display())));
    }
    Ok(sets)
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("json"));
}

fn cmd_track(cfg: &PipelineConfig) -> Result<(), Failure> {
    let dir = input_dir(cfg)?;
    let out = required(&cfg.output, "output")?;
    let mut prefixes: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| io_failure(&dir, e))?
        .filter_map(|e| e.ok()?.file_name().to_str()?.strip_suffix("_detections.csv").map(str::to_string))
        .collect();
    prefixes.sort();
    if prefixes.is_empty() {
        return Err(Failure::failed("EmptyInput", format!("no *_detections.csv in {}", dir.display())));
    }
    let results = run_parallel(&prefixes, cfg.jobs, |p| {
        let meta_path = dir.join(format!("{p}_recordingMeta.csv"));
        let det_path = dir.join(format!("{p}_detections.csv"));
        let meta = read_recording_meta(&meta_path).map_err(|i| StageError::from_issue("read", &meta_path, i))?;
        let frames =
            read_detections(&det_path, meta.frame_count() as usize).map_err(|i| StageError::from_issue("read", &det_path, i))?;
        let (tracks, surround) =
            track_recording(&meta, &frames, cfg).map_err(|m| StageError::new("track", &det_path, m))?;
        let files = write_recording(&out, &meta, &tracks, &surround)
            .map_err(|e| StageError::new("write", &out, e.to_string()))?;
        Ok::<_, StageError>(json!({ "recordingId": meta.recording_id, "tracks": tracks.len(), "files": files }))
    });
    let failures: Vec<&StageError> = results.iter().filter_map(|r| r.as_ref().err()).collect();
    let done: Vec<&serde_json::Value> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    print_json(&json!({ "recordings": done }));
    if failures.is_empty() {
        Ok(())
    } else {
        Err(stage_failures(&failures))
    }
}

fn cmd_extract(cfg: &PipelineConfig, stats_only: bool) -> Result<(), Failure> {
    let dir = input_dir(cfg)?;
    let out = required(&cfg.output, "output")?;
    let results = extract_all(&recordings(&dir)?, cfg);
    let stats = if stats_only {
        let ok: Vec<_> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
        let stats = dataset_stats(&ok, &cfg.stats);
        write_stats_outputs(&out, &stats).map(|_| stats)
    } else {
        write_extract_outputs(&out, &results, &cfg.stats)
    }
    .map_err(|e| io_failure(&out, e))?;
    print_json(&stats.maneuvers);
    let failures: Vec<&StageError> = results.iter().filter_map(|r| r.as_ref().err()).collect();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(stage_failures(&failures))
    }
}

fn script_failure(e: ScriptError) -> Failure {
    Failure::failed("ScriptError", e.to_string()).with(&e)
}

const TRUTH_LANE_CHANGE_HEADER: &str = "recordingId,trackId,t0,duration,side,dStart,dEnd,vStart,vEnd,marking";

fn truth_lane_changes_csv(truth: &Truth) -> String {
    let mut out = format!("{TRUTH_LANE_CHANGE_HEADER}\n");
    for lc in &truth.lane_changes {
        let p = &lc.params;
        let nums: Vec<String> = [p.d_start, p.d_end, p.v_start, p.v_end, lc.marking].iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            truth.meta.recording_id,
            lc.episode.track_id,
            fmt_f64(lc.t0),
            fmt_f64(p.duration),
            p.side.as_str(),
            nums.join(",")
        ));
    }
    out
}

fn cmd_synth(cfg: &PipelineConfig) -> Result<(), Failure> {
    let script_path = required(&cfg.input, "input")?;
    let out = required(&cfg.output, "output")?;
    let mut script = ScenarioScript::from_path(&script_path).map_err(script_failure)?;
    if let Some(seed) = cfg.seed_override {
        script.seed = seed;
    }
    let truth = generate_truth(&script).map_err(script_failure)?;
    let detections = corrupt(&truth, &script.noise, script.seed);
    let id = truth.meta.recording_id;

    let det_dir = out.join("detections");
    let truth_dir = out.join("truth");
    let write = || -> std::io::Result<()> {
        fs::create_dir_all(&det_dir)?;
        write_detections(&det_dir.join(detections_file_name(id)), &detections)?;
        write_recording_meta(&det_dir.join(format!("{id:02}_recordingMeta.csv")), &truth.meta)?;
        write_recording(&truth_dir, &truth.meta, &truth.tracks, &compute_surround(&truth.tracks))?;
        let episodes = truth.episodes();
        fs::write(truth_dir.join(format!("{id:02}_truthEpisodes.csv")), episodes_csv(episodes.iter().map(|e| (id, e))))?;
        fs::write(truth_dir.join(format!("{id:02}_truthLaneChanges.csv")), truth_lane_changes_csv(&truth))?;
        fs::write(truth_dir.join(format!("{id:02}_truthCutIns.csv")), cut_ins_csv(truth.cut_ins.iter().map(|c| (id, c))))
    };
    write().map_err(|e| io_failure(&out, e))?;
    print_json(&json!({
        "recordingId": id,
        "seed": script.seed,
        "vehicles": truth.tracks.len(),
        "frames": detections.len(),
        "laneChanges": truth.lane_changes.len(),
        "cutIns": truth.cut_ins.len(),
    }));
    Ok(())
}

#[derive(Serialize)]
struct RecordingReport {
    recording: PathBuf,
    issues: Vec<DatasetIssue>,
}

fn cmd_validate(cfg: &PipelineConfig) -> Result<(), Failure> {
    let dir = input_dir(cfg)?;
    let reports: Vec<RecordingReport> = run_parallel(&recordings(&dir)?, cfg.jobs, |p| RecordingReport {
        recording: p.recording_meta_path.clone(),
        issues: validate(p).issues,
    });
    let total: usize = reports.iter().map(|r| r.issues.len()).sum();
    print_json(&json!({ "issues": total, "recordings": reports }));
    if total == 0 {
        return Ok(());
    }
    let first = reports.iter().flat_map(|r| &r.issues).next().expect("at least one issue");
    if total == 1 {
        return Err(dataset_failure(first.clone()));
    }
    Err(Failure::failed("Dataset", format!("{total} issues, first: {first}")).with(first))
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    match cli.command {
        Command::Track => cmd_track(&cfg),
        Command::Extract => cmd_extract(&cfg, false),
        Command::Stats => cmd_extract(&cfg, true),
        Command::Synth => cmd_synth(&cfg),
        Command::Validate => cmd_validate(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let f = Failure::usage(e.to_string().trim().to_string());
            eprintln!("{}", serde_json::to_string(&f).expect("json"));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", serde_json::to_string(&f).expect("json"));
            ExitCode::from(f.code)
        }
    }
}
