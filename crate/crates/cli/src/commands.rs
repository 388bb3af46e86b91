use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use odorlab::analysis::{
    self, evaluate, extract_fingerprint, joint_pdf, read_trials, summarize, write_steps_csv, write_trials_csv,
    NetPolicy, OraclePolicy, PdfAxes, RandomPolicy, TrialRecord,
};
use odorlab::config::RunConfig;
use odorlab::fieldstore::{self, FieldSeries};
use odorlab::flowsim::run_bank;
use odorlab::nnet::checkpoint::Checkpoint;
use odorlab::rrsac::persist::{actor_from_checkpoint, from_checkpoint, to_checkpoint};
use odorlab::rrsac::{train, Agent, EpisodeLog, TrainObserver, TrainState};
use odorlab::sector;
use odorlab::{Error, Result};
use serde_json::{json, Value};

use crate::{Cli, Command, PolicyKind};

const HASH_PREFIX: &str = "# config_hash: ";
const CHECKPOINT_EXT: &str = "odck";

pub fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<Value> {
    match &cli.command {
        Command::Simulate => simulate(cfg, cli.json),
        Command::Train { fresh } => train_cmd(cfg, *fresh, cli.json),
        Command::Eval { checkpoint, policy } => eval_cmd(cfg, checkpoint.as_deref(), *policy, cli.jobs),
        Command::Analyze { trials, steps } => analyze(cfg, trials.as_deref(), steps.as_deref()),
        Command::SectorFit { table, gamma, normalize } => sector_fit(cfg, table, gamma, *normalize),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path, what: &str) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Usage(format!("cannot open {what} {}: {e}", path.display())))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, v).map_err(std::io::Error::from)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn field_path(cfg: &RunConfig, k: usize) -> PathBuf {
    cfg.paths.fields.join(format!("source_{k}.odrf"))
}

// ------------------------------------------------------------------ simulate

fn simulate(cfg: &RunConfig, quiet: bool) -> Result<Value> {
    let run = run_bank(&cfg.sim)?;
    let d = &run.diagnostics;
    let rate = cfg.sim.emission_rate();
    let mut files = Vec::new();
    for (k, series) in run.series.iter().enumerate() {
        let path = field_path(cfg, k);
        let mut w = create(&path)?;
        fieldstore::save(series, &mut w)?;
        w.flush()?;
        let worst = |recs: &[odorlab::flowsim::BalanceRecord]| {
            recs.iter().map(|r| (r.dmdt - r.expected).abs() / rate).fold(0.0, f64::max)
        };
        // before breakthrough nothing has left the domain yet
        let early: Vec<_> = d.early_balance[k].iter().copied().filter(|r| r.outflow == 0.0).collect();
        files.push(json!({
            "path": path.display().to_string(),
            "source": series.source_position(),
            "field_hash": series.config_hash(),
            "balance_max_rel_error": worst(&d.balance[k]),
            "balance_max_rel_error_before_breakthrough": worst(&early),
        }));
    }
    let summary = json!({
        "config_hash": cfg.hash(),
        "strouhal": d.strouhal(),
        "max_divergence": d.max_divergence,
        "min_c": d.min_c,
        "max_cfl": d.max_cfl,
        "fields": files,
    });
    write_json(&cfg.paths.fields.join("summary.json"), &summary)?;
    if !quiet {
        println!(
            "St = {}  max divergence = {:.2e}  fields in {}",
            d.strouhal().map_or("undefined".into(), |s| format!("{s:.4}")),
            d.max_divergence,
            cfg.paths.fields.display()
        );
        for f in summary["fields"].as_array().into_iter().flatten() {
            println!(
                "  {}  balance error {:.2e} (before breakthrough {:.2e})",
                f["path"].as_str().unwrap_or(""),
                f["balance_max_rel_error"].as_f64().unwrap_or(f64::NAN),
                f["balance_max_rel_error_before_breakthrough"].as_f64().unwrap_or(f64::NAN)
            );
        }
    }
    Ok(summary)
}

/// Loads one field file per configured source position.
pub fn load_bank(cfg: &RunConfig) -> Result<Vec<FieldSeries>> {
    let mut bank = Vec::new();
    for (k, pos) in cfg.env.source_positions.iter().enumerate() {
        let path = field_path(cfg, k);
        let series = fieldstore::load(&mut open(&path, "field file")?)?;
        let s = series.source_position();
        if (s[0] - pos[0]).abs() > 1e-9 || (s[1] - pos[1]).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "{} holds source {s:?}, config expects {pos:?}",
                path.display()
            )));
        }
        if let Some(first) = bank.first().map(FieldSeries::grid_hash) {
            if series.grid_hash() != first {
                return Err(Error::Config(format!("{} is on a different grid than source_0", path.display())));
            }
        }
        bank.push(series);
    }
    Ok(bank)
}

// --------------------------------------------------------------------- train

fn train_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.out.join("train")
}

fn checkpoint_name(episodes: u64) -> String {
    format!("ckpt_{episodes:07}.{CHECKPOINT_EXT}")
}

/// Checkpoint with the highest episode counter in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let n = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("ckpt_"))
            .and_then(|n| n.strip_suffix(&format!(".{CHECKPOINT_EXT}")))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(n) = n {
            if best.as_ref().map_or(true, |(b, _)| n > *b) {
                best = Some((n, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(&mut open(path, "checkpoint")?)
}

struct FileObserver {
    log: BufWriter<File>,
    dir: PathBuf,
    cfg: RunConfig,
    grid_hash: String,
    quiet: bool,
}

impl TrainObserver for FileObserver {
    fn episode(&mut self, log: &EpisodeLog) -> Result<()> {
        writeln!(self.log, "{}", log.csv_row())?;
        Ok(())
    }

    fn checkpoint(&mut self, _agent: &Agent, st: &TrainState) -> Result<()> {
        self.log.flush()?;
        let ck = to_checkpoint(st, &self.cfg.train, &self.grid_hash);
        let dir = self.dir.join("checkpoints");
        fs::create_dir_all(&dir)?;
        let path = dir.join(checkpoint_name(st.episodes));
        let tmp = path.with_extension("tmp");
        let mut w = create(&tmp)?;
        ck.save(&mut w)?;
        w.flush()?;
        drop(w);
        fs::rename(&tmp, &path)?;
        // older checkpoints are superseded
        for entry in fs::read_dir(&dir)? {
            let p = entry?.path();
            if p != path && p.extension().and_then(|e| e.to_str()) == Some(CHECKPOINT_EXT) {
                fs::remove_file(p)?;
            }
        }
        if !self.quiet {
            eprintln!("episode {}  env steps {}  updates {}  xi {:.4}", st.episodes, st.env_steps, st.updates, st.xi());
        }
        Ok(())
    }
}

/// Keeps the first `episodes` rows of the log and rewrites the header. Rows
/// must be complete and consecutive; a torn last line from a killed run is
/// dropped.
fn truncate_log(path: &Path, episodes: u64, hash: &str) -> Result<BufWriter<File>> {
    let width = EpisodeLog::CSV_HEADER.split(',').count();
    let mut rows = Vec::new();
    if path.exists() {
        for line in open(path, "training log")?.lines() {
            let line = line?;
            if rows.len() as u64 == episodes {
                break;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() == width && cols[0].parse::<u64>().ok() == Some(rows.len() as u64) {
                rows.push(line);
            }
        }
    }
    if (rows.len() as u64) < episodes {
        return Err(Error::Usage(format!(
            "training log {} has {} rows but the checkpoint is at episode {episodes}",
            path.display(),
            rows.len()
        )));
    }
    let mut w = create(path)?;
    writeln!(w, "{HASH_PREFIX}{hash}")?;
    writeln!(w, "{}", EpisodeLog::CSV_HEADER)?;
    for r in rows {
        writeln!(w, "{r}")?;
    }
    Ok(w)
}

fn train_cmd(cfg: &RunConfig, fresh: bool, quiet: bool) -> Result<Value> {
    let bank = load_bank(cfg)?;
    let grid_hash = bank[0].grid_hash();
    let agent = Agent::standard();
    let dir = train_dir(cfg);
    let ck_dir = dir.join("checkpoints");
    let log_path = dir.join("log.csv");
    if fresh {
        if ck_dir.exists() {
            fs::remove_dir_all(&ck_dir)?;
        }
        if log_path.exists() {
            fs::remove_file(&log_path)?;
        }
    }

    let (mut state, resumed_from) = match latest_checkpoint(&ck_dir)? {
        Some(path) => {
            let r = from_checkpoint(&read_checkpoint(&path)?, &agent)?;
            if r.grid_hash != grid_hash {
                return Err(Error::Config(format!("{} was trained on a different field grid", path.display())));
            }
            if r.config != cfg.train {
                return Err(Error::Config(format!(
                    "{} was written with a different [train] section; rerun with --fresh",
                    path.display()
                )));
            }
            (r.state, Some(path))
        }
        None => (TrainState::new(&agent, &cfg.train), None),
    };
    let start_episode = state.episodes;
    let log = truncate_log(&log_path, start_episode, &cfg.hash())?;
    let mut obs = FileObserver { log, dir: dir.clone(), cfg: cfg.clone(), grid_hash, quiet };
    train(&agent, &mut state, &cfg.train, &cfg.env, &bank, &mut obs)?;
    obs.log.flush()?;

    let latest = latest_checkpoint(&ck_dir)?;
    let summary = json!({
        "config_hash": cfg.hash(),
        "resumed_from": resumed_from.map(|p| p.display().to_string()),
        "start_episode": start_episode,
        "episodes": state.episodes,
        "env_steps": state.env_steps,
        "updates": state.updates,
        "xi": state.xi(),
        "log": log_path.display().to_string(),
        "checkpoint": latest.map(|p| p.display().to_string()),
    });
    write_json(&dir.join("summary.json"), &summary)?;
    if !quiet {
        println!("trained {} episodes ({} updates), log in {}", state.episodes, state.updates, log_path.display());
    }
    Ok(summary)
}

// ---------------------------------------------------------------------- eval

fn eval_cmd(cfg: &RunConfig, checkpoint: Option<&Path>, kind: PolicyKind, jobs: usize) -> Result<Value> {
    let bank = load_bank(cfg)?;
    let (records, ck_path) = match kind {
        PolicyKind::Net => {
            let path = match checkpoint {
                Some(p) => p.to_path_buf(),
                None => latest_checkpoint(&train_dir(cfg).join("checkpoints"))?
                    .ok_or_else(|| Error::Usage("no checkpoint found; train first or pass --checkpoint".into()))?,
            };
            let agent = Agent::standard();
            let params = actor_from_checkpoint(&read_checkpoint(&path)?, &agent, Some(&bank[0].grid_hash()))?;
            let policy = NetPolicy::new(&agent.actor, &params)?;
            (evaluate(&policy, &cfg.env, &bank, &cfg.eval, jobs)?, Some(path))
        }
        PolicyKind::Oracle => (evaluate(&OraclePolicy, &cfg.env, &bank, &cfg.eval, jobs)?, None),
        PolicyKind::Random => (evaluate(&RandomPolicy, &cfg.env, &bank, &cfg.eval, jobs)?, None),
    };
    let hash = cfg.hash();
    let dir = cfg.paths.out.join("eval");
    let mut w = create(&dir.join("trials.csv"))?;
    write_trials_csv(&records, Some(&hash), &mut w)?;
    w.flush()?;
    let mut w = create(&dir.join("steps.csv"))?;
    write_steps_csv(&records, Some(&hash), &mut w)?;
    w.flush()?;
    let s = summarize(&records);
    let summary = json!({
        "config_hash": hash,
        "policy": format!("{kind:?}").to_lowercase(),
        "checkpoint": ck_path.map(|p| p.display().to_string()),
        "n_trials": s.n_trials,
        "success_rate": s.success_rate,
        "mean_u_eff": s.mean_u_eff,
    });
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

// ------------------------------------------------------------------- analyze

fn with_hash(csv: String, hash: &str) -> String {
    format!("{HASH_PREFIX}{hash}\n{csv}")
}

fn analyze(cfg: &RunConfig, trials: Option<&Path>, steps: Option<&Path>) -> Result<Value> {
    let eval_dir = cfg.paths.out.join("eval");
    let trials = trials.map(Path::to_path_buf).unwrap_or_else(|| eval_dir.join("trials.csv"));
    let steps = steps.map(Path::to_path_buf).unwrap_or_else(|| eval_dir.join("steps.csv"));
    let records: Vec<TrialRecord> = read_trials(open(&trials, "trial table")?, Some(open(&steps, "step table")?))?;
    if records.is_empty() {
        return Err(Error::Usage(format!("{} holds no trials", trials.display())));
    }
    let hash = cfg.hash();
    let dir = cfg.paths.out.join("analysis");
    let a = &cfg.analysis;
    for (name, axes, spec) in [
        ("pdf_turn_vs_log_c.csv", PdfAxes::TurnVsLogC, &a.turn_pdf),
        ("pdf_agent_vs_flow_y.csv", PdfAxes::AgentVsFlowY, &a.velocity_pdf),
    ] {
        let pdf = joint_pdf(&records, axes, spec)?;
        let mut w = create(&dir.join(name))?;
        w.write_all(with_hash(pdf.to_csv(), &hash).as_bytes())?;
        w.flush()?;
    }
    let fingerprint = match extract_fingerprint(&records, &a.fingerprint) {
        Ok(f) => json!({ "defined": true, "fingerprint": f }),
        Err(Error::FingerprintUndefined { reason, histogram }) => {
            json!({ "defined": false, "reason": reason, "histogram": histogram })
        }
        Err(e) => return Err(e),
    };
    write_json(&dir.join("fingerprint.json"), &json!({ "config_hash": hash, "result": fingerprint }))?;
    let s = analysis::summarize(&records);
    let summary = json!({
        "config_hash": hash,
        "trials": trials.display().to_string(),
        "n_trials": s.n_trials,
        "success_rate": s.success_rate,
        "mean_u_eff": s.mean_u_eff,
        "fingerprint": fingerprint,
    });
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------- sector-fit

/// Reads `(T_M f, U_eff)` rows; `#` lines and a non-numeric header are skipped.
fn read_table(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut pts = Vec::new();
    for (i, line) in open(path, "table")?.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed = (cols.len() >= 2).then(|| (cols[0].parse::<f64>(), cols[1].parse::<f64>()));
        match parsed {
            Some((Ok(x), Ok(y))) => pts.push((x, y)),
            _ if pts.is_empty() && i == 0 => continue,
            _ => {
                return Err(Error::Format { offset: i + 1, message: format!("expected two numeric columns, got `{line}`") })
            }
        }
    }
    Ok(pts)
}

fn sector_fit(cfg: &RunConfig, table: &Path, gamma: &[f64], normalize: bool) -> Result<Value> {
    let mut pts = read_table(table)?;
    if normalize {
        let max = pts.iter().map(|p| p.1).fold(0.0, f64::max);
        if max > 0.0 {
            pts.iter_mut().for_each(|p| p.1 /= max);
        }
    }
    let fit = sector::fit(&pts, gamma)?;
    let summary = json!({
        "config_hash": cfg.hash(),
        "table": table.display().to_string(),
        "normalized": normalize,
        "N": fit.n,
        "gamma": fit.gamma,
        "residual": fit.residual,
        "predictions": fit.predictions.iter().map(|&(x, y, p)| json!({ "T_M_f": x, "measured": y, "predicted": p })).collect::<Vec<_>>(),
    });
    write_json(&cfg.paths.out.join("sector").join("fit.json"), &summary)?;
    Ok(summary)
}
