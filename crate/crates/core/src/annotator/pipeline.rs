//! Dataset construction over a manifest: a worker pool annotates samples,
//! one collector writes the output files, and an append-only journal makes
//! the run resumable without ever exceeding two attempts per sample.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use crossbeam_channel::unbounded;
use serde::{Deserialize, Serialize};

use super::verify::{verify, Disposition, VerificationReport, VerifyRules};
use super::{annotate_sample, prepare_image, AnnotateConfig, AnnotateError, Sample};
use crate::expert::ExpertSet;
use crate::mllm_client::{BackendProvider, ClientError};
use crate::trajectory::{read_trajectories, serialize_trajectory, Trajectory};
use crate::vistools::ToolId;

pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const ACCEPTED_FILE: &str = "accepted.jsonl";
pub const REVIEW_FILE: &str = "review.jsonl";
pub const BADCASE_FILE: &str = "badcase.jsonl";
pub const REPORTS_FILE: &str = "reports.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const MAX_ATTEMPTS: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JournalEvent {
    Started,
    NeedsReannotation,
    Accepted,
    NeedsManualReview,
    BadCase,
}

impl JournalEvent {
    fn is_final(self) -> bool {
        matches!(
            self,
            JournalEvent::Accepted | JournalEvent::NeedsManualReview | JournalEvent::BadCase
        )
    }

    fn from_disposition(d: Disposition) -> Self {
        match d {
            Disposition::Accepted => JournalEvent::Accepted,
            Disposition::NeedsManualReview => JournalEvent::NeedsManualReview,
            Disposition::BadCase => JournalEvent::BadCase,
            Disposition::NeedsReannotation => JournalEvent::NeedsReannotation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JournalEntry {
    pub sample_id: String,
    pub attempt: u32,
    pub disposition: JournalEvent,
}

pub fn read_journal(path: &Path) -> Result<Vec<JournalEntry>, AnnotateError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(AnnotateError::io(path, e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let err = |message: String| AnnotateError::Journal { line: i + 1, message };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| err(e.to_string()))?);
    }
    Ok(out)
}

/// Append-only JSONL sink; each record is a single `write_all`.
struct LineSink {
    path: PathBuf,
    file: Mutex<File>,
}

impl LineSink {
    fn open(path: PathBuf) -> Result<Self, AnnotateError> {
        truncate_partial_line(&path)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| AnnotateError::io(&path, e))?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    fn append(&self, line: &str) -> Result<(), AnnotateError> {
        let mut buf = String::with_capacity(line.len() + 1);
        buf.push_str(line);
        buf.push('\n');
        let mut file = self.file.lock().expect("sink lock");
        file.write_all(buf.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|e| AnnotateError::io(&self.path, e))
    }

    fn record(&self, entry: &JournalEntry) -> Result<(), AnnotateError> {
        self.append(&serde_json::to_string(entry).expect("journal entry serializes"))
    }
}

/// Drops a trailing line left incomplete by an interrupted write.
fn truncate_partial_line(path: &Path) -> Result<(), AnnotateError> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(AnnotateError::io(path, e)),
    };
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    log::warn!("{}: dropping incomplete trailing line", path.display());
    OpenOptions::new()
        .write(true)
        .open(path)
        .and_then(|f| f.set_len(keep as u64))
        .map_err(|e| AnnotateError::io(path, e))
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub annotate: AnnotateConfig,
    pub rules: VerifyRules,
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            annotate: AnnotateConfig::default(),
            rules: VerifyRules::default(),
            workers: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub total: usize,
    pub accepted: usize,
    pub review: usize,
    pub badcase: usize,
    /// Samples that were given a second attempt.
    pub reannotated: usize,
    /// Tool calls per tool across the accepted and review sets.
    pub tool_usage: BTreeMap<String, usize>,
    /// Mean reasoning turns across the accepted and review sets.
    pub mean_turns: f64,
}

struct Outcome {
    trajectory: Trajectory,
    report: Option<VerificationReport>,
    disposition: Disposition,
    attempt: u32,
}

fn client_error_is_fatal(e: &ClientError) -> bool {
    matches!(
        e,
        ClientError::Auth(_) | ClientError::Config(_) | ClientError::InvalidHistory(_)
    )
}

struct Worker<'a> {
    provider: &'a dyn BackendProvider,
    experts: &'a ExpertSet,
    cfg: &'a PipelineConfig,
    journal: &'a LineSink,
}

impl Worker<'_> {
    fn process(&self, sample: &Sample, first_attempt: u32) -> Result<Outcome, AnnotateError> {
        if first_attempt > MAX_ATTEMPTS {
            log::warn!("{}: attempts exhausted in an earlier run", sample.id);
            return Ok(exhausted(sample, MAX_ATTEMPTS));
        }
        let image = match prepare_image(&sample.image) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("{}: {e}", sample.id);
                return Ok(exhausted(sample, first_attempt));
            }
        };
        let mut attempt = first_attempt;
        loop {
            self.journal.record(&JournalEntry {
                sample_id: sample.id.clone(),
                attempt,
                disposition: JournalEvent::Started,
            })?;
            let backend = self
                .provider
                .backend(&sample.id, attempt)
                .map_err(|source| AnnotateError::Client {
                    source,
                    partial: Box::new(Trajectory::new(sample.id.clone(), sample.label)),
                })?;
            let result = annotate_sample(
                sample,
                image.clone(),
                backend.as_ref(),
                self.experts,
                &self.cfg.annotate,
                attempt,
            );
            let (trajectory, mut report) = match result {
                Ok(traj) => {
                    let r = verify(&traj, sample, &self.cfg.rules);
                    (traj, r)
                }
                Err(AnnotateError::Client { source, partial }) if !client_error_is_fatal(&source) => {
                    log::warn!("{}: attempt {attempt}: {source}", sample.id);
                    let mut r = verify(&partial, sample, &self.cfg.rules);
                    r.violations.push(format!("client error: {source}"));
                    r.disposition = Disposition::NeedsReannotation;
                    (*partial, r)
                }
                Err(e) => return Err(e),
            };
            if attempt >= MAX_ATTEMPTS {
                report = report.on_final_attempt();
            }
            if report.disposition != Disposition::NeedsReannotation {
                return Ok(Outcome {
                    trajectory,
                    disposition: report.disposition,
                    report: Some(report),
                    attempt,
                });
            }
            self.journal.record(&JournalEntry {
                sample_id: sample.id.clone(),
                attempt,
                disposition: JournalEvent::NeedsReannotation,
            })?;
            attempt += 1;
        }
    }
}

fn exhausted(sample: &Sample, attempt: u32) -> Outcome {
    let mut t = Trajectory::new(sample.id.clone(), sample.label);
    t.hint = Some(sample.hint());
    Outcome {
        trajectory: t,
        report: None,
        disposition: Disposition::BadCase,
        attempt,
    }
}

#[derive(Default)]
struct SampleState {
    started: u32,
    final_event: Option<JournalEvent>,
}

fn output_ids(path: &Path) -> Result<HashSet<String>, AnnotateError> {
    Ok(read_output(path)?.into_iter().map(|t| t.sample_id).collect())
}

fn read_output(path: &Path) -> Result<Vec<Trajectory>, AnnotateError> {
    match File::open(path) {
        Ok(f) => read_trajectories(BufReader::new(f)).map_err(|e| AnnotateError::io(path, e)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(AnnotateError::io(path, e)),
    }
}

/// Annotates every sample not already finished according to the journal in
/// `out_dir`, then rewrites `stats.json` from the output files.
///
/// A fatal error (authentication, configuration, expert or I/O failure)
/// stops the pool; outcomes already collected stay on disk and the journal
/// lets a later run pick up where this one stopped.
pub fn run_pipeline(
    samples: &[Sample],
    provider: &dyn BackendProvider,
    experts: &ExpertSet,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<Stats, AnnotateError> {
    if !experts.is_complete() {
        return Err(AnnotateError::IncompleteExperts);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| AnnotateError::io(out_dir, e))?;
    if let Some(dir) = &cfg.annotate.render_dir {
        std::fs::create_dir_all(dir).map_err(|e| AnnotateError::io(dir, e))?;
    }

    let journal_path = out_dir.join(JOURNAL_FILE);
    truncate_partial_line(&journal_path)?;
    let mut state: HashMap<String, SampleState> = HashMap::new();
    for entry in read_journal(&journal_path)? {
        let s = state.entry(entry.sample_id).or_default();
        if entry.disposition == JournalEvent::Started {
            s.started = s.started.max(entry.attempt);
        } else if entry.disposition.is_final() {
            s.final_event = Some(entry.disposition);
        }
    }

    let journal = LineSink::open(journal_path)?;
    let sinks = [
        (Disposition::Accepted, ACCEPTED_FILE),
        (Disposition::NeedsManualReview, REVIEW_FILE),
        (Disposition::BadCase, BADCASE_FILE),
    ]
    .into_iter()
    .map(|(d, name)| LineSink::open(out_dir.join(name)).map(|s| (d, s)))
    .collect::<Result<HashMap<_, _>, _>>()?;
    let reports = LineSink::open(out_dir.join(REPORTS_FILE))?;

    // an outcome written before its journal line counts as finished
    for (&d, sink) in &sinks {
        for id in output_ids(&sink.path)? {
            let s = state.entry(id.clone()).or_default();
            if s.final_event.is_none() {
                let event = JournalEvent::from_disposition(d);
                journal.record(&JournalEntry {
                    sample_id: id,
                    attempt: s.started,
                    disposition: event,
                })?;
                s.final_event = Some(event);
            }
        }
    }

    let jobs: Vec<(&Sample, u32)> = samples
        .iter()
        .filter_map(|s| {
            let st = state.get(&s.id);
            match st {
                Some(st) if st.final_event.is_some() => None,
                Some(st) => Some((s, st.started + 1)),
                None => Some((s, 1)),
            }
        })
        .collect();
    log::info!(
        "{} of {} samples to annotate with {} workers",
        jobs.len(),
        samples.len(),
        cfg.workers.max(1)
    );

    let worker = Worker {
        provider,
        experts,
        cfg,
        journal: &journal,
    };
    let cancel = AtomicBool::new(false);
    let (job_tx, job_rx) = unbounded();
    let (out_tx, out_rx) = unbounded();
    for job in &jobs {
        job_tx.send(*job).expect("job queue open");
    }
    drop(job_tx);

    let mut first_error: Option<AnnotateError> = None;
    std::thread::scope(|scope| {
        for _ in 0..cfg.workers.max(1).min(jobs.len().max(1)) {
            let job_rx = job_rx.clone();
            let out_tx = out_tx.clone();
            let (worker, cancel) = (&worker, &cancel);
            scope.spawn(move || {
                for (sample, attempt) in job_rx.iter() {
                    if cancel.load(Ordering::SeqCst) {
                        break;
                    }
                    let res = worker.process(sample, attempt);
                    if out_tx.send(res).is_err() {
                        break;
                    }
                }
            });
        }
        drop(out_tx);

        for res in out_rx.iter() {
            let outcome = match res {
                Ok(o) => o,
                Err(e) => {
                    cancel.store(true, Ordering::SeqCst);
                    first_error.get_or_insert(e);
                    continue;
                }
            };
            let written = (|| {
                sinks[&outcome.disposition].append(&serialize_trajectory(&outcome.trajectory))?;
                if let Some(r) = &outcome.report {
                    reports.append(&serde_json::to_string(r).expect("report serializes"))?;
                }
                journal.record(&JournalEntry {
                    sample_id: outcome.trajectory.sample_id.clone(),
                    attempt: outcome.attempt,
                    disposition: JournalEvent::from_disposition(outcome.disposition),
                })
            })();
            if let Err(e) = written {
                cancel.store(true, Ordering::SeqCst);
                first_error.get_or_insert(e);
            }
        }
    });
    if let Some(e) = first_error {
        return Err(e);
    }

    let stats = compute_stats(samples.len(), out_dir)?;
    let stats_path = out_dir.join(STATS_FILE);
    let text = serde_json::to_string_pretty(&stats).expect("stats serialize");
    std::fs::write(&stats_path, text + "\n").map_err(|e| AnnotateError::io(&stats_path, e))?;
    Ok(stats)
}

/// Recomputes the summary from the output files and the journal.
pub fn compute_stats(total: usize, out_dir: &Path) -> Result<Stats, AnnotateError> {
    let unique = |v: Vec<Trajectory>| {
        let mut seen = HashSet::new();
        v.into_iter()
            .filter(|t| seen.insert(t.sample_id.clone()))
            .collect::<Vec<_>>()
    };
    let accepted = unique(read_output(&out_dir.join(ACCEPTED_FILE))?);
    let review = unique(read_output(&out_dir.join(REVIEW_FILE))?);
    let badcase = unique(read_output(&out_dir.join(BADCASE_FILE))?);

    let mut tool_usage: BTreeMap<String, usize> =
        ToolId::ALL.iter().map(|t| (t.wire_name().to_string(), 0)).collect();
    let mut turns = 0usize;
    for t in accepted.iter().chain(&review) {
        turns += t.turns.len();
        for call in t.turns.iter().filter_map(|turn| turn.tool_call()) {
            *tool_usage.entry(call.tool.wire_name().to_string()).or_default() += 1;
        }
    }
    let kept = accepted.len() + review.len();
    let reannotated = read_journal(&out_dir.join(JOURNAL_FILE))?
        .into_iter()
        .filter(|e| e.disposition == JournalEvent::Started && e.attempt >= 2)
        .map(|e| e.sample_id)
        .collect::<HashSet<_>>()
        .len();
    Ok(Stats {
        total,
        accepted: accepted.len(),
        review: review.len(),
        badcase: badcase.len(),
        reannotated,
        tool_usage,
        mean_turns: if kept == 0 { 0.0 } else { turns as f64 / kept as f64 },
    })
}
