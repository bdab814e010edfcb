//! `decode`: run every fact through the decoder and append records.
//!
//! Results are JSON lines written by one thread as workers finish. A rerun
//! with the same output path skips facts already recorded, so interrupted
//! runs resume. On success the file is rewritten sorted by fact id.

use std::collections::{BTreeMap, HashSet};
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use cloze_forge::bench::{load_entities, load_facts, run_fact, Entities, Fact, RunOptions, RunRecord};
use cloze_forge::prompt::{load_template, template_path, PromptTemplate};
use cloze_forge::DecoderConfig;
use serde::{Deserialize, Serialize};

use crate::backend::open_providers;
use crate::{config, ConfigError, DecodeArgs};

/// Everything needed to rerun a decode: with the toy backend the same
/// manifest reproduces the results file byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub backend: String,
    pub decoder: DecoderConfig,
    pub language: String,
    pub templates: PathBuf,
    pub facts: PathBuf,
    pub entities: PathBuf,
    pub results: PathBuf,
    /// Decoding draws no random numbers; kept for manifests of seeded steps.
    pub seed: Option<u64>,
    pub jobs: usize,
    pub started_unix_secs: u64,
}

pub fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn record_key(r: &RunRecord) -> (String, String) {
    (r.fact.fact_id(), r.language.clone())
}

/// Reads the records of an earlier run. A torn final line (the process died
/// mid-write) is dropped; damage anywhere else is a data error.
pub fn read_results(path: &Path) -> Result<Vec<RunRecord>> {
    let file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e).with_context(|| format!("reading {}", path.display())),
    };
    let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>()?;
    let last = lines.iter().rposition(|l| !l.trim().is_empty());
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RunRecord>(line) {
            Ok(r) => out.push(r),
            Err(_) if Some(i) == last => eprintln!("warning: dropping incomplete last line of {}", path.display()),
            Err(e) => return Err(ConfigError(format!("{} line {}: {e}", path.display(), i + 1)).into()),
        }
    }
    Ok(out)
}

fn write_sorted(path: &Path, mut records: Vec<RunRecord>) -> Result<()> {
    records.sort_by_key(record_key);
    records.dedup_by_key(|r| record_key(r));
    let tmp = path.with_extension("jsonl.tmp");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn check_entities(facts: &[Fact], entities: &Entities) -> Result<(), ConfigError> {
    for f in facts {
        for id in std::iter::once(&f.subject_id).chain(&f.object_ids) {
            if !entities.contains_key(id) {
                return Err(ConfigError(format!("fact {} refers to unknown entity {id}", f.fact_id())));
            }
        }
    }
    Ok(())
}

fn load_templates(dir: &Path, facts: &[Fact], language: &str) -> Result<BTreeMap<String, PromptTemplate>> {
    let mut out = BTreeMap::new();
    for f in facts {
        if out.contains_key(&f.relation_id) {
            continue;
        }
        let path = template_path(dir, &f.relation_id, language);
        if !path.is_file() {
            return Err(ConfigError(format!(
                "no template for relation {} in language {language} (looked for {})",
                f.relation_id,
                path.display()
            ))
            .into());
        }
        let t = load_template(&path).map_err(config(format!("template {}", path.display())))?;
        out.insert(f.relation_id.clone(), t);
    }
    Ok(out)
}

pub fn run(args: DecodeArgs) -> Result<()> {
    let decoder = args.decoder.config(&args.language)?;
    if args.jobs == 0 {
        return Err(ConfigError("--jobs must be at least 1".into()).into());
    }
    crate::backend::BackendSpec::parse(&args.backend)?;
    let facts = load_facts(&args.facts).map_err(config(args.facts.display()))?;
    let entities = load_entities(&args.entities).map_err(config(args.entities.display()))?;
    check_entities(&facts, &entities)?;
    let templates = load_templates(&args.templates, &facts, &args.language)?;

    let mut records = read_results(&args.out)?;
    let done: HashSet<(String, String)> = records.iter().map(record_key).collect();
    let mut seen = HashSet::new();
    let pending: Vec<&Fact> = facts
        .iter()
        .filter(|f| {
            let key = (f.fact_id(), args.language.clone());
            !done.contains(&key) && seen.insert(key)
        })
        .collect();

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command: "decode".into(),
        backend: args.backend.clone(),
        decoder: decoder.clone(),
        language: args.language.clone(),
        templates: args.templates.clone(),
        facts: args.facts.clone(),
        entities: args.entities.clone(),
        results: args.out.clone(),
        seed: None,
        jobs: args.jobs,
        started_unix_secs: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    let mpath = manifest_path(&args.out);
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", mpath.display()))?;

    let resumed = records.len();
    if !pending.is_empty() {
        let workers = args.jobs.min(pending.len());
        let providers = open_providers(&args.backend, workers, Duration::from_secs(args.timeout))?;
        let opts = RunOptions { decoder };
        let mut sink = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&args.out)
            .with_context(|| format!("opening {}", args.out.display()))?;
        let next = AtomicUsize::new(0);
        let stop = AtomicBool::new(false);
        let (tx, rx) = mpsc::channel::<Result<RunRecord>>();
        let mut failure = None;
        std::thread::scope(|scope| {
            for provider in providers {
                let tx = tx.clone();
                let (next, stop, pending, templates, entities, opts) =
                    (&next, &stop, &pending, &templates, &entities, &opts);
                scope.spawn(move || {
                    while !stop.load(Ordering::Relaxed) {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(fact) = pending.get(i) else { break };
                        let r = run_fact(provider.as_ref(), &templates[&fact.relation_id], fact, entities, opts)
                            .with_context(|| format!("fact {}", fact.fact_id()));
                        if tx.send(r).is_err() {
                            break;
                        }
                    }
                });
            }
            drop(tx);
            for r in rx {
                let written = r.and_then(|rec| {
                    let mut line = serde_json::to_string(&rec)?;
                    line.push('\n');
                    sink.write_all(line.as_bytes())?;
                    sink.flush()?;
                    records.push(rec);
                    Ok(())
                });
                if let Err(e) = written {
                    stop.store(true, Ordering::Relaxed);
                    failure.get_or_insert(e);
                }
            }
        });
        if let Some(e) = failure {
            return Err(e.context(format!("decode stopped; completed records are kept in {}", args.out.display())));
        }
    }
    let skipped = records.iter().filter(|r| r.skipped.is_some()).count();
    let total = records.len();
    write_sorted(&args.out, records)?;
    eprintln!("{total} records in {} ({resumed} resumed, {skipped} skipped)", args.out.display());
    Ok(())
}
