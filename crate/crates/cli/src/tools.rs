//! The smaller subcommands: eval, sample, prompt, csgen and serve-toy.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use cloze_forge::bench::{evaluate_with, load_entities, load_facts, report_tsv, sample_facts, Fact, SplitReport};
use cloze_forge::bridge::{serve, BackendInfo, PROTOCOL_VERSION};
use cloze_forge::csgen::{process_sentence, read_sentences, write_sentences, SwitchConfig, SwitchOutcome};
use cloze_forge::prompt::{instantiate, load_template, serialize_template, EntityForm};
use cloze_forge::DistributionProvider;
use rayon::prelude::*;
use serde::Serialize;

use crate::backend::load_toy;
use crate::decode::read_results;
use crate::{
    config, ConfigError, CsgenArgs, EvalArgs, InstantiateArgs, PromptCommand, SampleArgs, ServeToyArgs, SplitArg,
};

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_split(name: &str, split: &SplitReport) {
    println!("split\t{name}");
    println!("relation\tcorrect/evaluated\taccuracy");
    for (rel, s) in &split.per_relation {
        println!("{rel}\t{}/{}\t{}", s.correct, s.evaluated, s.accuracy.to_f64());
    }
    match &split.macro_average {
        Some(m) => println!("macro_average\t{}\t{}", m.0, m.to_f64()),
        None => println!("macro_average\t-\t-"),
    }
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let entities = load_entities(&a.entities).map_err(config(a.entities.display()))?;
    if !a.results.is_file() {
        return Err(ConfigError(format!("results file {} not found", a.results.display())).into());
    }
    let records = read_results(&a.results)?;
    let also: Vec<&str> = a.also_match.iter().map(String::as_str).collect();
    let report = evaluate_with(&records, &entities, a.oracle_length, &also)
        .map_err(config(format!("evaluating {}", a.results.display())))?;
    let (name, split) = match a.split {
        SplitArg::All => ("all", &report.splits.all),
        SplitArg::Single => ("single", &report.splits.single),
        SplitArg::Multi => ("multi", &report.splits.multi),
    };
    print_split(name, split);
    println!("skipped\t{}", report.skipped_count);
    if let Some(p) = &a.report {
        write_file(p, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    if let Some(p) = &a.tsv {
        write_file(p, &report_tsv(&report))?;
    }
    Ok(())
}

/// Samples each relation on its own, in relation-id order, every relation
/// with the same seed, so reruns give identical files.
pub fn sample(a: SampleArgs) -> Result<()> {
    let facts = load_facts(&a.facts).map_err(config(a.facts.display()))?;
    let mut by_relation: BTreeMap<&str, Vec<Fact>> = BTreeMap::new();
    for f in &facts {
        by_relation.entry(f.relation_id.as_str()).or_default().push(f.clone());
    }
    let mut w = BufWriter::new(std::fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    let mut n = 0;
    for group in by_relation.values() {
        for f in sample_facts(group, a.per_relation, a.seed) {
            serde_json::to_writer(&mut w, &f)?;
            w.write_all(b"\n")?;
            n += 1;
        }
    }
    w.flush()?;
    eprintln!("sampled {n} facts from {} relations", by_relation.len());
    Ok(())
}

fn subject_form(a: &InstantiateArgs, language: &str) -> Result<EntityForm> {
    if let Some(label) = &a.label {
        let mut form = EntityForm::new("subject", label);
        form.gender = a.gender.clone();
        return Ok(form);
    }
    let (Some(id), Some(path)) = (&a.subject, &a.entities) else {
        return Err(ConfigError("give either --label or --subject with --entities".into()).into());
    };
    let entities = load_entities(path).map_err(config(path.display()))?;
    let e = entities.get(id).ok_or_else(|| ConfigError(format!("unknown entity {id}")))?;
    Ok(e.entity_form(language).ok_or_else(|| ConfigError(format!("entity {id} has no label in {language}")))?)
}

pub fn prompt(c: PromptCommand) -> Result<()> {
    match c {
        PromptCommand::Parse { template } => {
            let t = load_template(&template).map_err(config(template.display()))?;
            println!("{}", serde_json::to_string_pretty(&t)?);
            println!("{}", serialize_template(&t));
        }
        PromptCommand::Instantiate(a) => {
            let t = load_template(&a.template).map_err(config(a.template.display()))?;
            let form = subject_form(&a, &t.language)?;
            let text = instantiate(&t, &form, a.masks, &a.mask_text).map_err(config(a.template.display()))?;
            println!("{text}");
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct CsgenStats {
    sentences: usize,
    switched: usize,
    kept: usize,
    missing_alias: usize,
    masked_positions: usize,
}

/// Sentences are processed in parallel; each draws from its own seeded
/// stream, so the output does not depend on `--jobs`.
pub fn csgen(a: CsgenArgs) -> Result<()> {
    let mut cfg = SwitchConfig::new(&a.target, a.seed);
    cfg.p_switch = a.p_switch;
    cfg.p_mask_word = a.p_mask_word;
    cfg.p_mask_mention = a.p_mask_mention;
    cfg.segmentation = a.segmentation();
    cfg.validate().map_err(config("csgen settings"))?;
    let entities = load_entities(&a.entities).map_err(config(a.entities.display()))?;
    let file = std::fs::File::open(&a.input).map_err(config(a.input.display()))?;
    let sentences = read_sentences(BufReader::new(file)).map_err(config(a.input.display()))?;

    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.jobs.max(1)).build()?;
    let results: Vec<_> = pool.install(|| {
        sentences.par_iter().enumerate().map(|(i, s)| process_sentence(i as u64, s, &entities, &cfg)).collect()
    });
    let mut stats =
        CsgenStats { sentences: results.len(), switched: 0, kept: 0, missing_alias: 0, masked_positions: 0 };
    for (s, outcome) in &results {
        match outcome {
            SwitchOutcome::Switched => stats.switched += 1,
            SwitchOutcome::Kept => stats.kept += 1,
            SwitchOutcome::MissingAlias => stats.missing_alias += 1,
        }
        stats.masked_positions += s.mask_plan.as_ref().map_or(0, Vec::len);
    }
    let out: Vec<_> = results.into_iter().map(|(s, _)| s).collect();
    let w = BufWriter::new(std::fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    write_sentences(w, &out)?;
    println!("{}", serde_json::to_string(&stats)?);
    Ok(())
}

pub fn serve_toy(a: ServeToyArgs) -> Result<()> {
    let lm = Arc::new(load_toy(&a.corpus, a.alpha)?);
    let vocab = lm.vocab_size();
    // the toy model has no mask token; any id outside the vocabulary works
    let info = BackendInfo { vocab_size: vocab, mask_id: vocab as u32, protocol: PROTOCOL_VERSION, top_k_cap: None };
    match &a.tcp {
        None => {
            let stdin = std::io::stdin().lock();
            serve(lm.as_ref(), info, stdin, std::io::stdout().lock())?;
        }
        Some(addr) => {
            let listener = TcpListener::bind(addr).map_err(config(format!("binding {addr}")))?;
            println!("listening {}", listener.local_addr()?);
            std::io::stdout().flush()?;
            for conn in listener.incoming() {
                let conn = conn?;
                let lm = Arc::clone(&lm);
                std::thread::spawn(move || {
                    let reader = match conn.try_clone() {
                        Ok(c) => BufReader::new(c),
                        Err(e) => return eprintln!("connection failed: {e}"),
                    };
                    if let Err(e) = serve(lm.as_ref(), info, reader, conn) {
                        eprintln!("connection ended: {e}");
                    }
                });
            }
        }
    }
    Ok(())
}
