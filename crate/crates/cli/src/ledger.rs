//! `query`, `export` and `verify` over a ledger export.

use std::path::{Path, PathBuf};

use regulus_core::ledger::{BehaviorRecord, Ledger, RecordFilter, RecordKind, RECORDS_FILE};
use regulus_core::simulation::LEDGER_DIR;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::print_json;
use crate::{domain, usage, CliResult, Failure};

/// Accept the export itself or a scenario report that contains one.
fn resolve(dir: &Path) -> PathBuf {
    let nested = dir.join(LEDGER_DIR);
    if !dir.join(RECORDS_FILE).exists() && nested.join(RECORDS_FILE).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn open(dir: &Path) -> CliResult<Ledger> {
    Ledger::import_dir(&resolve(dir)).map_err(usage)
}

fn payload_json(r: &BehaviorRecord) -> Value {
    match r.decoded_payload() {
        Ok(p) => p.iter().map(|(k, v)| (k.to_string(), Value::from(v))).collect::<serde_json::Map<_, _>>().into(),
        Err(_) => Value::Null,
    }
}

fn record_json(ledger: &Ledger, r: &BehaviorRecord) -> Value {
    json!({
        "record_id": r.record_id,
        "agent_id": r.agent_id,
        "epoch": r.epoch,
        "kind": r.kind,
        "timestamp": r.timestamp,
        "block": ledger.block_of(&r.record_id).map(|b| b.height),
        "payload": payload_json(r),
    })
}

pub fn query(dir: &Path, agent: Option<&str>, kind: Option<&str>, from: Option<u64>, to: Option<u64>) -> CliResult {
    let ledger = open(dir)?;
    let mut filter = RecordFilter::default();
    if let Some(a) = agent {
        filter = filter.agent(a);
    }
    if let Some(k) = kind {
        filter = filter.kind(k.parse::<RecordKind>().map_err(usage)?);
    }
    if from.is_some() || to.is_some() {
        let (lo, hi) = (from.unwrap_or(0), to.unwrap_or(u64::MAX));
        if lo > hi {
            return Err(usage(format!("empty epoch range {lo}..={hi}")));
        }
        filter = filter.epochs(lo..=hi);
    }
    for r in ledger.query(&filter) {
        print_json(&record_json(&ledger, r))?;
    }
    Ok(())
}

pub fn export(dir: &Path, out: &Path) -> CliResult {
    let ledger = open(dir)?;
    std::fs::create_dir_all(out).map_err(domain)?;
    let mut w = csv::Writer::from_path(out.join("records.csv")).map_err(domain)?;
    w.write_record(["record_id", "agent_id", "epoch", "kind", "timestamp", "block", "payload"])
        .map_err(domain)?;
    for r in ledger.records() {
        let block = ledger.block_of(&r.record_id).map_or(String::new(), |b| b.height.to_string());
        w.write_record([
            r.record_id.to_hex(),
            r.agent_id.clone(),
            r.epoch.to_string(),
            r.kind.as_str().to_string(),
            r.timestamp.to_string(),
            block,
            payload_json(r).to_string(),
        ])
        .map_err(domain)?;
    }
    w.flush().map_err(domain)?;
    let mut w = csv::Writer::from_path(out.join("blocks.csv")).map_err(domain)?;
    w.write_record(["height", "epoch", "n_records", "prev_hash", "merkle_root", "header_hash"])
        .map_err(domain)?;
    for b in ledger.blocks() {
        w.write_record([
            b.height.to_string(),
            b.epoch.to_string(),
            b.record_ids.len().to_string(),
            b.prev_hash.to_hex(),
            b.merkle_root.to_hex(),
            b.header_hash.to_hex(),
        ])
        .map_err(domain)?;
    }
    w.flush().map_err(domain)?;
    print_json(&json!({ "records": ledger.len(), "blocks": ledger.blocks().len() }))
}

#[derive(Serialize)]
struct Finding {
    /// `None` for records not yet sealed.
    block: Option<u64>,
    check: &'static str,
    detail: String,
}

pub fn verify(dir: &Path) -> CliResult {
    let ledger = open(dir)?;
    let mut findings: Vec<Finding> = ledger
        .verify_chain()
        .into_iter()
        .map(|v| Finding {
            block: Some(v.height()),
            check: "chain",
            detail: v.to_string(),
        })
        .collect();
    let block = |id: &regulus_core::ledger::Hash32| ledger.block_of(id).map(|b| b.height);
    for r in ledger.records() {
        if r.compute_id() != r.record_id {
            findings.push(Finding {
                block: block(&r.record_id),
                check: "record_id",
                detail: format!("record {} does not hash to its id", r.record_id),
            });
        }
        if ledger.is_sealed(&r.record_id) && !ledger.verify_inclusion(&r.record_id) {
            findings.push(Finding {
                block: block(&r.record_id),
                check: "inclusion_proof",
                detail: format!("record {} has no valid inclusion proof", r.record_id),
            });
        }
    }
    for id in ledger.verify_signatures() {
        findings.push(Finding {
            block: block(&id),
            check: "signature",
            detail: format!("record {id} signature does not verify"),
        });
    }
    findings.sort_by_key(|f| (f.block.is_none(), f.block));
    for f in &findings {
        log::error!("{}", f.detail);
    }
    print_json(&json!({
        "clean": findings.is_empty(),
        "blocks": ledger.blocks().len(),
        "records": ledger.len(),
        "violations": findings,
    }))?;
    if findings.is_empty() {
        Ok(())
    } else {
        Err(Failure::Domain(format!("{} integrity violation(s)", findings.len())))
    }
}
