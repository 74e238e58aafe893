//! Packet-capture ingestion: parse pcap/pcapng files, assemble and anonymize
//! bidirectional flows, and emit fixed-layout two-byte-token records.

pub mod corpus;
pub mod flow;
pub mod layers;
pub mod pcap;
pub mod synth;
pub mod tokenize;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use corpus::{read_corpus, write_corpus, TokenSequence};
pub use flow::{assemble_flows, flow_key_of, Endpoint, Flow, FlowKey, Protocol};
pub use layers::anonymize;
pub use pcap::{parse_capture, CaptureReader, LinkType, RawPacket};
pub use synth::{synthesize_corpus, SynthSpec};
pub use tokenize::{flow_to_record, packet_to_tokens};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported capture format")]
    UnsupportedFormat,
    #[error("malformed capture header: {0}")]
    MalformedHeader(String),
    #[error("unsupported link type {0}")]
    UnsupportedLinkType(u32),
    #[error("unsupported pcapng block type {0:#010x}")]
    UnsupportedPcapngBlock(u32),
    #[error("malformed capture record: {0}")]
    MalformedRecord(String),
    #[error("corpus magic mismatch")]
    BadCorpusMagic,
    #[error("unsupported corpus version {0}")]
    BadCorpusVersion(u32),
    #[error("corpus record length {got} differs from {expect}")]
    RecordLengthMismatch { expect: usize, got: usize },
    #[error("token id {0} out of vocabulary range")]
    TokenOutOfRange(u32),
    #[error("MASK token may not appear in a stored corpus")]
    MaskInCorpus,
    #[error("corpus is unlabeled")]
    UnlabeledCorpus,
}

/// Flow-to-token layout. The defaults give the fixed 5 x 64 = 320-token
/// record layout.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct IngestConfig {
    /// Leading bytes kept from each packet (two bytes per token).
    pub bytes_per_packet: usize,
    /// Packets kept per flow; missing packets become PAD tokens.
    pub packets_per_flow: usize,
    /// Idle gap that splits one five-tuple into separate flows.
    pub idle_timeout_s: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig { bytes_per_packet: 128, packets_per_flow: 5, idle_timeout_s: 64.0 }
    }
}

impl IngestConfig {
    pub fn tokens_per_packet(&self) -> usize {
        self.bytes_per_packet / 2
    }

    pub fn tokens_per_record(&self) -> usize {
        self.tokens_per_packet() * self.packets_per_flow
    }
}

#[derive(Debug, Default, Clone)]
pub struct IngestStats {
    pub packets: u64,
    pub skipped_non_ip: u64,
    pub truncation_warnings: u32,
    pub flows: u64,
}

/// One capture file plus an optional class label applied to all of its
/// flows.
#[derive(Debug, Clone)]
pub struct CaptureInput {
    pub path: PathBuf,
    pub label: Option<u32>,
}

/// Run the full ingest pipeline over capture files. Files may be processed
/// in parallel; the output record order is deterministic: sorted by
/// (file name, first-packet timestamp, flow key).
pub fn ingest_captures(
    inputs: &[CaptureInput],
    cfg: &IngestConfig,
) -> Result<(Vec<TokenSequence>, IngestStats), IngestError> {
    let mut per_file: Vec<(String, Vec<(i64, FlowKey, TokenSequence)>, IngestStats)> = inputs
        .par_iter()
        .map(|input| ingest_one(&input.path, input.label, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    per_file.sort_by(|a, b| a.0.cmp(&b.0));

    let mut stats = IngestStats::default();
    let mut records = Vec::new();
    for (_, mut rows, s) in per_file {
        stats.packets += s.packets;
        stats.skipped_non_ip += s.skipped_non_ip;
        stats.truncation_warnings += s.truncation_warnings;
        stats.flows += s.flows;
        rows.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
        records.extend(rows.into_iter().map(|(_, _, r)| r));
    }
    Ok((records, stats))
}

fn ingest_one(
    path: &Path,
    label: Option<u32>,
    cfg: &IngestConfig,
) -> Result<(String, Vec<(i64, FlowKey, TokenSequence)>, IngestStats), IngestError> {
    let mut stats = IngestStats::default();
    let mut reader = parse_capture(path)?;
    let mut packets = Vec::new();
    for pkt in &mut reader {
        packets.push(pkt?);
    }
    stats.truncation_warnings = reader.warnings();
    stats.packets = packets.len() as u64;
    // arrival order must be monotone in time before flow assembly
    packets.sort_by_key(|p| p.timestamp_us);

    let before = packets.len();
    let timeout_us = (cfg.idle_timeout_s * 1e6) as i64;
    let flows = assemble_flows(packets, timeout_us);
    let keyed: u64 = flows.iter().map(|f| f.packets.len() as u64).sum();
    stats.skipped_non_ip = before as u64 - keyed;
    stats.flows = flows.len() as u64;

    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let rows = flows
        .into_iter()
        .map(|mut f| {
            f.label = label;
            f.packets = f.packets.into_iter().map(anonymize).collect();
            let ts = f.packets.first().map(|p| p.timestamp_us).unwrap_or(0);
            let key = f.key.clone();
            let rec = flow_to_record(&f, cfg);
            (ts, key, rec)
        })
        .collect();
    Ok((name, rows, stats))
}
