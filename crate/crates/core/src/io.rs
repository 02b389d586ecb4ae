//! On-disk formats.
//!
//! | artifact            | format                                                        |
//! |---------------------|---------------------------------------------------------------|
//! | scans               | JSON lines, one scan per line; or CSV `scan_id,qubit_id,bias_e,p1,t_s` |
//! | template            | JSON, one file per qubit and shield configuration             |
//! | jump events         | CSV `scan_id,qubit_id,t_s,delta_q_e,theta_before_e,theta_after_e,point_index,chi2_at_trigger,flags` and a JSON-lines mirror |
//! | efficiency report   | JSON                                                          |
//! | injected jumps      | CSV `scan_id,qubit_id,t_s,index,delta_q_e`                    |
//! | MC truth            | CSV `scan_id,index,delta_q_injected_e,matched,delta_q_detected_e` |
//! | spectrum            | CSV `bin_low_keV,bin_high_keV,counts` plus `<name>.json` with `livetime_h` and `tag` |
//! | rates               | CSV plus an aligned text table                                |
//! | manifest            | JSON                                                          |
//!
//! Every JSON document and JSON line carries `schema_version`. Flags in CSV
//! are joined with `;`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::FormatError;
use crate::jumpfind::{JumpEvent, JumpFlag};
use crate::model::{ChargeScan, ScanPoint};
use crate::rates::{CoincidencePair, RateEstimate, SpectrumHistogram};
use crate::synth::{InjectedJump, SyntheticScan, TruthRecord};
use crate::template::Template;

pub const SCHEMA_VERSION: u32 = 1;

/// Scan metadata key holding the wall time the scan occupies, s.
pub const META_DURATION: &str = "duration_s";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, FormatError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn open(path: &Path) -> Result<BufReader<File>, FormatError> {
    Ok(BufReader::new(File::open(path).map_err(io_err(path))?))
}

fn parse_err(path: &Path, line: usize, message: impl ToString) -> FormatError {
    FormatError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    }
}

fn tag_version<T: Serialize>(value: &T) -> Result<Value, FormatError> {
    let mut v = serde_json::to_value(value)?;
    if let Value::Object(map) = &mut v {
        map.insert("schema_version".into(), SCHEMA_VERSION.into());
    }
    Ok(v)
}

fn check_version(path: &Path, line: usize, v: &mut Value) -> Result<(), FormatError> {
    let found = match v.as_object_mut().and_then(|m| m.remove("schema_version")) {
        Some(x) => x
            .as_u64()
            .ok_or_else(|| parse_err(path, line, "schema_version is not an integer"))?,
        None => 0,
    };
    if found != SCHEMA_VERSION as u64 {
        return Err(FormatError::Schema {
            path: path.to_path_buf(),
            found: found as u32,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(())
}

/// Writes `value` as a pretty JSON document with `schema_version`.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, &tag_version(value)?)?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FormatError> {
    let mut v: Value =
        serde_json::from_reader(open(path)?).map_err(|e| parse_err(path, e.line(), e))?;
    check_version(path, 1, &mut v)?;
    serde_json::from_value(v).map_err(|e| parse_err(path, 1, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), FormatError> {
    let mut w = create(path)?;
    for it in items {
        serde_json::to_writer(&mut w, &tag_version(it)?)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut v: Value = serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e))?;
        check_version(path, i + 1, &mut v)?;
        out.push(serde_json::from_value(v).map_err(|e| parse_err(path, i + 1, e))?);
    }
    Ok(out)
}

pub fn write_scans_jsonl(path: &Path, scans: &[ChargeScan]) -> Result<(), FormatError> {
    write_jsonl(path, scans)
}

pub fn read_scans_jsonl(path: &Path) -> Result<Vec<ChargeScan>, FormatError> {
    let scans: Vec<ChargeScan> = read_jsonl(path)?;
    for s in &scans {
        s.validate()?;
    }
    Ok(scans)
}

#[derive(Debug, Serialize, Deserialize)]
struct ScanRow {
    scan_id: u64,
    qubit_id: u8,
    bias_e: f64,
    p1: f64,
    t_s: f64,
}

/// Columnar form. Start times are not stored; on reading, a scan starts at
/// its first timestamp.
pub fn write_scans_csv(path: &Path, scans: &[ChargeScan]) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for s in scans {
        for p in &s.points {
            w.serialize(ScanRow {
                scan_id: s.scan_id,
                qubit_id: s.qubit_id,
                bias_e: p.bias,
                p1: p.p1,
                t_s: p.time,
            })?;
        }
    }
    w.flush().map_err(io_err(path))
}

pub fn read_scans_csv(path: &Path) -> Result<Vec<ChargeScan>, FormatError> {
    let mut r = csv::Reader::from_reader(open(path)?);
    let mut scans: Vec<ChargeScan> = Vec::new();
    for (i, row) in r.deserialize::<ScanRow>().enumerate() {
        let row = row.map_err(|e| parse_err(path, i + 2, e))?;
        let p = ScanPoint {
            bias: row.bias_e,
            p1: row.p1,
            time: row.t_s,
        };
        match scans.last_mut() {
            Some(s) if s.scan_id == row.scan_id && s.qubit_id == row.qubit_id => s.points.push(p),
            _ => scans.push(ChargeScan {
                scan_id: row.scan_id,
                qubit_id: row.qubit_id,
                start_time: row.t_s,
                points: vec![p],
                meta: Default::default(),
            }),
        }
    }
    for s in &scans {
        s.validate()?;
    }
    Ok(scans)
}

/// Reads scans by extension: `.csv` is columnar, anything else JSON lines.
pub fn read_scans(path: &Path) -> Result<Vec<ChargeScan>, FormatError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_scans_csv(path),
        _ => read_scans_jsonl(path),
    }
}

pub fn write_template(path: &Path, t: &Template) -> Result<(), FormatError> {
    write_json(path, t)
}

pub fn read_template(path: &Path) -> Result<Template, FormatError> {
    let t: Template = read_json(path)?;
    t.validate()?;
    Ok(t)
}

#[derive(Debug, Serialize, Deserialize)]
struct EventRow {
    scan_id: u64,
    qubit_id: u8,
    t_s: f64,
    delta_q_e: f64,
    theta_before_e: f64,
    theta_after_e: f64,
    point_index: usize,
    chi2_at_trigger: f64,
    flags: String,
}

pub fn write_events_csv(path: &Path, events: &[JumpEvent]) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    if events.is_empty() {
        w.write_record([
            "scan_id",
            "qubit_id",
            "t_s",
            "delta_q_e",
            "theta_before_e",
            "theta_after_e",
            "point_index",
            "chi2_at_trigger",
            "flags",
        ])?;
    }
    for e in events {
        let flags: Vec<&str> = e.flags.iter().map(|f| f.as_str()).collect();
        w.serialize(EventRow {
            scan_id: e.scan_id,
            qubit_id: e.qubit_id,
            t_s: e.time,
            delta_q_e: e.delta_q,
            theta_before_e: e.theta_before,
            theta_after_e: e.theta_after,
            point_index: e.point_index,
            chi2_at_trigger: e.chi2_at_trigger,
            flags: flags.join(";"),
        })?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_events_csv(path: &Path) -> Result<Vec<JumpEvent>, FormatError> {
    let mut r = csv::Reader::from_reader(open(path)?);
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<EventRow>().enumerate() {
        let row = row.map_err(|e| parse_err(path, i + 2, e))?;
        let flags = row
            .flags
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| {
                JumpFlag::parse(s)
                    .ok_or_else(|| parse_err(path, i + 2, format!("unknown flag {s}")))
            })
            .collect::<Result<_, _>>()?;
        out.push(JumpEvent {
            scan_id: row.scan_id,
            qubit_id: row.qubit_id,
            time: row.t_s,
            delta_q: row.delta_q_e,
            theta_before: row.theta_before_e,
            theta_after: row.theta_after_e,
            point_index: row.point_index,
            chi2_at_trigger: row.chi2_at_trigger,
            flags,
        });
    }
    Ok(out)
}

/// Reads events by extension: `.csv` or JSON lines.
pub fn read_events(path: &Path) -> Result<Vec<JumpEvent>, FormatError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_events_csv(path),
        _ => read_jsonl(path),
    }
}

#[derive(Debug, Serialize)]
struct TruthRow {
    scan_id: u64,
    index: usize,
    delta_q_injected_e: f64,
    matched: bool,
    delta_q_detected_e: Option<f64>,
}

pub fn write_truth_csv(path: &Path, truth: &[TruthRecord]) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    if truth.is_empty() {
        w.write_record([
            "scan_id",
            "index",
            "delta_q_injected_e",
            "matched",
            "delta_q_detected_e",
        ])?;
    }
    for t in truth {
        w.serialize(TruthRow {
            scan_id: t.scan_id,
            index: t.index,
            delta_q_injected_e: t.delta_q_injected,
            matched: t.matched,
            delta_q_detected_e: t.delta_q_detected,
        })?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Serialize, Deserialize)]
struct InjectionRow {
    scan_id: u64,
    qubit_id: u8,
    t_s: f64,
    index: usize,
    delta_q_e: f64,
}

/// Ground-truth jumps of simulated scans.
pub fn write_injections_csv(path: &Path, scans: &[SyntheticScan]) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut any = false;
    for s in scans {
        for j in &s.injections {
            any = true;
            w.serialize(InjectionRow {
                scan_id: s.scan.scan_id,
                qubit_id: s.scan.qubit_id,
                t_s: j.time,
                index: j.index,
                delta_q_e: j.delta_q,
            })?;
        }
    }
    if !any {
        w.write_record(["scan_id", "qubit_id", "t_s", "index", "delta_q_e"])?;
    }
    w.flush().map_err(io_err(path))
}

/// `(scan_id, qubit_id, injection)` rows written by [`write_injections_csv`].
pub fn read_injections_csv(path: &Path) -> Result<Vec<(u64, u8, InjectedJump)>, FormatError> {
    let mut r = csv::Reader::from_reader(open(path)?);
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<InjectionRow>().enumerate() {
        let row = row.map_err(|e| parse_err(path, i + 2, e))?;
        out.push((
            row.scan_id,
            row.qubit_id,
            InjectedJump {
                time: row.t_s,
                index: row.index,
                delta_q: row.delta_q_e,
            },
        ));
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct SpectrumRow {
    #[serde(rename = "bin_low_keV")]
    lo: f64,
    #[serde(rename = "bin_high_keV")]
    hi: f64,
    counts: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SpectrumSidecar {
    livetime_h: f64,
    tag: String,
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

pub fn write_spectrum(path: &Path, h: &SpectrumHistogram) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for (i, c) in h.counts.iter().enumerate() {
        w.serialize(SpectrumRow {
            lo: h.bin_edges[i],
            hi: h.bin_edges[i + 1],
            counts: *c,
        })?;
    }
    w.flush().map_err(io_err(path))?;
    write_json(
        &sidecar_path(path),
        &SpectrumSidecar {
            livetime_h: h.livetime,
            tag: h.tag.clone(),
        },
    )
}

/// Reads a spectrum CSV and its sidecar. Bins must be contiguous.
pub fn read_spectrum(path: &Path) -> Result<SpectrumHistogram, FormatError> {
    let side: SpectrumSidecar = read_json(&sidecar_path(path))?;
    let mut r = csv::Reader::from_reader(open(path)?);
    let mut edges = Vec::new();
    let mut counts = Vec::new();
    for (i, row) in r.deserialize::<SpectrumRow>().enumerate() {
        let row = row.map_err(|e| parse_err(path, i + 2, e))?;
        match edges.last() {
            None => edges.push(row.lo),
            Some(&last) if (last - row.lo).abs() > 1e-9 * last.abs().max(1.0) => {
                return Err(parse_err(path, i + 2, "bins are not contiguous"));
            }
            _ => {}
        }
        edges.push(row.hi);
        counts.push(row.counts);
    }
    Ok(SpectrumHistogram::new(
        edges,
        counts,
        side.livetime_h,
        side.tag,
    )?)
}

#[derive(Debug, Serialize, Deserialize)]
struct RateRow {
    label: String,
    n_events: u64,
    livetime_h: f64,
    efficiency: f64,
    rate_mhz: f64,
    ci_low_mhz: f64,
    ci_high_mhz: f64,
    upper_limit: bool,
}

pub fn write_rates_csv(path: &Path, rates: &[RateEstimate]) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rates {
        w.serialize(RateRow {
            label: r.label.clone(),
            n_events: r.n_events,
            livetime_h: r.livetime,
            efficiency: r.efficiency,
            rate_mhz: r.rate,
            ci_low_mhz: r.ci_low,
            ci_high_mhz: r.ci_high,
            upper_limit: r.is_upper_limit(),
        })?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_rates_csv(path: &Path) -> Result<Vec<RateEstimate>, FormatError> {
    let mut r = csv::Reader::from_reader(open(path)?);
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<RateRow>().enumerate() {
        let row = row.map_err(|e| parse_err(path, i + 2, e))?;
        out.push(RateEstimate {
            label: row.label,
            rate: row.rate_mhz,
            ci_low: row.ci_low_mhz,
            ci_high: row.ci_high_mhz,
            n_events: row.n_events,
            livetime: row.livetime_h,
            efficiency: row.efficiency,
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct PairRow {
    qubit_a: u8,
    qubit_b: u8,
    t_a_s: f64,
    t_b_s: f64,
    dq_a_e: f64,
    dq_b_e: f64,
    separation_um: Option<f64>,
}

pub fn write_pairs_csv(path: &Path, pairs: &[CoincidencePair]) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    if pairs.is_empty() {
        w.write_record([
            "qubit_a",
            "qubit_b",
            "t_a_s",
            "t_b_s",
            "dq_a_e",
            "dq_b_e",
            "separation_um",
        ])?;
    }
    for p in pairs {
        w.serialize(PairRow {
            qubit_a: p.qubit_a,
            qubit_b: p.qubit_b,
            t_a_s: p.t_a,
            t_b_s: p.t_b,
            dq_a_e: p.dq_a,
            dq_b_e: p.dq_b,
            separation_um: p.separation,
        })?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), FormatError> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// One dataset: a shield configuration and its scan files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tag: String,
    /// Relative paths are taken from the manifest's directory.
    pub scan_files: Vec<PathBuf>,
    /// Hours.
    pub livetime: f64,
    pub qubit_ids: Vec<u8>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let mut m: Self = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for f in &mut m.scan_files {
            if f.is_relative() {
                *f = base.join(&*f);
            }
        }
        if !(m.livetime > 0.0) {
            return Err(parse_err(path, 1, "livetime must be positive"));
        }
        for f in &m.scan_files {
            if !f.exists() {
                return Err(FormatError::Io {
                    path: f.clone(),
                    source: std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        "scan file not found",
                    ),
                });
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        write_json(path, self)
    }

    pub fn read_all_scans(&self) -> Result<Vec<ChargeScan>, FormatError> {
        let mut out = Vec::new();
        for f in &self.scan_files {
            out.extend(read_scans(f)?);
        }
        Ok(out)
    }
}

/// Wall time one scan occupies: the `duration_s` metadata when present,
/// otherwise first-to-last timestamp.
pub fn scan_duration(scan: &ChargeScan) -> f64 {
    scan.meta
        .get(META_DURATION)
        .and_then(|s| s.parse().ok())
        .unwrap_or(scan.end_time() - scan.start_time)
}

/// Hours covered by each qubit's scans.
pub fn livetime_by_qubit(scans: &[ChargeScan]) -> std::collections::BTreeMap<u8, f64> {
    let mut out = std::collections::BTreeMap::new();
    for s in scans {
        *out.entry(s.qubit_id).or_insert(0.0) += scan_duration(s) / 3600.0;
    }
    out
}
