//! build-template → find-jumps → efficiency → rates → coincidence → excess.
//!
//! Every stage runs to completion before anything is written, and all output
//! is a function of the inputs and the seed, so reruns reproduce the bundle
//! byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chargejump::io::{self, DatasetManifest};
use chargejump::rates::{
    lmo_flux_ratio, solve_excess_rate, CoincidencePair, ExcessSolution, FluxRatio, RateEstimate,
};
use chargejump::synth::{EfficiencyReport, TruthRecord};
use chargejump::template::Template;
use chargejump::JumpEvent;
use serde::Serialize;

use crate::analysis::{self, PairSummary};
use crate::commands::{excess_table, pair_table, rate_table, template_file, PipelineArgs};
use crate::config::RunConfig;
use crate::failure::{Failure, Outcome, Stage};

/// Tolerated mismatch between a manifest's livetime and its scans.
const LIVETIME_TOLERANCE: f64 = 0.01;

struct DatasetResult {
    manifest: DatasetManifest,
    n_scans: usize,
    built_templates: Vec<Template>,
    mc: Vec<(EfficiencyReport, Vec<TruthRecord>)>,
    efficiency: BTreeMap<u8, f64>,
    events: Vec<JumpEvent>,
    rates: Vec<RateEstimate>,
    pairs: Vec<CoincidencePair>,
    pair_summary: Vec<PairSummary>,
}

#[derive(Serialize)]
struct PairEntry<'a> {
    rate: &'a RateEstimate,
    separation_um: Option<f64>,
    accidental_mhz: f64,
}

#[derive(Serialize)]
struct DatasetEntry<'a> {
    tag: &'a str,
    livetime_h: f64,
    n_scans: usize,
    qubit_ids: &'a [u8],
    efficiency: &'a BTreeMap<u8, f64>,
    n_events: usize,
    rates: &'a [RateEstimate],
    pair_rates: Vec<PairEntry<'a>>,
}

#[derive(Serialize)]
struct Report<'a> {
    seed: u64,
    datasets: Vec<DatasetEntry<'a>>,
    lmo_ratio: Option<&'a FluxRatio>,
    excess: Option<&'a ExcessSolution>,
}

/// Loads a manifest and checks its livetime against the scans it lists.
pub fn load_dataset(path: &Path) -> Outcome<(DatasetManifest, Vec<chargejump::ChargeScan>)> {
    let stage = format!("manifest {}", path.display());
    let m = DatasetManifest::load(path).stage(&stage)?;
    let scans = m.read_all_scans().stage(&stage)?;
    let by_qubit = io::livetime_by_qubit(&scans);
    for q in by_qubit.keys() {
        if !m.qubit_ids.contains(q) {
            return Err(Failure::data(
                &stage,
                format!("scans for qubit {q}, which the manifest does not list"),
            ));
        }
    }
    for q in &m.qubit_ids {
        let t = by_qubit.get(q).copied().unwrap_or(0.0);
        if (t - m.livetime).abs() > LIVETIME_TOLERANCE * m.livetime {
            return Err(Failure::data(
                &stage,
                format!(
                    "qubit {q}: scans cover {t:.4} h but the manifest states {:.4} h",
                    m.livetime
                ),
            ));
        }
    }
    Ok((m, scans))
}

fn process(cfg: &RunConfig, path: &Path, supplied: &[Template]) -> Outcome<DatasetResult> {
    let (manifest, scans) = load_dataset(path)?;
    let tag = manifest.tag.clone();
    let qubits = manifest.qubit_ids.clone();
    cfg.require_qubits(qubits.iter().copied())?;

    let mut templates = BTreeMap::new();
    let mut built_templates = Vec::new();
    for &q in &qubits {
        let t = match analysis::pick_template(supplied, q, &tag) {
            Some(t) => t.clone(),
            None => {
                let (t, _) = analysis::build_from_scans(cfg, &scans, q, &tag)?;
                built_templates.push(t.clone());
                t
            }
        };
        templates.insert(q, t);
    }

    let events = analysis::detect_all(cfg, &scans, &templates)?;

    let mut efficiency = BTreeMap::new();
    let mut mc = Vec::new();
    for &q in &qubits {
        match cfg.qubit(q).and_then(|s| s.efficiency.get(&tag)) {
            Some(e) => {
                efficiency.insert(q, *e);
            }
            None => {
                let out =
                    analysis::efficiency_mc(cfg, &templates[&q], &tag, cfg.efficiency.n_scans)?;
                if !(out.report.efficiency > 0.0) {
                    return Err(Failure::analysis(
                        &format!("efficiency (qubit {q}, {tag})"),
                        "no injected jump was recovered",
                    ));
                }
                efficiency.insert(q, out.report.efficiency);
                mc.push((out.report, out.truth));
            }
        }
    }

    let rates = analysis::qubit_rates(cfg, &events, &qubits, manifest.livetime, &efficiency)?;
    let (pairs, pair_summary) =
        analysis::coincidences(cfg, &events, &qubits, manifest.livetime, &efficiency)?;
    Ok(DatasetResult {
        n_scans: scans.len(),
        manifest,
        built_templates,
        mc,
        efficiency,
        events,
        rates,
        pairs,
        pair_summary,
    })
}

fn excess_for(
    cfg: &RunConfig,
    results: &[DatasetResult],
) -> Outcome<Option<(FluxRatio, ExcessSolution)>> {
    let l = &cfg.lmo;
    let find = |tag: &str| results.iter().find(|r| r.manifest.tag == tag);
    let (Some(open), Some(closed)) = (find(&l.open_tag), find(&l.closed_tag)) else {
        return Ok(None);
    };
    let (Some(so_path), Some(sc_path)) = (
        cfg.paths.spectra.get(&l.open_tag),
        cfg.paths.spectra.get(&l.closed_tag),
    ) else {
        return Ok(None);
    };
    let so = io::read_spectrum(so_path).stage("lmo-ratio")?;
    let sc = io::read_spectrum(sc_path).stage("lmo-ratio")?;
    let ratio = lmo_flux_ratio(&so, &sc, l.threshold_kev).stage("lmo-ratio")?;
    let avg = |r: &DatasetResult| {
        r.rates
            .iter()
            .find(|x| x.label == "Average")
            .cloned()
            .ok_or_else(|| Failure::analysis("excess", "no pooled rate"))
    };
    let sol = solve_excess_rate(&avg(open)?, &avg(closed)?, &ratio).stage("excess")?;
    Ok(Some((ratio, sol)))
}

fn write<T>(r: Result<T, chargejump::error::FormatError>) -> Outcome<T> {
    r.map_err(|e| Failure::data("write", e))
}

pub fn run(cfg: &RunConfig, a: &PipelineArgs) -> Outcome<()> {
    let manifests: Vec<PathBuf> = if a.dataset.is_empty() {
        cfg.paths.datasets.clone()
    } else {
        a.dataset.clone()
    };
    if manifests.is_empty() {
        return Err(Failure::usage(
            "pipeline",
            "no datasets; pass --dataset or set paths.datasets",
        ));
    }
    let supplied = analysis::read_templates(&cfg.paths.templates)?;
    let results: Vec<DatasetResult> = manifests
        .iter()
        .map(|m| process(cfg, m, &supplied))
        .collect::<Outcome<_>>()?;
    let mut tags: Vec<String> = results.iter().map(|r| r.manifest.tag.clone()).collect();
    tags.sort();
    tags.dedup();
    if tags.len() != results.len() {
        return Err(Failure::usage("pipeline", "dataset tags must be distinct"));
    }
    let excess = excess_for(cfg, &results)?;

    let out = &a.out;
    for r in &results {
        let tag = &r.manifest.tag;
        for t in &r.built_templates {
            write(io::write_template(
                &template_file(&out.join("templates"), t.qubit_id, tag),
                t,
            ))?;
        }
        for (rep, truth) in &r.mc {
            let q = rep.qubit_id;
            let dir = out.join("efficiency");
            write(io::write_json(
                &dir.join(format!("efficiency_q{q}_{tag}.json")),
                rep,
            ))?;
            write(io::write_truth_csv(
                &dir.join(format!("truth_q{q}_{tag}.csv")),
                truth,
            ))?;
        }
        write(io::write_events_csv(
            &out.join(format!("events_{tag}.csv")),
            &r.events,
        ))?;
        write(io::write_jsonl(
            &out.join(format!("events_{tag}.jsonl")),
            &r.events,
        ))?;
        write(io::write_rates_csv(
            &out.join(format!("rates_{tag}.csv")),
            &r.rates,
        ))?;
        write(io::write_pairs_csv(
            &out.join(format!("coincidences_{tag}.csv")),
            &r.pairs,
        ))?;
        let pr: Vec<RateEstimate> = r.pair_summary.iter().map(|p| p.rate.clone()).collect();
        write(io::write_rates_csv(
            &out.join(format!("pair_rates_{tag}.csv")),
            &pr,
        ))?;
    }

    let tags: Vec<String> = results.iter().map(|r| r.manifest.tag.clone()).collect();
    let livetimes: Vec<f64> = results.iter().map(|r| r.manifest.livetime).collect();
    let rate_cols: Vec<Vec<RateEstimate>> = results.iter().map(|r| r.rates.clone()).collect();
    let pair_cols: Vec<Vec<PairSummary>> = results.iter().map(|r| r.pair_summary.clone()).collect();
    let rates_txt = rate_table(&tags, &livetimes, &rate_cols);
    let pairs_txt = pair_table(&tags, &pair_cols);
    write(io::write_text(&out.join("rates.txt"), &rates_txt))?;
    write(io::write_text(&out.join("pair_rates.txt"), &pairs_txt))?;
    print!("{rates_txt}\n{pairs_txt}");
    if let Some((ratio, sol)) = &excess {
        let text = excess_table(sol);
        write(io::write_json(&out.join("lmo_ratio.json"), ratio))?;
        write(io::write_json(&out.join("excess.json"), sol))?;
        write(io::write_text(&out.join("excess.txt"), &text))?;
        print!("\n{text}");
    }

    let report = Report {
        seed: cfg.seed,
        datasets: results
            .iter()
            .map(|r| DatasetEntry {
                tag: &r.manifest.tag,
                livetime_h: r.manifest.livetime,
                n_scans: r.n_scans,
                qubit_ids: &r.manifest.qubit_ids,
                efficiency: &r.efficiency,
                n_events: r.events.len(),
                rates: &r.rates,
                pair_rates: r
                    .pair_summary
                    .iter()
                    .map(|p| PairEntry {
                        rate: &p.rate,
                        separation_um: p.separation,
                        accidental_mhz: p.accidental,
                    })
                    .collect(),
            })
            .collect(),
        lmo_ratio: excess.as_ref().map(|(r, _)| r),
        excess: excess.as_ref().map(|(_, s)| s),
    };
    write(io::write_json(&out.join("report.json"), &report))?;
    Ok(())
}
