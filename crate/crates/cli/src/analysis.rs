//! Stages shared by the single-step commands and the pipeline.

use std::collections::BTreeMap;
use std::path::Path;

use chargejump::io;
use chargejump::rates::{
    corrected_rate, format_cell, pair_coincidences, pair_rate, pooled_rate,
    stochastic_coincidence_rate, CoincidencePair, Exposure, RateEstimate, TableRow,
};
use chargejump::synth::{
    qubit_seed, run_efficiency_mc, CurveSource, InjectionPlan, McOptions, McOutcome, NoiseModel,
};
use chargejump::template::{build_template, screen_scans, Template, TemplateOptions};
use chargejump::{ChargeScan, JumpEvent, ScanDetector};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::failure::{Failure, Outcome, Stage};

pub fn read_scan_files(files: &[impl AsRef<Path>]) -> Outcome<Vec<ChargeScan>> {
    let mut out = Vec::new();
    for f in files {
        out.extend(io::read_scans(f.as_ref()).stage("read scans")?);
    }
    Ok(out)
}

pub fn read_templates(files: &[impl AsRef<Path>]) -> Outcome<Vec<Template>> {
    files
        .iter()
        .map(|f| io::read_template(f.as_ref()).stage("read template"))
        .collect()
}

/// The template for `qubit` under `tag`: an exact tag match, otherwise the
/// only template supplied for that qubit.
pub fn pick_template<'a>(templates: &'a [Template], qubit: u8, tag: &str) -> Option<&'a Template> {
    let mine: Vec<&Template> = templates.iter().filter(|t| t.qubit_id == qubit).collect();
    mine.iter()
        .find(|t| t.shield_config_tag == tag)
        .copied()
        .or(if mine.len() == 1 { Some(mine[0]) } else { None })
}

pub fn qubit_ids(scans: &[ChargeScan]) -> Vec<u8> {
    let mut ids: Vec<u8> = scans.iter().map(|s| s.qubit_id).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Builds a template for `qubit` from the jump-free subset of `scans`.
pub fn build_from_scans(
    cfg: &RunConfig,
    scans: &[ChargeScan],
    qubit: u8,
    tag: &str,
) -> Outcome<(Template, usize)> {
    let stage = format!("build-template (qubit {qubit}, {tag})");
    let opts = TemplateOptions {
        sigma_floor: cfg.template.sigma_floor,
        max_internal_jump: cfg.template.max_internal_jump,
        shield_config_tag: tag.to_string(),
        theta_step: cfg.detection_for(qubit)?.theta_step,
        ..TemplateOptions::default()
    };
    let mine: Vec<ChargeScan> = scans
        .iter()
        .filter(|s| s.qubit_id == qubit)
        .cloned()
        .collect();
    if mine.is_empty() {
        return Err(Failure::data(&stage, "no scans for this qubit"));
    }
    let screened = screen_scans(&mine, &opts);
    let rejected = screened.rejected.len();
    let t = build_template(&screened.admitted, &opts).stage(&stage)?;
    Ok((t, rejected))
}

/// Runs the jump finder over every scan. Events come back in input order.
pub fn detect_all(
    cfg: &RunConfig,
    scans: &[ChargeScan],
    templates: &BTreeMap<u8, Template>,
) -> Outcome<Vec<JumpEvent>> {
    let mut detectors = BTreeMap::new();
    for q in qubit_ids(scans) {
        let t = templates
            .get(&q)
            .ok_or_else(|| Failure::analysis("find-jumps", format!("no template for qubit {q}")))?;
        let first = scans
            .iter()
            .find(|s| s.qubit_id == q)
            .expect("qubit has scans");
        let det = ScanDetector::new(t, &first.biases(), &cfg.detection_for(q)?)
            .stage(&format!("find-jumps (qubit {q})"))?;
        detectors.insert(q, det);
    }
    let per_scan: Vec<Vec<JumpEvent>> = scans
        .par_iter()
        .map(|s| {
            detectors[&s.qubit_id]
                .detect(s)
                .map(|d| d.events)
                .stage(&format!(
                    "find-jumps (qubit {}, scan {})",
                    s.qubit_id, s.scan_id
                ))
        })
        .collect::<Outcome<_>>()?;
    Ok(per_scan.into_iter().flatten().collect())
}

/// Detection-efficiency Monte Carlo with the template as the clean curve.
pub fn efficiency_mc(
    cfg: &RunConfig,
    template: &Template,
    tag: &str,
    n_scans: usize,
) -> Outcome<McOutcome> {
    let q = template.qubit_id;
    let e = &cfg.efficiency;
    let sigma = e.sigma_p1.unwrap_or_else(|| {
        let s = template.sigmas();
        s.iter().sum::<f64>() / s.len() as f64
    });
    let seed = qubit_seed(cfg.seed, q);
    let noise = NoiseModel::white(sigma, seed.wrapping_add(1));
    let plan = InjectionPlan {
        rate_mhz: e.rate_mhz,
        size_law: e.size_law,
        n_scans,
        seed,
    };
    let opts = McOptions {
        window: e.window,
        n_size_bins: e.n_size_bins,
        n_replica_sets: e.n_replica_sets,
        config_tag: tag.to_string(),
        phase_seed: seed.wrapping_add(2),
    };
    run_efficiency_mc(
        template,
        CurveSource::Template(template),
        &cfg.schedule,
        &noise,
        &plan,
        &cfg.detection_for(q)?,
        &opts,
    )
    .stage(&format!("efficiency (qubit {q}, {tag})"))
}

/// Events that count towards rates: reportable and inside the magnitude window.
pub fn counted(cfg: &RunConfig, events: &[JumpEvent]) -> Vec<JumpEvent> {
    let mag = cfg.coincidence.magnitudes();
    events
        .iter()
        .filter(|e| e.is_reportable() && mag.contains(e.delta_q))
        .cloned()
        .collect::<Vec<_>>()
}

/// Per-qubit corrected rates labelled `Q<id>`, then the pooled `Average`.
pub fn qubit_rates(
    cfg: &RunConfig,
    events: &[JumpEvent],
    qubits: &[u8],
    livetime: f64,
    efficiency: &BTreeMap<u8, f64>,
) -> Outcome<Vec<RateEstimate>> {
    let counted = counted(cfg, events);
    let mut out = Vec::new();
    let mut exposures = Vec::new();
    for &q in qubits {
        let eff = *efficiency
            .get(&q)
            .ok_or_else(|| Failure::usage("rates", format!("no efficiency for qubit {q}")))?;
        let n = counted.iter().filter(|e| e.qubit_id == q).count() as u64;
        out.push(
            corrected_rate(n, livetime, eff, cfg.coverage)
                .stage("rates")?
                .with_label(format!("Q{q}")),
        );
        exposures.push(Exposure {
            n_events: n,
            livetime,
            efficiency: eff,
        });
    }
    if !exposures.is_empty() {
        out.push(
            pooled_rate(&exposures, cfg.coverage)
                .stage("rates")?
                .with_label("Average"),
        );
    }
    Ok(out)
}

/// Rate of one qubit pair with the accidental background expected from the
/// single-qubit rates.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSummary {
    pub rate: RateEstimate,
    pub separation: Option<f64>,
    pub accidental: f64,
}

pub fn coincidences(
    cfg: &RunConfig,
    events: &[JumpEvent],
    qubits: &[u8],
    livetime: f64,
    efficiency: &BTreeMap<u8, f64>,
) -> Outcome<(Vec<CoincidencePair>, Vec<PairSummary>)> {
    let c = &cfg.coincidence;
    let counted = counted(cfg, events);
    let positions = cfg.positions();
    let pairs = pair_coincidences(&counted, c.window_s, c.magnitudes(), &positions);
    let singles = qubit_rates(cfg, events, qubits, livetime, efficiency)?;
    let mut summary = Vec::new();
    for (i, &a) in qubits.iter().enumerate() {
        for (j, &b) in qubits.iter().enumerate().skip(i + 1) {
            let n = pairs
                .iter()
                .filter(|p| p.qubit_a == a && p.qubit_b == b)
                .count() as u64;
            let rate = pair_rate(
                n,
                livetime,
                efficiency[&a],
                efficiency[&b],
                c.pair_efficiency,
                cfg.coverage,
            )
            .stage("coincidence")?
            .with_label(format!("Q{a}-Q{b}"));
            let separation = match (positions.get(&a), positions.get(&b)) {
                (Some(pa), Some(pb)) => Some((pa[0] - pb[0]).hypot(pa[1] - pb[1])),
                _ => None,
            };
            summary.push(PairSummary {
                rate,
                separation,
                accidental: stochastic_coincidence_rate(
                    singles[i].rate,
                    singles[j].rate,
                    c.window_s,
                ),
            });
        }
    }
    Ok((pairs, summary))
}

/// Rows of a rate table, one column per dataset.
pub fn rate_rows(labels: &[String], columns: &[Vec<RateEstimate>]) -> Vec<TableRow> {
    labels
        .iter()
        .map(|l| {
            let cells = columns
                .iter()
                .map(|col| {
                    col.iter()
                        .find(|r| &r.label == l)
                        .map(format_cell)
                        .unwrap_or_else(|| "-".into())
                })
                .collect();
            TableRow::new(l.clone(), cells)
        })
        .collect()
}

pub fn pair_rows(columns: &[Vec<PairSummary>]) -> Vec<TableRow> {
    let Some(first) = columns.first() else {
        return Vec::new();
    };
    first
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let mut cells = vec![p
                .separation
                .map(|d| format!("{d:.0}"))
                .unwrap_or_else(|| "-".into())];
            for col in columns {
                cells.push(format_cell(&col[k].rate));
                cells.push(format!("{:.4}", col[k].accidental));
            }
            TableRow::new(p.rate.label.clone(), cells)
        })
        .collect()
}

/// Parses repeated `QUBIT=VALUE` flags.
pub fn parse_assignments(items: &[String]) -> Outcome<BTreeMap<u8, f64>> {
    items
        .iter()
        .map(|s| {
            let (q, v) = s.split_once('=').ok_or_else(|| {
                Failure::usage("arguments", format!("expected QUBIT=VALUE, got {s}"))
            })?;
            let q: u8 = q
                .trim()
                .trim_start_matches(['Q', 'q'])
                .parse()
                .map_err(|_| Failure::usage("arguments", format!("bad qubit id in {s}")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Failure::usage("arguments", format!("bad value in {s}")))?;
            Ok((q, v))
        })
        .collect()
}

/// Efficiencies from flags, falling back to the config's entries for `tag`.
pub fn efficiencies(
    cfg: &RunConfig,
    flags: &[String],
    qubits: &[u8],
    tag: &str,
) -> Outcome<BTreeMap<u8, f64>> {
    let mut out = parse_assignments(flags)?;
    for &q in qubits {
        if out.contains_key(&q) {
            continue;
        }
        let e = cfg
            .qubit(q)
            .and_then(|s| s.efficiency.get(tag))
            .ok_or_else(|| {
                Failure::usage(
                    "efficiency",
                    format!("no efficiency for qubit {q} under {tag}; pass --efficiency {q}=E"),
                )
            })?;
        out.insert(q, *e);
    }
    for (q, e) in &out {
        if !(*e > 0.0 && *e <= 1.0) {
            return Err(Failure::usage(
                "efficiency",
                format!("qubit {q}: efficiency {e} not in (0, 1]"),
            ));
        }
    }
    Ok(out)
}
