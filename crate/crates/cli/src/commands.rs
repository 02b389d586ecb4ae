use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chargejump::io;
use chargejump::rates::{
    lmo_flux_ratio, render_table, solve_excess_rate, ExcessSolution, FluxRatio, RateEstimate,
    TableRow,
};
use chargejump::synth::{simulate_dataset, CurveSource, DatasetPlan, QubitSim};
use chargejump::template::Template;
use clap::{Args, Subcommand};

use crate::analysis::{self, PairSummary};
use crate::config::RunConfig;
use crate::failure::{Failure, Outcome, Stage};

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset: scans, injected jumps and a manifest.
    Simulate(SimulateArgs),
    /// Average jump-free scans into one-period templates.
    BuildTemplate(BuildTemplateArgs),
    /// Run the jump finder over scans.
    FindJumps(FindJumpsArgs),
    /// Estimate detection efficiency by injecting jumps into simulated scans.
    Efficiency(EfficiencyArgs),
    /// Efficiency-corrected per-qubit jump rates.
    Rates(RatesArgs),
    /// Cross-qubit coincidences and pair rates.
    Coincidence(CoincidenceArgs),
    /// Gamma flux ratio between two spectra.
    LmoRatio(LmoRatioArgs),
    /// Split measured rates into gamma-induced and excess parts.
    Excess(ExcessArgs),
    /// Templates, jumps, efficiencies, rates, coincidences and the excess
    /// decomposition for one or more datasets.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scans per qubit.
    #[arg(long)]
    pub n_scans: Option<usize>,
    /// Templates to use as the clean curves instead of the analytic model.
    #[arg(long)]
    pub template: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildTemplateArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub scans: Vec<PathBuf>,
    /// Only this qubit; every qubit in the scans by default.
    #[arg(long)]
    pub qubit: Option<u8>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FindJumpsArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub scans: Vec<PathBuf>,
    /// Template files; added to those named in the config.
    #[arg(long, num_args = 1..)]
    pub template: Vec<PathBuf>,
    /// Event CSV; a JSON-lines copy is written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EfficiencyArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub template: Vec<PathBuf>,
    #[arg(long)]
    pub n_scans: Option<usize>,
    /// Noise of the simulated scans.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub events: Vec<PathBuf>,
    /// Hours.
    #[arg(long)]
    pub livetime: f64,
    /// `QUBIT=EFFICIENCY`, repeatable; the config supplies the rest.
    #[arg(long)]
    pub efficiency: Vec<String>,
    /// Qubits to report; those in the config by default.
    #[arg(long, num_args = 1..)]
    pub qubits: Vec<u8>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RatesArgs {
    #[command(flatten)]
    pub count: CountArgs,
}

#[derive(Debug, Args)]
pub struct CoincidenceArgs {
    #[command(flatten)]
    pub count: CountArgs,
    /// Seconds.
    #[arg(long)]
    pub window: Option<f64>,
}

#[derive(Debug, Args)]
pub struct LmoRatioArgs {
    /// Spectrum CSV of the higher-flux configuration.
    #[arg(long)]
    pub open: PathBuf,
    /// Spectrum CSV of the lower-flux configuration.
    #[arg(long)]
    pub closed: PathBuf,
    /// keV.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Output JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExcessArgs {
    /// Rate CSV of the higher-flux configuration.
    #[arg(long, conflicts_with = "open")]
    pub open_rates: Option<PathBuf>,
    #[arg(long, conflicts_with = "closed")]
    pub closed_rates: Option<PathBuf>,
    /// Row of the rate CSVs to use.
    #[arg(long, default_value = "Average")]
    pub row: String,
    /// `RATE,LOW,HIGH` in mHz.
    #[arg(long)]
    pub open: Option<String>,
    #[arg(long)]
    pub closed: Option<String>,
    /// Flux ratio JSON from `lmo-ratio`.
    #[arg(long, conflicts_with = "a_lmo")]
    pub ratio: Option<PathBuf>,
    #[arg(long, requires = "a_lmo_sigma")]
    pub a_lmo: Option<f64>,
    #[arg(long)]
    pub a_lmo_sigma: Option<f64>,
    /// Output JSON; a text table is written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Dataset manifests; the config's `paths.datasets` by default.
    #[arg(long, num_args = 1..)]
    pub dataset: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cfg: &RunConfig, cmd: &Command) -> Outcome<()> {
    match cmd {
        Command::Simulate(a) => simulate(cfg, a),
        Command::BuildTemplate(a) => build_template(cfg, a),
        Command::FindJumps(a) => find_jumps(cfg, a),
        Command::Efficiency(a) => efficiency(cfg, a),
        Command::Rates(a) => rates(cfg, a),
        Command::Coincidence(a) => coincidence(cfg, a),
        Command::LmoRatio(a) => lmo_ratio(cfg, a),
        Command::Excess(a) => excess(cfg, a),
        Command::Pipeline(a) => crate::pipeline::run(cfg, a),
    }
}

fn write<T>(r: Result<T, chargejump::error::FormatError>) -> Outcome<T> {
    r.map_err(|e| Failure::data("write", e))
}

pub fn template_file(dir: &Path, qubit: u8, tag: &str) -> PathBuf {
    dir.join(format!("template_q{qubit}_{tag}.json"))
}

fn simulate(cfg: &RunConfig, a: &SimulateArgs) -> Outcome<()> {
    let tag = &cfg.shield_config_tag;
    let mut templates = analysis::read_templates(&cfg.paths.templates)?;
    templates.extend(analysis::read_templates(&a.template)?);
    let curve = cfg.curve();
    let qubits: Vec<QubitSim> = cfg
        .qubits
        .iter()
        .filter(|q| cfg.schedule.qubit_order.contains(&q.id))
        .map(|q| QubitSim {
            id: q.id,
            sigma_p1: q.sigma_p1,
            rate_mhz: q.rate_mhz,
        })
        .collect();
    if qubits.is_empty() {
        return Err(Failure::usage(
            "simulate",
            "no configured qubit is in the schedule",
        ));
    }
    let sources: Vec<(u8, CurveSource<'_>)> = qubits
        .iter()
        .map(|q| {
            let src = match analysis::pick_template(&templates, q.id, tag) {
                Some(t) => CurveSource::Template(t),
                None => CurveSource::Model(&curve),
            };
            (q.id, src)
        })
        .collect();
    let s = &cfg.simulation;
    let plan = DatasetPlan {
        n_scans: a.n_scans.unwrap_or(s.n_scans),
        seed: cfg.seed,
        size_law: s.size_law,
        ar1: s.ar1,
        shared_rate_mhz: s.shared_rate_mhz,
        shared_qubits: s.shared_qubits.clone(),
    };
    let run = simulate_dataset(&sources, &cfg.schedule, &qubits, &plan).stage("simulate")?;
    let scans: Vec<_> = run.iter().map(|s| s.scan.clone()).collect();
    let scan_name = format!("scans_{tag}.jsonl");
    write(io::write_scans_jsonl(&a.out.join(&scan_name), &scans))?;
    write(io::write_injections_csv(
        &a.out.join(format!("injections_{tag}.csv")),
        &run,
    ))?;
    let manifest = io::DatasetManifest {
        tag: tag.clone(),
        scan_files: vec![scan_name.into()],
        livetime: plan.n_scans as f64 * cfg.schedule.scan_duration() / 3600.0,
        qubit_ids: qubits.iter().map(|q| q.id).collect(),
    };
    let mpath = a.out.join(format!("manifest_{tag}.json"));
    write(manifest.save(&mpath))?;
    let n_inj: usize = run.iter().map(|s| s.injections.len()).sum();
    println!(
        "simulated {} scans x {} qubits ({:.3} h), {} injected jumps -> {}",
        plan.n_scans,
        qubits.len(),
        manifest.livetime,
        n_inj,
        mpath.display()
    );
    Ok(())
}

fn build_template(cfg: &RunConfig, a: &BuildTemplateArgs) -> Outcome<()> {
    let tag = &cfg.shield_config_tag;
    let scans = analysis::read_scan_files(&a.scans)?;
    let ids = match a.qubit {
        Some(q) => vec![q],
        None => analysis::qubit_ids(&scans),
    };
    let mut built = Vec::new();
    for q in ids {
        let (t, rejected) = analysis::build_from_scans(cfg, &scans, q, tag)?;
        println!(
            "qubit {q}: template from {} scans, {rejected} rejected",
            t.n_source_scans
        );
        built.push(t);
    }
    for t in &built {
        write(io::write_template(
            &template_file(&a.out, t.qubit_id, tag),
            t,
        ))?;
    }
    Ok(())
}

fn templates_by_qubit(
    cfg: &RunConfig,
    extra: &[PathBuf],
    qubits: &[u8],
) -> Outcome<BTreeMap<u8, Template>> {
    let mut all = analysis::read_templates(&cfg.paths.templates)?;
    all.extend(analysis::read_templates(extra)?);
    let mut out = BTreeMap::new();
    for &q in qubits {
        let t = analysis::pick_template(&all, q, &cfg.shield_config_tag).ok_or_else(|| {
            Failure::usage(
                "find-jumps",
                format!("no template for qubit {q} under {}", cfg.shield_config_tag),
            )
        })?;
        out.insert(q, t.clone());
    }
    Ok(out)
}

fn find_jumps(cfg: &RunConfig, a: &FindJumpsArgs) -> Outcome<()> {
    let scans = analysis::read_scan_files(&a.scans)?;
    let ids = analysis::qubit_ids(&scans);
    cfg.require_qubits(ids.iter().copied())?;
    let templates = templates_by_qubit(cfg, &a.template, &ids)?;
    let events = analysis::detect_all(cfg, &scans, &templates)?;
    write(io::write_events_csv(&a.out, &events))?;
    write(io::write_jsonl(&a.out.with_extension("jsonl"), &events))?;
    for q in ids {
        let all = events.iter().filter(|e| e.qubit_id == q).count();
        let rep = events
            .iter()
            .filter(|e| e.qubit_id == q && e.is_reportable())
            .count();
        println!("qubit {q}: {all} events, {rep} reportable");
    }
    Ok(())
}

fn efficiency(cfg: &RunConfig, a: &EfficiencyArgs) -> Outcome<()> {
    let templates = analysis::read_templates(&a.template)?;
    let mut cfg = cfg.clone();
    if a.sigma.is_some() {
        cfg.efficiency.sigma_p1 = a.sigma;
    }
    let n = a.n_scans.unwrap_or(cfg.efficiency.n_scans);
    let mut results = Vec::new();
    for t in &templates {
        let tag = t.shield_config_tag.clone();
        let out = analysis::efficiency_mc(&cfg, t, &tag, n)?;
        let r = &out.report;
        println!(
            "qubit {} ({tag}): efficiency {:.3} ± {:.3} ({} / {} injected)",
            r.qubit_id, r.efficiency, r.sys_spread, r.n_found, r.n_injected
        );
        results.push((tag, out));
    }
    for (tag, out) in &results {
        let q = out.report.qubit_id;
        write(io::write_json(
            &a.out.join(format!("efficiency_q{q}_{tag}.json")),
            &out.report,
        ))?;
        write(io::write_truth_csv(
            &a.out.join(format!("truth_q{q}_{tag}.csv")),
            &out.truth,
        ))?;
    }
    Ok(())
}

fn read_events(files: &[PathBuf]) -> Outcome<Vec<chargejump::JumpEvent>> {
    let mut out = Vec::new();
    for f in files {
        out.extend(io::read_events(f).stage("read events")?);
    }
    Ok(out)
}

/// Events, qubit ids and per-qubit efficiencies.
type CountInputs = (Vec<chargejump::JumpEvent>, Vec<u8>, BTreeMap<u8, f64>);

fn count_inputs(cfg: &RunConfig, a: &CountArgs) -> Outcome<CountInputs> {
    let events = read_events(&a.events)?;
    let qubits = if a.qubits.is_empty() {
        cfg.qubits.iter().map(|q| q.id).collect()
    } else {
        a.qubits.clone()
    };
    let eff = analysis::efficiencies(cfg, &a.efficiency, &qubits, &cfg.shield_config_tag)?;
    Ok((events, qubits, eff))
}

pub fn rate_table(tags: &[String], livetimes: &[f64], columns: &[Vec<RateEstimate>]) -> String {
    let mut header = vec![""];
    header.extend(tags.iter().map(String::as_str));
    let mut rows = vec![TableRow::new(
        "Livetime (h)",
        livetimes.iter().map(|t| format!("{t:.3}")).collect(),
    )];
    let labels: Vec<String> = columns
        .first()
        .map(|c| c.iter().map(|r| r.label.clone()).collect())
        .unwrap_or_default();
    rows.extend(analysis::rate_rows(&labels, columns));
    render_table(&header, &rows)
}

pub fn pair_table(tags: &[String], columns: &[Vec<PairSummary>]) -> String {
    let acc: Vec<String> = tags.iter().map(|t| format!("{t} accidental")).collect();
    let mut header = vec!["Pair", "Separation (um)"];
    for (t, a) in tags.iter().zip(&acc) {
        header.push(t);
        header.push(a);
    }
    render_table(&header, &analysis::pair_rows(columns))
}

fn rates(cfg: &RunConfig, a: &RatesArgs) -> Outcome<()> {
    let a = &a.count;
    let tag = &cfg.shield_config_tag;
    let (events, qubits, eff) = count_inputs(cfg, a)?;
    let r = analysis::qubit_rates(cfg, &events, &qubits, a.livetime, &eff)?;
    let text = rate_table(
        std::slice::from_ref(tag),
        &[a.livetime],
        std::slice::from_ref(&r),
    );
    write(io::write_rates_csv(
        &a.out.join(format!("rates_{tag}.csv")),
        &r,
    ))?;
    write(io::write_text(
        &a.out.join(format!("rates_{tag}.txt")),
        &text,
    ))?;
    print!("{text}");
    Ok(())
}

fn coincidence(cfg: &RunConfig, a: &CoincidenceArgs) -> Outcome<()> {
    let mut cfg = cfg.clone();
    if let Some(w) = a.window {
        cfg.coincidence.window_s = w;
        cfg.validate()?;
    }
    let c = &a.count;
    let tag = cfg.shield_config_tag.clone();
    let (events, qubits, eff) = count_inputs(&cfg, c)?;
    let (pairs, summary) = analysis::coincidences(&cfg, &events, &qubits, c.livetime, &eff)?;
    let text = pair_table(std::slice::from_ref(&tag), std::slice::from_ref(&summary));
    let rates: Vec<RateEstimate> = summary.iter().map(|p| p.rate.clone()).collect();
    write(io::write_pairs_csv(
        &c.out.join(format!("coincidences_{tag}.csv")),
        &pairs,
    ))?;
    write(io::write_rates_csv(
        &c.out.join(format!("pair_rates_{tag}.csv")),
        &rates,
    ))?;
    write(io::write_text(
        &c.out.join(format!("pair_rates_{tag}.txt")),
        &text,
    ))?;
    print!("{text}");
    Ok(())
}

fn lmo_ratio(cfg: &RunConfig, a: &LmoRatioArgs) -> Outcome<()> {
    let so = io::read_spectrum(&a.open).stage("read spectrum")?;
    let sc = io::read_spectrum(&a.closed).stage("read spectrum")?;
    let thr = a.threshold.unwrap_or(cfg.lmo.threshold_kev);
    let r = lmo_flux_ratio(&so, &sc, thr).stage("lmo-ratio")?;
    write(io::write_json(&a.out, &r))?;
    println!(
        "A_LMO = {:.3} ± {:.3} ({} / {} counts above {thr} keV)",
        r.ratio, r.sigma, r.n_so, r.n_sc
    );
    Ok(())
}

fn parse_rate(label: &str, s: &str) -> Outcome<RateEstimate> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::usage("arguments", format!("expected RATE,LOW,HIGH, got {s}")))?;
    let [rate, ci_low, ci_high] = v[..] else {
        return Err(Failure::usage(
            "arguments",
            format!("expected RATE,LOW,HIGH, got {s}"),
        ));
    };
    if !(ci_low <= rate && rate <= ci_high) {
        return Err(Failure::usage(
            "arguments",
            format!("{s}: need LOW <= RATE <= HIGH"),
        ));
    }
    Ok(RateEstimate {
        label: label.into(),
        rate,
        ci_low,
        ci_high,
        n_events: 1,
        livetime: 1.0,
        efficiency: 1.0,
    })
}

fn rate_from_file(path: &Path, row: &str) -> Outcome<RateEstimate> {
    io::read_rates_csv(path)
        .stage("read rates")?
        .into_iter()
        .find(|r| r.label == row)
        .ok_or_else(|| Failure::data("read rates", format!("{}: no row {row}", path.display())))
}

pub fn excess_table(sol: &ExcessSolution) -> String {
    let row = |name: &str, p: &chargejump::rates::Propagated| {
        TableRow::new(
            name,
            vec![
                format!("{:.3}", p.value),
                format!("+{:.3}", p.err_high()),
                format!("-{:.3}", p.err_low()),
                format!("{:.3}", p.sigma),
            ],
        )
    };
    let mut text = render_table(
        &["mHz", "value", "upper", "lower", "sym. sigma"],
        &[
            row("R_SO_gamma", &sol.r_so_gamma),
            row("R_SC_gamma", &sol.r_sc_gamma),
            row("R_excess", &sol.r_excess),
        ],
    );
    text.push_str(&format!(
        "A_LMO = {:.3} ± {:.3}\n",
        sol.a_lmo, sol.a_lmo_sigma
    ));
    if sol.negative_excess {
        text.push_str("warning: negative excess rate\n");
    }
    text
}

fn excess(_cfg: &RunConfig, a: &ExcessArgs) -> Outcome<()> {
    let so = match (&a.open_rates, &a.open) {
        (Some(p), _) => rate_from_file(p, &a.row)?,
        (None, Some(s)) => parse_rate("SO", s)?,
        _ => return Err(Failure::usage("excess", "need --open-rates or --open")),
    };
    let sc = match (&a.closed_rates, &a.closed) {
        (Some(p), _) => rate_from_file(p, &a.row)?,
        (None, Some(s)) => parse_rate("SC", s)?,
        _ => return Err(Failure::usage("excess", "need --closed-rates or --closed")),
    };
    let ratio: FluxRatio = match (&a.ratio, a.a_lmo, a.a_lmo_sigma) {
        (Some(p), _, _) => io::read_json(p).stage("read ratio")?,
        (None, Some(r), Some(s)) => FluxRatio {
            ratio: r,
            sigma: s,
            n_so: 0,
            n_sc: 0,
            threshold: 0.0,
        },
        _ => {
            return Err(Failure::usage(
                "excess",
                "need --ratio or --a-lmo with --a-lmo-sigma",
            ))
        }
    };
    let sol = solve_excess_rate(&so, &sc, &ratio).stage("excess")?;
    let text = excess_table(&sol);
    write(io::write_json(&a.out, &sol))?;
    write(io::write_text(&a.out.with_extension("txt"), &text))?;
    print!("{text}");
    Ok(())
}
