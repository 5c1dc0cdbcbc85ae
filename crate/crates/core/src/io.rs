//! File formats: network JSON, operating points, linear solutions, load
//! profiles (CSV), scenarios, and simulation/VVC reports.
//!
//! Emitted files are canonical: struct fields keep a fixed order and every
//! float is written as a fixed 17-significant-digit decimal, so doubles
//! round-trip exactly and repeated runs are byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::load::{DeltaPair, LoadSet};
use crate::network::{Bases, Network, Phase};
use crate::sim::{SimulationReport, StepRecord};
use crate::sweep::OperatingPoint;
use crate::vvc::VvcReport;
use crate::C64;

/// Fixed 17-significant-digit float formatting used in all emitted files.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Units {
    #[default]
    #[serde(rename = "per-unit")]
    PerUnit,
    #[serde(rename = "ohms")]
    Ohms,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub bases: Bases,
    #[serde(default)]
    pub units: Units,
    pub buses: Vec<BusSpec>,
    pub segments: Vec<SegmentSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slack: Option<SlackSpec>,
    #[serde(default)]
    pub loads: Vec<LoadSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BusSpec {
    pub id: usize,
    pub phases: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub from: usize,
    pub to: usize,
    pub phases: String,
    /// Row-major resistance matrix, ohms or per-unit per `units`.
    pub r: Vec<Vec<f64>>,
    /// Row-major reactance matrix.
    pub x: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlackSpec {
    pub bus: usize,
    pub voltage: Vec<PolarSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolarSpec {
    pub mag: f64,
    pub angle_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoadKind {
    #[serde(rename = "wye")]
    Wye,
    #[serde(rename = "delta")]
    Delta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadSpec {
    pub bus: usize,
    #[serde(rename = "type")]
    pub kind: LoadKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub connections: Option<Vec<String>>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

/// Per-phase-node voltage plus per-circuit flows; the output of
/// `solve-exact` and the measurement input consumed by `solve-linear`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OperatingPointFile {
    pub nodes: Vec<NodeVoltage>,
    pub circuits: Vec<CircuitFlow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeVoltage {
    pub bus: usize,
    pub phase: Phase,
    pub v_mag: f64,
    pub v_angle_deg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CircuitFlow {
    pub to_bus: usize,
    pub phase: Phase,
    pub p: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearSolutionFile {
    pub nodes: Vec<NodeSolution>,
    pub circuits: Vec<CircuitFlow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeSolution {
    pub bus: usize,
    pub phase: Phase,
    pub v_sq: f64,
    pub v_mag: f64,
}

/// Scenario file: measurement/failure models, update cadence, and (for the
/// `vvc` subcommand) the PV fleet and controller settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dt")]
    pub dt_seconds: f64,
    #[serde(default = "default_update_every")]
    pub update_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measurement: Option<MeasurementSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fleet: Option<FleetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<ControllerSpec>,
}

fn default_dt() -> f64 {
    60.0
}

fn default_update_every() -> usize {
    1
}

/// `"all"` or an explicit list of bus ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScopeSpec {
    Keyword(String),
    Buses(Vec<usize>),
}

impl Default for ScopeSpec {
    fn default() -> Self {
        ScopeSpec::Keyword("all".into())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasurementSpec {
    pub noise_sigma: f64,
    #[serde(default)]
    pub noisy_buses: ScopeSpec,
    #[serde(default)]
    pub windows: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureSpec {
    #[serde(default)]
    pub failed_buses: ScopeSpec,
    #[serde(default)]
    pub windows: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FleetSpec {
    pub nodes: Vec<FleetNodeSpec>,
    /// Reactive bound per phase node, per-unit (applied as `[-q, +q]` when
    /// only `q_max` is given).
    pub q_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_min: Option<f64>,
    /// Active generation per phase node before profile scaling, per-unit.
    pub p_g_base: f64,
    /// Per-step scale factors; the last entry repeats past the end.
    pub p_g_profile: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FleetNodeSpec {
    pub bus: usize,
    pub phases: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerSpec {
    pub mode: ControllerMode,
    pub alpha: f64,
    #[serde(default = "default_opf_period")]
    pub opf_period: usize,
    #[serde(default = "default_iters")]
    pub iters_per_step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControllerMode {
    #[serde(rename = "online")]
    Online,
    #[serde(rename = "offline")]
    Offline,
}

fn default_opf_period() -> usize {
    1
}

fn default_iters() -> usize {
    1
}

// ---------------------------------------------------------------------------
// Canonical JSON
// ---------------------------------------------------------------------------

/// Pretty JSON with every float as a fixed 17-significant-digit decimal.
struct CanonicalFormatter {
    inner: serde_json::ser::PrettyFormatter<'static>,
}

impl serde_json::ser::Formatter for CanonicalFormatter {
    fn write_f64<W: ?Sized + std::io::Write>(
        &mut self,
        writer: &mut W,
        value: f64,
    ) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn begin_array<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.begin_array(w)
    }
    fn end_array<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_array(w)
    }
    fn begin_array_value<W: ?Sized + std::io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> std::io::Result<()> {
        self.inner.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_array_value(w)
    }
    fn begin_object<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.begin_object(w)
    }
    fn end_object<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_object(w)
    }
    fn begin_object_key<W: ?Sized + std::io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> std::io::Result<()> {
        self.inner.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_object_value(w)
    }
}

/// Serializes to canonical JSON (fixed field order, 17-digit floats, final
/// newline).
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let fmt = CanonicalFormatter {
        inner: serde_json::ser::PrettyFormatter::new(),
    };
    let mut ser = serde_json::Serializer::with_formatter(&mut out, fmt);
    value.serialize(&mut ser)?;
    out.push(b'\n');
    String::from_utf8(out).map_err(|e| Error::parse(e.to_string()))
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_canonical_json(value)?)?;
    Ok(())
}

pub fn read_json_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// Operating points and linear solutions
// ---------------------------------------------------------------------------

/// Full snapshot (head included) of an operating point for serialization.
pub fn operating_point_to_file(net: &Network, op: &OperatingPoint) -> OperatingPointFile {
    let mut nodes = Vec::new();
    for p in net.bus_phases(0).iter() {
        let v = op.v0[net.bus_phases(0).rank(p).unwrap()];
        nodes.push(NodeVoltage {
            bus: 0,
            phase: p,
            v_mag: v.norm(),
            v_angle_deg: v.arg().to_degrees(),
        });
    }
    for (idx, &(bus, phase)) in net.node_labels().iter().enumerate() {
        let v = op.v_complex[idx];
        nodes.push(NodeVoltage {
            bus,
            phase,
            v_mag: v.norm(),
            v_angle_deg: v.arg().to_degrees(),
        });
    }
    let circuits = net
        .node_labels()
        .iter()
        .enumerate()
        .map(|(idx, &(bus, phase))| CircuitFlow {
            to_bus: bus,
            phase,
            p: op.p_flow[idx],
            q: op.q_flow[idx],
        })
        .collect();
    OperatingPointFile { nodes, circuits }
}

/// Reconstructs the complex voltage snapshot `(v0, v)` from a measurement
/// file. Every phase node of every bus must appear exactly once.
pub fn voltages_from_file(
    net: &Network,
    file: &OperatingPointFile,
) -> Result<(DVector<C64>, DVector<C64>)> {
    let n0 = net.bus_phases(0).len();
    let mut v0: Vec<Option<C64>> = vec![None; n0];
    let mut v: Vec<Option<C64>> = vec![None; net.m()];
    for node in &file.nodes {
        let value = C64::from_polar(node.v_mag, node.v_angle_deg.to_radians());
        let slot = if node.bus == 0 {
            let rank = net.bus_phases(0).rank(node.phase).ok_or(Error::MissingPhase {
                bus: 0,
                phase: node.phase.letter(),
                what: "operating-point node",
            })?;
            &mut v0[rank]
        } else {
            let idx = node
                .bus
                .checked_sub(1)
                .and_then(|_| net.node_index(node.bus, node.phase))
                .ok_or(Error::parse(format!(
                    "operating point references unknown phase node {}{}",
                    node.bus, node.phase
                )))?;
            &mut v[idx]
        };
        if slot.is_some() {
            return Err(Error::parse(format!(
                "duplicate operating-point node {}{}",
                node.bus, node.phase
            )));
        }
        *slot = Some(value);
    }
    let v0 = v0
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or(Error::parse("operating point misses head-bus nodes"))?;
    let v = v
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or(Error::parse("operating point misses phase nodes"))?;
    Ok((DVector::from_vec(v0), DVector::from_vec(v)))
}

pub fn linear_solution_to_file(
    net: &Network,
    sol: &crate::linear::LinearSolution,
) -> LinearSolutionFile {
    let nodes = net
        .node_labels()
        .iter()
        .enumerate()
        .map(|(idx, &(bus, phase))| NodeSolution {
            bus,
            phase,
            v_sq: sol.v_sq[idx],
            v_mag: sol.v_sq[idx].max(0.0).sqrt(),
        })
        .collect();
    let circuits = net
        .node_labels()
        .iter()
        .enumerate()
        .map(|(idx, &(bus, phase))| CircuitFlow {
            to_bus: bus,
            phase,
            p: sol.p_flow[idx],
            q: sol.q_flow[idx],
        })
        .collect();
    LinearSolutionFile { nodes, circuits }
}

// ---------------------------------------------------------------------------
// Load profiles (CSV)
// ---------------------------------------------------------------------------

/// One row of a profile file: `step,bus,kind,phase_or_pair,p,q`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileRow {
    pub step: usize,
    pub bus: usize,
    pub kind: String,
    pub phase_or_pair: String,
    pub p: f64,
    pub q: f64,
}

/// Resolves a profile into per-step load sets. Each step starts from the
/// network's base loads; rows override single (bus, kind, phase) entries.
pub fn resolve_profile<R: Read>(net: &Network, reader: R) -> Result<Vec<LoadSet>> {
    let mut csv_reader = csv::Reader::from_reader(reader);
    let mut rows: Vec<ProfileRow> = Vec::new();
    for row in csv_reader.deserialize() {
        rows.push(row?);
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("profile has no rows".into()));
    }
    let horizon = rows.iter().map(|r| r.step).max().unwrap() + 1;
    let mut steps: Vec<LoadSet> = vec![net.base_loads().clone(); horizon];
    for row in rows {
        if row.bus == 0 || row.bus >= net.n_buses() {
            return Err(Error::UnknownBus { bus: row.bus });
        }
        let target = &mut steps[row.step];
        match row.kind.as_str() {
            "wye" => {
                let phase = Phase::from_letter(
                    row.phase_or_pair
                        .chars()
                        .next()
                        .filter(|_| row.phase_or_pair.len() == 1)
                        .ok_or_else(|| {
                            Error::parse(format!("bad wye phase '{}'", row.phase_or_pair))
                        })?,
                )?;
                let rank = net.bus_phases(row.bus).rank(phase).ok_or(Error::MissingPhase {
                    bus: row.bus,
                    phase: phase.letter(),
                    what: "profile row",
                })?;
                target.wye[row.bus - 1][rank] = C64::new(row.p, row.q);
            }
            "delta" => {
                let pair = DeltaPair::parse(&row.phase_or_pair)?;
                let rank = net.delta_conns(row.bus).rank(pair).ok_or_else(|| {
                    Error::parse(format!(
                        "profile sets undeclared delta connection {} at bus {}",
                        pair.name(),
                        row.bus
                    ))
                })?;
                target.delta[row.bus - 1][rank] = C64::new(row.p, row.q);
            }
            other => return Err(Error::parse(format!("bad load kind '{other}'"))),
        }
    }
    Ok(steps)
}

pub fn write_profile<W: Write>(writer: W, rows: &[ProfileRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["step", "bus", "kind", "phase_or_pair", "p", "q"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.bus.to_string(),
            r.kind.clone(),
            r.phase_or_pair.clone(),
            fmt_f64(r.p),
            fmt_f64(r.q),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Reports (CSV)
// ---------------------------------------------------------------------------

pub const MODEL_ONLINE: &str = "online";
pub const MODEL_LOSSLESS: &str = "lossless";

/// Writes the per-step rows of a simulation report followed by a summary
/// block (`#summary,...` lines with per-model mean MAPE values).
pub fn write_sim_report<W: Write>(mut writer: W, report: &SimulationReport) -> Result<()> {
    writeln!(writer, "step,model,v_mape_pct,p_mape_pct,q_mape_pct")?;
    for rec in &report.steps {
        for (model, m) in [(MODEL_ONLINE, &rec.online), (MODEL_LOSSLESS, &rec.lossless)] {
            writeln!(
                writer,
                "{},{},{},{},{}",
                rec.step,
                model,
                fmt_f64(m.v_mape),
                fmt_f64(m.p_mape),
                fmt_f64(m.q_mape)
            )?;
        }
    }
    for (model, agg) in [
        (MODEL_ONLINE, &report.online_mean),
        (MODEL_LOSSLESS, &report.lossless_mean),
    ] {
        writeln!(
            writer,
            "#summary,{},{},{},{}",
            model,
            fmt_f64(agg.v_mape),
            fmt_f64(agg.p_mape),
            fmt_f64(agg.q_mape)
        )?;
    }
    Ok(())
}

/// Parsed simulation report: per-step metric rows keyed `(step, model)`.
#[derive(Debug, Clone)]
pub struct SimReportData {
    pub rows: Vec<(usize, String, [f64; 3])>,
}

pub fn read_sim_report<R: Read>(reader: R) -> Result<SimReportData> {
    let mut rows = Vec::new();
    let text = std::io::read_to_string(reader)?;
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.starts_with('#') || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::parse(format!("bad report row: '{line}'")));
        }
        let step: usize = fields[0]
            .parse()
            .map_err(|_| Error::parse(format!("bad step '{}'", fields[0])))?;
        let mut vals = [0.0; 3];
        for (k, f) in fields[2..].iter().enumerate() {
            vals[k] = f
                .parse()
                .map_err(|_| Error::parse(format!("bad value '{f}'")))?;
        }
        rows.push((step, fields[1].to_string(), vals));
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("report has no rows".into()));
    }
    Ok(SimReportData { rows })
}

/// Aggregate comparison of reports that share a step index.
#[derive(Debug, Clone)]
pub struct CompareSummary {
    /// `(label, model, mean v/p/q MAPE)` in input order.
    pub aggregates: Vec<(String, String, [f64; 3])>,
    /// `(step, label, model, v/p/q MAPE)` merged rows for plotting.
    pub per_step: Vec<(usize, String, String, [f64; 3])>,
}

pub fn compare_reports(reports: &[(String, SimReportData)]) -> Result<CompareSummary> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("no reports to compare".into()));
    }
    let step_set = |data: &SimReportData| {
        let mut steps: Vec<usize> = data.rows.iter().map(|r| r.0).collect();
        steps.sort_unstable();
        steps.dedup();
        steps
    };
    let reference = step_set(&reports[0].1);
    for (label, data) in reports.iter().skip(1) {
        if step_set(data) != reference {
            return Err(Error::StepMismatch {
                msg: format!("'{}' does not share the step index of '{}'", label, reports[0].0),
            });
        }
    }
    let mut aggregates = Vec::new();
    let mut per_step = Vec::new();
    for (label, data) in reports {
        let mut models: Vec<String> = data.rows.iter().map(|r| r.1.clone()).collect();
        models.dedup();
        models.sort();
        models.dedup();
        for model in models {
            let rows: Vec<&(usize, String, [f64; 3])> =
                data.rows.iter().filter(|r| &r.1 == &model).collect();
            let n = rows.len() as f64;
            let mut mean = [0.0; 3];
            for r in &rows {
                for k in 0..3 {
                    mean[k] += r.2[k] / n;
                }
            }
            aggregates.push((label.clone(), model.clone(), mean));
        }
        for r in &data.rows {
            per_step.push((r.0, label.clone(), r.1.clone(), r.2));
        }
    }
    per_step.sort_by(|a, b| (a.0, &a.1, &a.2).cmp(&(b.0, &b.1, &b.2)));
    Ok(CompareSummary {
        aggregates,
        per_step,
    })
}

/// Writes a VVC report: objective per step plus the controller outputs.
pub fn write_vvc_report<W: Write>(
    mut writer: W,
    net: &Network,
    fleet_nodes: &[usize],
    report: &VvcReport,
) -> Result<()> {
    let mut header = String::from("step,objective");
    for &node in fleet_nodes {
        let (bus, phase) = net.node_labels()[node];
        header.push_str(&format!(",q_g_{bus}{phase}"));
    }
    writeln!(writer, "{header}")?;
    for rec in &report.steps {
        let mut line = format!("{},{}", rec.step, fmt_f64(rec.objective));
        for q in &rec.q_g {
            line.push(',');
            line.push_str(&fmt_f64(*q));
        }
        writeln!(writer, "{line}")?;
    }
    writeln!(writer, "#summary,mean_objective,{}", fmt_f64(report.mean_objective()))?;
    Ok(())
}

/// Writes compare output: aggregate table then per-step rows.
pub fn write_compare<W: Write>(mut writer: W, summary: &CompareSummary) -> Result<()> {
    writeln!(writer, "#aggregate,label,model,v_mape_pct,p_mape_pct,q_mape_pct")?;
    for (label, model, vals) in &summary.aggregates {
        writeln!(
            writer,
            "#aggregate,{},{},{},{},{}",
            label,
            model,
            fmt_f64(vals[0]),
            fmt_f64(vals[1]),
            fmt_f64(vals[2])
        )?;
    }
    writeln!(writer, "step,label,model,v_mape_pct,p_mape_pct,q_mape_pct")?;
    for (step, label, model, vals) in &summary.per_step {
        writeln!(
            writer,
            "{},{},{},{},{},{}",
            step,
            label,
            model,
            fmt_f64(vals[0]),
            fmt_f64(vals[1]),
            fmt_f64(vals[2])
        )?;
    }
    Ok(())
}

pub fn sim_report_rows(report: &SimulationReport) -> &[StepRecord] {
    &report.steps
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture;
    use crate::network::build_network;

    #[test]
    fn canonical_json_round_trips_byte_identically() {
        let spec = fixture::appendix_b();
        let text = to_canonical_json(&spec).unwrap();
        let parsed: NetworkSpec = serde_json::from_str(&text).unwrap();
        let text2 = to_canonical_json(&parsed).unwrap();
        assert_eq!(text, text2);
        assert!(text.contains("e0") || text.contains("e-"), "floats use scientific form");
    }

    #[test]
    fn profile_rows_override_base_loads() {
        let net = build_network(&fixture::appendix_b()).unwrap();
        let csv = "step,bus,kind,phase_or_pair,p,q\n0,1,wye,a,0.5,0.25\n1,2,delta,ab,0.07,0.01\n";
        let steps = resolve_profile(&net, csv.as_bytes()).unwrap();
        assert_eq!(steps.len(), 2);
        assert_eq!(steps[0].wye[0][0], C64::new(0.5, 0.25));
        // Untouched entries keep the base value.
        assert_eq!(steps[1].wye[0][0], net.base_loads().wye[0][0]);
        assert_eq!(steps[1].delta[1][0], C64::new(0.07, 0.01));
    }

    #[test]
    fn profile_rejects_undeclared_delta() {
        // Bus 2 declares only the ab connection.
        let net = build_network(&fixture::appendix_b()).unwrap();
        let csv = "step,bus,kind,phase_or_pair,p,q\n0,2,delta,bc,0.1,0.0\n";
        let r = resolve_profile(&net, csv.as_bytes());
        assert!(r.is_err());
    }

    #[test]
    fn operating_point_file_round_trip() {
        let net = build_network(&fixture::appendix_b()).unwrap();
        let op = crate::sweep::solve_exact(&net, net.base_loads(), Default::default()).unwrap();
        let file = operating_point_to_file(&net, &op);
        let (v0, v) = voltages_from_file(&net, &file).unwrap();
        assert!((v0 - &op.v0).camax() < 1e-14);
        assert!((v - &op.v_complex).camax() < 1e-14);
    }

    #[test]
    fn compare_detects_step_mismatch() {
        let a = SimReportData {
            rows: vec![(0, "online".into(), [0.1, 0.2, 0.3])],
        };
        let b = SimReportData {
            rows: vec![(1, "online".into(), [0.1, 0.2, 0.3])],
        };
        let r = compare_reports(&[("a".into(), a.clone()), ("b".into(), b)]);
        assert!(matches!(r, Err(Error::StepMismatch { .. })));
        let ok = compare_reports(&[("a".into(), a.clone()), ("a2".into(), a)]).unwrap();
        assert_eq!(ok.aggregates.len(), 2);
    }
}
