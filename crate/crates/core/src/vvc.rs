//! Online projected-gradient Volt-VAr control.
//!
//! The controller minimizes `f(v) = 0.5 ||v - 1||^2` over the PV reactive
//! outputs by stepping along the transposed voltage/reactive sensitivity of
//! the linear model and projecting onto the box `[q_min, q_max]`. The online
//! mode takes one (configurable) iteration per step against fresh
//! measurements of the real plant; the offline mode re-solves a LinDistFlow
//! surrogate to convergence every `opf_period` steps and holds the setpoint
//! in between. Objectives are always logged from the exact plant solve.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linear::{
    assemble_compact, lindistflow_params, solve_linear, update_parameters, voltage_sensitivity,
};
use crate::load::LoadSet;
use crate::network::{incidence_blocks, Network};
use crate::sim::{apply_measurement, FailureModel, MeasurementModel, MeasurementState, TimeSeries};
use crate::sweep::{solve_exact, OperatingPoint, SweepOptions};
use crate::C64;

/// Controllable PV fleet: phase nodes, active-power profile, reactive bounds.
#[derive(Debug, Clone)]
pub struct PvFleet {
    /// Flat phase-node indices hosting PV inverters.
    pub nodes: Vec<usize>,
    /// Active generation per node before profile scaling, per-unit.
    pub p_g_base: DVector<f64>,
    /// Per-step scale factors for the active power; the last entry repeats.
    pub p_g_scale: Vec<f64>,
    pub q_min: DVector<f64>,
    pub q_max: DVector<f64>,
}

impl PvFleet {
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        if self.p_g_base.len() != n || self.q_min.len() != n || self.q_max.len() != n {
            return Err(Error::DimensionMismatch {
                what: "fleet vectors",
                expected: n,
                got: self.p_g_base.len(),
            });
        }
        if self.q_min.iter().zip(self.q_max.iter()).any(|(lo, hi)| lo > hi) {
            return Err(Error::parse("fleet requires q_min <= q_max elementwise"));
        }
        Ok(())
    }

    pub fn p_g_at(&self, t: usize) -> DVector<f64> {
        let scale = match self.p_g_scale.len() {
            0 => 1.0,
            n => self.p_g_scale[t.min(n - 1)],
        };
        &self.p_g_base * scale
    }

    fn clamp(&self, q: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(q.len(), |i, _| q[i].clamp(self.q_min[i], self.q_max[i]))
    }

    pub fn from_spec(net: &Network, spec: &crate::io::FleetSpec) -> Result<PvFleet> {
        let mut nodes = Vec::new();
        for n in &spec.nodes {
            let phases = crate::network::PhaseSet::parse(&n.phases)?;
            for p in phases.iter() {
                nodes.push(net.node_index(n.bus, p).ok_or(Error::MissingPhase {
                    bus: n.bus,
                    phase: p.letter(),
                    what: "fleet node",
                })?);
            }
        }
        let count = nodes.len();
        let q_max = spec.q_max;
        let q_min = spec.q_min.unwrap_or(-q_max);
        let fleet = PvFleet {
            nodes,
            p_g_base: DVector::from_element(count, spec.p_g_base),
            p_g_scale: spec.p_g_profile.clone(),
            q_min: DVector::from_element(count, q_min),
            q_max: DVector::from_element(count, q_max),
        };
        fleet.validate()?;
        Ok(fleet)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VvcConfig {
    /// Projected-gradient step size.
    pub alpha: f64,
    /// Gradient iterations per control step (online mode uses 1).
    pub iters_per_step: usize,
}

impl Default for VvcConfig {
    fn default() -> Self {
        VvcConfig {
            alpha: 0.5,
            iters_per_step: 1,
        }
    }
}

/// Voltage-deviation objective `0.5 ||v - 1||^2` on squared magnitudes.
pub fn objective(v_sq: &DVector<f64>) -> f64 {
    0.5 * v_sq.map(|x| (x - 1.0) * (x - 1.0)).sum()
}

/// Largest projected-gradient step that still descends on the linear
/// surrogate: `1 / lambda_max(J^T J)`.
pub fn stable_step_size(sens: &DMatrix<f64>) -> f64 {
    if sens.ncols() == 0 {
        return 1.0;
    }
    let gram = sens.transpose() * sens;
    let l = gram.symmetric_eigen().eigenvalues.amax();
    if l <= 0.0 {
        1.0
    } else {
        1.0 / l
    }
}

/// One projected-gradient update:
/// `q <- clip(q - alpha * J^T (v - 1), q_min, q_max)`.
pub fn vvc_step(
    q_g: &DVector<f64>,
    v_meas_sq: &DVector<f64>,
    sens: &DMatrix<f64>,
    fleet: &PvFleet,
    cfg: &VvcConfig,
) -> Result<DVector<f64>> {
    if sens.ncols() != q_g.len() || sens.nrows() != v_meas_sq.len() {
        return Err(Error::DimensionMismatch {
            what: "vvc sensitivity",
            expected: q_g.len(),
            got: sens.ncols(),
        });
    }
    let grad = sens.transpose() * v_meas_sq.map(|x| x - 1.0);
    Ok(fleet.clamp(&(q_g - cfg.alpha * grad)))
}

#[derive(Debug, Clone)]
pub struct VvcStepRecord {
    pub step: usize,
    /// Objective of the exact plant solve after applying this step's q_g.
    pub objective: f64,
    pub q_g: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct VvcReport {
    pub steps: Vec<VvcStepRecord>,
}

impl VvcReport {
    pub fn mean_objective(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.objective).sum::<f64>() / self.steps.len() as f64
    }
}

/// Loads with the fleet's generation applied as negative consumption.
fn plant_loads(
    net: &Network,
    base: &LoadSet,
    fleet: &PvFleet,
    p_g: &DVector<f64>,
    q_g: &DVector<f64>,
) -> LoadSet {
    let mut out = base.clone();
    for (i, &node) in fleet.nodes.iter().enumerate() {
        out.add_wye_at_node(net, node, -C64::new(p_g[i], q_g[i]));
    }
    out
}

fn step_err(step: usize, e: Error) -> Error {
    Error::SimulationStep {
        step,
        source: Box::new(e),
    }
}

/// Online feedback VVC: measure, refresh the linear model, one gradient
/// step, apply to the exact plant, log the realized objective.
pub fn run_vvc_online(
    net: &Network,
    ts: &TimeSeries,
    fleet: &PvFleet,
    cfg: &VvcConfig,
    mm: &MeasurementModel,
    fm: &FailureModel,
) -> Result<VvcReport> {
    fleet.validate()?;
    mm.validate()?;
    fm.validate()?;
    if ts.horizon() == 0 {
        return Err(Error::EmptyInput("vvc needs at least one step".into()));
    }
    let opts = SweepOptions::default();
    let inc = incidence_blocks(net);
    let mut state = MeasurementState::new(mm.seed);
    let mut q_g = fleet.clamp(&DVector::zeros(fleet.nodes.len()));

    let mut applied = plant_loads(net, &ts.steps[0], fleet, &fleet.p_g_at(0), &q_g);
    let mut plant = solve_exact(net, &applied, opts).map_err(|e| step_err(0, e))?;
    let mut records = Vec::with_capacity(ts.horizon());

    for t in 0..ts.horizon() {
        let v_meas = apply_measurement(net, &plant.v_complex, mm, fm, &mut state, t);
        let op_meas = OperatingPoint::from_voltages(net, net.v0().clone(), v_meas, &applied)
            .map_err(|e| step_err(t, e))?;
        let params = update_parameters(net, &op_meas).map_err(|e| step_err(t, e))?;
        let cm = assemble_compact(&params, &inc)?;
        let sens = voltage_sensitivity(&cm, &fleet.nodes).map_err(|e| step_err(t, e))?;

        let mut v_pred = op_meas.v_sq.clone();
        for _ in 0..cfg.iters_per_step.max(1) {
            let q_new = vvc_step(&q_g, &v_pred, &sens, fleet, cfg)?;
            v_pred += &sens * (&q_new - &q_g);
            q_g = q_new;
        }

        applied = plant_loads(net, &ts.steps[t], fleet, &fleet.p_g_at(t), &q_g);
        plant = solve_exact(net, &applied, opts).map_err(|e| step_err(t, e))?;
        records.push(VvcStepRecord {
            step: t,
            objective: objective(&plant.v_sq),
            q_g: q_g.iter().copied().collect(),
        });
    }
    Ok(VvcReport { steps: records })
}

const OFFLINE_TOL: f64 = 1e-8;
const OFFLINE_CAP: usize = 10_000;

/// Offline comparison: every `opf_period` steps, iterate the projected
/// gradient on the LinDistFlow surrogate (loads known at the period start)
/// to convergence, then hold the setpoint.
pub fn run_vvc_offline(
    net: &Network,
    ts: &TimeSeries,
    fleet: &PvFleet,
    cfg: &VvcConfig,
    opf_period: usize,
) -> Result<VvcReport> {
    fleet.validate()?;
    if opf_period == 0 {
        return Err(Error::parse("opf_period must be >= 1"));
    }
    if ts.horizon() == 0 {
        return Err(Error::EmptyInput("vvc needs at least one step".into()));
    }
    let opts = SweepOptions::default();
    let inc = incidence_blocks(net);
    let cm = assemble_compact(&lindistflow_params(net), &inc)?;
    let sens = voltage_sensitivity(&cm, &fleet.nodes)?;
    let v0_sq = net.v0_sq();
    let mut q_g = fleet.clamp(&DVector::zeros(fleet.nodes.len()));
    let mut records = Vec::with_capacity(ts.horizon());

    for t in 0..ts.horizon() {
        if t % opf_period == 0 {
            let p_g = fleet.p_g_at(t);
            let loads = plant_loads(net, &ts.steps[t], fleet, &p_g, &q_g);
            let sol = solve_linear(&cm, &loads.s_wye_flat(net), &loads.s_delta_flat(net), &v0_sq)
                .map_err(|e| step_err(t, e))?;
            let mut v_pred = sol.v_sq;
            let mut converged = false;
            let mut last_dq = f64::INFINITY;
            for _ in 0..OFFLINE_CAP {
                let q_new = vvc_step(&q_g, &v_pred, &sens, fleet, cfg)?;
                last_dq = (&q_new - &q_g).amax();
                v_pred += &sens * (&q_new - &q_g);
                q_g = q_new;
                if last_dq < OFFLINE_TOL {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(step_err(
                    t,
                    Error::NonConvergence {
                        iterations: OFFLINE_CAP,
                        residual: last_dq,
                    },
                ));
            }
        }
        let applied = plant_loads(net, &ts.steps[t], fleet, &fleet.p_g_at(t), &q_g);
        let plant = solve_exact(net, &applied, opts).map_err(|e| step_err(t, e))?;
        records.push(VvcStepRecord {
            step: t,
            objective: objective(&plant.v_sq),
            q_g: q_g.iter().copied().collect(),
        });
    }
    Ok(VvcReport { steps: records })
}

/// Baseline with the fleet's active power applied but no reactive control.
pub fn run_vvc_uncontrolled(net: &Network, ts: &TimeSeries, fleet: &PvFleet) -> Result<VvcReport> {
    fleet.validate()?;
    let opts = SweepOptions::default();
    let q_g = DVector::zeros(fleet.nodes.len());
    let mut records = Vec::with_capacity(ts.horizon());
    for t in 0..ts.horizon() {
        let applied = plant_loads(net, &ts.steps[t], fleet, &fleet.p_g_at(t), &q_g);
        let plant = solve_exact(net, &applied, opts).map_err(|e| step_err(t, e))?;
        records.push(VvcStepRecord {
            step: t,
            objective: objective(&plant.v_sq),
            q_g: q_g.iter().copied().collect(),
        });
    }
    Ok(VvcReport { steps: records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture;
    use crate::network::{build_network, PhaseSet};

    fn abc_chain_fleet(net: &Network) -> PvFleet {
        // PV on every phase of the last bus.
        let last = net.n_buses() - 1;
        let nodes: Vec<usize> = net
            .bus_phases(last)
            .iter()
            .map(|p| net.node_index(last, p).unwrap())
            .collect();
        let n = nodes.len();
        PvFleet {
            nodes,
            p_g_base: DVector::from_element(n, 0.05),
            p_g_scale: vec![1.0],
            q_min: DVector::from_element(n, -1.0),
            q_max: DVector::from_element(n, 1.0),
        }
    }

    #[test]
    fn objective_examples() {
        assert_eq!(objective(&DVector::from_element(4, 1.0)), 0.0);
        let v = DVector::from_vec(vec![1.1, 0.9]);
        assert!((objective(&v) - 0.01).abs() < 1e-15);
        // Matches an independent scalar loop.
        let v = DVector::from_vec(vec![0.97, 1.03, 0.97]);
        let manual: f64 = v.iter().map(|x| 0.5 * (x - 1.0) * (x - 1.0)).sum();
        assert!((objective(&v) - manual).abs() < 1e-15);
    }

    #[test]
    fn vvc_step_signs_and_projection() {
        let fleet = PvFleet {
            nodes: vec![0, 1],
            p_g_base: DVector::zeros(2),
            p_g_scale: vec![],
            q_min: DVector::from_element(2, -0.4),
            q_max: DVector::from_element(2, 0.4),
        };
        let cfg = VvcConfig {
            alpha: 0.5,
            iters_per_step: 1,
        };
        let sens = DMatrix::from_row_slice(2, 2, &[0.1, 0.02, 0.02, 0.1]);
        let q0 = DVector::from_vec(vec![0.1, -0.1]);
        // Flat voltages: fixed point.
        let flat = DVector::from_element(2, 1.0);
        let q1 = vvc_step(&q0, &flat, &sens, &fleet, &cfg).unwrap();
        assert!((q1.clone() - &q0).amax() < 1e-15);
        // Overvoltage with positive sensitivities: q decreases (absorb vars).
        let high = DVector::from_element(2, 1.05);
        let q2 = vvc_step(&q0, &high, &sens, &fleet, &cfg).unwrap();
        assert!(q2[0] < q0[0] && q2[1] < q0[1]);
        // Huge step lands exactly on the bound.
        let cfg_big = VvcConfig {
            alpha: 1e6,
            iters_per_step: 1,
        };
        let q3 = vvc_step(&q0, &high, &sens, &fleet, &cfg_big).unwrap();
        assert_eq!(q3[0], -0.4);
        assert_eq!(q3[1], -0.4);
    }

    #[test]
    fn empty_fleet_matches_uncontrolled() {
        let net = build_network(&fixture::branched6()).unwrap();
        let ts = TimeSeries {
            dt_seconds: 5.0,
            steps: vec![net.base_loads().clone(); 4],
        };
        let fleet = PvFleet {
            nodes: vec![],
            p_g_base: DVector::zeros(0),
            p_g_scale: vec![],
            q_min: DVector::zeros(0),
            q_max: DVector::zeros(0),
        };
        let online = run_vvc_online(
            &net,
            &ts,
            &fleet,
            &VvcConfig::default(),
            &MeasurementModel::clean(),
            &FailureModel::none(),
        )
        .unwrap();
        let unc = run_vvc_uncontrolled(&net, &ts, &fleet).unwrap();
        for (a, b) in online.steps.iter().zip(&unc.steps) {
            assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        }
    }

    #[test]
    fn static_loads_converge_to_a_plateau() {
        let net = build_network(&fixture::chain(5, PhaseSet::ABC)).unwrap();
        let ts = TimeSeries {
            dt_seconds: 5.0,
            steps: vec![net.base_loads().scaled(1.4); 300],
        };
        let fleet = abc_chain_fleet(&net);
        let cm = assemble_compact(&lindistflow_params(&net), &incidence_blocks(&net)).unwrap();
        let sens = voltage_sensitivity(&cm, &fleet.nodes).unwrap();
        let cfg = VvcConfig {
            alpha: stable_step_size(&sens),
            iters_per_step: 1,
        };
        let report = run_vvc_online(
            &net,
            &ts,
            &fleet,
            &cfg,
            &MeasurementModel::clean(),
            &FailureModel::none(),
        )
        .unwrap();
        let objs: Vec<f64> = report.steps.iter().map(|s| s.objective).collect();
        for w in objs.windows(2).skip(1) {
            assert!(w[1] <= w[0] + 1e-12, "objective rose: {objs:?}");
        }
        let tail = &objs[objs.len() - 50..];
        assert!(
            tail[0] - tail[tail.len() - 1] < 1e-10,
            "no plateau: last-50 change {}",
            tail[0] - tail[tail.len() - 1]
        );
        // Every emitted q stays inside the box.
        for rec in &report.steps {
            for (i, q) in rec.q_g.iter().enumerate() {
                assert!(*q >= fleet.q_min[i] - 1e-15 && *q <= fleet.q_max[i] + 1e-15);
            }
        }
    }

    #[test]
    fn descent_on_the_frozen_linear_plant_below_one_over_l() {
        let net = build_network(&fixture::branched6()).unwrap();
        let cm = assemble_compact(&lindistflow_params(&net), &incidence_blocks(&net)).unwrap();
        let fleet = abc_chain_fleet(&net);
        let sens = voltage_sensitivity(&cm, &fleet.nodes).unwrap();
        let gram = sens.transpose() * &sens;
        let l = gram.symmetric_eigen().eigenvalues.amax();
        let cfg = VvcConfig {
            alpha: 0.9 / l,
            iters_per_step: 1,
        };
        let loads = net.base_loads().scaled(1.5);
        let sol = solve_linear(&cm, &loads.s_wye_flat(&net), &loads.s_delta_flat(&net), &net.v0_sq())
            .unwrap();
        let mut v = sol.v_sq;
        let mut q = fleet.clamp(&DVector::zeros(fleet.nodes.len()));
        let mut prev = objective(&v);
        for _ in 0..200 {
            let q_new = vvc_step(&q, &v, &sens, &fleet, &cfg).unwrap();
            v += &sens * (&q_new - &q);
            q = q_new;
            let cur = objective(&v);
            assert!(cur <= prev + 1e-12, "objective increased on frozen plant");
            prev = cur;
        }
    }

    #[test]
    fn offline_period_one_behaves_like_per_step_opf() {
        let net = build_network(&fixture::chain(4, PhaseSet::ABC)).unwrap();
        let ts = TimeSeries {
            dt_seconds: 60.0,
            steps: vec![net.base_loads().scaled(1.3); 3],
        };
        let fleet = abc_chain_fleet(&net);
        let cm = assemble_compact(&lindistflow_params(&net), &incidence_blocks(&net)).unwrap();
        let sens = voltage_sensitivity(&cm, &fleet.nodes).unwrap();
        let cfg = VvcConfig {
            alpha: stable_step_size(&sens),
            iters_per_step: 1,
        };
        let r1 = run_vvc_offline(&net, &ts, &fleet, &cfg, 1).unwrap();
        // With static loads the converged setpoint appears from step 0 and
        // moves by at most the inner tolerance afterwards.
        for w in r1.steps.windows(2) {
            for (a, b) in w[0].q_g.iter().zip(&w[1].q_g) {
                assert!((a - b).abs() < 1e-7);
            }
        }
    }
}
