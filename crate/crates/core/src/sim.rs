//! Closed-loop time-series harness.
//!
//! Per step: solve the exact benchmark at the true loads, deliver (possibly
//! noisy or frozen) voltage measurements, refresh the linear-model
//! parameters on the configured cadence, then predict the next step with
//! the stale parameters and score both the online model and the lossless
//! baseline against the next benchmark. Load measurements are taken
//! noise-free; only voltage magnitudes are perturbed, and these are applied
//! per-unit with angles preserved.

use std::collections::BTreeSet;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linear::{
    assemble_compact, lindistflow_params, solve_linear, update_parameters, CompactModel,
};
use crate::load::LoadSet;
use crate::network::{incidence_blocks, Network};
use crate::sweep::{solve_exact, OperatingPoint, SweepOptions};
use crate::C64;

/// Uniformly sampled load values, one [`LoadSet`] per step.
#[derive(Debug, Clone)]
pub struct TimeSeries {
    pub dt_seconds: f64,
    pub steps: Vec<LoadSet>,
}

impl TimeSeries {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }
}

/// Which buses a measurement effect applies to.
#[derive(Debug, Clone)]
pub enum BusScope {
    All,
    Subset(BTreeSet<usize>),
}

impl BusScope {
    pub fn none() -> BusScope {
        BusScope::Subset(BTreeSet::new())
    }

    pub fn contains(&self, bus: usize) -> bool {
        match self {
            BusScope::All => true,
            BusScope::Subset(s) => s.contains(&bus),
        }
    }

    pub fn from_spec(spec: &crate::io::ScopeSpec) -> Result<BusScope> {
        match spec {
            crate::io::ScopeSpec::Keyword(k) if k == "all" => Ok(BusScope::All),
            crate::io::ScopeSpec::Keyword(k) => {
                Err(Error::parse(format!("unknown bus scope '{k}'")))
            }
            crate::io::ScopeSpec::Buses(b) => Ok(BusScope::Subset(b.iter().copied().collect())),
        }
    }
}

fn in_windows(windows: &[(usize, usize)], t: usize) -> bool {
    windows.is_empty() || windows.iter().any(|&(s, e)| t >= s && t <= e)
}

fn validate_windows(windows: &[(usize, usize)]) -> Result<()> {
    let mut prev_end = None;
    for &(s, e) in windows {
        if e < s {
            return Err(Error::parse(format!("window ({s},{e}) ends before it starts")));
        }
        if let Some(pe) = prev_end {
            if s <= pe {
                return Err(Error::parse("windows must be sorted and non-overlapping"));
            }
        }
        prev_end = Some(e);
    }
    Ok(())
}

/// Additive Gaussian noise on measured voltage magnitudes.
/// Empty `windows` means the noise applies at every step.
#[derive(Debug, Clone)]
pub struct MeasurementModel {
    pub noise_sigma: f64,
    pub scope: BusScope,
    pub windows: Vec<(usize, usize)>,
    pub seed: u64,
}

impl MeasurementModel {
    /// Noise-free measurements.
    pub fn clean() -> MeasurementModel {
        MeasurementModel {
            noise_sigma: 0.0,
            scope: BusScope::All,
            windows: Vec::new(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_sigma < 0.0 {
            return Err(Error::parse("noise_sigma must be >= 0"));
        }
        validate_windows(&self.windows)
    }

    fn active_at(&self, bus: usize, t: usize) -> bool {
        self.noise_sigma > 0.0 && self.scope.contains(bus) && in_windows(&self.windows, t)
    }

    pub fn from_spec(spec: &crate::io::MeasurementSpec, seed: u64) -> Result<MeasurementModel> {
        let mm = MeasurementModel {
            noise_sigma: spec.noise_sigma,
            scope: BusScope::from_spec(&spec.noisy_buses)?,
            windows: spec.windows.iter().map(|w| (w[0], w[1])).collect(),
            seed,
        };
        mm.validate()?;
        Ok(mm)
    }
}

/// Communication failures handled with a freeze strategy: a failed bus
/// keeps reporting its last delivered measurement until a new one arrives.
/// Empty `windows` means the failure applies at every step.
#[derive(Debug, Clone)]
pub struct FailureModel {
    pub scope: BusScope,
    pub windows: Vec<(usize, usize)>,
}

impl FailureModel {
    /// No communication failures.
    pub fn none() -> FailureModel {
        FailureModel {
            scope: BusScope::none(),
            windows: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_windows(&self.windows)
    }

    fn active_at(&self, bus: usize, t: usize) -> bool {
        self.scope.contains(bus) && in_windows(&self.windows, t)
    }

    pub fn from_spec(spec: &crate::io::FailureSpec) -> Result<FailureModel> {
        let fm = FailureModel {
            scope: BusScope::from_spec(&spec.failed_buses)?,
            windows: spec.windows.iter().map(|w| (w[0], w[1])).collect(),
        };
        fm.validate()?;
        Ok(fm)
    }
}

/// RNG stream and last-delivered store carried across steps.
#[derive(Debug, Clone)]
pub struct MeasurementState {
    rng: ChaCha20Rng,
    last_seen: DVector<C64>,
    primed: bool,
}

impl MeasurementState {
    pub fn new(seed: u64) -> MeasurementState {
        MeasurementState {
            rng: ChaCha20Rng::seed_from_u64(seed),
            last_seen: DVector::zeros(0),
            primed: false,
        }
    }
}

/// Delivers the measured voltage snapshot for step `t`.
///
/// One standard-normal draw is consumed per phase node per step regardless
/// of scope and windows, so runs that differ only in scope share the same
/// noise realization on the buses they have in common.
pub fn apply_measurement(
    net: &Network,
    true_v: &DVector<C64>,
    mm: &MeasurementModel,
    fm: &FailureModel,
    state: &mut MeasurementState,
    t: usize,
) -> DVector<C64> {
    let m = net.m();
    if !state.primed {
        state.last_seen = true_v.clone();
        state.primed = true;
    }
    let noise: Vec<f64> = (0..m)
        .map(|_| {
            let e: f64 = state.rng.sample(StandardNormal);
            e * mm.noise_sigma
        })
        .collect();
    let mut out = DVector::zeros(m);
    for (idx, &(bus, _)) in net.node_labels().iter().enumerate() {
        if fm.active_at(bus, t) {
            out[idx] = state.last_seen[idx];
            continue;
        }
        let v = true_v[idx];
        out[idx] = if mm.active_at(bus, t) {
            C64::from_polar((v.norm() + noise[idx]).max(1e-6), v.arg())
        } else {
            v
        };
        state.last_seen[idx] = out[idx];
    }
    out
}

/// Mean absolute percentage error, in percent.
pub fn mape(estimate: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            what: "mape vectors",
            expected: truth.len(),
            got: estimate.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput("mape over empty vectors".into()));
    }
    let mut acc = 0.0;
    for i in 0..truth.len() {
        if truth[i] == 0.0 {
            return Err(Error::ZeroTruthEntry { index: i });
        }
        acc += (estimate[i] - truth[i]).abs() / truth[i].abs();
    }
    Ok(100.0 * acc / truth.len() as f64)
}

/// MAPE over the entries whose truth magnitude exceeds `floor`; zero when
/// nothing survives the filter. Used for branch flows, which may legitimately
/// carry exact zeros on unloaded laterals.
fn mape_filtered(estimate: &DVector<f64>, truth: &DVector<f64>, floor: f64) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for i in 0..truth.len() {
        if truth[i].abs() > floor {
            acc += (estimate[i] - truth[i]).abs() / truth[i].abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        100.0 * acc / n as f64
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ModelErrors {
    pub v_mape: f64,
    pub p_mape: f64,
    pub q_mape: f64,
}

/// Prediction errors of both models for one step.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    /// The predicted step (benchmarked against the exact solve there).
    pub step: usize,
    pub online: ModelErrors,
    pub lossless: ModelErrors,
}

#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub steps: Vec<StepRecord>,
    pub online_mean: ModelErrors,
    pub lossless_mean: ModelErrors,
}

fn step_err(step: usize, e: Error) -> Error {
    Error::SimulationStep {
        step,
        source: Box::new(e),
    }
}

/// Runs the closed loop over the series and scores one-step-ahead
/// predictions of the online model and the lossless baseline.
pub fn run_timeseries(
    net: &Network,
    ts: &TimeSeries,
    mm: &MeasurementModel,
    fm: &FailureModel,
    update_every: usize,
) -> Result<SimulationReport> {
    if update_every == 0 {
        return Err(Error::parse("update_every must be >= 1"));
    }
    if ts.horizon() < 2 {
        return Err(Error::EmptyInput("time series needs at least two steps".into()));
    }
    mm.validate()?;
    fm.validate()?;

    let opts = SweepOptions::default();
    let inc = incidence_blocks(net);
    let lossless_cm = assemble_compact(&lindistflow_params(net), &inc)?;
    let v0_sq = net.v0_sq();
    let mut state = MeasurementState::new(mm.seed);

    let mut bench = solve_exact(net, &ts.steps[0], opts).map_err(|e| step_err(0, e))?;
    let mut online_cm: Option<CompactModel> = None;
    let mut records = Vec::with_capacity(ts.horizon() - 1);

    for t in 0..ts.horizon() - 1 {
        let v_meas = apply_measurement(net, &bench.v_complex, mm, fm, &mut state, t);
        if t % update_every == 0 {
            let op_meas =
                OperatingPoint::from_voltages(net, net.v0().clone(), v_meas, &ts.steps[t])
                    .map_err(|e| step_err(t, e))?;
            let mut params = update_parameters(net, &op_meas).map_err(|e| step_err(t, e))?;
            params.step = Some(t);
            online_cm = Some(assemble_compact(&params, &inc)?);
        }
        let cm = online_cm.as_ref().expect("first update happens at t = 0");

        let next = &ts.steps[t + 1];
        let s_wye = next.s_wye_flat(net);
        let s_delta = next.s_delta_flat(net);
        let online_sol =
            solve_linear(cm, &s_wye, &s_delta, &v0_sq).map_err(|e| step_err(t + 1, e))?;
        let lossless_sol =
            solve_linear(&lossless_cm, &s_wye, &s_delta, &v0_sq).map_err(|e| step_err(t + 1, e))?;
        let bench_next = solve_exact(net, next, opts).map_err(|e| step_err(t + 1, e))?;

        let truth_mag = bench_next.v_sq.map(f64::sqrt);
        let score = |sol: &crate::linear::LinearSolution| -> Result<ModelErrors> {
            let est_mag = sol.v_sq.map(|x| x.max(0.0).sqrt());
            Ok(ModelErrors {
                v_mape: mape(&est_mag, &truth_mag)?,
                p_mape: mape_filtered(&sol.p_flow, &bench_next.p_flow, 1e-12),
                q_mape: mape_filtered(&sol.q_flow, &bench_next.q_flow, 1e-12),
            })
        };
        records.push(StepRecord {
            step: t + 1,
            online: score(&online_sol).map_err(|e| step_err(t + 1, e))?,
            lossless: score(&lossless_sol).map_err(|e| step_err(t + 1, e))?,
        });
        bench = bench_next;
    }

    let mean = |take: &dyn Fn(&StepRecord) -> ModelErrors| -> ModelErrors {
        let n = records.len() as f64;
        let mut out = ModelErrors::default();
        for r in &records {
            let e = take(r);
            out.v_mape += e.v_mape / n;
            out.p_mape += e.p_mape / n;
            out.q_mape += e.q_mape / n;
        }
        out
    };
    Ok(SimulationReport {
        online_mean: mean(&|r| r.online),
        lossless_mean: mean(&|r| r.lossless),
        steps: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture;
    use crate::network::build_network;

    #[test]
    fn mape_examples() {
        let t = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(mape(&t, &t).unwrap(), 0.0);
        let est = &t * 1.01;
        assert!((mape(&est, &t).unwrap() - 1.0).abs() < 1e-12);
        let est = DVector::from_vec(vec![1.1, 1.9]);
        assert!((mape(&est, &t).unwrap() - 7.5).abs() < 1e-12);
        let zt = DVector::from_vec(vec![1.0, 0.0]);
        assert!(matches!(mape(&t, &zt), Err(Error::ZeroTruthEntry { index: 1 })));
    }

    #[test]
    fn clean_measurement_is_identity() {
        let net = build_network(&fixture::branched6()).unwrap();
        let op = solve_exact(&net, net.base_loads(), SweepOptions::default()).unwrap();
        let mut state = MeasurementState::new(1);
        let out = apply_measurement(
            &net,
            &op.v_complex,
            &MeasurementModel::clean(),
            &FailureModel::none(),
            &mut state,
            0,
        );
        assert!((out - &op.v_complex).camax() == 0.0);
    }

    #[test]
    fn freeze_holds_the_last_delivered_value() {
        let net = build_network(&fixture::branched6()).unwrap();
        let op = solve_exact(&net, net.base_loads(), SweepOptions::default()).unwrap();
        let fm = FailureModel {
            scope: BusScope::All,
            windows: vec![(2, usize::MAX)],
        };
        let mm = MeasurementModel::clean();
        let mut state = MeasurementState::new(1);
        let v1 = op.v_complex.clone();
        let v2 = &op.v_complex * C64::new(0.99, 0.0);
        let v3 = &op.v_complex * C64::new(0.98, 0.0);
        assert!((apply_measurement(&net, &v1, &mm, &fm, &mut state, 0) - &v1).camax() == 0.0);
        assert!((apply_measurement(&net, &v2, &mm, &fm, &mut state, 1) - &v2).camax() == 0.0);
        // Frozen from step 2 on: keeps reporting v2.
        assert!((apply_measurement(&net, &v3, &mm, &fm, &mut state, 2) - &v2).camax() == 0.0);
        assert!((apply_measurement(&net, &v3, &mm, &fm, &mut state, 3) - &v2).camax() == 0.0);
    }

    #[test]
    fn noisy_measurements_are_seed_reproducible() {
        let net = build_network(&fixture::branched6()).unwrap();
        let op = solve_exact(&net, net.base_loads(), SweepOptions::default()).unwrap();
        let mm = MeasurementModel {
            noise_sigma: 0.01,
            scope: BusScope::All,
            windows: vec![],
            seed: 7,
        };
        let run = || {
            let mut state = MeasurementState::new(mm.seed);
            apply_measurement(&net, &op.v_complex, &mm, &FailureModel::none(), &mut state, 0)
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|c| (c.re.to_bits(), c.im.to_bits())).collect::<Vec<_>>(),
            b.iter().map(|c| (c.re.to_bits(), c.im.to_bits())).collect::<Vec<_>>()
        );
        // Angles are preserved, magnitudes moved.
        assert!((a[0].arg() - op.v_complex[0].arg()).abs() < 1e-15);
        assert!((a[0].norm() - op.v_complex[0].norm()).abs() > 0.0);
    }

    #[test]
    fn constant_loads_give_near_exact_online_predictions() {
        let net = build_network(&fixture::branched6()).unwrap();
        let ts = TimeSeries {
            dt_seconds: 60.0,
            steps: vec![net.base_loads().clone(); 5],
        };
        let report =
            run_timeseries(&net, &ts, &MeasurementModel::clean(), &FailureModel::none(), 1)
                .unwrap();
        for r in &report.steps {
            assert!(r.online.v_mape < 1e-8, "step {}: {:?}", r.step, r.online);
            assert!(r.lossless.v_mape > r.online.v_mape);
        }
    }

    #[test]
    fn lossless_baseline_ignores_measurement_settings() {
        let net = build_network(&fixture::branched6()).unwrap();
        let steps: Vec<LoadSet> = (0..5)
            .map(|t| net.base_loads().scaled(0.8 + 0.05 * t as f64))
            .collect();
        let ts = TimeSeries {
            dt_seconds: 60.0,
            steps,
        };
        let clean =
            run_timeseries(&net, &ts, &MeasurementModel::clean(), &FailureModel::none(), 1)
                .unwrap();
        let noisy_mm = MeasurementModel {
            noise_sigma: 0.01,
            scope: BusScope::All,
            windows: vec![],
            seed: 3,
        };
        let noisy = run_timeseries(&net, &ts, &noisy_mm, &FailureModel::none(), 1).unwrap();
        for (a, b) in clean.steps.iter().zip(&noisy.steps) {
            assert_eq!(a.lossless.v_mape.to_bits(), b.lossless.v_mape.to_bits());
            assert!(b.online.v_mape >= a.online.v_mape);
        }
    }
}
