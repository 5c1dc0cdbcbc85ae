//! Exact nonlinear multi-phase branch-flow solver.
//!
//! A backward/forward sweep over the radial tree: the backward pass
//! aggregates segment powers from the leaves (loss term from the latest
//! currents, Gauss style), currents follow from the flow equation at the
//! current-iterate voltages, and the forward pass propagates voltage drops
//! from the head. Delta-load transforms are re-evaluated from the current
//! voltages every sweep. Converged operating points are the benchmark the
//! linear models are judged against.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::load::{bus_injection, delta_transform, LoadSet};
use crate::network::{restrict, Network, PhaseSet};
use crate::C64;

#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    /// Convergence threshold on the max voltage update, per-unit.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            tol: 1e-9,
            max_iter: 100,
        }
    }
}

/// A consistent power-flow snapshot: complex voltages, net consumptions,
/// and branch flows derived from the voltages.
#[derive(Debug, Clone)]
pub struct OperatingPoint {
    /// Head-bus voltage over its phases.
    pub v0: DVector<C64>,
    /// Complex voltages over the non-head phase nodes (flat, bus-major).
    pub v_complex: DVector<C64>,
    /// Squared voltage magnitudes of `v_complex`.
    pub v_sq: DVector<f64>,
    /// Net complex consumption per phase node (wye plus transformed delta).
    pub s_hat: DVector<C64>,
    /// Real part of the segment flows, per phase circuit.
    pub p_flow: DVector<f64>,
    /// Imaginary part of the segment flows, per phase circuit.
    pub q_flow: DVector<f64>,
    /// Segment currents per phase circuit.
    pub currents: DVector<C64>,
}

impl OperatingPoint {
    /// Builds the snapshot implied by a full voltage measurement: net
    /// consumptions from the load model at these voltages and branch flows
    /// from the voltage differences. This is the only way flows enter the
    /// model; they are never taken as independent sensor values.
    pub fn from_voltages(
        net: &Network,
        v0: DVector<C64>,
        v: DVector<C64>,
        loads: &LoadSet,
    ) -> Result<OperatingPoint> {
        check_load_dims(net, loads)?;
        if v.len() != net.m() {
            return Err(Error::DimensionMismatch {
                what: "voltage vector",
                expected: net.m(),
                got: v.len(),
            });
        }
        let s_hat = injections(net, &v, loads)?;
        let (p_flow, q_flow, currents) = branch_flows_from_voltages(net, &v0, &v)?;
        Ok(OperatingPoint {
            v0,
            v_sq: v.map(|x| x.norm_sqr()),
            v_complex: v,
            s_hat,
            p_flow,
            q_flow,
            currents,
        })
    }
}

/// Voltage of `bus` restricted to `phases`, reading the head from `v0` and
/// everything else from the flat vector `v`.
fn voltage_of(
    net: &Network,
    v0: &DVector<C64>,
    v: &DVector<C64>,
    bus: usize,
    phases: PhaseSet,
) -> DVector<C64> {
    if bus == 0 {
        restrict(v0, net.bus_phases(0), phases)
    } else {
        let block = net.bus_block(v, bus).clone_owned();
        restrict(&block, net.bus_phases(bus), phases)
    }
}

fn check_load_dims(net: &Network, loads: &LoadSet) -> Result<()> {
    if loads.wye.len() != net.n() || loads.delta.len() != net.n() {
        return Err(Error::DimensionMismatch {
            what: "load set",
            expected: net.n(),
            got: loads.wye.len().min(loads.delta.len()),
        });
    }
    for j in 1..net.n_buses() {
        if loads.wye[j - 1].len() != net.bus_phases(j).len() {
            return Err(Error::DimensionMismatch {
                what: "wye load vector",
                expected: net.bus_phases(j).len(),
                got: loads.wye[j - 1].len(),
            });
        }
        if loads.delta[j - 1].len() != net.delta_conns(j).len() {
            return Err(Error::DimensionMismatch {
                what: "delta load vector",
                expected: net.delta_conns(j).len(),
                got: loads.delta[j - 1].len(),
            });
        }
    }
    Ok(())
}

/// Net consumption per phase node at the given voltages (delta transforms
/// evaluated at these voltages).
fn injections(net: &Network, v: &DVector<C64>, loads: &LoadSet) -> Result<DVector<C64>> {
    let mut s = DVector::zeros(net.m());
    for j in 1..net.n_buses() {
        let conns = net.delta_conns(j);
        let block = if conns.is_empty() {
            loads.wye[j - 1].clone()
        } else {
            let vj = net.bus_block(v, j).clone_owned();
            let t = delta_transform(&vj, net.bus_phases(j), conns)?;
            bus_injection(&loads.wye[j - 1], &loads.delta[j - 1], &t)?
        };
        s.rows_mut(net.node_offset(j), block.len()).copy_from(&block);
    }
    Ok(s)
}

/// Branch flows and currents implied by a voltage snapshot:
/// `S = (z^-1 (V_from - V_to))^* ⊙ V_from` per segment.
pub fn branch_flows_from_voltages(
    net: &Network,
    v0: &DVector<C64>,
    v: &DVector<C64>,
) -> Result<(DVector<f64>, DVector<f64>, DVector<C64>)> {
    let m = net.m();
    let mut p = DVector::zeros(m);
    let mut q = DVector::zeros(m);
    let mut currents = DVector::zeros(m);
    for &j in net.topo_order() {
        let seg = net.segment(j);
        let v_from = voltage_of(net, v0, v, seg.from, seg.phases);
        let v_to = net.bus_block(v, j).clone_owned();
        let i = &seg.z_inv * (v_from.clone() - v_to);
        let s = i.map(|x| x.conj()).component_mul(&v_from);
        let off = net.node_offset(j);
        for (k, (sv, iv)) in s.iter().zip(i.iter()).enumerate() {
            p[off + k] = sv.re;
            q[off + k] = sv.im;
            currents[off + k] = *iv;
        }
    }
    Ok((p, q, currents))
}

/// Max component mismatch of the branch-flow equations at `op`, per-unit:
/// voltage drops, flow/current consistency, and power balance with the
/// loss term.
pub fn residual(net: &Network, op: &OperatingPoint) -> f64 {
    let mut worst = 0.0f64;
    for &j in net.topo_order() {
        let seg = net.segment(j);
        let off = net.node_offset(j);
        let n = seg.phases.len();
        let v_from = voltage_of(net, &op.v0, &op.v_complex, seg.from, seg.phases);
        let v_to = net.bus_block(&op.v_complex, j).clone_owned();
        let i = op.currents.rows(off, n).clone_owned();
        let s = DVector::from_fn(n, |k, _| C64::new(op.p_flow[off + k], op.q_flow[off + k]));

        // Voltage drop.
        let r_v = (&v_to - &v_from + &seg.z * &i).camax();
        // Current from flow at the from-side voltage.
        let r_i = (&i - s.map(|x| x.conj()).component_div(&v_from.map(|x| x.conj()))).camax();
        // Power balance with the loss term and downstream flows.
        let mut downstream = DVector::<C64>::zeros(n);
        for &k in net.children_of(j) {
            let child = net.segment(k);
            let s_child = DVector::from_fn(child.phases.len(), |t, _| {
                C64::new(
                    op.p_flow[net.node_offset(k) + t],
                    op.q_flow[net.node_offset(k) + t],
                )
            });
            for (t, ph) in child.phases.iter().enumerate() {
                downstream[seg.phases.rank(ph).expect("child phases within parent")] += s_child[t];
            }
        }
        let s_node = op.s_hat.rows(off, n).clone_owned();
        let loss = i.map(|x| x.conj()).component_mul(&(&seg.z * &i));
        let r_s = (&s - downstream - s_node - loss).camax();

        worst = worst.max(r_v).max(r_i).max(r_s);
    }
    worst
}

/// Solves the exact branch-flow equations by backward/forward sweep.
pub fn solve_exact(net: &Network, loads: &LoadSet, opts: SweepOptions) -> Result<OperatingPoint> {
    solve_exact_with_trace(net, loads, opts).map(|(op, _)| op)
}

/// Like [`solve_exact`] but also returns the per-sweep max voltage updates.
pub fn solve_exact_with_trace(
    net: &Network,
    loads: &LoadSet,
    opts: SweepOptions,
) -> Result<(OperatingPoint, Vec<f64>)> {
    check_load_dims(net, loads)?;
    if opts.tol <= 0.0 || opts.max_iter == 0 {
        return Err(Error::parse("sweep options require tol > 0 and max_iter >= 1"));
    }
    let m = net.m();
    let v0 = net.v0().clone();
    if m == 0 {
        let op = OperatingPoint::from_voltages(net, v0, DVector::zeros(0), loads)?;
        return Ok((op, Vec::new()));
    }

    // Flat start: the head voltage propagated down the tree (no drops).
    let mut v = DVector::zeros(m);
    for &j in net.topo_order() {
        let block = restrict(&v0, net.bus_phases(0), net.bus_phases(j));
        v.rows_mut(net.node_offset(j), block.len()).copy_from(&block);
    }

    // Indexed by child bus (j - 1), not topo position.
    let mut flows: Vec<DVector<C64>> = (1..net.n_buses())
        .map(|j| DVector::zeros(net.bus_phases(j).len()))
        .collect();
    let mut currents: Vec<DVector<C64>> = flows.clone();

    let mut trace = Vec::new();
    for _ in 0..opts.max_iter {
        let s_hat = injections(net, &v, loads)?;

        // Backward: aggregate flows, children before parents.
        for &j in net.topo_order().iter().rev() {
            let seg = net.segment(j);
            let n = seg.phases.len();
            let mut s = op_block(&s_hat, net, j);
            for &k in net.children_of(j) {
                let child_phases = net.segment(k).phases;
                for (t, ph) in child_phases.iter().enumerate() {
                    s[seg.phases.rank(ph).expect("child phases within parent")] +=
                        flows[k - 1][t];
                }
            }
            let i = &currents[j - 1];
            let loss = i.map(|x| x.conj()).component_mul(&(&seg.z * i));
            flows[j - 1] = s + loss;
            debug_assert_eq!(flows[j - 1].len(), n);
        }

        // Currents from the flow equation at the current-iterate voltages.
        for &j in net.topo_order() {
            let seg = net.segment(j);
            let v_from = voltage_of(net, &v0, &v, seg.from, seg.phases);
            currents[j - 1] = flows[j - 1]
                .map(|x| x.conj())
                .component_div(&v_from.map(|x| x.conj()));
        }

        // Forward: propagate voltage drops, parents before children.
        let mut max_dv = 0.0f64;
        for &j in net.topo_order() {
            let seg = net.segment(j);
            let v_from = voltage_of(net, &v0, &v, seg.from, seg.phases);
            let v_new = v_from - &seg.z * &currents[j - 1];
            let off = net.node_offset(j);
            for (t, val) in v_new.iter().enumerate() {
                max_dv = max_dv.max((val - v[off + t]).norm());
                v[off + t] = *val;
            }
        }
        trace.push(max_dv);

        if !max_dv.is_finite() {
            return Err(Error::NonConvergence {
                iterations: trace.len(),
                residual: f64::NAN,
            });
        }
        if max_dv < opts.tol {
            let op = OperatingPoint::from_voltages(net, v0.clone(), v.clone(), loads)?;
            if residual(net, &op) < opts.tol {
                return Ok((op, trace));
            }
        }
    }

    let final_residual = OperatingPoint::from_voltages(net, v0, v, loads)
        .map(|op| residual(net, &op))
        .unwrap_or(f64::NAN);
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        residual: final_residual,
    })
}

fn op_block(flat: &DVector<C64>, net: &Network, j: usize) -> DVector<C64> {
    flat.rows(net.node_offset(j), net.bus_phases(j).len())
        .clone_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture;
    use crate::io::{BusSpec, LoadKind, LoadSpec, NetworkSpec, SegmentSpec, Units};
    use crate::network::build_network;

    fn two_bus(r: f64, x: f64, p: f64, q: f64) -> Network {
        build_network(&NetworkSpec {
            bases: fixture::DEFAULT_BASES,
            units: Units::PerUnit,
            buses: vec![
                BusSpec { id: 0, phases: "a".into() },
                BusSpec { id: 1, phases: "a".into() },
            ],
            segments: vec![SegmentSpec {
                from: 0,
                to: 1,
                phases: "a".into(),
                r: vec![vec![r]],
                x: vec![vec![x]],
            }],
            slack: None,
            loads: vec![LoadSpec {
                bus: 1,
                kind: LoadKind::Wye,
                connections: None,
                p: vec![p],
                q: vec![q],
            }],
        })
        .unwrap()
    }

    #[test]
    fn no_load_gives_flat_solution() {
        let net = build_network(&fixture::appendix_b()).unwrap();
        let zero = LoadSet::zeros_like(&net);
        let op = solve_exact(&net, &zero, SweepOptions::default()).unwrap();
        for (idx, &(bus, phase)) in net.node_labels().iter().enumerate() {
            let expected = net.v0()[net.bus_phases(0).rank(phase).unwrap()];
            assert!((op.v_complex[idx] - expected).norm() < 1e-15, "bus {bus}");
        }
        assert!(op.p_flow.amax() < 1e-15);
        assert!(op.q_flow.amax() < 1e-15);
        assert_eq!(residual(&net, &op), 0.0);
    }

    #[test]
    fn two_bus_matches_closed_form_root() {
        let net = two_bus(0.01, 0.02, 0.10, 0.05);
        let op = solve_exact(
            &net,
            net.base_loads(),
            SweepOptions { tol: 1e-12, max_iter: 200 },
        )
        .unwrap();
        // V = |V|^2 + z^* s has solution V = x + j y with y = Im(z^* s) and
        // x the root of x^2 - x + (Re(z^* s) + y^2) = 0 near 1.
        let c = C64::new(0.01, -0.02) * C64::new(0.10, 0.05);
        let y = c.im;
        let x = 0.5 * (1.0 + (1.0 - 4.0 * (c.re + y * y)).sqrt());
        let expected = C64::new(x, y);
        assert!(
            (op.v_complex[0] - expected).norm() < 1e-10,
            "got {}, want {}",
            op.v_complex[0],
            expected
        );
        assert!(op.v_complex[0].norm() > 0.99);
    }

    #[test]
    fn solver_postcondition_residual_below_tol() {
        for spec in [fixture::appendix_b(), fixture::branched6()] {
            let net = build_network(&spec).unwrap();
            let opts = SweepOptions::default();
            let op = solve_exact(&net, net.base_loads(), opts).unwrap();
            assert!(residual(&net, &op) < opts.tol);
        }
    }

    #[test]
    fn flat_point_residual_equals_max_load() {
        let net = build_network(&fixture::appendix_b()).unwrap();
        let zero = LoadSet::zeros_like(&net);
        let flat = solve_exact(&net, &zero, SweepOptions::default()).unwrap();
        // Same voltages, but pretend the loads were present.
        let op = OperatingPoint::from_voltages(
            &net,
            flat.v0.clone(),
            flat.v_complex.clone(),
            net.base_loads(),
        )
        .unwrap();
        let max_load = op.s_hat.camax();
        assert!((residual(&net, &op) - max_load).abs() < 1e-12);
    }

    #[test]
    fn slack_power_balances_loads_plus_losses() {
        let net = build_network(&fixture::branched6()).unwrap();
        // Per-circuit mismatches accumulate into the global balance, so a
        // 1e-10 check needs a solve well below that.
        let op = solve_exact(
            &net,
            net.base_loads(),
            SweepOptions { tol: 1e-12, max_iter: 200 },
        )
        .unwrap();
        let mut from_head = C64::new(0.0, 0.0);
        for &j in net.topo_order() {
            if net.parent_of(j) == 0 {
                let off = net.node_offset(j);
                for k in 0..net.bus_phases(j).len() {
                    from_head += C64::new(op.p_flow[off + k], op.q_flow[off + k]);
                }
            }
        }
        let total_load: C64 = op.s_hat.sum();
        let mut total_loss = C64::new(0.0, 0.0);
        for &j in net.topo_order() {
            let seg = net.segment(j);
            let off = net.node_offset(j);
            let i = op.currents.rows(off, seg.phases.len()).clone_owned();
            total_loss += i.map(|x| x.conj()).component_mul(&(&seg.z * &i)).sum();
        }
        assert!((from_head - total_load - total_loss).norm() < 1e-10);
    }

    #[test]
    fn flows_satisfy_voltage_drop_reconstruction() {
        // For flows derived from any voltage snapshot, the drop equation is
        // an identity: V_to = V_from - z (S^* ⊘ V_from^*).
        let net = build_network(&fixture::branched6()).unwrap();
        let op = solve_exact(&net, net.base_loads(), SweepOptions::default()).unwrap();
        let mut v = op.v_complex.clone();
        for x in v.iter_mut() {
            *x *= C64::new(1.002, 0.0005); // arbitrary perturbation
        }
        let (p, q, _) = branch_flows_from_voltages(&net, &op.v0, &v).unwrap();
        for &j in net.topo_order() {
            let seg = net.segment(j);
            let off = net.node_offset(j);
            let v_from = voltage_of(&net, &op.v0, &v, seg.from, seg.phases);
            let s = DVector::from_fn(seg.phases.len(), |k, _| C64::new(p[off + k], q[off + k]));
            let rebuilt =
                &v_from - &seg.z * s.map(|x| x.conj()).component_div(&v_from.map(|x| x.conj()));
            let v_to = net.bus_block(&v, j).clone_owned();
            assert!((rebuilt - v_to).camax() < 1e-12);
        }
    }

    #[test]
    fn sweep_updates_shrink_on_fixtures() {
        for spec in [
            fixture::appendix_b(),
            fixture::branched6(),
            fixture::chain(10, crate::network::PhaseSet::ABC),
        ] {
            let net = build_network(&spec).unwrap();
            let (_, trace) =
                solve_exact_with_trace(&net, net.base_loads(), SweepOptions::default()).unwrap();
            for w in trace.windows(2).skip(2) {
                assert!(w[1] <= w[0] * 1.0000001, "trace not shrinking: {trace:?}");
            }
        }
    }

    #[test]
    fn iteration_cap_reports_nonconvergence() {
        let net = build_network(&fixture::appendix_b()).unwrap();
        let r = solve_exact(
            &net,
            net.base_loads(),
            SweepOptions { tol: 1e-15, max_iter: 1 },
        );
        match r {
            Err(Error::NonConvergence { iterations, residual }) => {
                assert_eq!(iterations, 1);
                assert!(residual.is_finite());
            }
            other => panic!("expected NonConvergence, got {other:?}"),
        }
    }
}
