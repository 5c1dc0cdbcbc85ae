//! Independent reference implementations and generators used by the test
//! suites (feature `testkit`). Nothing here shares code with the solver
//! paths it checks: the Newton oracle works on the bus-injection equations
//! with a finite-difference Jacobian, and the tree oracles solve the linear
//! model by leaf-to-root recursion instead of the compact block system.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::io::{BusSpec, LoadKind, LoadSpec, NetworkSpec, SegmentSpec, Units};
use crate::linear::LinearModelParams;
use crate::load::{bus_injection, delta_transform, LoadSet};
use crate::network::{restrict, Network, Phase, PhaseSet};
use crate::C64;

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

/// Bus-injection power mismatch at every phase node: power delivered through
/// the feeding segment minus power forwarded to children minus the local
/// consumption (delta transforms evaluated at the trial voltages).
fn injection_mismatch(net: &Network, loads: &LoadSet, v: &DVector<C64>) -> Result<DVector<C64>> {
    let mut f = DVector::zeros(net.m());
    for &j in net.topo_order() {
        let seg = net.segment(j);
        let off = net.node_offset(j);
        let n = seg.phases.len();
        let v_from = voltage_of(net, net.v0(), v, seg.from, seg.phases);
        let v_j = net.bus_block(v, j).clone_owned();
        let i_in = &seg.z_inv * (v_from - &v_j);
        let mut delivered = v_j.component_mul(&i_in.map(|x| x.conj()));
        for &k in net.children_of(j) {
            let child = net.segment(k);
            let v_child = net.bus_block(v, k).clone_owned();
            let v_j_sub = restrict(&v_j, seg.phases, child.phases);
            let i_out = &child.z_inv * (&v_j_sub - v_child);
            let s_out = v_j_sub.component_mul(&i_out.map(|x| x.conj()));
            for (t, ph) in child.phases.iter().enumerate() {
                delivered[seg.phases.rank(ph).unwrap()] -= s_out[t];
            }
        }
        let conns = net.delta_conns(j);
        let s_load = if conns.is_empty() {
            loads.wye[j - 1].clone()
        } else {
            let t = delta_transform(&v_j, net.bus_phases(j), conns)?;
            bus_injection(&loads.wye[j - 1], &loads.delta[j - 1], &t)?
        };
        for t in 0..n {
            f[off + t] = delivered[t] - s_load[t];
        }
    }
    Ok(f)
}

fn pack(v: &DVector<C64>) -> DVector<f64> {
    DVector::from_fn(2 * v.len(), |i, _| {
        if i % 2 == 0 {
            v[i / 2].re
        } else {
            v[i / 2].im
        }
    })
}

fn unpack(x: &DVector<f64>) -> DVector<C64> {
    DVector::from_fn(x.len() / 2, |i, _| C64::new(x[2 * i], x[2 * i + 1]))
}

/// Newton solver on the bus-injection equations with a central
/// finite-difference Jacobian. Returns the complex voltages over the
/// non-head phase nodes. Intended for small fixtures (<= a few dozen nodes).
pub fn newton_solve(net: &Network, loads: &LoadSet, tol: f64) -> Result<DVector<C64>> {
    let m = net.m();
    if m == 0 {
        return Ok(DVector::zeros(0));
    }
    // Flat start.
    let mut v = DVector::zeros(m);
    for &j in net.topo_order() {
        let block = restrict(net.v0(), net.bus_phases(0), net.bus_phases(j));
        v.rows_mut(net.node_offset(j), block.len()).copy_from(&block);
    }
    let mut x = pack(&v);
    let h = 1e-7;
    for _ in 0..60 {
        let f = pack(&injection_mismatch(net, loads, &unpack(&x))?);
        if f.amax() < tol {
            return Ok(unpack(&x));
        }
        let n = x.len();
        let mut jac = DMatrix::zeros(n, n);
        for c in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            let fp = pack(&injection_mismatch(net, loads, &unpack(&xp))?);
            let fm = pack(&injection_mismatch(net, loads, &unpack(&xm))?);
            jac.set_column(c, &((fp - fm) / (2.0 * h)));
        }
        let step = jac
            .lu()
            .solve(&f)
            .ok_or(Error::SingularSystem { cond: f64::INFINITY })?;
        x -= step;
    }
    Err(Error::NonConvergence {
        iterations: 60,
        residual: pack(&injection_mismatch(net, loads, &unpack(&x))?).amax(),
    })
}

/// Random radial network description with at most `max_phase_nodes` phase
/// nodes. Child phase sets are subsets of their parents', impedances are
/// symmetric and diagonally dominant, and every bus gets a small wye load.
pub fn random_radial_spec<R: Rng>(rng: &mut R, max_phase_nodes: usize) -> NetworkSpec {
    let mut phases_of: Vec<PhaseSet> = vec![PhaseSet::ABC];
    let mut parent_of: Vec<usize> = Vec::new();
    let mut nodes = 0usize;
    loop {
        let parent = rng.random_range(0..phases_of.len());
        let parent_ph = phases_of[parent];
        // Random nonempty subset of the parent phases.
        let avail: Vec<Phase> = parent_ph.iter().collect();
        let mut chosen = Vec::new();
        for p in &avail {
            if rng.random_range(0..100) < 60 {
                chosen.push(*p);
            }
        }
        if chosen.is_empty() {
            chosen.push(avail[rng.random_range(0..avail.len())]);
        }
        let ph = PhaseSet::from_phases(&chosen);
        if nodes + ph.len() > max_phase_nodes {
            break;
        }
        nodes += ph.len();
        phases_of.push(ph);
        parent_of.push(parent);
        if phases_of.len() > 1 && rng.random_range(0..100) < 2 {
            break;
        }
    }
    if parent_of.is_empty() {
        // Always emit at least one segment.
        phases_of.push(PhaseSet::ABC);
        parent_of.push(0);
    }
    let buses = phases_of
        .iter()
        .enumerate()
        .map(|(id, ph)| BusSpec {
            id,
            phases: ph.as_string(),
        })
        .collect();
    let mut segments = Vec::new();
    let mut loads = Vec::new();
    for (idx, &parent) in parent_of.iter().enumerate() {
        let j = idx + 1;
        let ph = phases_of[j];
        let n = ph.len();
        let sr: f64 = rng.random_range(0.002..0.01);
        let sx: f64 = sr * rng.random_range(1.2..2.2);
        let mr = sr * rng.random_range(0.1..0.35);
        let mx = sx * rng.random_range(0.2..0.45);
        let mat = |diag: f64, off: f64| -> Vec<Vec<f64>> {
            (0..n)
                .map(|r| (0..n).map(|c| if r == c { diag } else { off }).collect())
                .collect()
        };
        segments.push(SegmentSpec {
            from: parent,
            to: j,
            phases: ph.as_string(),
            r: mat(sr, mr),
            x: mat(sx, mx),
        });
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.08)).collect();
        let q: Vec<f64> = p.iter().map(|v| v * 0.5).collect();
        loads.push(LoadSpec {
            bus: j,
            kind: LoadKind::Wye,
            connections: None,
            p,
            q,
        });
    }
    NetworkSpec {
        bases: crate::fixture::DEFAULT_BASES,
        units: Units::PerUnit,
        buses,
        segments,
        slack: None,
        loads,
    }
}

/// Solution of `A x = e_node` read off the tree structure: `-1` on the
/// circuits of the node's phase along the path from the node's bus up to
/// the head, `0` elsewhere.
pub fn incidence_unit_solution(net: &Network, node: usize) -> DVector<f64> {
    let (bus, phase) = net.node_labels()[node];
    let mut x = DVector::zeros(net.m());
    let mut cur = bus;
    loop {
        let idx = net.node_index(cur, phase).expect("phase exists along the path");
        x[idx] = -1.0;
        let parent = net.parent_of(cur);
        if parent == 0 {
            break;
        }
        cur = parent;
    }
    x
}

/// Leaf-to-root recursion on the per-segment linear model; independent of
/// the compact block solve. Returns `(v_sq, p_flow, q_flow)`.
pub fn tree_linear_solve(
    net: &Network,
    params: &LinearModelParams,
    s_wye: &DVector<C64>,
    s_delta: &DVector<C64>,
    v0_sq: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let m = net.m();
    // Net consumption per node through the per-bus delta blocks.
    let mut p = DVector::zeros(m);
    let mut q = DVector::zeros(m);
    for j in 1..net.n_buses() {
        let off = net.node_offset(j);
        let n = net.bus_phases(j).len();
        let mut s = s_wye.rows(off, n).clone_owned();
        let kb = &params.k[j - 1];
        if kb.ncols() > 0 {
            let d = s_delta.rows(net.delta_offset(j), kb.ncols()).clone_owned();
            s += kb * d;
        }
        for t in 0..n {
            p[off + t] = s[t].re;
            q[off + t] = s[t].im;
        }
    }

    // Leaf-to-root: solve each segment's 2n x 2n flow block.
    let mut p_flow = DVector::zeros(m);
    let mut q_flow = DVector::zeros(m);
    for &j in net.topo_order().iter().rev() {
        let seg = net.segment(j);
        let sp = &params.segments[j - 1];
        let off = net.node_offset(j);
        let n = seg.phases.len();
        let mut sum_p = p.rows(off, n).clone_owned() + &sp.u_p;
        let mut sum_q = q.rows(off, n).clone_owned() + &sp.u_q;
        for &k in net.children_of(j) {
            let child = net.segment(k);
            let coff = net.node_offset(k);
            for (t, ph) in child.phases.iter().enumerate() {
                let r = seg.phases.rank(ph).unwrap();
                sum_p[r] += p_flow[coff + t];
                sum_q[r] += q_flow[coff + t];
            }
        }
        let mut block = DMatrix::zeros(2 * n, 2 * n);
        block
            .view_mut((0, 0), (n, n))
            .copy_from(&(DMatrix::identity(n, n) - &sp.g_p));
        block.view_mut((0, n), (n, n)).copy_from(&(-&sp.g_q));
        block.view_mut((n, 0), (n, n)).copy_from(&(-&sp.h_p));
        block
            .view_mut((n, n), (n, n))
            .copy_from(&(DMatrix::identity(n, n) - &sp.h_q));
        let mut rhs = DVector::zeros(2 * n);
        rhs.rows_mut(0, n).copy_from(&sum_p);
        rhs.rows_mut(n, n).copy_from(&sum_q);
        let sol = block
            .lu()
            .solve(&rhs)
            .ok_or(Error::SingularSystem { cond: f64::INFINITY })?;
        for t in 0..n {
            p_flow[off + t] = sol[t];
            q_flow[off + t] = sol[n + t];
        }
    }

    // Root-to-leaf voltage recursion.
    let mut v_sq = DVector::zeros(m);
    for &j in net.topo_order() {
        let seg = net.segment(j);
        let sp = &params.segments[j - 1];
        let off = net.node_offset(j);
        let n = seg.phases.len();
        let v_from = if seg.from == 0 {
            DVector::from_iterator(
                n,
                seg.phases
                    .iter()
                    .map(|ph| v0_sq[net.bus_phases(0).rank(ph).unwrap()]),
            )
        } else {
            let parent_ph = net.bus_phases(seg.from);
            DVector::from_iterator(
                n,
                seg.phases
                    .iter()
                    .map(|ph| v_sq[net.node_offset(seg.from) + parent_ph.rank(ph).unwrap()]),
            )
        };
        let pj = p_flow.rows(off, n).clone_owned();
        let qj = q_flow.rows(off, n).clone_owned();
        let vj = v_from + &sp.m_p * pj + &sp.m_q * qj + &sp.u_v;
        v_sq.rows_mut(off, n).copy_from(&vj);
    }
    Ok((v_sq, p_flow, q_flow))
}
