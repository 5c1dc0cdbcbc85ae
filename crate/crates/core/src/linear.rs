//! Feedback-updated linear power-flow model and the LinDistFlow baseline.
//!
//! Around a measured operating point the squared-magnitude voltage drop and
//! the power-balance loss terms are expanded to first order in the segment
//! flows `(P, Q)`. The per-segment blocks `M, G, H` are the resulting
//! Jacobians, the `u` vectors are the exact residuals at the base point (so
//! the linear model reproduces the base point exactly), and `K` is the delta
//! transform frozen at the measured voltages. Stacking everything in circuit
//! order gives one block linear system over the whole feeder, solved here
//! via the incidence blocks `(A0, A)`.
//!
//! With exactly balanced voltages, zero base flows, and zero residuals the
//! same structure reduces to the lossless extended LinDistFlow model, which
//! doubles as the offline baseline.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::load::{balanced_delta_transform, delta_transform};
use crate::network::{balanced_unit_voltages, restrict, IncidenceBlocks, Network};
use crate::sweep::OperatingPoint;
use crate::C64;

/// Voltage-scaled impedance variants of one segment, all evaluated at the
/// from-side voltages `V`:
/// `z~[k,l] = (V_k^*/V_l^*) z[k,l]`, `z-[k,l] = z[k,l]/V_l^*`,
/// `zv[k,l] = z[k,l]/(V_k V_l^*)`.
#[derive(Debug, Clone)]
pub struct ModifiedImpedances {
    pub z_tilde: DMatrix<C64>,
    pub z_bar: DMatrix<C64>,
    pub z_check: DMatrix<C64>,
}

pub fn modified_impedances(z: &DMatrix<C64>, v: &DVector<C64>) -> Result<ModifiedImpedances> {
    let n = z.nrows();
    if v.len() != n || z.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "modified impedances",
            expected: n,
            got: v.len(),
        });
    }
    if v.iter().any(|x| x.norm() == 0.0) {
        return Err(Error::ZeroVoltage);
    }
    let z_tilde = DMatrix::from_fn(n, n, |k, l| (v[k].conj() / v[l].conj()) * z[(k, l)]);
    let z_bar = DMatrix::from_fn(n, n, |k, l| z[(k, l)] / v[l].conj());
    let z_check = DMatrix::from_fn(n, n, |k, l| z[(k, l)] / (v[k] * v[l].conj()));
    Ok(ModifiedImpedances {
        z_tilde,
        z_bar,
        z_check,
    })
}

/// The quadratic remainder terms of one segment at flows `(p, q)`:
/// the nonlinear voltage-drop term and the real/reactive loss terms.
pub fn nonlinear_terms(
    mi: &ModifiedImpedances,
    p: &DVector<f64>,
    q: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let rb = mi.z_bar.map(|x| x.re);
    let xb = mi.z_bar.map(|x| x.im);
    let rc = mi.z_check.map(|x| x.re);
    let xc = mi.z_check.map(|x| x.im);

    let rbp = &rb * p;
    let xbq = &xb * q;
    let xbp = &xb * p;
    let rbq = &rb * q;
    let d_v = rbp.component_mul(&rbp)
        + xbq.component_mul(&xbq)
        + xbp.component_mul(&xbp)
        + rbq.component_mul(&rbq)
        + 2.0 * rbp.component_mul(&xbq)
        - 2.0 * xbp.component_mul(&rbq);

    let rcp = &rc * p;
    let xcq = &xc * q;
    let xcp = &xc * p;
    let rcq = &rc * q;
    let d_p = p.component_mul(&(&rcp + &xcq)) + q.component_mul(&(&rcq - &xcp));
    let d_q = p.component_mul(&(&xcp - &rcq)) + q.component_mul(&(&rcp + &xcq));
    (d_v, d_p, d_q)
}

/// Jacobians of the three nonlinear terms with respect to `(P, Q)`.
#[derive(Debug, Clone)]
pub struct SensitivityBlocks {
    pub f_p: DMatrix<f64>,
    pub f_q: DMatrix<f64>,
    pub g_p: DMatrix<f64>,
    pub g_q: DMatrix<f64>,
    pub h_p: DMatrix<f64>,
    pub h_q: DMatrix<f64>,
}

/// `diag(d) * m` (row scaling).
fn row_scale(d: &DVector<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= d[i];
    }
    out
}

pub fn sensitivity_blocks(
    mi: &ModifiedImpedances,
    p: &DVector<f64>,
    q: &DVector<f64>,
) -> SensitivityBlocks {
    let rb = mi.z_bar.map(|x| x.re);
    let xb = mi.z_bar.map(|x| x.im);
    let rc = mi.z_check.map(|x| x.re);
    let xc = mi.z_check.map(|x| x.im);

    let rbp = &rb * p;
    let xbq = &xb * q;
    let xbp = &xb * p;
    let rbq = &rb * q;
    let f_p = 2.0
        * (row_scale(&rbp, &rb) + row_scale(&xbp, &xb) + row_scale(&xbq, &rb)
            - row_scale(&rbq, &xb));
    let f_q = 2.0
        * (row_scale(&xbq, &xb) + row_scale(&rbq, &rb) + row_scale(&rbp, &xb)
            - row_scale(&xbp, &rb));

    let rcp = &rc * p;
    let xcq = &xc * q;
    let xcp = &xc * p;
    let rcq = &rc * q;
    let g_p = row_scale(p, &rc) + DMatrix::from_diagonal(&(&rcp + &xcq)) - row_scale(q, &xc);
    let g_q = row_scale(q, &rc) + DMatrix::from_diagonal(&(&rcq - &xcp)) + row_scale(p, &xc);
    let h_p = row_scale(p, &xc) + DMatrix::from_diagonal(&(&xcp - &rcq)) + row_scale(q, &rc);
    let h_q = row_scale(q, &xc) + DMatrix::from_diagonal(&(&xcq + &rcp)) - row_scale(p, &rc);

    SensitivityBlocks {
        f_p,
        f_q,
        g_p,
        g_q,
        h_p,
        h_q,
    }
}

/// Linear-model blocks of one segment plus its exact base-point residuals.
#[derive(Debug, Clone)]
pub struct SegmentParams {
    pub m_p: DMatrix<f64>,
    pub m_q: DMatrix<f64>,
    pub g_p: DMatrix<f64>,
    pub g_q: DMatrix<f64>,
    pub h_p: DMatrix<f64>,
    pub h_q: DMatrix<f64>,
    pub u_v: DVector<f64>,
    pub u_p: DVector<f64>,
    pub u_q: DVector<f64>,
}

/// Per-segment and per-bus parameters of the linear model at one
/// operating point (or the operating-point-free LinDistFlow values).
#[derive(Debug, Clone)]
pub struct LinearModelParams {
    /// Bus-major by child bus id, matching the circuit ordering.
    pub segments: Vec<SegmentParams>,
    /// Delta transform per non-head bus (`n_j x n_conns_j`, possibly 0 cols).
    pub k: Vec<DMatrix<C64>>,
    /// Measurement step the parameters were computed from, if any.
    pub step: Option<usize>,
}

/// Computes the time-varying parameters from a measured operating point.
pub fn update_parameters(net: &Network, op: &OperatingPoint) -> Result<LinearModelParams> {
    let mut segments = Vec::with_capacity(net.n());
    for j in 1..net.n_buses() {
        let seg = net.segment(j);
        let n = seg.phases.len();
        let off = net.node_offset(j);
        let v_from = parent_voltage(net, &op.v0, &op.v_complex, j);
        let mi = modified_impedances(&seg.z, &v_from)?;
        let p_hat = op.p_flow.rows(off, n).clone_owned();
        let q_hat = op.q_flow.rows(off, n).clone_owned();
        let sb = sensitivity_blocks(&mi, &p_hat, &q_hat);

        let m_p = -2.0 * mi.z_tilde.map(|x| x.re) + &sb.f_p;
        let m_q = -2.0 * mi.z_tilde.map(|x| x.im) + &sb.f_q;

        let v_to_sq = op.v_sq.rows(off, n).clone_owned();
        let v_from_sq = v_from.map(|x| x.norm_sqr());
        let u_v = v_to_sq - v_from_sq - &m_p * &p_hat - &m_q * &q_hat;

        let (down_p, down_q) = downstream_flows(net, op, j);
        let s_node = op.s_hat.rows(off, n).clone_owned();
        let u_p =
            &p_hat - down_p - s_node.map(|x| x.re) - &sb.g_p * &p_hat - &sb.g_q * &q_hat;
        let u_q =
            &q_hat - down_q - s_node.map(|x| x.im) - &sb.h_p * &p_hat - &sb.h_q * &q_hat;

        segments.push(SegmentParams {
            m_p,
            m_q,
            g_p: sb.g_p,
            g_q: sb.g_q,
            h_p: sb.h_p,
            h_q: sb.h_q,
            u_v,
            u_p,
            u_q,
        });
    }

    let mut k = Vec::with_capacity(net.n());
    for j in 1..net.n_buses() {
        let conns = net.delta_conns(j);
        let n = net.bus_phases(j).len();
        if conns.is_empty() {
            k.push(DMatrix::zeros(n, 0));
        } else {
            let vj = net.bus_block(&op.v_complex, j).clone_owned();
            k.push(delta_transform(&vj, net.bus_phases(j), conns)?.t);
        }
    }
    Ok(LinearModelParams {
        segments,
        k,
        step: None,
    })
}

/// The lossless extended LinDistFlow parameters: modified impedances at
/// exactly balanced unit voltages, zero loss blocks, zero residuals, and
/// the constant balanced delta transforms. Needs no measurements.
pub fn lindistflow_params(net: &Network) -> LinearModelParams {
    let mut segments = Vec::with_capacity(net.n());
    for j in 1..net.n_buses() {
        let seg = net.segment(j);
        let n = seg.phases.len();
        let v_bal = balanced_unit_voltages(seg.phases);
        let mi = modified_impedances(&seg.z, &v_bal).expect("balanced voltages are nonzero");
        segments.push(SegmentParams {
            m_p: -2.0 * mi.z_tilde.map(|x| x.re),
            m_q: -2.0 * mi.z_tilde.map(|x| x.im),
            g_p: DMatrix::zeros(n, n),
            g_q: DMatrix::zeros(n, n),
            h_p: DMatrix::zeros(n, n),
            h_q: DMatrix::zeros(n, n),
            u_v: DVector::zeros(n),
            u_p: DVector::zeros(n),
            u_q: DVector::zeros(n),
        });
    }
    let mut k = Vec::with_capacity(net.n());
    for j in 1..net.n_buses() {
        let conns = net.delta_conns(j);
        let n = net.bus_phases(j).len();
        if conns.is_empty() {
            k.push(DMatrix::zeros(n, 0));
        } else {
            k.push(
                balanced_delta_transform(net.bus_phases(j), conns)
                    .expect("declared connections are valid")
                    .t,
            );
        }
    }
    LinearModelParams {
        segments,
        k,
        step: None,
    }
}

fn parent_voltage(
    net: &Network,
    v0: &DVector<C64>,
    v: &DVector<C64>,
    child: usize,
) -> DVector<C64> {
    let seg = net.segment(child);
    if seg.from == 0 {
        restrict(v0, net.bus_phases(0), seg.phases)
    } else {
        let block = net.bus_block(v, seg.from).clone_owned();
        restrict(&block, net.bus_phases(seg.from), seg.phases)
    }
}

fn downstream_flows(net: &Network, op: &OperatingPoint, j: usize) -> (DVector<f64>, DVector<f64>) {
    let phases = net.bus_phases(j);
    let mut p = DVector::zeros(phases.len());
    let mut q = DVector::zeros(phases.len());
    for &k in net.children_of(j) {
        let child_phases = net.segment(k).phases;
        let off = net.node_offset(k);
        for (t, ph) in child_phases.iter().enumerate() {
            let r = phases.rank(ph).expect("child phases within parent");
            p[r] += op.p_flow[off + t];
            q[r] += op.q_flow[off + t];
        }
    }
    (p, q)
}

/// Block-diagonal stacking of the per-segment parameters plus the incidence
/// structure: everything needed to solve the linear model in one shot.
#[derive(Debug, Clone)]
pub struct CompactModel {
    pub m_p: DMatrix<f64>,
    pub m_q: DMatrix<f64>,
    pub g_p: DMatrix<f64>,
    pub g_q: DMatrix<f64>,
    pub h_p: DMatrix<f64>,
    pub h_q: DMatrix<f64>,
    /// Block-diagonal delta transform, `m x n_delta`.
    pub k: DMatrix<C64>,
    pub u_v: DVector<f64>,
    pub u_p: DVector<f64>,
    pub u_q: DVector<f64>,
    pub inc: IncidenceBlocks,
}

pub fn assemble_compact(params: &LinearModelParams, inc: &IncidenceBlocks) -> Result<CompactModel> {
    let m = inc.a.nrows();
    let total: usize = params.segments.iter().map(|s| s.m_p.nrows()).sum();
    if total != m || params.segments.len() != params.k.len() {
        return Err(Error::MissingSegmentParams {
            what: format!("expected blocks covering {m} circuits, got {total}"),
        });
    }
    let n_delta: usize = params.k.iter().map(|k| k.ncols()).sum();
    let mut cm = CompactModel {
        m_p: DMatrix::zeros(m, m),
        m_q: DMatrix::zeros(m, m),
        g_p: DMatrix::zeros(m, m),
        g_q: DMatrix::zeros(m, m),
        h_p: DMatrix::zeros(m, m),
        h_q: DMatrix::zeros(m, m),
        k: DMatrix::zeros(m, n_delta),
        u_v: DVector::zeros(m),
        u_p: DVector::zeros(m),
        u_q: DVector::zeros(m),
        inc: inc.clone(),
    };
    let mut off = 0;
    let mut k_off = 0;
    for (seg, kb) in params.segments.iter().zip(&params.k) {
        let n = seg.m_p.nrows();
        if kb.nrows() != n {
            return Err(Error::MissingSegmentParams {
                what: format!("delta block rows {} do not match segment size {n}", kb.nrows()),
            });
        }
        cm.m_p.view_mut((off, off), (n, n)).copy_from(&seg.m_p);
        cm.m_q.view_mut((off, off), (n, n)).copy_from(&seg.m_q);
        cm.g_p.view_mut((off, off), (n, n)).copy_from(&seg.g_p);
        cm.g_q.view_mut((off, off), (n, n)).copy_from(&seg.g_q);
        cm.h_p.view_mut((off, off), (n, n)).copy_from(&seg.h_p);
        cm.h_q.view_mut((off, off), (n, n)).copy_from(&seg.h_q);
        cm.u_v.rows_mut(off, n).copy_from(&seg.u_v);
        cm.u_p.rows_mut(off, n).copy_from(&seg.u_p);
        cm.u_q.rows_mut(off, n).copy_from(&seg.u_q);
        cm.k
            .view_mut((off, k_off), (n, kb.ncols()))
            .copy_from(kb);
        off += n;
        k_off += kb.ncols();
    }
    Ok(cm)
}

/// Voltage (squared magnitudes) and flow solution of the linear model.
#[derive(Debug, Clone)]
pub struct LinearSolution {
    pub v_sq: DVector<f64>,
    pub p_flow: DVector<f64>,
    pub q_flow: DVector<f64>,
}

const COND_LIMIT: f64 = 1e12;

/// LU solve with a cheap condition estimate from the U-diagonal spread.
fn lu_solve(mat: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let lu = mat.clone().lu();
    let diag = lu.u().diagonal();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for d in diag.iter() {
        lo = lo.min(d.abs());
        hi = hi.max(d.abs());
    }
    let cond = if lo == 0.0 { f64::INFINITY } else { hi / lo };
    if !cond.is_finite() || cond > COND_LIMIT {
        return Err(Error::SingularSystem { cond });
    }
    lu.solve(rhs).ok_or(Error::SingularSystem { cond })
}

/// Solves the compact linear model for the given loads.
///
/// Net consumptions come from the wye vector plus `K` applied to the delta
/// connection vector; the coupled flow system is solved first, then the
/// voltage equation through the transposed incidence block.
pub fn solve_linear(
    cm: &CompactModel,
    s_wye: &DVector<C64>,
    s_delta: &DVector<C64>,
    v0_sq: &DVector<f64>,
) -> Result<LinearSolution> {
    let m = cm.inc.a.nrows();
    if s_wye.len() != m {
        return Err(Error::DimensionMismatch {
            what: "wye load vector",
            expected: m,
            got: s_wye.len(),
        });
    }
    if s_delta.len() != cm.k.ncols() {
        return Err(Error::DimensionMismatch {
            what: "delta load vector",
            expected: cm.k.ncols(),
            got: s_delta.len(),
        });
    }
    if v0_sq.len() != cm.inc.a0.nrows() {
        return Err(Error::DimensionMismatch {
            what: "head voltage vector",
            expected: cm.inc.a0.nrows(),
            got: v0_sq.len(),
        });
    }
    if m == 0 {
        return Ok(LinearSolution {
            v_sq: DVector::zeros(0),
            p_flow: DVector::zeros(0),
            q_flow: DVector::zeros(0),
        });
    }

    let s = s_wye + &cm.k * s_delta;
    let p = s.map(|x| x.re);
    let q = s.map(|x| x.im);

    // [[A + Gp, Gq], [Hp, A + Hq]] [P; Q] = [-p - up; -q - uq]
    let mut big = DMatrix::zeros(2 * m, 2 * m);
    big.view_mut((0, 0), (m, m)).copy_from(&(&cm.inc.a + &cm.g_p));
    big.view_mut((0, m), (m, m)).copy_from(&cm.g_q);
    big.view_mut((m, 0), (m, m)).copy_from(&cm.h_p);
    big.view_mut((m, m), (m, m)).copy_from(&(&cm.inc.a + &cm.h_q));
    let mut rhs = DMatrix::zeros(2 * m, 1);
    rhs.view_mut((0, 0), (m, 1)).copy_from(&(-(&p) - &cm.u_p));
    rhs.view_mut((m, 0), (m, 1)).copy_from(&(-(&q) - &cm.u_q));
    let pq = lu_solve(&big, &rhs)?;
    let p_flow = pq.view((0, 0), (m, 1)).column(0).clone_owned();
    let q_flow = pq.view((m, 0), (m, 1)).column(0).clone_owned();

    // A^T v = -A0 v0 - Mp P - Mq Q - uv
    let rhs_v = -cm.inc.a0.transpose() * v0_sq - &cm.m_p * &p_flow - &cm.m_q * &q_flow - &cm.u_v;
    let v = lu_solve(
        &cm.inc.a.transpose(),
        &DMatrix::from_column_slice(m, 1, rhs_v.as_slice()),
    )?
    .column(0)
    .clone_owned();

    Ok(LinearSolution {
        v_sq: v,
        p_flow,
        q_flow,
    })
}

/// Sensitivity of the squared voltage magnitudes to reactive injections at
/// the selected phase nodes (`m x len(selector)`). Injections enter the load
/// balance with a negative sign, so positive entries mean "injecting vars
/// raises the voltage".
pub fn voltage_sensitivity(cm: &CompactModel, selector: &[usize]) -> Result<DMatrix<f64>> {
    let m = cm.inc.a.nrows();
    let k = selector.len();
    for &idx in selector {
        if idx >= m {
            return Err(Error::DimensionMismatch {
                what: "sensitivity selector",
                expected: m,
                got: idx,
            });
        }
    }
    if k == 0 || m == 0 {
        return Ok(DMatrix::zeros(m, k));
    }

    let mut big = DMatrix::zeros(2 * m, 2 * m);
    big.view_mut((0, 0), (m, m)).copy_from(&(&cm.inc.a + &cm.g_p));
    big.view_mut((0, m), (m, m)).copy_from(&cm.g_q);
    big.view_mut((m, 0), (m, m)).copy_from(&cm.h_p);
    big.view_mut((m, m), (m, m)).copy_from(&(&cm.inc.a + &cm.h_q));
    // d(rhs)/d(q_g): the reactive balance row gains +1 per selected node.
    let mut rhs = DMatrix::zeros(2 * m, k);
    for (c, &idx) in selector.iter().enumerate() {
        rhs[(m + idx, c)] = 1.0;
    }
    let x = lu_solve(&big, &rhs)?;
    let dp = x.view((0, 0), (m, k)).clone_owned();
    let dq = x.view((m, 0), (m, k)).clone_owned();
    let rhs_v = -(&cm.m_p * dp + &cm.m_q * dq);
    lu_solve(&cm.inc.a.transpose(), &rhs_v)
}
