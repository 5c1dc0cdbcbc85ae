//! Wye and delta load models.
//!
//! A delta load consumes power across phase pairs; the voltage-dependent
//! transformation matrix `T` maps its phase-to-phase powers to per-phase
//! powers drawn from the bus: `s_delta = T * s_delta_pairs`. Each column of
//! `T` sums to one, so total complex power is conserved. Open deltas use a
//! subset of the `ab, bc, ca` connections; untouched phases present at the
//! bus get a zero row.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{balanced_unit_voltages, Network, Phase, PhaseSet};
use crate::C64;

/// Voltage-difference magnitude below which a delta connection is treated
/// as degenerate instead of producing huge transform entries.
pub const DEGENERACY_THRESHOLD: f64 = 1e-9;

/// Phase-to-phase connection, totally ordered `ab < bc < ca`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DeltaPair {
    #[serde(rename = "ab")]
    Ab,
    #[serde(rename = "bc")]
    Bc,
    #[serde(rename = "ca")]
    Ca,
}

impl DeltaPair {
    pub const ALL: [DeltaPair; 3] = [DeltaPair::Ab, DeltaPair::Bc, DeltaPair::Ca];

    pub fn index(self) -> usize {
        match self {
            DeltaPair::Ab => 0,
            DeltaPair::Bc => 1,
            DeltaPair::Ca => 2,
        }
    }

    /// The (from, to) phases of the connection.
    pub fn phases(self) -> (Phase, Phase) {
        match self {
            DeltaPair::Ab => (Phase::A, Phase::B),
            DeltaPair::Bc => (Phase::B, Phase::C),
            DeltaPair::Ca => (Phase::C, Phase::A),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DeltaPair::Ab => "ab",
            DeltaPair::Bc => "bc",
            DeltaPair::Ca => "ca",
        }
    }

    pub fn parse(s: &str) -> Result<DeltaPair> {
        match s {
            "ab" => Ok(DeltaPair::Ab),
            "bc" => Ok(DeltaPair::Bc),
            "ca" => Ok(DeltaPair::Ca),
            _ => Err(Error::parse(format!("invalid delta connection '{s}'"))),
        }
    }
}

/// Ordered subset of `{ab, bc, ca}`, stored as a bitmask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConnSet(u8);

impl ConnSet {
    pub const EMPTY: ConnSet = ConnSet(0);
    pub const CLOSED: ConnSet = ConnSet(0b111);

    pub fn from_pairs(pairs: &[DeltaPair]) -> ConnSet {
        let mut bits = 0;
        for p in pairs {
            bits |= 1 << p.index();
        }
        ConnSet(bits)
    }

    /// Parses a connection list like `["ab", "bc"]`; must be in ascending
    /// `ab < bc < ca` order without repeats and non-empty.
    pub fn parse_list(list: &[String]) -> Result<ConnSet> {
        let mut bits = 0u8;
        let mut last = -1i32;
        for s in list {
            let p = DeltaPair::parse(s)?;
            let idx = p.index() as i32;
            if idx <= last {
                return Err(Error::parse(
                    "delta connections must be listed in ascending ab<bc<ca order",
                ));
            }
            last = idx;
            bits |= 1 << p.index();
        }
        if bits == 0 {
            return Err(Error::parse("empty delta connection set"));
        }
        Ok(ConnSet(bits))
    }

    pub fn contains(self, p: DeltaPair) -> bool {
        self.0 & (1 << p.index()) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Connections in `ab < bc < ca` order.
    pub fn iter(self) -> impl Iterator<Item = DeltaPair> {
        DeltaPair::ALL.into_iter().filter(move |p| self.contains(*p))
    }

    pub fn rank(self, p: DeltaPair) -> Option<usize> {
        if !self.contains(p) {
            return None;
        }
        Some((self.0 & ((1 << p.index()) - 1)).count_ones() as usize)
    }

    pub fn names(self) -> Vec<String> {
        self.iter().map(|p| p.name().to_string()).collect()
    }
}

/// Net wye consumption at a bus, one complex entry per bus phase.
#[derive(Debug, Clone)]
pub struct WyeLoad {
    pub bus: usize,
    pub s: DVector<C64>,
}

/// Net delta consumption at a bus, one complex entry per declared connection.
#[derive(Debug, Clone)]
pub struct DeltaLoad {
    pub bus: usize,
    pub conns: ConnSet,
    pub s: DVector<C64>,
}

/// Voltage-dependent transformation matrix of a delta load
/// (`n_phases x n_connections`; every column sums to one).
#[derive(Debug, Clone)]
pub struct DeltaTransform {
    pub t: DMatrix<C64>,
}

/// Builds the delta transformation matrix at the given bus voltages.
///
/// Column for connection `φφ'` holds `V_φ/(V_φ - V_φ')` at row `φ` and
/// `-V_φ'/(V_φ - V_φ')` at row `φ'`; rows of untouched phases are zero.
pub fn delta_transform(
    v: &DVector<C64>,
    bus_phases: PhaseSet,
    conns: ConnSet,
) -> Result<DeltaTransform> {
    if v.len() != bus_phases.len() {
        return Err(Error::DimensionMismatch {
            what: "delta transform voltages",
            expected: bus_phases.len(),
            got: v.len(),
        });
    }
    let mut t = DMatrix::zeros(bus_phases.len(), conns.len());
    for (col, pair) in conns.iter().enumerate() {
        let (pa, pb) = pair.phases();
        let ra = bus_phases.rank(pa).ok_or(Error::MissingPhase {
            bus: usize::MAX,
            phase: pa.letter(),
            what: "delta connection",
        })?;
        let rb = bus_phases.rank(pb).ok_or(Error::MissingPhase {
            bus: usize::MAX,
            phase: pb.letter(),
            what: "delta connection",
        })?;
        let diff = v[ra] - v[rb];
        if diff.norm() < DEGENERACY_THRESHOLD {
            return Err(Error::DegenerateVoltagePair {
                pair: pair.name(),
                gap: diff.norm(),
            });
        }
        t[(ra, col)] = v[ra] / diff;
        t[(rb, col)] = -v[rb] / diff;
    }
    Ok(DeltaTransform { t })
}

/// The constant transform obtained at exactly balanced unit voltages;
/// used by the lossless LinDistFlow baseline.
pub fn balanced_delta_transform(bus_phases: PhaseSet, conns: ConnSet) -> Result<DeltaTransform> {
    delta_transform(&balanced_unit_voltages(bus_phases), bus_phases, conns)
}

/// Net bus consumption `s = s_wye + T * s_delta_pairs`.
pub fn bus_injection(
    s_wye: &DVector<C64>,
    s_delta: &DVector<C64>,
    t: &DeltaTransform,
) -> Result<DVector<C64>> {
    if t.t.nrows() != s_wye.len() {
        return Err(Error::DimensionMismatch {
            what: "bus injection rows",
            expected: t.t.nrows(),
            got: s_wye.len(),
        });
    }
    if t.t.ncols() != s_delta.len() {
        return Err(Error::DimensionMismatch {
            what: "bus injection delta values",
            expected: t.t.ncols(),
            got: s_delta.len(),
        });
    }
    Ok(s_wye + &t.t * s_delta)
}

/// Complete load values for one time step: wye per non-head bus (over its
/// phases) and delta per non-head bus (over its declared connections).
/// Bus `j` lives at index `j - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadSet {
    pub wye: Vec<DVector<C64>>,
    pub delta: Vec<DVector<C64>>,
}

impl LoadSet {
    pub fn zeros_like(net: &Network) -> LoadSet {
        LoadSet {
            wye: (1..net.n_buses())
                .map(|j| DVector::zeros(net.bus_phases(j).len()))
                .collect(),
            delta: (1..net.n_buses())
                .map(|j| DVector::zeros(net.delta_conns(j).len()))
                .collect(),
        }
    }

    /// Flat wye vector over all phase nodes (length `m`).
    pub fn s_wye_flat(&self, net: &Network) -> DVector<C64> {
        let mut out = DVector::zeros(net.m());
        for j in 1..net.n_buses() {
            out.rows_mut(net.node_offset(j), self.wye[j - 1].len())
                .copy_from(&self.wye[j - 1]);
        }
        out
    }

    /// Flat delta vector over all declared connections (length `n_delta`).
    pub fn s_delta_flat(&self, net: &Network) -> DVector<C64> {
        let mut out = DVector::zeros(net.n_delta());
        for j in 1..net.n_buses() {
            if !self.delta[j - 1].is_empty() {
                out.rows_mut(net.delta_offset(j), self.delta[j - 1].len())
                    .copy_from(&self.delta[j - 1]);
            }
        }
        out
    }

    /// Every load value scaled by a real factor.
    pub fn scaled(&self, factor: f64) -> LoadSet {
        LoadSet {
            wye: self.wye.iter().map(|v| v * C64::new(factor, 0.0)).collect(),
            delta: self.delta.iter().map(|v| v * C64::new(factor, 0.0)).collect(),
        }
    }

    /// Adds a complex consumption at one phase node (negative for injection).
    pub fn add_wye_at_node(&mut self, net: &Network, node: usize, s: C64) {
        let (bus, phase) = net.node_labels()[node];
        let rank = net.bus_phases(bus).rank(phase).expect("label phase");
        self.wye[bus - 1][rank] += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_6, PI};

    fn balanced_abc() -> DVector<C64> {
        balanced_unit_voltages(PhaseSet::ABC)
    }

    fn max_abs(m: &DMatrix<C64>, e: &DMatrix<C64>) -> f64 {
        (m - e).camax()
    }

    #[test]
    fn closed_delta_at_balanced_voltages_is_the_constant_matrix() {
        let t = delta_transform(&balanced_abc(), PhaseSet::ABC, ConnSet::CLOSED)
            .unwrap()
            .t;
        let k = 3f64.sqrt() / 3.0;
        let em = C64::from_polar(k, -FRAC_PI_6);
        let ep = C64::from_polar(k, FRAC_PI_6);
        let z = C64::new(0.0, 0.0);
        let expected = DMatrix::from_row_slice(3, 3, &[em, z, ep, ep, em, z, z, ep, em]);
        assert!(max_abs(&t, &expected) < 1e-12, "{t}");
    }

    #[test]
    fn open_delta_ab_at_balanced_voltages() {
        let phases = PhaseSet::parse("ab").unwrap();
        let v = balanced_unit_voltages(phases);
        let t = delta_transform(&v, phases, ConnSet::from_pairs(&[DeltaPair::Ab]))
            .unwrap()
            .t;
        let k = 3f64.sqrt() / 3.0;
        assert!((t[(0, 0)] - C64::from_polar(k, -FRAC_PI_6)).norm() < 1e-12);
        assert!((t[(1, 0)] - C64::from_polar(k, FRAC_PI_6)).norm() < 1e-12);
        let col_sum: C64 = t.column(0).sum();
        assert!((col_sum - C64::new(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn unbalanced_closed_delta_matches_entrywise_evaluation() {
        let v = DVector::from_vec(vec![
            C64::from_polar(1.02, 1f64.to_radians()),
            C64::from_polar(0.97, -122f64.to_radians()),
            C64::from_polar(1.01, 119f64.to_radians()),
        ]);
        let t = delta_transform(&v, PhaseSet::ABC, ConnSet::CLOSED).unwrap().t;
        // Scalar re-evaluation of each entry of the transform.
        let (va, vb, vc) = (v[0], v[1], v[2]);
        let expected = DMatrix::from_row_slice(
            3,
            3,
            &[
                va / (va - vb),
                C64::new(0.0, 0.0),
                -va / (vc - va),
                -vb / (va - vb),
                vb / (vb - vc),
                C64::new(0.0, 0.0),
                C64::new(0.0, 0.0),
                -vc / (vb - vc),
                vc / (vc - va),
            ],
        );
        assert!(max_abs(&t, &expected) < 1e-15);
    }

    #[test]
    fn balanced_transform_two_connection_case() {
        // Evaluate the two-connection pattern entries at balanced spacing.
        let t = balanced_delta_transform(
            PhaseSet::ABC,
            ConnSet::from_pairs(&[DeltaPair::Ab, DeltaPair::Bc]),
        )
        .unwrap()
        .t;
        let v = balanced_abc();
        let (va, vb, vc) = (v[0], v[1], v[2]);
        let expected = DMatrix::from_row_slice(
            3,
            2,
            &[
                va / (va - vb),
                C64::new(0.0, 0.0),
                -vb / (va - vb),
                vb / (vb - vc),
                C64::new(0.0, 0.0),
                -vc / (vb - vc),
            ],
        );
        assert!(max_abs(&t, &expected) < 1e-15);
        // Magnitudes sqrt(3)/3 and angles +/- 30 degrees.
        let k = 3f64.sqrt() / 3.0;
        assert_abs_diff_eq!(t[(0, 0)].norm(), k, epsilon = 1e-12);
        assert_abs_diff_eq!(t[(0, 0)].arg(), -PI / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t[(1, 0)].arg(), PI / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn open_delta_is_closed_delta_with_column_dropped() {
        let v = DVector::from_vec(vec![
            C64::from_polar(1.03, 0.02),
            C64::from_polar(0.96, -2.1),
            C64::from_polar(1.0, 2.05),
        ]);
        let closed = delta_transform(&v, PhaseSet::ABC, ConnSet::CLOSED).unwrap().t;
        for (i, pair) in DeltaPair::ALL.into_iter().enumerate() {
            let open = delta_transform(&v, PhaseSet::ABC, ConnSet::from_pairs(&[pair]))
                .unwrap()
                .t;
            assert!((closed.column(i) - open.column(0)).camax() < 1e-15);
        }
    }

    #[test]
    fn degenerate_pair_is_rejected() {
        let v = DVector::from_vec(vec![
            C64::new(1.0, 0.0),
            C64::new(1.0, 1e-10),
            C64::from_polar(1.0, 2.0),
        ]);
        let r = delta_transform(&v, PhaseSet::ABC, ConnSet::CLOSED);
        assert!(matches!(r, Err(Error::DegenerateVoltagePair { pair: "ab", .. })));
    }

    #[test]
    fn missing_phase_is_rejected() {
        let phases = PhaseSet::parse("ab").unwrap();
        let v = balanced_unit_voltages(phases);
        let r = delta_transform(&v, phases, ConnSet::from_pairs(&[DeltaPair::Bc]));
        assert!(matches!(r, Err(Error::MissingPhase { phase: 'c', .. })));
    }

    #[test]
    fn bus_injection_cases() {
        let t = delta_transform(&balanced_abc(), PhaseSet::ABC, ConnSet::CLOSED).unwrap();
        let zero3 = DVector::zeros(3);
        // No loads at all.
        let s = bus_injection(&zero3, &zero3, &t).unwrap();
        assert!(s.camax() < 1e-15);
        // Wye only.
        let wye = DVector::from_vec(vec![
            C64::new(0.1, 0.05),
            C64::new(0.2, 0.1),
            C64::new(0.0, 0.0),
        ]);
        let s = bus_injection(&wye, &zero3, &t).unwrap();
        assert!((s.clone() - wye).camax() < 1e-15);
        // Pure-real balanced delta: total real power conserved, imaginary
        // parts cancel across phases.
        let d = DVector::from_vec(vec![
            C64::new(0.03, 0.0),
            C64::new(0.03, 0.0),
            C64::new(0.03, 0.0),
        ]);
        let s = bus_injection(&zero3, &d, &t).unwrap();
        let total: C64 = s.sum();
        assert_abs_diff_eq!(total.re, 0.09, epsilon = 1e-14);
        assert_abs_diff_eq!(total.im, 0.0, epsilon = 1e-14);
        // Mismatched dimensions.
        let bad = DVector::zeros(2);
        assert!(matches!(
            bus_injection(&bad, &zero3, &t),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    proptest! {
        // Column sums are exactly 1 and total complex power is conserved for
        // any nondegenerate voltages and any connection subset.
        #[test]
        fn column_sums_and_power_conservation(
            mags in proptest::collection::vec(0.85f64..1.15, 3),
            angle_jitter in proptest::collection::vec(-0.3f64..0.3, 3),
            conn_bits in 1u8..8,
            p in proptest::collection::vec(-0.5f64..0.5, 3),
            q in proptest::collection::vec(-0.5f64..0.5, 3),
        ) {
            let v = DVector::from_iterator(3, (0..3).map(|i| {
                C64::from_polar(mags[i], Phase::ALL[i].balanced_angle() + angle_jitter[i])
            }));
            let conns = ConnSet(conn_bits);
            let t = delta_transform(&v, PhaseSet::ABC, conns).unwrap();
            for c in 0..conns.len() {
                let sum: C64 = t.t.column(c).sum();
                prop_assert!((sum - C64::new(1.0, 0.0)).norm() < 1e-12);
            }
            let s_pairs = DVector::from_iterator(
                conns.len(),
                (0..conns.len()).map(|i| C64::new(p[i], q[i])),
            );
            let per_phase = &t.t * &s_pairs;
            let lhs: C64 = per_phase.sum();
            let rhs: C64 = s_pairs.sum();
            prop_assert!((lhs - rhs).norm() < 1e-12);
        }
    }
}
