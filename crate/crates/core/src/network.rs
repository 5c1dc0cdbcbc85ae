//! Radial unbalanced network topology and its signed incidence blocks.
//!
//! Buses carry ordered phase sets `Φ ⊆ {a,b,c}`. Every non-head bus `j` is
//! fed by exactly one line segment `(bp(j), j)` whose phase set equals `Φ_j`.
//! Phase nodes of the non-head buses and phase circuits of the segments are
//! both indexed bus-major (ascending bus id, phases in `a < b < c` order),
//! which makes the two index spaces coincide: circuit `ℓ_j^φ` has the same
//! flat index as node `j^φ`.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{LoadKind, NetworkSpec, Units};
use crate::load::{ConnSet, LoadSet};
use crate::C64;

/// One of the three phases, totally ordered `a < b < c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "a")]
    A,
    #[serde(rename = "b")]
    B,
    #[serde(rename = "c")]
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        match self {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Phase::A => 'a',
            Phase::B => 'b',
            Phase::C => 'c',
        }
    }

    pub fn from_letter(c: char) -> Result<Phase> {
        match c {
            'a' => Ok(Phase::A),
            'b' => Ok(Phase::B),
            'c' => Ok(Phase::C),
            _ => Err(Error::parse(format!("invalid phase letter '{c}'"))),
        }
    }

    /// Nominal balanced angle: 0, -120, +120 degrees in radians.
    pub fn balanced_angle(self) -> f64 {
        match self {
            Phase::A => 0.0,
            Phase::B => -2.0 * std::f64::consts::FRAC_PI_3,
            Phase::C => 2.0 * std::f64::consts::FRAC_PI_3,
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Ordered subset of `{a, b, c}`, stored as a bitmask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PhaseSet(u8);

impl PhaseSet {
    pub const ABC: PhaseSet = PhaseSet(0b111);
    pub const EMPTY: PhaseSet = PhaseSet(0);

    pub fn from_phases(phases: &[Phase]) -> PhaseSet {
        let mut bits = 0;
        for p in phases {
            bits |= 1 << p.index();
        }
        PhaseSet(bits)
    }

    /// Parses a phase string like `"abc"`, `"ab"`, `"ac"` or `"a"`.
    /// Letters must appear in `a < b < c` order without repeats.
    pub fn parse(s: &str) -> Result<PhaseSet> {
        let mut bits = 0u8;
        let mut last = -1i32;
        for c in s.chars() {
            let p = Phase::from_letter(c)?;
            let idx = p.index() as i32;
            if idx <= last {
                return Err(Error::parse(format!(
                    "phase string '{s}' is not in ascending a<b<c order"
                )));
            }
            last = idx;
            bits |= 1 << p.index();
        }
        if bits == 0 {
            return Err(Error::parse("empty phase set"));
        }
        Ok(PhaseSet(bits))
    }

    pub fn contains(self, p: Phase) -> bool {
        self.0 & (1 << p.index()) != 0
    }

    pub fn is_subset_of(self, other: PhaseSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Phases in `a < b < c` order.
    pub fn iter(self) -> impl Iterator<Item = Phase> {
        Phase::ALL.into_iter().filter(move |p| self.contains(*p))
    }

    /// Rank of `p` within this set, or `None` if absent.
    pub fn rank(self, p: Phase) -> Option<usize> {
        if !self.contains(p) {
            return None;
        }
        Some((self.0 & ((1 << p.index()) - 1)).count_ones() as usize)
    }

    pub fn as_string(self) -> String {
        self.iter().map(Phase::letter).collect()
    }
}

impl std::fmt::Display for PhaseSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.as_string())
    }
}

/// Restricts a per-phase vector indexed by `from` to the subset `to`.
pub fn restrict(v: &DVector<C64>, from: PhaseSet, to: PhaseSet) -> DVector<C64> {
    debug_assert!(to.is_subset_of(from));
    DVector::from_iterator(
        to.len(),
        to.iter().map(|p| v[from.rank(p).expect("subset phase")]),
    )
}

/// Balanced unit voltages over `phases`: `1∠0°, 1∠-120°, 1∠120°`.
pub fn balanced_unit_voltages(phases: PhaseSet) -> DVector<C64> {
    DVector::from_iterator(
        phases.len(),
        phases.iter().map(|p| C64::from_polar(1.0, p.balanced_angle())),
    )
}

#[derive(Debug, Clone)]
pub struct Bus {
    pub id: usize,
    pub phases: PhaseSet,
}

/// Line segment feeding its child bus. Impedance is stored per-unit,
/// together with its inverse (validated non-singular at build time).
#[derive(Debug, Clone)]
pub struct LineSegment {
    pub from: usize,
    pub to: usize,
    pub phases: PhaseSet,
    pub z: DMatrix<C64>,
    pub z_inv: DMatrix<C64>,
}

/// Voltage and power bases. Impedances in ohms are divided by
/// `z_base = kv^2 * 1000 / kva` at parse time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bases {
    pub kv: f64,
    pub kva: f64,
}

impl Bases {
    pub fn z_base(&self) -> f64 {
        self.kv * self.kv * 1000.0 / self.kva
    }
}

/// Validated radial multi-phase network.
///
/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone)]
pub struct Network {
    buses: Vec<Bus>,
    segments: Vec<LineSegment>, // index j-1 <-> child bus j
    v0: DVector<C64>,
    bases: Bases,
    base_loads: LoadSet,
    delta_conns: Vec<ConnSet>, // index j-1
    parent: Vec<usize>,        // index j-1
    children: Vec<Vec<usize>>, // index by bus id, ascending
    topo: Vec<usize>,          // non-head buses, parents before children
    node_offset: Vec<usize>,   // index j-1
    delta_offset: Vec<usize>,  // index j-1
    node_labels: Vec<(usize, Phase)>,
    m: usize,
    n_delta: usize,
}

impl Network {
    /// Total bus count including the head.
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Number of non-head buses `N`.
    pub fn n(&self) -> usize {
        self.buses.len() - 1
    }

    /// Total phase-node count `m` over the non-head buses (equals the
    /// phase-circuit count).
    pub fn m(&self) -> usize {
        self.m
    }

    /// Total number of declared delta connections across all buses.
    pub fn n_delta(&self) -> usize {
        self.n_delta
    }

    pub fn bases(&self) -> Bases {
        self.bases
    }

    pub fn bus(&self, id: usize) -> &Bus {
        &self.buses[id]
    }

    pub fn bus_phases(&self, id: usize) -> PhaseSet {
        self.buses[id].phases
    }

    /// Segment feeding non-head bus `child`.
    pub fn segment(&self, child: usize) -> &LineSegment {
        &self.segments[child - 1]
    }

    pub fn segments(&self) -> &[LineSegment] {
        &self.segments
    }

    pub fn parent_of(&self, child: usize) -> usize {
        self.parent[child - 1]
    }

    pub fn children_of(&self, bus: usize) -> &[usize] {
        &self.children[bus]
    }

    /// Non-head buses ordered parents-first.
    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    /// Complex slack voltage over the head bus phases.
    pub fn v0(&self) -> &DVector<C64> {
        &self.v0
    }

    /// Squared slack voltage magnitudes.
    pub fn v0_sq(&self) -> DVector<f64> {
        self.v0.map(|v| v.norm_sqr())
    }

    pub fn base_loads(&self) -> &LoadSet {
        &self.base_loads
    }

    /// Declared delta connection set of non-head bus `j`.
    pub fn delta_conns(&self, j: usize) -> ConnSet {
        self.delta_conns[j - 1]
    }

    /// Flat phase-node index of `bus`'s phase `p` (non-head buses only).
    pub fn node_index(&self, bus: usize, p: Phase) -> Option<usize> {
        if bus == 0 || bus >= self.buses.len() {
            return None;
        }
        let rank = self.buses[bus].phases.rank(p)?;
        Some(self.node_offset[bus - 1] + rank)
    }

    /// Offset of bus `j`'s phase-node block in the flat index space.
    pub fn node_offset(&self, j: usize) -> usize {
        self.node_offset[j - 1]
    }

    /// Offset of bus `j`'s delta-connection block in the flat delta index.
    pub fn delta_offset(&self, j: usize) -> usize {
        self.delta_offset[j - 1]
    }

    /// `(bus, phase)` for every flat phase-node index.
    pub fn node_labels(&self) -> &[(usize, Phase)] {
        &self.node_labels
    }

    /// Sub-vector of the flat node vector `v` belonging to bus `j`.
    pub fn bus_block<'a, T: nalgebra::Scalar>(
        &self,
        v: &'a DVector<T>,
        j: usize,
    ) -> nalgebra::DVectorView<'a, T> {
        v.rows(self.node_offset[j - 1], self.buses[j].phases.len())
    }

    /// All buses that follow `j` (descendants, excluding `j` itself).
    pub fn descendants(&self, j: usize) -> Result<BTreeSet<usize>> {
        if j >= self.buses.len() {
            return Err(Error::UnknownBus { bus: j });
        }
        let mut out = BTreeSet::new();
        let mut stack: Vec<usize> = self.children[j].to_vec();
        while let Some(b) = stack.pop() {
            out.insert(b);
            stack.extend_from_slice(&self.children[b]);
        }
        Ok(out)
    }

}

/// Signed incidence blocks of the radial network.
///
/// Rows of `a0` are the head-bus phase nodes, rows of `a` the non-head phase
/// nodes; columns of both are the phase circuits. Each circuit column holds
/// `+1` at its "from" node and `-1` at its "to" node.
#[derive(Debug, Clone)]
pub struct IncidenceBlocks {
    /// `n0 x m` head block (top rows of the stacked incidence matrix).
    pub a0: DMatrix<f64>,
    /// `m x m` non-head block; invertible for every valid radial network.
    pub a: DMatrix<f64>,
}

/// Builds `(A0, A)` from the network's connection structure.
pub fn incidence_blocks(net: &Network) -> IncidenceBlocks {
    let m = net.m();
    let n0 = net.bus_phases(0).len();
    let mut a0 = DMatrix::zeros(n0, m);
    let mut a = DMatrix::zeros(m, m);
    for &j in net.topo_order() {
        let seg = net.segment(j);
        for p in seg.phases.iter() {
            let col = net.node_index(j, p).expect("segment phases equal child phases");
            a[(col, col)] = -1.0;
            if seg.from == 0 {
                let row = net.bus_phases(0).rank(p).expect("validated head phase");
                a0[(row, col)] = 1.0;
            } else {
                let row = net.node_index(seg.from, p).expect("validated parent phase");
                a[(row, col)] = 1.0;
            }
        }
    }
    IncidenceBlocks { a0, a }
}

/// Validates a parsed network description and builds the [`Network`].
pub fn build_network(spec: &NetworkSpec) -> Result<Network> {
    let n_buses = spec.buses.len();
    if n_buses == 0 {
        return Err(Error::parse("network has no buses"));
    }

    // Bus ids must be exactly 0..N.
    let mut buses: Vec<Option<Bus>> = vec![None; n_buses];
    for b in &spec.buses {
        if b.id >= n_buses {
            return Err(Error::parse(format!(
                "bus ids must be contiguous 0..{} (found {})",
                n_buses - 1,
                b.id
            )));
        }
        if buses[b.id].is_some() {
            return Err(Error::parse(format!("duplicate bus id {}", b.id)));
        }
        buses[b.id] = Some(Bus {
            id: b.id,
            phases: PhaseSet::parse(&b.phases)?,
        });
    }
    let buses: Vec<Bus> = buses.into_iter().map(|b| b.expect("checked contiguous")).collect();

    let z_scale = match spec.units {
        Units::PerUnit => 1.0,
        Units::Ohms => 1.0 / spec.bases.z_base(),
    };

    // One segment per non-head child bus.
    let mut segments: Vec<Option<LineSegment>> = (0..n_buses - 1).map(|_| None).collect();
    for s in &spec.segments {
        if s.to == 0 {
            return Err(Error::parse("head bus 0 cannot be a segment child"));
        }
        if s.to >= n_buses || s.from >= n_buses {
            return Err(Error::parse(format!(
                "segment ({},{}) references an unknown bus",
                s.from, s.to
            )));
        }
        if segments[s.to - 1].is_some() {
            return Err(Error::DuplicateSegmentForChild { bus: s.to });
        }
        let phases = PhaseSet::parse(&s.phases)?;
        if phases != buses[s.to].phases {
            return Err(Error::PhaseMismatch {
                from: s.from,
                to: s.to,
                msg: format!(
                    "segment phases '{}' must equal child bus phases '{}'",
                    phases, buses[s.to].phases
                ),
            });
        }
        if !phases.is_subset_of(buses[s.from].phases) {
            return Err(Error::PhaseMismatch {
                from: s.from,
                to: s.to,
                msg: format!(
                    "segment phases '{}' not present at from-bus (phases '{}')",
                    phases, buses[s.from].phases
                ),
            });
        }
        let n = phases.len();
        let z = parse_impedance(&s.r, &s.x, n, z_scale, s.from, s.to)?;
        let z_inv = z
            .clone()
            .try_inverse()
            .ok_or(Error::SingularImpedance { from: s.from, to: s.to })?;
        segments[s.to - 1] = Some(LineSegment {
            from: s.from,
            to: s.to,
            phases,
            z,
            z_inv,
        });
    }
    let segments: Vec<LineSegment> = segments
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or(Error::DisconnectedBus { bus: i + 1 }))
        .collect::<Result<_>>()?;

    // Acyclicity and connectivity: walk parent chains to the head.
    let parent: Vec<usize> = segments.iter().map(|s| s.from).collect();
    let mut reached = vec![false; n_buses];
    reached[0] = true;
    for start in 1..n_buses {
        let mut path = Vec::new();
        let mut cur = start;
        let mut on_path = vec![false; n_buses];
        while !reached[cur] {
            if on_path[cur] {
                return Err(Error::CycleDetected { bus: start });
            }
            on_path[cur] = true;
            path.push(cur);
            cur = parent[cur - 1];
        }
        for b in path {
            reached[b] = true;
        }
    }

    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n_buses];
    for (idx, &p) in parent.iter().enumerate() {
        children[p].push(idx + 1);
    }
    for c in &mut children {
        c.sort_unstable();
    }

    // Parents-first order over non-head buses.
    let mut topo = Vec::with_capacity(n_buses - 1);
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(b) = queue.pop_front() {
        if b != 0 {
            topo.push(b);
        }
        queue.extend(children[b].iter().copied());
    }
    debug_assert_eq!(topo.len(), n_buses - 1);

    let mut node_offset = Vec::with_capacity(n_buses - 1);
    let mut node_labels = Vec::new();
    let mut m = 0usize;
    for bus in buses.iter().skip(1) {
        node_offset.push(m);
        for p in bus.phases.iter() {
            node_labels.push((bus.id, p));
        }
        m += bus.phases.len();
    }

    // Slack voltage: explicit or the balanced default.
    let head_phases = buses[0].phases;
    let v0 = match &spec.slack {
        None => balanced_unit_voltages(head_phases),
        Some(slack) => {
            if slack.bus != 0 {
                return Err(Error::parse("slack bus must be bus 0"));
            }
            if slack.voltage.len() != head_phases.len() {
                return Err(Error::DimensionMismatch {
                    what: "slack voltage",
                    expected: head_phases.len(),
                    got: slack.voltage.len(),
                });
            }
            let v = DVector::from_iterator(
                slack.voltage.len(),
                slack
                    .voltage
                    .iter()
                    .map(|p| C64::from_polar(p.mag, p.angle_deg.to_radians())),
            );
            if v.iter().any(|x| x.norm() <= 0.0) {
                return Err(Error::ZeroVoltage);
            }
            v
        }
    };

    // Load declarations: wye values accumulate, delta structure is declared once.
    let mut wye: Vec<DVector<C64>> = buses
        .iter()
        .skip(1)
        .map(|b| DVector::zeros(b.phases.len()))
        .collect();
    let mut delta_conns: Vec<ConnSet> = vec![ConnSet::EMPTY; n_buses - 1];
    let mut delta_vals: Vec<DVector<C64>> = vec![DVector::zeros(0); n_buses - 1];
    for l in &spec.loads {
        if l.bus == 0 || l.bus >= n_buses {
            return Err(Error::UnknownBus { bus: l.bus });
        }
        let phases = buses[l.bus].phases;
        match l.kind {
            LoadKind::Wye => {
                if l.p.len() != phases.len() || l.q.len() != phases.len() {
                    return Err(Error::DimensionMismatch {
                        what: "wye load values",
                        expected: phases.len(),
                        got: l.p.len().max(l.q.len()),
                    });
                }
                for (i, (p, q)) in l.p.iter().zip(&l.q).enumerate() {
                    wye[l.bus - 1][i] += C64::new(*p, *q);
                }
            }
            LoadKind::Delta => {
                if !delta_conns[l.bus - 1].is_empty() {
                    return Err(Error::parse(format!(
                        "bus {} declares more than one delta load",
                        l.bus
                    )));
                }
                let conn_strs = l.connections.as_ref().ok_or_else(|| {
                    Error::parse(format!("delta load at bus {} lacks 'connections'", l.bus))
                })?;
                let conns = ConnSet::parse_list(conn_strs)?;
                for pair in conns.iter() {
                    let (pa, pb) = pair.phases();
                    for ph in [pa, pb] {
                        if !phases.contains(ph) {
                            return Err(Error::MissingPhase {
                                bus: l.bus,
                                phase: ph.letter(),
                                what: "delta connection",
                            });
                        }
                    }
                }
                if l.p.len() != conns.len() || l.q.len() != conns.len() {
                    return Err(Error::DimensionMismatch {
                        what: "delta load values",
                        expected: conns.len(),
                        got: l.p.len().max(l.q.len()),
                    });
                }
                delta_conns[l.bus - 1] = conns;
                delta_vals[l.bus - 1] = DVector::from_iterator(
                    l.p.len(),
                    l.p.iter().zip(&l.q).map(|(p, q)| C64::new(*p, *q)),
                );
            }
        }
    }

    let mut delta_offset = Vec::with_capacity(n_buses - 1);
    let mut n_delta = 0usize;
    for c in &delta_conns {
        delta_offset.push(n_delta);
        n_delta += c.len();
    }

    Ok(Network {
        buses,
        segments,
        v0,
        bases: spec.bases,
        base_loads: LoadSet {
            wye,
            delta: delta_vals,
        },
        delta_conns,
        parent,
        children,
        topo,
        node_offset,
        delta_offset,
        node_labels,
        m,
        n_delta,
    })
}

fn parse_impedance(
    r: &[Vec<f64>],
    x: &[Vec<f64>],
    n: usize,
    scale: f64,
    from: usize,
    to: usize,
) -> Result<DMatrix<C64>> {
    let shape_err = || {
        Error::parse(format!(
            "segment ({from},{to}): r and x must be {n}x{n} row-major matrices"
        ))
    };
    if r.len() != n || x.len() != n {
        return Err(shape_err());
    }
    let mut z = DMatrix::zeros(n, n);
    for i in 0..n {
        if r[i].len() != n || x[i].len() != n {
            return Err(shape_err());
        }
        for k in 0..n {
            z[(i, k)] = C64::new(r[i][k], x[i][k]) * scale;
        }
    }
    // Mutual coupling reciprocity.
    let scale_ref = z.camax().max(1e-30);
    for i in 0..n {
        for k in (i + 1)..n {
            if (z[(i, k)] - z[(k, i)]).norm() > 1e-9 * scale_ref {
                return Err(Error::parse(format!(
                    "segment ({from},{to}): impedance matrix is not symmetric"
                )));
            }
        }
    }
    Ok(z)
}
