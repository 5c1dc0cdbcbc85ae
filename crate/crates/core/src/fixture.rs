//! Deterministic test feeders.
//!
//! `appendix_b` is the 3-bus unbalanced example used for incidence checks;
//! `chain` builds single- or multi-phase radial paths; `synthetic_123`
//! generates a 123-bus unbalanced radial feeder with phase-a-heavy loading,
//! a daily 24-step load profile, and a fast-varying PV/VVC scenario. All
//! generators are pure functions of their seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::io::{
    BusSpec, ControllerMode, ControllerSpec, FleetNodeSpec, FleetSpec, LoadKind, LoadSpec,
    MeasurementSpec, NetworkSpec, ProfileRow, ScenarioSpec, ScopeSpec, SegmentSpec, Units,
};
use crate::network::{Bases, PhaseSet};

pub const DEFAULT_BASES: Bases = Bases { kv: 4.16, kva: 100.0 };

fn const_matrix(n: usize, diag: f64, off: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { diag } else { off }).collect())
        .collect()
}

fn segment_spec(from: usize, to: usize, phases: PhaseSet, self_z: (f64, f64), mut_z: (f64, f64)) -> SegmentSpec {
    let n = phases.len();
    SegmentSpec {
        from,
        to,
        phases: phases.as_string(),
        r: const_matrix(n, self_z.0, mut_z.0),
        x: const_matrix(n, self_z.1, mut_z.1),
    }
}

/// Head bus only; the empty-tree case (`m = 0`).
pub fn head_only() -> NetworkSpec {
    NetworkSpec {
        bases: DEFAULT_BASES,
        units: Units::PerUnit,
        buses: vec![BusSpec { id: 0, phases: "abc".into() }],
        segments: vec![],
        slack: None,
        loads: vec![],
    }
}

/// The 3-bus unbalanced network: buses 0 and 1 carry phases a,b,c; bus 2
/// carries a,b. Small unbalanced wye loads plus a closed delta at bus 1 and
/// an ab-connected open delta at bus 2.
pub fn appendix_b() -> NetworkSpec {
    NetworkSpec {
        bases: DEFAULT_BASES,
        units: Units::PerUnit,
        buses: vec![
            BusSpec { id: 0, phases: "abc".into() },
            BusSpec { id: 1, phases: "abc".into() },
            BusSpec { id: 2, phases: "ab".into() },
        ],
        segments: vec![
            segment_spec(0, 1, PhaseSet::ABC, (0.006, 0.012), (0.002, 0.005)),
            segment_spec(1, 2, PhaseSet::parse("ab").unwrap(), (0.005, 0.010), (0.0015, 0.004)),
        ],
        slack: None,
        loads: vec![
            LoadSpec {
                bus: 1,
                kind: LoadKind::Wye,
                connections: None,
                p: vec![0.10, 0.06, 0.08],
                q: vec![0.05, 0.03, 0.04],
            },
            LoadSpec {
                bus: 1,
                kind: LoadKind::Delta,
                connections: Some(vec!["ab".into(), "bc".into(), "ca".into()]),
                p: vec![0.04, 0.03, 0.05],
                q: vec![0.02, 0.01, 0.02],
            },
            LoadSpec {
                bus: 2,
                kind: LoadKind::Wye,
                connections: None,
                p: vec![0.09, 0.05],
                q: vec![0.04, 0.02],
            },
            LoadSpec {
                bus: 2,
                kind: LoadKind::Delta,
                connections: Some(vec!["ab".into()]),
                p: vec![0.03],
                q: vec![0.012],
            },
        ],
    }
}

/// Radial path `0 - 1 - ... - (buses-1)` with identical phases everywhere
/// and a wye load at every non-head bus.
pub fn chain(buses: usize, phases: PhaseSet) -> NetworkSpec {
    assert!(buses >= 1);
    let n = phases.len();
    let bus_specs = (0..buses)
        .map(|id| BusSpec { id, phases: phases.as_string() })
        .collect();
    let segments = (1..buses)
        .map(|j| segment_spec(j - 1, j, phases, (0.004, 0.008), (0.0012, 0.003)))
        .collect();
    let loads = (1..buses)
        .map(|j| LoadSpec {
            bus: j,
            kind: LoadKind::Wye,
            connections: None,
            p: (0..n).map(|k| 0.05 + 0.01 * (j + k) as f64 * 0.5).collect(),
            q: (0..n).map(|k| 0.02 + 0.005 * (j + k) as f64 * 0.5).collect(),
        })
        .collect();
    NetworkSpec {
        bases: DEFAULT_BASES,
        units: Units::PerUnit,
        buses: bus_specs,
        segments,
        slack: None,
        loads,
    }
}

/// Branched 6-bus feeder with mixed phase sets and both delta variants;
/// exercises the solvers on something small but not a path.
pub fn branched6() -> NetworkSpec {
    NetworkSpec {
        bases: DEFAULT_BASES,
        units: Units::PerUnit,
        buses: vec![
            BusSpec { id: 0, phases: "abc".into() },
            BusSpec { id: 1, phases: "abc".into() },
            BusSpec { id: 2, phases: "ab".into() },
            BusSpec { id: 3, phases: "abc".into() },
            BusSpec { id: 4, phases: "c".into() },
            BusSpec { id: 5, phases: "bc".into() },
        ],
        segments: vec![
            segment_spec(0, 1, PhaseSet::ABC, (0.005, 0.011), (0.0016, 0.0045)),
            segment_spec(1, 2, PhaseSet::parse("ab").unwrap(), (0.006, 0.009), (0.0018, 0.0035)),
            segment_spec(1, 3, PhaseSet::ABC, (0.004, 0.009), (0.0013, 0.004)),
            segment_spec(3, 4, PhaseSet::parse("c").unwrap(), (0.008, 0.010), (0.0, 0.0)),
            segment_spec(3, 5, PhaseSet::parse("bc").unwrap(), (0.007, 0.009), (0.002, 0.003)),
        ],
        slack: None,
        loads: vec![
            LoadSpec {
                bus: 1,
                kind: LoadKind::Wye,
                connections: None,
                p: vec![0.12, 0.07, 0.09],
                q: vec![0.05, 0.03, 0.04],
            },
            LoadSpec {
                bus: 2,
                kind: LoadKind::Delta,
                connections: Some(vec!["ab".into()]),
                p: vec![0.05],
                q: vec![0.02],
            },
            LoadSpec {
                bus: 2,
                kind: LoadKind::Wye,
                connections: None,
                p: vec![0.04, 0.03],
                q: vec![0.015, 0.012],
            },
            LoadSpec {
                bus: 3,
                kind: LoadKind::Delta,
                connections: Some(vec!["ab".into(), "bc".into(), "ca".into()]),
                p: vec![0.06, 0.04, 0.05],
                q: vec![0.025, 0.015, 0.02],
            },
            LoadSpec {
                bus: 4,
                kind: LoadKind::Wye,
                connections: None,
                p: vec![0.08],
                q: vec![0.03],
            },
            LoadSpec {
                bus: 5,
                kind: LoadKind::Wye,
                connections: None,
                p: vec![0.05, 0.06],
                q: vec![0.02, 0.025],
            },
        ],
    }
}

/// Profile rows that scale every declared load by a per-step factor.
pub fn scaling_profile(spec: &NetworkSpec, scales: &[f64]) -> Vec<ProfileRow> {
    let mut rows = Vec::new();
    for (step, s) in scales.iter().enumerate() {
        for l in &spec.loads {
            match l.kind {
                LoadKind::Wye => {
                    let phases = spec
                        .buses
                        .iter()
                        .find(|b| b.id == l.bus)
                        .map(|b| b.phases.clone())
                        .unwrap_or_default();
                    for (k, ph) in phases.chars().enumerate() {
                        rows.push(ProfileRow {
                            step,
                            bus: l.bus,
                            kind: "wye".into(),
                            phase_or_pair: ph.to_string(),
                            p: l.p[k] * s,
                            q: l.q[k] * s,
                        });
                    }
                }
                LoadKind::Delta => {
                    for (k, conn) in l.connections.as_ref().unwrap().iter().enumerate() {
                        rows.push(ProfileRow {
                            step,
                            bus: l.bus,
                            kind: "delta".into(),
                            phase_or_pair: conn.clone(),
                            p: l.p[k] * s,
                            q: l.q[k] * s,
                        });
                    }
                }
            }
        }
    }
    rows
}

/// Everything `gen-fixture synthetic-123` emits.
pub struct Synthetic123 {
    pub network: NetworkSpec,
    pub profile: Vec<ProfileRow>,
    pub scenario: ScenarioSpec,
    pub vvc_profile: Vec<ProfileRow>,
    pub vvc_scenario: ScenarioSpec,
}

/// Synthetic unbalanced 123-bus radial feeder.
///
/// Three-phase trunk and sub-feeders plus mostly single-phase laterals;
/// phase-a loading roughly double phases b/c; two deep three-phase buses
/// carry closed-delta loads. Impedances are emitted in ohms to exercise the
/// per-unit conversion path.
pub fn synthetic_123(seed: u64) -> Synthetic123 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let z_base = DEFAULT_BASES.z_base();
    let total_buses = 123;

    let abc = PhaseSet::ABC;
    let mut phases_of: Vec<PhaseSet> = vec![abc];
    let mut parent_of: Vec<usize> = Vec::new(); // index j-1

    let add_bus = |phases_of: &mut Vec<PhaseSet>, parent_of: &mut Vec<usize>, parent: usize, ph: PhaseSet| -> usize {
        let id = phases_of.len();
        phases_of.push(ph);
        parent_of.push(parent);
        id
    };

    // Main trunk: 18 three-phase buses in a line from the head.
    let trunk_len = 18;
    let mut prev = 0;
    let mut trunk = Vec::new();
    for _ in 0..trunk_len {
        prev = add_bus(&mut phases_of, &mut parent_of, prev, abc);
        trunk.push(prev);
    }
    // Four three-phase sub-feeders off the trunk.
    for (anchor_idx, len) in [(3usize, 10usize), (7, 9), (11, 11), (15, 8)] {
        let mut p = trunk[anchor_idx];
        for _ in 0..len {
            p = add_bus(&mut phases_of, &mut parent_of, p, abc);
        }
    }

    // Laterals until the bus budget is used up. Phase-a laterals dominate.
    let lateral_choices: [(usize, &str); 8] = [
        (34, "a"),
        (14, "b"),
        (14, "c"),
        (10, "ab"),
        (6, "bc"),
        (6, "ca"),
        (10, "abc"),
        (6, "a"),
    ];
    while phases_of.len() < total_buses {
        let abc_buses: Vec<usize> = (1..phases_of.len()).filter(|&b| phases_of[b] == abc).collect();
        let anchor = abc_buses[rng.random_range(0..abc_buses.len())];
        let roll: usize = rng.random_range(0..100);
        let mut acc = 0;
        let mut ph = "a";
        for (w, s) in lateral_choices {
            acc += w;
            if roll < acc {
                ph = s;
                break;
            }
        }
        let ph = PhaseSet::parse(ph).unwrap();
        let len = rng.random_range(1..=4usize).min(total_buses - phases_of.len());
        let mut p = anchor;
        for _ in 0..len {
            p = add_bus(&mut phases_of, &mut parent_of, p, ph);
        }
    }

    let buses: Vec<BusSpec> = phases_of
        .iter()
        .enumerate()
        .map(|(id, ph)| BusSpec { id, phases: ph.as_string() })
        .collect();

    // Impedances (ohms in the file). Trunk segments are stiffer than laterals.
    let mut segments = Vec::new();
    for j in 1..total_buses {
        let parent = parent_of[j - 1];
        let ph = phases_of[j];
        let n = ph.len();
        let trunk_like = ph == abc;
        let (r_lo, r_hi, x_ratio) = if trunk_like {
            (2.0e-4, 4.5e-4, 2.1)
        } else {
            (4.0e-4, 9.0e-4, 1.2)
        };
        let self_r = rng.random_range(r_lo..r_hi);
        let self_x = self_r * x_ratio * rng.random_range(0.9..1.1);
        let (mut_r, mut_x) = if n > 1 {
            (0.25 * self_r, 0.45 * self_x)
        } else {
            (0.0, 0.0)
        };
        segments.push(SegmentSpec {
            from: parent,
            to: j,
            phases: ph.as_string(),
            r: const_matrix(n, self_r * z_base, mut_r * z_base),
            x: const_matrix(n, self_x * z_base, mut_x * z_base),
        });
    }

    // Wye loads with phase-a weight 2x; normalized to the feeder total.
    let target_total_p = 15.0;
    let mut raw: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut raw_total = 0.0;
    for j in 1..total_buses {
        let mut per_phase = Vec::new();
        for p in phases_of[j].iter() {
            let w = if p.letter() == 'a' { 2.0 } else { 1.0 };
            let v = w * rng.random_range(0.5..1.5);
            raw_total += v;
            per_phase.push(v);
        }
        raw.push((j, per_phase));
    }
    let scale = target_total_p / raw_total;
    let mut loads: Vec<LoadSpec> = Vec::new();
    for (j, per_phase) in &raw {
        let p: Vec<f64> = per_phase.iter().map(|v| v * scale).collect();
        let q: Vec<f64> = p.iter().map(|v| v * 0.45).collect();
        loads.push(LoadSpec {
            bus: *j,
            kind: LoadKind::Wye,
            connections: None,
            p,
            q,
        });
    }

    // Two deep three-phase buses trade their wye loads for closed deltas.
    let mut delta_buses: Vec<usize> = (1..total_buses)
        .filter(|&b| phases_of[b] == abc)
        .collect();
    delta_buses.sort_unstable();
    let delta_buses: Vec<usize> = delta_buses.into_iter().rev().take(2).collect();
    for &db in &delta_buses {
        let entry = loads.iter_mut().find(|l| l.bus == db).unwrap();
        let p = entry.p.clone();
        let q = entry.q.clone();
        entry.p = vec![0.0; 3];
        entry.q = vec![0.0; 3];
        loads.push(LoadSpec {
            bus: db,
            kind: LoadKind::Delta,
            connections: Some(vec!["ab".into(), "bc".into(), "ca".into()]),
            p,
            q,
        });
    }

    let network = NetworkSpec {
        bases: DEFAULT_BASES,
        units: Units::Ohms,
        buses,
        segments,
        slack: None,
        loads,
    };

    // Daily 24-step profile: smooth diurnal shape with mild per-bus jitter.
    let horizon = 24;
    let mut profile = Vec::new();
    for t in 0..horizon {
        let shape = 0.75 + 0.25 * (2.0 * std::f64::consts::PI * (t as f64 - 6.0) / 24.0).sin();
        for l in &network.loads {
            let jitter: f64 = rng.random_range(-0.02..0.02);
            let s = shape * (1.0 + jitter);
            match l.kind {
                LoadKind::Wye => {
                    let ph = phases_of[l.bus];
                    for (k, p) in ph.iter().enumerate() {
                        profile.push(ProfileRow {
                            step: t,
                            bus: l.bus,
                            kind: "wye".into(),
                            phase_or_pair: p.letter().to_string(),
                            p: l.p[k] * s,
                            q: l.q[k] * s,
                        });
                    }
                }
                LoadKind::Delta => {
                    for (k, conn) in l.connections.as_ref().unwrap().iter().enumerate() {
                        profile.push(ProfileRow {
                            step: t,
                            bus: l.bus,
                            kind: "delta".into(),
                            phase_or_pair: conn.clone(),
                            p: l.p[k] * s,
                            q: l.q[k] * s,
                        });
                    }
                }
            }
        }
    }

    let scenario = ScenarioSpec {
        seed,
        dt_seconds: 3600.0,
        update_every: 1,
        measurement: Some(MeasurementSpec {
            noise_sigma: 0.01,
            noisy_buses: ScopeSpec::Buses(vec![1, 25, 47, 54, 67, 86, 117, 121]),
            windows: vec![[11, 15]],
        }),
        failure: None,
        fleet: None,
        controller: None,
    };

    // Fast-varying VVC case: 5-second resolution, swinging loads and PV.
    let vvc_horizon = 60;
    let mut vvc_profile = Vec::new();
    for t in 0..vvc_horizon {
        let tt = t as f64;
        let shape = 0.85
            + 0.10 * (2.0 * std::f64::consts::PI * tt / 40.0).sin()
            + 0.05 * (2.0 * std::f64::consts::PI * tt / 13.0).sin();
        for l in &network.loads {
            let jitter: f64 = rng.random_range(-0.02..0.02);
            let s = shape * (1.0 + jitter);
            match l.kind {
                LoadKind::Wye => {
                    let ph = phases_of[l.bus];
                    for (k, p) in ph.iter().enumerate() {
                        vvc_profile.push(ProfileRow {
                            step: t,
                            bus: l.bus,
                            kind: "wye".into(),
                            phase_or_pair: p.letter().to_string(),
                            p: l.p[k] * s,
                            q: l.q[k] * s,
                        });
                    }
                }
                LoadKind::Delta => {
                    for (k, conn) in l.connections.as_ref().unwrap().iter().enumerate() {
                        vvc_profile.push(ProfileRow {
                            step: t,
                            bus: l.bus,
                            kind: "delta".into(),
                            phase_or_pair: conn.clone(),
                            p: l.p[k] * s,
                            q: l.q[k] * s,
                        });
                    }
                }
            }
        }
    }

    // Ten three-phase PV buses spread across the feeder.
    let abc_buses: Vec<usize> = (1..total_buses).filter(|&b| phases_of[b] == abc).collect();
    let stride = abc_buses.len() / 10;
    let pv_buses: Vec<usize> = (0..10).map(|k| abc_buses[(k * stride + stride / 2).min(abc_buses.len() - 1)]).collect();
    let pv_profile: Vec<f64> = (0..vvc_horizon)
        .map(|t| {
            let tt = t as f64;
            let base = 0.55 + 0.35 * (2.0 * std::f64::consts::PI * tt / 24.0).sin();
            let dip = if rng.random_range(0..10) == 0 { 0.5 } else { 1.0 };
            (base * dip).clamp(0.0, 1.0)
        })
        .collect();

    // Step size from the feeder's own voltage/var sensitivity.
    let alpha = {
        let net = crate::network::build_network(&network).expect("generated feeder is valid");
        let fleet_nodes: Vec<usize> = pv_buses
            .iter()
            .flat_map(|&b| {
                let net = &net;
                PhaseSet::ABC.iter().map(move |p| net.node_index(b, p).unwrap())
            })
            .collect();
        let cm = crate::linear::assemble_compact(
            &crate::linear::lindistflow_params(&net),
            &crate::network::incidence_blocks(&net),
        )
        .expect("parameters cover the feeder");
        let sens = crate::linear::voltage_sensitivity(&cm, &fleet_nodes)
            .expect("radial incidence is invertible");
        0.9 * crate::vvc::stable_step_size(&sens)
    };

    let vvc_scenario = ScenarioSpec {
        seed,
        dt_seconds: 5.0,
        update_every: 1,
        measurement: None,
        failure: None,
        fleet: Some(FleetSpec {
            nodes: pv_buses
                .iter()
                .map(|&bus| FleetNodeSpec { bus, phases: "abc".into() })
                .collect(),
            q_max: 1.0,
            q_min: None,
            p_g_base: 0.25,
            p_g_profile: pv_profile,
        }),
        controller: Some(ControllerSpec {
            mode: ControllerMode::Online,
            alpha,
            opf_period: 12,
            iters_per_step: 1,
        }),
    };

    Synthetic123 {
        network,
        profile,
        scenario,
        vvc_profile,
        vvc_scenario,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_network;

    #[test]
    fn synthetic_123_is_deterministic_and_radial() {
        let a = synthetic_123(7);
        let b = synthetic_123(7);
        let ja = crate::io::to_canonical_json(&a.network).unwrap();
        let jb = crate::io::to_canonical_json(&b.network).unwrap();
        assert_eq!(ja, jb);
        let net = build_network(&a.network).unwrap();
        assert_eq!(net.n_buses(), 123);
        assert!(net.m() > 150, "m = {}", net.m());
        // Different seeds give different feeders.
        let c = synthetic_123(8);
        assert_ne!(ja, crate::io::to_canonical_json(&c.network).unwrap());
    }

    #[test]
    fn synthetic_123_is_phase_a_heavy() {
        let f = synthetic_123(7);
        let mut totals = [0.0f64; 3];
        let net = build_network(&f.network).unwrap();
        for l in &f.network.loads {
            let phases = net.bus_phases(l.bus);
            match l.kind {
                LoadKind::Wye => {
                    for (k, p) in phases.iter().enumerate() {
                        totals[p.index()] += l.p[k];
                    }
                }
                LoadKind::Delta => {
                    // Split pair power evenly for the aggregate view.
                    for (k, c) in l.connections.as_ref().unwrap().iter().enumerate() {
                        let pair = crate::load::DeltaPair::parse(c).unwrap();
                        let (pa, pb) = pair.phases();
                        totals[pa.index()] += l.p[k] / 2.0;
                        totals[pb.index()] += l.p[k] / 2.0;
                    }
                }
            }
        }
        assert!(totals[0] > 1.5 * totals[1], "{totals:?}");
        assert!(totals[0] > 1.5 * totals[2], "{totals:?}");
    }
}
