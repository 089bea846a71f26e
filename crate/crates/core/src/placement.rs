//! Static expert placement.
//!
//! Works layer by layer: a redundancy budget allocator gives skewed layers
//! more per-device slots, a greedy pass decides how many replicas each
//! expert deserves, and a two-phase assignment (greedy fill plus bounded
//! topology-aware hill climbing) maps the replica instances onto devices.
//! `brute_force_layer` enumerates every legal single-layer placement and
//! is the optimality oracle for the search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::load::{imbalance_of_device_loads, LoadMatrix, PlacementTensor};
use crate::scalar::Scalar;

/// Hill-climbing passes for the topology remap phase.
const REMAP_PASSES: usize = 3;

/// Enumeration guard for [`brute_force_layer`].
const BRUTE_FORCE_GUARD: f64 = 1e7;

// ─── Types ────────────────────────────────────────────────────────────────────

/// Per-layer slot budget `s_l`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetVector {
    slots: Vec<usize>,
}

impl BudgetVector {
    /// Wrap a slot vector, checking per-layer feasibility: each layer must
    /// be able to host every expert at least once (`slots[l] * R >= E`).
    pub fn new(slots: Vec<usize>, devices: usize, experts: usize) -> Result<Self> {
        for (l, &s) in slots.iter().enumerate() {
            if s * devices < experts {
                return Err(Error::invalid(format!(
                    "layer {l}: {s} slots x {devices} devices cannot host {experts} experts"
                )));
            }
        }
        Ok(Self { slots })
    }

    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    pub fn layer(&self, l: usize) -> usize {
        self.slots[l]
    }

    /// Slot increments above the `ceil(E/R)` baseline, summed over layers.
    pub fn redundant_slots(&self, devices: usize, experts: usize) -> usize {
        let base = experts.div_ceil(devices);
        self.slots.iter().map(|&s| s.saturating_sub(base)).sum()
    }
}

/// Replica counts for one layer's experts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaCounts {
    counts: Vec<usize>,
}

impl ReplicaCounts {
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Symmetric inter-device communication cost with a zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Topology {
    devices: usize,
    cost: Vec<f64>,
}

impl Topology {
    /// All-zero cost matrix: the remap phase becomes a no-op.
    pub fn flat(devices: usize) -> Self {
        Self { devices, cost: vec![0.0; devices * devices] }
    }

    pub fn from_matrix(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::invalid("topology matrix must be non-empty"));
        }
        let mut cost = vec![0.0; n * n];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::invalid("topology matrix must be square"));
            }
            for (j, &c) in row.iter().enumerate() {
                if !c.is_finite() || c < 0.0 {
                    return Err(Error::invalid(format!("topology cost [{i}][{j}] = {c} invalid")));
                }
                if i == j && c != 0.0 {
                    return Err(Error::invalid("topology diagonal must be zero"));
                }
                if rows[j][i] != c {
                    return Err(Error::invalid(format!("topology not symmetric at [{i}][{j}]")));
                }
                cost[i * n + j] = c;
            }
        }
        Ok(Self { devices: n, cost })
    }

    pub fn devices(&self) -> usize {
        self.devices
    }

    #[inline]
    pub fn cost(&self, a: usize, b: usize) -> f64 {
        self.cost[a * self.devices + b]
    }

    fn is_flat(&self) -> bool {
        self.cost.iter().all(|&c| c == 0.0)
    }
}

impl TryFrom<Vec<Vec<f64>>> for Topology {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Topology::from_matrix(rows)
    }
}

impl From<Topology> for Vec<Vec<f64>> {
    fn from(t: Topology) -> Self {
        (0..t.devices).map(|i| (0..t.devices).map(|j| t.cost(i, j)).collect()).collect()
    }
}

// ─── Budget allocation ────────────────────────────────────────────────────────

fn check_loads<T: Scalar>(loads: &[T]) -> Result<()> {
    if loads.is_empty() {
        return Err(Error::EmptyInput("layer load vector is empty".into()));
    }
    for (e, &v) in loads.iter().enumerate() {
        if !v.is_finite() || v < T::zero() {
            return Err(Error::invalid(format!("load[{e}] = {v} must be finite and >= 0")));
        }
    }
    Ok(())
}

/// No-redundancy imbalance of one layer: the greedy layout at one replica
/// per expert and the baseline slot count. Drives budget apportionment.
pub fn no_redundancy_imbalance<T: Scalar>(loads: &[T], devices: usize) -> Result<T> {
    check_loads(loads)?;
    let experts = loads.len();
    let counts = ReplicaCounts { counts: vec![1; experts] };
    let base = experts.div_ceil(devices);
    let placed = generate_placement(&counts, loads, devices, base, &Topology::flat(devices))?;
    let dl = crate::load::device_loads(&placed, &LoadMatrix::from_rows(&[loads.to_vec()])?, 0)?;
    Ok(imbalance_of_device_loads(dl.loads()))
}

/// Largest-remainder apportionment of `total` units over `weights`,
/// honoring per-index caps. Leftover that cannot be placed (all capped)
/// is dropped. Ties go to the lower index.
fn apportion(total: usize, weights: &[f64], caps: &[usize]) -> Vec<usize> {
    let n = weights.len();
    let mut alloc = vec![0usize; n];
    let mut remaining = total;
    while remaining > 0 {
        let active: Vec<usize> =
            (0..n).filter(|&i| weights[i] > 0.0 && alloc[i] < caps[i]).collect();
        if active.is_empty() {
            break;
        }
        let wsum: f64 = active.iter().map(|&i| weights[i]).sum();
        let mut quotas: Vec<(usize, usize, f64)> = active
            .iter()
            .map(|&i| {
                let ideal = remaining as f64 * weights[i] / wsum;
                let head = (ideal.floor() as usize).min(caps[i] - alloc[i]);
                (i, head, ideal - ideal.floor())
            })
            .collect();
        let mut given: usize = quotas.iter().map(|q| q.1).sum();
        if given > remaining {
            // Caps shrank some quotas; clamp conservatively and let the
            // remainder pass hand out the rest one by one.
            for q in quotas.iter_mut() {
                q.1 = 0;
            }
            given = 0;
        }
        for &(i, head, _) in &quotas {
            alloc[i] += head;
        }
        remaining -= given;
        if remaining == 0 {
            break;
        }
        // Remainder units by descending fractional part, ties by index.
        quotas.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
        let mut progressed = false;
        for &(i, _, _) in &quotas {
            if remaining == 0 {
                break;
            }
            if alloc[i] < caps[i] {
                alloc[i] += 1;
                remaining -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    alloc
}

/// Distribute `redundant_slots` extra per-device slots over layers.
///
/// Every layer starts at the `ceil(E/R)` baseline. Extra slots go to
/// layers proportionally to their no-redundancy imbalance minus one
/// (largest-remainder rounding); balanced layers receive slots only after
/// every imbalanced layer is saturated at `E` slots (beyond which extra
/// capacity is unusable because a device hosts each expert at most once).
pub fn allocate_budget_by_imbalance<T: Scalar>(
    loads: &LoadMatrix<T>,
    devices: usize,
    redundant_slots: usize,
) -> Result<BudgetVector> {
    if devices == 0 {
        return Err(Error::invalid("device count must be >= 1"));
    }
    let layers = loads.layers();
    let experts = loads.experts();
    let base = experts.div_ceil(devices);
    let cap_each = experts.saturating_sub(base);
    let caps = vec![cap_each; layers];

    let mut weights = Vec::with_capacity(layers);
    for l in 0..layers {
        let b = no_redundancy_imbalance(loads.layer(l), devices)?;
        let w = (b.to_f64().unwrap_or(1.0) - 1.0).max(0.0);
        weights.push(if w < 1e-12 { 0.0 } else { w });
    }

    let mut extra = apportion(redundant_slots, &weights, &caps);
    let used: usize = extra.iter().sum();
    let leftover = redundant_slots - used;
    if leftover > 0 {
        // Balanced layers (weight zero) absorb the rest, equal split.
        // Anything beyond every layer's cap is unusable and dropped.
        let balanced: Vec<usize> = (0..layers).filter(|&l| weights[l] == 0.0).collect();
        if !balanced.is_empty() {
            let even = vec![1.0; balanced.len()];
            let caps_b: Vec<usize> = balanced.iter().map(|&l| caps[l] - extra[l]).collect();
            let add = apportion(leftover, &even, &caps_b);
            for (k, &l) in balanced.iter().enumerate() {
                extra[l] += add[k];
            }
        }
    }

    let slots = extra.iter().map(|&x| base + x).collect();
    BudgetVector::new(slots, devices, experts)
}

// ─── Replica counts ───────────────────────────────────────────────────────────

/// Decide replica counts for one layer: start at one replica per expert
/// and hand each of the `redundant` extra instances to the expert with
/// the highest per-replica load, capped at one replica per device.
pub fn determine_replicas<T: Scalar>(
    loads: &[T],
    redundant: usize,
    devices: usize,
) -> Result<ReplicaCounts> {
    check_loads(loads)?;
    let experts = loads.len();
    let cap = experts * (devices - 1).max(0);
    if redundant > cap {
        return Err(Error::invalid(format!(
            "{redundant} redundant instances exceed the cap {cap} (E={experts}, R={devices})"
        )));
    }
    let mut counts = vec![1usize; experts];
    for _ in 0..redundant {
        let mut best: Option<(T, usize)> = None;
        for e in 0..experts {
            if counts[e] >= devices {
                continue;
            }
            let per_replica = loads[e] / T::from_usize_lossy(counts[e]);
            let better = match best {
                None => true,
                Some((b, _)) => per_replica > b,
            };
            if better {
                best = Some((per_replica, e));
            }
        }
        match best {
            Some((_, e)) => counts[e] += 1,
            None => break,
        }
    }
    Ok(ReplicaCounts { counts })
}

// ─── Placement generation ─────────────────────────────────────────────────────

fn layer_device_loads<T: Scalar>(
    hosts: &PlacementTensor,
    loads: &[T],
    counts: &[usize],
) -> Vec<T> {
    let devices = hosts.devices();
    let mut out = vec![T::zero(); devices];
    for (e, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let share = loads[e] / T::from_usize_lossy(c);
        for (r, slot) in out.iter_mut().enumerate() {
            if hosts.hosts(0, r, e) {
                *slot = *slot + share;
            }
        }
    }
    out
}

fn total_topology_cost(hosts: &PlacementTensor, topo: &Topology) -> f64 {
    let mut cost = 0.0;
    for e in 0..hosts.experts() {
        let devs = hosts.hosting_devices(0, e);
        for i in 0..devs.len() {
            for j in i + 1..devs.len() {
                cost += topo.cost(devs[i], devs[j]);
            }
        }
    }
    cost
}

/// Map one layer's replica instances onto devices.
///
/// Phase 1 assigns instances in descending per-replica-load order to the
/// least-loaded device that has a free slot and does not already host the
/// expert. Phase 2 hill-climbs pairwise instance swaps, accepting a swap
/// only when it strictly lowers the total co-replica communication cost
/// without raising the layer's imbalance; it stops at a local optimum or
/// after a bounded pass count. The result is a single-layer tensor that
/// satisfies the existence and capacity constraints.
pub fn generate_placement<T: Scalar>(
    replica_counts: &ReplicaCounts,
    loads: &[T],
    devices: usize,
    slots: usize,
    topo: &Topology,
) -> Result<PlacementTensor> {
    check_loads(loads)?;
    let experts = loads.len();
    let counts = replica_counts.counts();
    if counts.len() != experts {
        return Err(Error::invalid("replica counts and loads disagree on expert count"));
    }
    if topo.devices() != devices {
        return Err(Error::invalid("topology size does not match device count"));
    }
    let total: usize = counts.iter().sum();
    if total > slots * devices {
        return Err(Error::InfeasiblePlacement(format!(
            "{total} instances exceed capacity {slots} x {devices}"
        )));
    }
    for (e, &c) in counts.iter().enumerate() {
        if c == 0 || c > devices {
            return Err(Error::InfeasiblePlacement(format!(
                "expert {e} wants {c} replicas with {devices} devices"
            )));
        }
    }

    // Phase 1: greedy fill, heaviest per-replica instances first.
    let mut instances: Vec<(usize, T)> = Vec::with_capacity(total);
    for (e, &c) in counts.iter().enumerate() {
        let share = loads[e] / T::from_usize_lossy(c);
        for _ in 0..c {
            instances.push((e, share));
        }
    }
    instances.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    let mut hosts = PlacementTensor::new(1, devices, experts)?;
    let mut dev_load = vec![T::zero(); devices];
    let mut dev_used = vec![0usize; devices];
    for &(e, share) in &instances {
        let mut chosen: Option<usize> = None;
        for r in 0..devices {
            if dev_used[r] >= slots || hosts.hosts(0, r, e) {
                continue;
            }
            let better = match chosen {
                None => true,
                Some(c) => dev_load[r] < dev_load[c],
            };
            if better {
                chosen = Some(r);
            }
        }
        let r = chosen.ok_or_else(|| {
            Error::InfeasiblePlacement(format!(
                "no device can take another replica of expert {e}"
            ))
        })?;
        hosts.set(0, r, e, true);
        dev_load[r] = dev_load[r] + share;
        dev_used[r] += 1;
    }

    // Phase 2: topology-aware remapping.
    if !topo.is_flat() {
        let share =
            |e: usize| loads[e] / T::from_usize_lossy(counts[e]);
        let mut cost = total_topology_cost(&hosts, topo);
        let mut imbalance = imbalance_of_device_loads(&dev_load);
        for _pass in 0..REMAP_PASSES {
            let mut improved = false;
            for e1 in 0..experts {
                for r1 in 0..devices {
                    if !hosts.hosts(0, r1, e1) {
                        continue;
                    }
                    for e2 in 0..experts {
                        if e2 == e1 {
                            continue;
                        }
                        for r2 in 0..devices {
                            if r2 == r1
                                || !hosts.hosts(0, r2, e2)
                                || hosts.hosts(0, r2, e1)
                                || hosts.hosts(0, r1, e2)
                            {
                                continue;
                            }
                            hosts.set(0, r1, e1, false);
                            hosts.set(0, r2, e2, false);
                            hosts.set(0, r2, e1, true);
                            hosts.set(0, r1, e2, true);
                            let new_cost = total_topology_cost(&hosts, topo);
                            let mut new_load = dev_load.clone();
                            new_load[r1] = new_load[r1] - share(e1) + share(e2);
                            new_load[r2] = new_load[r2] - share(e2) + share(e1);
                            let new_imb = imbalance_of_device_loads(&new_load);
                            if new_cost < cost && new_imb <= imbalance {
                                cost = new_cost;
                                imbalance = new_imb;
                                dev_load = new_load;
                                improved = true;
                            } else {
                                // Revert.
                                hosts.set(0, r2, e1, false);
                                hosts.set(0, r1, e2, false);
                                hosts.set(0, r1, e1, true);
                                hosts.set(0, r2, e2, true);
                            }
                        }
                    }
                }
            }
            if !improved {
                break;
            }
        }
    }

    Ok(hosts)
}

// ─── Per-layer search and the full static algorithm ──────────────────────────

/// Best placement for one layer within a slot budget: try every
/// redundancy level, keep the minimum simulated imbalance. Ties prefer
/// fewer replicas (lower redundancy level).
pub fn place_layer<T: Scalar>(
    loads: &[T],
    devices: usize,
    slots: usize,
    topo: &Topology,
) -> Result<(PlacementTensor, T)> {
    check_loads(loads)?;
    let experts = loads.len();
    if slots * devices < experts {
        return Err(Error::InfeasiblePlacement(format!(
            "{slots} slots x {devices} devices cannot host {experts} experts"
        )));
    }
    let kmax = (slots * devices - experts).min(experts * (devices - 1));
    let mut best: Option<(PlacementTensor, T)> = None;
    for k in 0..=kmax {
        let counts = determine_replicas(loads, k, devices)?;
        let placed = match generate_placement(&counts, loads, devices, slots, topo) {
            Ok(p) => p,
            Err(Error::InfeasiblePlacement(_)) => continue,
            Err(e) => return Err(e),
        };
        let dl = layer_device_loads(&placed, loads, counts.counts());
        let b = imbalance_of_device_loads(&dl);
        let better = match &best {
            None => true,
            Some((_, bb)) => b < *bb,
        };
        if better {
            best = Some((placed, b));
        }
    }
    best.ok_or_else(|| Error::InfeasiblePlacement("no redundancy level was placeable".into()))
}

/// Static expert placement over all layers: allocate the redundancy
/// budget by per-layer imbalance, then search each layer independently.
pub fn static_expert_placement<T: Scalar>(
    loads: &LoadMatrix<T>,
    devices: usize,
    redundant_slots: usize,
    topo: &Topology,
) -> Result<(PlacementTensor, BudgetVector)> {
    let budget = allocate_budget_by_imbalance(loads, devices, redundant_slots)?;
    let layers = loads.layers();
    let experts = loads.experts();
    let mut tensor = PlacementTensor::new(layers, devices, experts)?;
    for l in 0..layers {
        let (layer_p, _) = place_layer(loads.layer(l), devices, budget.layer(l), topo)?;
        for r in 0..devices {
            for e in 0..experts {
                if layer_p.hosts(0, r, e) {
                    tensor.set(l, r, e, true);
                }
            }
        }
    }
    tensor.validate(budget.slots())?;
    Ok((tensor, budget))
}

// ─── Brute-force oracle ───────────────────────────────────────────────────────

/// Exhaustively enumerate all single-layer placements satisfying the
/// existence and capacity constraints and return a global minimizer of
/// the imbalance ratio. Guarded to at most ~10^7 candidates.
pub fn brute_force_layer<T: Scalar>(
    loads: &[T],
    devices: usize,
    slots: usize,
) -> Result<(PlacementTensor, T)> {
    check_loads(loads)?;
    let experts = loads.len();
    let subsets = ((1usize << devices) - 1) as f64;
    if subsets.powi(experts as i32) > BRUTE_FORCE_GUARD {
        return Err(Error::TooLarge(format!(
            "{experts} experts x {devices} devices enumerates {:.3e} candidates",
            subsets.powi(experts as i32)
        )));
    }

    struct Search<'a, T> {
        loads: &'a [T],
        devices: usize,
        slots: usize,
        choice: Vec<usize>,
        used: Vec<usize>,
        dev_load: Vec<T>,
        best: Option<(Vec<usize>, T)>,
    }

    impl<T: Scalar> Search<'_, T> {
        fn descend(&mut self, expert: usize) {
            if expert == self.loads.len() {
                let b = imbalance_of_device_loads(&self.dev_load);
                let better = match &self.best {
                    None => true,
                    Some((_, bb)) => b < *bb,
                };
                if better {
                    self.best = Some((self.choice.clone(), b));
                }
                return;
            }
            for mask in 1usize..(1 << self.devices) {
                let replicas = mask.count_ones() as usize;
                let mut legal = true;
                for r in 0..self.devices {
                    if mask & (1 << r) != 0 && self.used[r] + 1 > self.slots {
                        legal = false;
                        break;
                    }
                }
                if !legal {
                    continue;
                }
                let share = self.loads[expert] / T::from_usize_lossy(replicas);
                for r in 0..self.devices {
                    if mask & (1 << r) != 0 {
                        self.used[r] += 1;
                        self.dev_load[r] = self.dev_load[r] + share;
                    }
                }
                self.choice.push(mask);
                self.descend(expert + 1);
                self.choice.pop();
                for r in 0..self.devices {
                    if mask & (1 << r) != 0 {
                        self.used[r] -= 1;
                        self.dev_load[r] = self.dev_load[r] - share;
                    }
                }
            }
        }
    }

    let mut search = Search {
        loads,
        devices,
        slots,
        choice: Vec::with_capacity(experts),
        used: vec![0; devices],
        dev_load: vec![T::zero(); devices],
        best: None,
    };
    search.descend(0);
    let (masks, b) = search.best.ok_or_else(|| {
        Error::InfeasiblePlacement(format!(
            "no placement of {experts} experts fits {slots} slots x {devices} devices"
        ))
    })?;
    let mut tensor = PlacementTensor::new(1, devices, experts)?;
    for (e, mask) in masks.iter().enumerate() {
        for r in 0..devices {
            if mask & (1 << r) != 0 {
                tensor.set(0, r, e, true);
            }
        }
    }
    Ok((tensor, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::load::{device_loads, imbalance_ratio};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn replicas_follow_per_replica_load() {
        // 9 -> 4.5 -> 3 while the others stay at 1.
        let c = determine_replicas(&[9.0, 1.0, 1.0, 1.0], 2, 4).unwrap();
        assert_eq!(c.counts(), &[3, 1, 1, 1]);

        // Exhaustive oracle: over all count vectors with the same total,
        // the greedy result minimizes the max per-replica load.
        let loads = [9.0, 1.0, 1.0, 1.0];
        let max_pr = |counts: &[usize]| {
            counts
                .iter()
                .enumerate()
                .map(|(e, &c)| loads[e] / c as f64)
                .fold(0.0f64, f64::max)
        };
        let mut best = f64::INFINITY;
        for a in 1..=4usize {
            for b in 1..=4usize {
                for c2 in 1..=4usize {
                    for d in 1..=4usize {
                        if a + b + c2 + d == 6 {
                            best = best.min(max_pr(&[a, b, c2, d]));
                        }
                    }
                }
            }
        }
        assert_eq!(max_pr(c.counts()), best);
    }

    #[test]
    fn zero_redundancy_and_symmetric_ties() {
        assert_eq!(determine_replicas(&[1.0, 2.0, 3.0, 4.0], 0, 2).unwrap().counts(), &[1; 4]);
        assert_eq!(determine_replicas(&[4.0, 4.0], 2, 2).unwrap().counts(), &[2, 2]);
        assert!(determine_replicas(&[1.0, 1.0], 3, 2).is_err());
    }

    #[test]
    fn greedy_placement_order_forced() {
        let counts = ReplicaCounts { counts: vec![1, 1] };
        let p = generate_placement(&counts, &[3.0, 5.0], 2, 1, &Topology::flat(2)).unwrap();
        assert_eq!(p.hosted_experts(0, 0), vec![1]);
        assert_eq!(p.hosted_experts(0, 1), vec![0]);
    }

    #[test]
    fn greedy_placement_with_replication_hand_trace() {
        // Per-replica loads [4.5, 4.5, 2, 1] -> dev0={e0,e1}, dev1={e0,e2}.
        let counts = ReplicaCounts { counts: vec![2, 1, 1] };
        let p = generate_placement(&counts, &[9.0, 2.0, 1.0], 2, 2, &Topology::flat(2)).unwrap();
        assert_eq!(p.hosted_experts(0, 0), vec![0, 1]);
        assert_eq!(p.hosted_experts(0, 1), vec![0, 2]);
        let d = LoadMatrix::from_rows(&[vec![9.0, 2.0, 1.0]]).unwrap();
        assert_eq!(device_loads(&p, &d, 0).unwrap().loads(), &[6.5, 5.5]);
    }

    #[test]
    fn flat_topology_keeps_phase_one_output() {
        let counts = ReplicaCounts { counts: vec![2, 1, 1] };
        let flat = generate_placement(&counts, &[9.0, 2.0, 1.0], 2, 2, &Topology::flat(2)).unwrap();
        // A non-trivial but useless topology must not change anything when
        // no swap strictly improves the co-replica cost.
        let topo = Topology::from_matrix(vec![
            vec![0.0, 1.0],
            vec![1.0, 0.0],
        ])
        .unwrap();
        let remapped = generate_placement(&counts, &[9.0, 2.0, 1.0], 2, 2, &topo).unwrap();
        assert_eq!(flat, remapped);
    }

    #[test]
    fn remap_pulls_replicas_onto_cheap_links() {
        // Weightless experts keep the imbalance pinned at 1.0, so only the
        // topology term drives the remap. Greedy puts e0's two replicas on
        // devices {0,1} (tie-breaks by index), which is the expensive link.
        let counts = ReplicaCounts { counts: vec![2, 1, 1, 1] };
        let loads = [0.0, 0.0, 0.0, 0.0];
        let flat = generate_placement(&counts, &loads, 3, 2, &Topology::flat(3)).unwrap();
        assert_eq!(flat.hosting_devices(0, 0), vec![0, 1]);

        let topo = Topology::from_matrix(vec![
            vec![0.0, 10.0, 1.0],
            vec![10.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ])
        .unwrap();
        let remapped = generate_placement(&counts, &loads, 3, 2, &topo).unwrap();
        let devs = remapped.hosting_devices(0, 0);
        assert_eq!(devs.len(), 2);
        assert_eq!(topo.cost(devs[0], devs[1]), 1.0, "remap left replicas on the 10x link");
    }

    #[test]
    fn budget_goes_to_the_skewed_layer() {
        let d = LoadMatrix::from_rows(&[
            vec![2.0, 2.0, 2.0, 2.0],
            vec![9.0, 1.0, 1.0, 1.0],
        ])
        .unwrap();
        let budget = allocate_budget_by_imbalance(&d, 2, 2).unwrap();
        assert_eq!(budget.slots(), &[2, 4]);
    }

    #[test]
    fn identical_layers_split_budget_evenly() {
        let d = LoadMatrix::from_rows(&[
            vec![9.0, 1.0, 1.0, 1.0],
            vec![9.0, 1.0, 1.0, 1.0],
        ])
        .unwrap();
        let budget = allocate_budget_by_imbalance(&d, 2, 2).unwrap();
        assert_eq!(budget.slots(), &[3, 3]);
        // Odd budget: the tie-break unit goes to the lower layer index.
        let budget = allocate_budget_by_imbalance(&d, 2, 3).unwrap();
        assert_eq!(budget.slots(), &[4, 3]);
    }

    #[test]
    fn proportional_split_by_imbalance_weight() {
        // Layer 0: greedy no-redundancy imbalance 10/6; layer 1 is
        // balanced at no redundancy (loads [5,5,1,1] split {5,1}|{5,1}).
        let d = LoadMatrix::from_rows(&[
            vec![9.0, 1.0, 1.0, 1.0],
            vec![5.0, 5.0, 1.0, 1.0],
        ])
        .unwrap();
        let b0: f64 = no_redundancy_imbalance(&[9.0, 1.0, 1.0, 1.0], 2).unwrap();
        let b1: f64 = no_redundancy_imbalance(&[5.0, 5.0, 1.0, 1.0], 2).unwrap();
        assert!((b0 - 10.0 / 6.0).abs() < 1e-12);
        assert_eq!(b1, 1.0);
        // Layer 0 takes units until it saturates at E=4 slots; the spare
        // unit spills to the balanced layer.
        let budget = allocate_budget_by_imbalance(&d, 2, 3).unwrap();
        assert_eq!(budget.slots(), &[4, 3]);
    }

    #[test]
    fn static_placement_uniform_loads_is_perfectly_balanced() {
        let d = LoadMatrix::from_rows(&[vec![3.0; 4], vec![3.0; 4]]).unwrap();
        let (p, budget) = static_expert_placement(&d, 2, 2, &Topology::flat(2)).unwrap();
        p.validate(budget.slots()).unwrap();
        for l in 0..2 {
            assert_eq!(imbalance_ratio(&p, &d, l).unwrap(), 1.0);
        }
    }

    #[test]
    fn static_placement_beats_no_redundancy_on_skew() {
        let d = LoadMatrix::from_rows(&[vec![9.0, 1.0, 1.0, 1.0]]).unwrap();
        let (p, budget) = static_expert_placement(&d, 2, 2, &Topology::flat(2)).unwrap();
        p.validate(budget.slots()).unwrap();
        let b = imbalance_ratio(&p, &d, 0).unwrap();
        assert!(b < 10.0 / 6.0, "B={b} not below the no-redundancy optimum");
    }

    #[test]
    fn single_expert_replicates_everywhere() {
        let d = LoadMatrix::from_rows(&[vec![5.0]]).unwrap();
        let (p, _) = static_expert_placement(&d, 3, 2, &Topology::flat(3)).unwrap();
        assert_eq!(p.replica_count(0, 0), 3);
        assert_eq!(imbalance_ratio(&p, &d, 0).unwrap(), 1.0);
    }

    #[test]
    fn brute_force_matches_hand_enumeration() {
        let (_, b): (_, f64) = brute_force_layer(&[9.0, 1.0, 1.0, 1.0], 2, 2).unwrap();
        assert!((b - 10.0 / 6.0).abs() < 1e-12);

        let (_, b): (_, f64) = brute_force_layer(&[7.0, 7.0, 7.0], 3, 1).unwrap();
        assert_eq!(b, 1.0);

        let (_, b): (_, f64) = brute_force_layer(&[9.0, 2.0, 1.0], 2, 2).unwrap();
        assert!((b - 6.5 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn brute_force_optimum_non_increasing_in_slots() {
        let loads = [8.0, 3.0, 2.0, 1.0];
        let mut prev = f64::INFINITY;
        for slots in 2..=4 {
            let (_, b) = brute_force_layer(&loads, 2, slots).unwrap();
            assert!(b <= prev + 1e-12, "optimum rose from {prev} to {b} at s={slots}");
            prev = b;
        }
    }

    #[test]
    fn brute_force_guard_trips() {
        let loads = vec![1.0; 16];
        assert!(matches!(brute_force_layer(&loads, 8, 4), Err(Error::TooLarge(_))));
    }

    #[test]
    fn greedy_close_to_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for case in 0..50 {
            let experts: usize = rng.random_range(2..=6);
            let devices: usize = rng.random_range(2..=3);
            let slots = rng.random_range(experts.div_ceil(devices)..=3.max(experts.div_ceil(devices)));
            let loads: Vec<f64> = (0..experts).map(|_| rng.random_range(0.0..10.0)).collect();
            let (p, bg) = place_layer(&loads, devices, slots, &Topology::flat(devices)).unwrap();
            p.validate(&[slots]).unwrap();
            let (_, bo) = brute_force_layer(&loads, devices, slots).unwrap();
            assert!(
                bg <= bo * 1.15 + 1e-12,
                "case {case}: greedy {bg} vs oracle {bo} (loads {loads:?}, R={devices}, s={slots})"
            );
        }
    }

    #[test]
    fn placement_is_deterministic() {
        let d = LoadMatrix::from_rows(&[vec![5.0, 4.0, 3.0, 2.0, 1.0], vec![1.0, 1.0, 9.0, 1.0, 2.0]])
            .unwrap();
        let a = static_expert_placement(&d, 3, 3, &Topology::flat(3)).unwrap();
        let b = static_expert_placement(&d, 3, 3, &Topology::flat(3)).unwrap();
        assert_eq!(a, b);
    }
}
