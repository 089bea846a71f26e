//! Expert placement occupancy and load math.
//!
//! A placement assigns expert replicas to devices, one binary bit per
//! `(layer, device, expert)` triple. Two constraints make a placement
//! valid: every expert exists on at least one device, and no device hosts
//! more experts in a layer than that layer's slot budget. Given a
//! non-negative load matrix, each device's load in a layer is the sum of
//! its hosted experts' loads, and the imbalance ratio of a layer is the
//! peak device load divided by the mean device load (1.0 = perfect
//! balance).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

// ─── PlacementTensor ──────────────────────────────────────────────────────────

/// Binary occupancy of experts on devices, per layer.
///
/// `bits[l][r][e] = true` means device `r` hosts a replica of expert `e`
/// in layer `l`. Serialized as per-layer lists of each device's hosted
/// expert ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PlacementJson", into = "PlacementJson")]
pub struct PlacementTensor {
    layers: usize,
    devices: usize,
    experts: usize,
    bits: Vec<bool>,
}

impl PlacementTensor {
    /// Create an all-empty tensor. Dimensions must all be ≥ 1.
    pub fn new(layers: usize, devices: usize, experts: usize) -> Result<Self> {
        if layers == 0 || devices == 0 || experts == 0 {
            return Err(Error::invalid(format!(
                "placement dimensions must be >= 1, got L={layers} R={devices} E={experts}"
            )));
        }
        Ok(Self { layers, devices, experts, bits: vec![false; layers * devices * experts] })
    }

    /// Build a tensor from per-layer, per-device expert-id lists.
    pub fn from_device_experts(
        layers: usize,
        devices: usize,
        experts: usize,
        hosted: &[Vec<Vec<usize>>],
    ) -> Result<Self> {
        let mut t = Self::new(layers, devices, experts)?;
        if hosted.len() != layers {
            return Err(Error::invalid(format!(
                "expected {layers} layers of device lists, got {}",
                hosted.len()
            )));
        }
        for (l, per_device) in hosted.iter().enumerate() {
            if per_device.len() != devices {
                return Err(Error::invalid(format!(
                    "layer {l}: expected {devices} device lists, got {}",
                    per_device.len()
                )));
            }
            for (r, ids) in per_device.iter().enumerate() {
                for &e in ids {
                    if e >= experts {
                        return Err(Error::invalid(format!(
                            "layer {l} device {r}: expert id {e} out of range (E={experts})"
                        )));
                    }
                    t.set(l, r, e, true);
                }
            }
        }
        Ok(t)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn devices(&self) -> usize {
        self.devices
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    #[inline]
    fn idx(&self, layer: usize, device: usize, expert: usize) -> usize {
        (layer * self.devices + device) * self.experts + expert
    }

    /// Whether device `device` hosts expert `expert` in `layer`.
    #[inline]
    pub fn hosts(&self, layer: usize, device: usize, expert: usize) -> bool {
        self.bits[self.idx(layer, device, expert)]
    }

    pub fn set(&mut self, layer: usize, device: usize, expert: usize, value: bool) {
        let i = self.idx(layer, device, expert);
        self.bits[i] = value;
    }

    /// Number of replicas of `expert` in `layer`.
    pub fn replica_count(&self, layer: usize, expert: usize) -> usize {
        (0..self.devices).filter(|&r| self.hosts(layer, r, expert)).count()
    }

    /// Number of occupied slots on `device` in `layer`.
    pub fn slots_used(&self, layer: usize, device: usize) -> usize {
        (0..self.experts).filter(|&e| self.hosts(layer, device, e)).count()
    }

    /// Expert ids hosted by `device` in `layer`, ascending.
    pub fn hosted_experts(&self, layer: usize, device: usize) -> Vec<usize> {
        (0..self.experts).filter(|&e| self.hosts(layer, device, e)).collect()
    }

    /// Devices hosting `expert` in `layer`, ascending.
    pub fn hosting_devices(&self, layer: usize, expert: usize) -> Vec<usize> {
        (0..self.devices).filter(|&r| self.hosts(layer, r, expert)).collect()
    }

    /// Check that every expert is hosted somewhere in every layer.
    pub fn validate_existence(&self) -> Result<()> {
        for l in 0..self.layers {
            for e in 0..self.experts {
                if self.replica_count(l, e) == 0 {
                    return Err(Error::InfeasiblePlacement(format!(
                        "expert {e} in layer {l} is hosted on no device"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Check the per-layer slot budget `slots[l]` on every device.
    pub fn validate_capacity(&self, slots: &[usize]) -> Result<()> {
        if slots.len() != self.layers {
            return Err(Error::invalid(format!(
                "slot vector length {} does not match layer count {}",
                slots.len(),
                self.layers
            )));
        }
        for l in 0..self.layers {
            for r in 0..self.devices {
                let used = self.slots_used(l, r);
                if used > slots[l] {
                    return Err(Error::InfeasiblePlacement(format!(
                        "device {r} uses {used} slots in layer {l}, budget is {}",
                        slots[l]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Check both the existence and the capacity constraint.
    pub fn validate(&self, slots: &[usize]) -> Result<()> {
        self.validate_existence()?;
        self.validate_capacity(slots)
    }
}

#[derive(Serialize, Deserialize, Clone)]
struct PlacementJson {
    layers: usize,
    devices: usize,
    experts: usize,
    /// Per layer, per device: hosted expert ids.
    bits: Vec<Vec<Vec<usize>>>,
}

impl From<PlacementTensor> for PlacementJson {
    fn from(t: PlacementTensor) -> Self {
        let bits = (0..t.layers)
            .map(|l| (0..t.devices).map(|r| t.hosted_experts(l, r)).collect())
            .collect();
        Self { layers: t.layers, devices: t.devices, experts: t.experts, bits }
    }
}

impl TryFrom<PlacementJson> for PlacementTensor {
    type Error = Error;

    fn try_from(j: PlacementJson) -> Result<Self> {
        PlacementTensor::from_device_experts(j.layers, j.devices, j.experts, &j.bits)
    }
}

// ─── LoadMatrix ───────────────────────────────────────────────────────────────

/// Per-layer, per-expert non-negative loads (abstract units per window).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    bound = "T: Scalar + Serialize + serde::de::DeserializeOwned",
    try_from = "LoadMatrixJson<T>",
    into = "LoadMatrixJson<T>"
)]
pub struct LoadMatrix<T = f64> {
    layers: usize,
    experts: usize,
    values: Vec<T>,
}

impl<T: Scalar> LoadMatrix<T> {
    /// Build from row-major per-layer load rows. Every entry must be a
    /// finite non-negative number.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::invalid("load matrix must have L >= 1 and E >= 1"));
        }
        let experts = rows[0].len();
        let mut values = Vec::with_capacity(rows.len() * experts);
        for (l, row) in rows.iter().enumerate() {
            if row.len() != experts {
                return Err(Error::invalid(format!(
                    "layer {l} has {} experts, expected {experts}",
                    row.len()
                )));
            }
            for (e, &v) in row.iter().enumerate() {
                if !v.is_finite() || v < T::zero() {
                    return Err(Error::invalid(format!(
                        "load[{l}][{e}] = {v} is not a finite non-negative number"
                    )));
                }
                values.push(v);
            }
        }
        Ok(Self { layers: rows.len(), experts, values })
    }

    /// All-zero matrix.
    pub fn zeros(layers: usize, experts: usize) -> Result<Self> {
        if layers == 0 || experts == 0 {
            return Err(Error::invalid("load matrix must have L >= 1 and E >= 1"));
        }
        Ok(Self { layers, experts, values: vec![T::zero(); layers * experts] })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    #[inline]
    pub fn get(&self, layer: usize, expert: usize) -> T {
        self.values[layer * self.experts + expert]
    }

    pub fn set(&mut self, layer: usize, expert: usize, value: T) -> Result<()> {
        if !value.is_finite() || value < T::zero() {
            return Err(Error::invalid(format!("load value {value} must be finite and >= 0")));
        }
        self.values[layer * self.experts + expert] = value;
        Ok(())
    }

    /// One layer's loads as a slice of length E.
    pub fn layer(&self, layer: usize) -> &[T] {
        &self.values[layer * self.experts..(layer + 1) * self.experts]
    }

    /// Sum of one layer's loads.
    pub fn layer_total(&self, layer: usize) -> T {
        self.layer(layer).iter().fold(T::zero(), |acc, &v| acc + v)
    }

    /// Dimensions match the companion placement tensor.
    pub fn matches(&self, placement: &PlacementTensor) -> bool {
        self.layers == placement.layers() && self.experts == placement.experts()
    }
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(bound = "T: Serialize + serde::de::DeserializeOwned")]
struct LoadMatrixJson<T> {
    layers: usize,
    experts: usize,
    loads: Vec<Vec<T>>,
}

impl<T: Scalar> From<LoadMatrix<T>> for LoadMatrixJson<T> {
    fn from(m: LoadMatrix<T>) -> Self {
        let loads = (0..m.layers).map(|l| m.layer(l).to_vec()).collect();
        Self { layers: m.layers, experts: m.experts, loads }
    }
}

impl<T: Scalar> TryFrom<LoadMatrixJson<T>> for LoadMatrix<T> {
    type Error = Error;

    fn try_from(j: LoadMatrixJson<T>) -> Result<Self> {
        let m = LoadMatrix::from_rows(&j.loads)?;
        if m.layers != j.layers || m.experts != j.experts {
            return Err(Error::invalid(format!(
                "declared dimensions {}x{} do not match loads {}x{}",
                j.layers, j.experts, m.layers, m.experts
            )));
        }
        Ok(m)
    }
}

// ─── Device loads and imbalance ───────────────────────────────────────────────

/// How a replicated expert's load is attributed to its hosting devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicaLoadMode {
    /// Split the expert's load evenly across its replicas, so replication
    /// actually reduces per-device load. This is the default everywhere.
    #[default]
    EvenSplit,
    /// Attribute the full load to every hosting device. Double-counts
    /// replicated experts; kept for comparison.
    FullCopy,
}

/// One layer's per-device loads.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceLoadVector<T = f64> {
    loads: Vec<T>,
}

impl<T: Scalar> DeviceLoadVector<T> {
    pub fn loads(&self) -> &[T] {
        &self.loads
    }

    pub fn into_vec(self) -> Vec<T> {
        self.loads
    }

    pub fn max(&self) -> T {
        self.loads.iter().fold(T::zero(), |acc, &v| if v > acc { v } else { acc })
    }

    pub fn total(&self) -> T {
        self.loads.iter().fold(T::zero(), |acc, &v| acc + v)
    }
}

fn check_layer_args<T: Scalar>(
    placement: &PlacementTensor,
    loads: &LoadMatrix<T>,
    layer: usize,
) -> Result<()> {
    if !loads.matches(placement) {
        return Err(Error::invalid(format!(
            "load matrix {}x{} does not match placement {}x{} (LxE)",
            loads.layers(),
            loads.experts(),
            placement.layers(),
            placement.experts()
        )));
    }
    if layer >= placement.layers() {
        return Err(Error::invalid(format!(
            "layer {layer} out of range (L={})",
            placement.layers()
        )));
    }
    Ok(())
}

/// Per-device aggregate load of one layer under `mode`.
pub fn device_loads_with_mode<T: Scalar>(
    placement: &PlacementTensor,
    loads: &LoadMatrix<T>,
    layer: usize,
    mode: ReplicaLoadMode,
) -> Result<DeviceLoadVector<T>> {
    check_layer_args(placement, loads, layer)?;
    let mut out = vec![T::zero(); placement.devices()];
    for e in 0..placement.experts() {
        let replicas = placement.replica_count(layer, e);
        if replicas == 0 {
            continue;
        }
        let share = match mode {
            ReplicaLoadMode::EvenSplit => loads.get(layer, e) / T::from_usize_lossy(replicas),
            ReplicaLoadMode::FullCopy => loads.get(layer, e),
        };
        for (r, slot) in out.iter_mut().enumerate() {
            if placement.hosts(layer, r, e) {
                *slot = *slot + share;
            }
        }
    }
    Ok(DeviceLoadVector { loads: out })
}

/// Per-device aggregate load of one layer, splitting replicated experts'
/// load evenly across their replicas.
pub fn device_loads<T: Scalar>(
    placement: &PlacementTensor,
    loads: &LoadMatrix<T>,
    layer: usize,
) -> Result<DeviceLoadVector<T>> {
    device_loads_with_mode(placement, loads, layer, ReplicaLoadMode::EvenSplit)
}

/// Peak device load divided by mean device load for one layer.
///
/// Always ≥ 1 when defined; exactly 1.0 on uniform device loads. An
/// all-zero layer has nothing to balance and reports 1.0.
pub fn imbalance_ratio<T: Scalar>(
    placement: &PlacementTensor,
    loads: &LoadMatrix<T>,
    layer: usize,
) -> Result<T> {
    let dev = device_loads(placement, loads, layer)?;
    Ok(imbalance_of_device_loads(dev.loads()))
}

/// Imbalance ratio of an explicit device-load vector.
pub fn imbalance_of_device_loads<T: Scalar>(loads: &[T]) -> T {
    let total: T = loads.iter().fold(T::zero(), |acc, &v| acc + v);
    if total <= T::zero() {
        return T::one();
    }
    let mean = total / T::from_usize_lossy(loads.len());
    let max = loads.iter().fold(T::zero(), |acc, &v| if v > acc { v } else { acc });
    max / mean
}

#[cfg(test)]
mod tests {
    use super::*;

    fn placement_1l(devices: usize, experts: usize, hosted: &[&[usize]]) -> PlacementTensor {
        let lists = vec![hosted.iter().map(|ids| ids.to_vec()).collect::<Vec<_>>()];
        PlacementTensor::from_device_experts(1, devices, experts, &lists).unwrap()
    }

    #[test]
    fn one_replica_each_no_splitting() {
        let p = placement_1l(2, 2, &[&[0], &[1]]);
        let d = LoadMatrix::from_rows(&[vec![3.0, 5.0]]).unwrap();
        let loads = device_loads(&p, &d, 0).unwrap();
        assert_eq!(loads.loads(), &[3.0, 5.0]);
    }

    #[test]
    fn even_split_across_two_replicas() {
        let p = placement_1l(2, 1, &[&[0], &[0]]);
        let d = LoadMatrix::from_rows(&[vec![4.0]]).unwrap();
        let loads = device_loads(&p, &d, 0).unwrap();
        assert_eq!(loads.loads(), &[2.0, 2.0]);
    }

    #[test]
    fn shared_replica_split_hand_evaluated() {
        // dev0={e0,e1}, dev1={e0,e2}, D=[9,2,1]:
        // e0 has 2 replicas -> 4.5 each; dev0 = 4.5+2 = 6.5; dev1 = 4.5+1 = 5.5.
        let p = placement_1l(2, 3, &[&[0, 1], &[0, 2]]);
        let d = LoadMatrix::from_rows(&[vec![9.0, 2.0, 1.0]]).unwrap();
        let loads = device_loads(&p, &d, 0).unwrap();
        assert_eq!(loads.loads(), &[6.5, 5.5]);

        // Independent scalar-sum oracle over all (r, e) pairs.
        let mut oracle = [0.0f64; 2];
        for r in 0..2 {
            for e in 0..3 {
                if p.hosts(0, r, e) {
                    oracle[r] += d.get(0, e) / p.replica_count(0, e) as f64;
                }
            }
        }
        assert_eq!(loads.loads(), &oracle);
    }

    #[test]
    fn full_copy_mode_double_counts() {
        let p = placement_1l(2, 1, &[&[0], &[0]]);
        let d = LoadMatrix::from_rows(&[vec![4.0]]).unwrap();
        let loads = device_loads_with_mode(&p, &d, 0, ReplicaLoadMode::FullCopy).unwrap();
        assert_eq!(loads.loads(), &[4.0, 4.0]);
    }

    #[test]
    fn imbalance_basic_arithmetic() {
        let p = placement_1l(2, 2, &[&[0], &[1]]);
        let d = LoadMatrix::from_rows(&[vec![3.0, 5.0]]).unwrap();
        let b: f64 = imbalance_ratio(&p, &d, 0).unwrap();
        assert!((b - 1.25).abs() < 1e-12);
    }

    #[test]
    fn imbalance_uniform_is_exactly_one() {
        let p = placement_1l(2, 2, &[&[0], &[1]]);
        let d = LoadMatrix::from_rows(&[vec![7.0, 7.0]]).unwrap();
        assert_eq!(imbalance_ratio(&p, &d, 0).unwrap(), 1.0);
    }

    #[test]
    fn imbalance_from_split_example() {
        let p = placement_1l(2, 3, &[&[0, 1], &[0, 2]]);
        let d = LoadMatrix::from_rows(&[vec![9.0, 2.0, 1.0]]).unwrap();
        let b: f64 = imbalance_ratio(&p, &d, 0).unwrap();
        assert!((b - 6.5 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn all_zero_layer_is_balanced() {
        let p = placement_1l(2, 2, &[&[0], &[1]]);
        let d: LoadMatrix = LoadMatrix::zeros(1, 2).unwrap();
        assert_eq!(imbalance_ratio(&p, &d, 0).unwrap(), 1.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = placement_1l(2, 2, &[&[0], &[1]]);
        let d = LoadMatrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(device_loads(&p, &d, 0), Err(Error::InvalidArgument(_))));
        let d2 = LoadMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(device_loads(&p, &d2, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn negative_load_rejected() {
        assert!(LoadMatrix::from_rows(&[vec![1.0, -0.5]]).is_err());
    }

    #[test]
    fn existence_and_capacity_checks() {
        let mut p = PlacementTensor::new(1, 2, 2).unwrap();
        p.set(0, 0, 0, true);
        assert!(p.validate_existence().is_err());
        p.set(0, 1, 1, true);
        assert!(p.validate_existence().is_ok());
        assert!(p.validate_capacity(&[1]).is_ok());
        p.set(0, 0, 1, true);
        assert!(p.validate_capacity(&[1]).is_err());
        assert!(p.validate_capacity(&[2]).is_ok());
    }

    #[test]
    fn placement_json_round_trip() {
        let p = placement_1l(2, 3, &[&[0, 1], &[0, 2]]);
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"bits\":[[[0,1],[0,2]]]"));
        let back: PlacementTensor = serde_json::from_str(&s).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn load_matrix_json_round_trip_f32() {
        let m = LoadMatrix::<f32>::from_rows(&[vec![1.0, 2.5], vec![0.0, 4.0]]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: LoadMatrix<f32> = serde_json::from_str(&s).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn generic_f32_matches_f64_on_small_values() {
        let p = placement_1l(2, 3, &[&[0, 1], &[0, 2]]);
        let d32 = LoadMatrix::<f32>::from_rows(&[vec![9.0, 2.0, 1.0]]).unwrap();
        let b32 = imbalance_ratio(&p, &d32, 0).unwrap();
        assert!((f64::from(b32) - 6.5 / 6.0).abs() < 1e-6);
    }
}
