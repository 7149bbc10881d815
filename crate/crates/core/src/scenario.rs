//! Network scenario domain types: devices, link-port pairs, flows, and the
//! index structures the message passing needs.
//!
//! A link and the unique port it attaches to are fused into one [`LinkPort`]
//! entity. Paths are sequences of link-port ids: for a flow crossing devices
//! `a -> b -> c`, the path holds the egress port of `a` followed by the egress
//! port of `b`. Scenarios are immutable once built; construction validates
//! every cross-reference and numeric invariant, so downstream code never sees
//! a half-formed scenario.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

/// Number of 1 ms bins in a packet sequence (first second of the capture).
pub const NUM_BINS: usize = 1000;
/// Width of one bin in seconds.
pub const BIN_WIDTH_S: f64 = 0.001;

macro_rules! id_newtype {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                $name(s.into())
            }
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_string())
            }
        }
    };
}

id_newtype!(DeviceId);
id_newtype!(PortId);
id_newtype!(FlowId);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceKind {
    Router,
    Switch,
}

impl DeviceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DeviceKind::Router => "router",
            DeviceKind::Switch => "switch",
        }
    }
}

/// Traffic distribution tag. Metadata only: the model never consumes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrafficKind {
    Cbr,
    Mb,
}

impl TrafficKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrafficKind::Cbr => "cbr",
            TrafficKind::Mb => "mb",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Device {
    pub id: DeviceId,
    pub kind: DeviceKind,
    /// Ports owned by this device, in stored order.
    pub port_ids: Vec<PortId>,
}

#[derive(Debug, Clone)]
pub struct LinkPort {
    pub id: PortId,
    pub device_id: DeviceId,
    pub bandwidth_bps: f64,
    pub propagation_delay_s: f64,
}

/// One millisecond bin of a flow's packet sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacketBin {
    pub packet_count: u64,
    pub bits: f64,
}

#[derive(Debug, Clone)]
pub struct Flow {
    pub id: FlowId,
    /// Link-port ids crossed in order; loop-free.
    pub path: Vec<PortId>,
    pub avg_load_bps: f64,
    pub num_packets: u64,
    pub packet_size_bits: f64,
    /// Packets per millisecond over the first second of the capture window.
    pub packet_bins: Vec<PacketBin>,
    pub distribution: TrafficKind,
}

/// A validated network scenario: one sample of a dataset.
#[derive(Debug, Clone)]
pub struct NetworkScenario {
    devices: Vec<Device>,
    linkports: Vec<LinkPort>,
    flows: Vec<Flow>,
    /// Per-flow mean packet delay in seconds, aligned with `flows`.
    labels: Option<Vec<f64>>,

    device_index: BTreeMap<DeviceId, usize>,
    port_index: BTreeMap<PortId, usize>,
    flow_index: BTreeMap<FlowId, usize>,
    /// For each linkport (by storage index), the (flow index, path position)
    /// pairs crossing it, sorted by (flow id, position).
    crossings: Vec<Vec<(usize, usize)>>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("{referrer} references unknown {kind} '{id}'")]
    DanglingReference {
        referrer: String,
        kind: &'static str,
        id: String,
    },
    #[error("duplicate {kind} id '{id}'")]
    DuplicateId { kind: &'static str, id: String },
    #[error("flow '{flow}' visits linkport '{port}' twice")]
    DuplicatePortInPath { flow: String, port: String },
    #[error("flow '{flow}' has an empty path")]
    EmptyPath { flow: String },
    #[error("device '{device}' has no ports")]
    EmptyPorts { device: String },
    #[error("device '{device}' lists port '{port}' twice")]
    DuplicatePortListing { device: String, port: String },
    #[error("port '{port}' belongs to '{owner}' but is listed by device '{device}'")]
    PortOwnerMismatch {
        port: String,
        owner: String,
        device: String,
    },
    #[error("port '{port}' is not listed by its device '{device}'")]
    PortNotListed { port: String, device: String },
    #[error("linkport '{port}' has non-positive bandwidth {value}")]
    NonPositiveBandwidth { port: String, value: f64 },
    #[error("linkport '{port}' has negative propagation delay {value}")]
    NegativePropagationDelay { port: String, value: f64 },
    #[error("flow '{flow}' has non-positive average load {value}")]
    NonPositiveLoad { flow: String, value: f64 },
    #[error("flow '{flow}' has zero packets")]
    ZeroPackets { flow: String },
    #[error("flow '{flow}' has non-positive packet size {value}")]
    NonPositivePacketSize { flow: String, value: f64 },
    #[error("flow '{flow}' carries {got} packet bins, expected {expected}")]
    BinLengthMismatch {
        flow: String,
        got: usize,
        expected: usize,
    },
    #[error("flow '{flow}' bin {bin}: bits {bits} != count {count} x packet size")]
    BinBitsMismatch {
        flow: String,
        bin: usize,
        count: u64,
        bits: f64,
    },
    #[error("label for flow '{flow}' is not strictly positive ({value})")]
    NonPositiveLabel { flow: String, value: f64 },
    #[error("got {got} labels for {expected} flows")]
    LabelCountMismatch { got: usize, expected: usize },
}

/// Lookup failures for the query operations.
#[derive(Debug, Error, PartialEq)]
pub enum LookupError {
    #[error("unknown device '{0}'")]
    UnknownDevice(String),
    #[error("unknown linkport '{0}'")]
    UnknownLinkPort(String),
    #[error("unknown flow '{0}'")]
    UnknownFlow(String),
}

impl NetworkScenario {
    /// Validate raw component lists into a scenario. Every type invariant is
    /// checked here; on success the scenario is internally consistent.
    pub fn build(
        devices: Vec<Device>,
        linkports: Vec<LinkPort>,
        flows: Vec<Flow>,
        labels: Option<Vec<f64>>,
    ) -> Result<NetworkScenario, ScenarioError> {
        let mut device_index = BTreeMap::new();
        for (i, d) in devices.iter().enumerate() {
            if device_index.insert(d.id.clone(), i).is_some() {
                return Err(ScenarioError::DuplicateId {
                    kind: "device",
                    id: d.id.to_string(),
                });
            }
        }
        let mut port_index = BTreeMap::new();
        for (i, lp) in linkports.iter().enumerate() {
            if port_index.insert(lp.id.clone(), i).is_some() {
                return Err(ScenarioError::DuplicateId {
                    kind: "linkport",
                    id: lp.id.to_string(),
                });
            }
        }
        let mut flow_index = BTreeMap::new();
        for (i, f) in flows.iter().enumerate() {
            if flow_index.insert(f.id.clone(), i).is_some() {
                return Err(ScenarioError::DuplicateId {
                    kind: "flow",
                    id: f.id.to_string(),
                });
            }
        }

        for d in &devices {
            if d.port_ids.is_empty() {
                return Err(ScenarioError::EmptyPorts {
                    device: d.id.to_string(),
                });
            }
            let mut seen = BTreeSet::new();
            for p in &d.port_ids {
                if !seen.insert(p.clone()) {
                    return Err(ScenarioError::DuplicatePortListing {
                        device: d.id.to_string(),
                        port: p.to_string(),
                    });
                }
                let Some(&pi) = port_index.get(p) else {
                    return Err(ScenarioError::DanglingReference {
                        referrer: format!("device '{}'", d.id),
                        kind: "linkport",
                        id: p.to_string(),
                    });
                };
                if linkports[pi].device_id != d.id {
                    return Err(ScenarioError::PortOwnerMismatch {
                        port: p.to_string(),
                        owner: linkports[pi].device_id.to_string(),
                        device: d.id.to_string(),
                    });
                }
            }
        }

        for lp in &linkports {
            let Some(&di) = device_index.get(&lp.device_id) else {
                return Err(ScenarioError::DanglingReference {
                    referrer: format!("linkport '{}'", lp.id),
                    kind: "device",
                    id: lp.device_id.to_string(),
                });
            };
            if !devices[di].port_ids.contains(&lp.id) {
                return Err(ScenarioError::PortNotListed {
                    port: lp.id.to_string(),
                    device: lp.device_id.to_string(),
                });
            }
            if !(lp.bandwidth_bps > 0.0) {
                return Err(ScenarioError::NonPositiveBandwidth {
                    port: lp.id.to_string(),
                    value: lp.bandwidth_bps,
                });
            }
            if !(lp.propagation_delay_s >= 0.0) {
                return Err(ScenarioError::NegativePropagationDelay {
                    port: lp.id.to_string(),
                    value: lp.propagation_delay_s,
                });
            }
        }

        for f in &flows {
            if f.path.is_empty() {
                return Err(ScenarioError::EmptyPath {
                    flow: f.id.to_string(),
                });
            }
            let mut seen = BTreeSet::new();
            for p in &f.path {
                if !port_index.contains_key(p) {
                    return Err(ScenarioError::DanglingReference {
                        referrer: format!("flow '{}'", f.id),
                        kind: "linkport",
                        id: p.to_string(),
                    });
                }
                if !seen.insert(p.clone()) {
                    return Err(ScenarioError::DuplicatePortInPath {
                        flow: f.id.to_string(),
                        port: p.to_string(),
                    });
                }
            }
            if !(f.avg_load_bps > 0.0) {
                return Err(ScenarioError::NonPositiveLoad {
                    flow: f.id.to_string(),
                    value: f.avg_load_bps,
                });
            }
            if f.num_packets == 0 {
                return Err(ScenarioError::ZeroPackets {
                    flow: f.id.to_string(),
                });
            }
            if !(f.packet_size_bits > 0.0) {
                return Err(ScenarioError::NonPositivePacketSize {
                    flow: f.id.to_string(),
                    value: f.packet_size_bits,
                });
            }
            if f.packet_bins.len() != NUM_BINS {
                return Err(ScenarioError::BinLengthMismatch {
                    flow: f.id.to_string(),
                    got: f.packet_bins.len(),
                    expected: NUM_BINS,
                });
            }
            for (k, bin) in f.packet_bins.iter().enumerate() {
                if bin.bits != bin.packet_count as f64 * f.packet_size_bits {
                    return Err(ScenarioError::BinBitsMismatch {
                        flow: f.id.to_string(),
                        bin: k,
                        count: bin.packet_count,
                        bits: bin.bits,
                    });
                }
            }
        }

        if let Some(ls) = &labels {
            if ls.len() != flows.len() {
                return Err(ScenarioError::LabelCountMismatch {
                    got: ls.len(),
                    expected: flows.len(),
                });
            }
            for (f, &l) in flows.iter().zip(ls) {
                if !(l > 0.0) {
                    return Err(ScenarioError::NonPositiveLabel {
                        flow: f.id.to_string(),
                        value: l,
                    });
                }
            }
        }

        // crossings[port_storage_index] = [(flow idx, path position)], sorted
        // by (flow id, position); flow_index iteration is already id-sorted.
        let mut crossings = vec![Vec::new(); linkports.len()];
        for (fid, &fi) in &flow_index {
            let _ = fid;
            for (pos, p) in flows[fi].path.iter().enumerate() {
                crossings[port_index[p]].push((fi, pos));
            }
        }

        Ok(NetworkScenario {
            devices,
            linkports,
            flows,
            labels,
            device_index,
            port_index,
            flow_index,
            crossings,
        })
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn linkports(&self) -> &[LinkPort] {
        &self.linkports
    }

    pub fn flows(&self) -> &[Flow] {
        &self.flows
    }

    /// Per-flow mean delay labels, aligned with `flows()`.
    pub fn labels(&self) -> Option<&[f64]> {
        self.labels.as_deref()
    }

    /// Replace labels, revalidating them. Used by the simulator and by
    /// fixture construction in tests.
    pub fn with_labels(mut self, labels: Option<Vec<f64>>) -> Result<Self, ScenarioError> {
        if let Some(ls) = &labels {
            if ls.len() != self.flows.len() {
                return Err(ScenarioError::LabelCountMismatch {
                    got: ls.len(),
                    expected: self.flows.len(),
                });
            }
            for (f, &l) in self.flows.iter().zip(ls) {
                if !(l > 0.0) {
                    return Err(ScenarioError::NonPositiveLabel {
                        flow: f.id.to_string(),
                        value: l,
                    });
                }
            }
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn device(&self, id: &DeviceId) -> Option<&Device> {
        self.device_index.get(id).map(|&i| &self.devices[i])
    }

    pub fn linkport(&self, id: &PortId) -> Option<&LinkPort> {
        self.port_index.get(id).map(|&i| &self.linkports[i])
    }

    pub fn flow(&self, id: &FlowId) -> Option<&Flow> {
        self.flow_index.get(id).map(|&i| &self.flows[i])
    }

    pub fn device_storage_index(&self, id: &DeviceId) -> Option<usize> {
        self.device_index.get(id).copied()
    }

    pub fn port_storage_index(&self, id: &PortId) -> Option<usize> {
        self.port_index.get(id).copied()
    }

    /// The flows crossing `linkport_id` with their path positions, sorted by
    /// (flow id, position).
    pub fn flows_through(
        &self,
        linkport_id: &PortId,
    ) -> Result<Vec<(FlowId, usize)>, LookupError> {
        let &pi = self
            .port_index
            .get(linkport_id)
            .ok_or_else(|| LookupError::UnknownLinkPort(linkport_id.to_string()))?;
        Ok(self.crossings[pi]
            .iter()
            .map(|&(fi, pos)| (self.flows[fi].id.clone(), pos))
            .collect())
    }

    /// Same as [`flows_through`](Self::flows_through) but by storage index,
    /// with no allocation. Used by the model's aggregation step.
    pub fn crossings_of(&self, port_storage_index: usize) -> &[(usize, usize)] {
        &self.crossings[port_storage_index]
    }

    /// The device's ports in stored order.
    pub fn ports_of_device(&self, device_id: &DeviceId) -> Result<&[PortId], LookupError> {
        let &di = self
            .device_index
            .get(device_id)
            .ok_or_else(|| LookupError::UnknownDevice(device_id.to_string()))?;
        Ok(&self.devices[di].port_ids)
    }

    /// For each path position of the flow, the linkport and the device that
    /// owns it.
    pub fn path_hops(&self, flow_id: &FlowId) -> Result<Vec<(PortId, DeviceId)>, LookupError> {
        let &fi = self
            .flow_index
            .get(flow_id)
            .ok_or_else(|| LookupError::UnknownFlow(flow_id.to_string()))?;
        Ok(self.flows[fi]
            .path
            .iter()
            .map(|p| {
                let lp = &self.linkports[self.port_index[p]];
                (p.clone(), lp.device_id.clone())
            })
            .collect())
    }
}

/// Shorthand used in several construction sites and tests.
pub fn build_scenario(
    devices: Vec<Device>,
    linkports: Vec<LinkPort>,
    flows: Vec<Flow>,
    labels: Option<Vec<f64>>,
) -> Result<NetworkScenario, ScenarioError> {
    NetworkScenario::build(devices, linkports, flows, labels)
}

/// All-zero packet bins of the canonical length.
pub fn empty_bins() -> Vec<PacketBin> {
    vec![
        PacketBin {
            packet_count: 0,
            bits: 0.0
        };
        NUM_BINS
    ]
}
