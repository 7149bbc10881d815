//! Dataset I/O, packet-sequence binning, and min-max feature normalization.
//!
//! Scenario files are line-oriented text with explicit field names; reals are
//! written in shortest round-trip form so `load(save(s))` is bit-exact. A
//! dataset is a directory of scenario files plus `manifest.txt` recording
//! split membership. Units everywhere: delays in seconds, rates in
//! bits/second, sizes in bits.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::scenario::{
    build_scenario, Device, DeviceKind, Flow, FlowId, LinkPort, NetworkScenario, PacketBin,
    ScenarioError, TrafficKind, BIN_WIDTH_S, NUM_BINS,
};

/// One captured packet, timestamped relative to the capture-window start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacketRecord {
    pub timestamp_s: f64,
    pub size_bits: f64,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("packet has negative timestamp {0}")]
    NegativeTimestamp(f64),
    #[error("normalization requires at least one scenario with at least one flow")]
    EmptyDataset,
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Trim to the first second and count packets per millisecond bin.
/// Bin `k` covers timestamps in `[k*0.001, (k+1)*0.001)`; packets at or past
/// 1.0 s are discarded. Each bin's bits = count x packet size.
pub fn bin_packets(
    packets: &[PacketRecord],
    packet_size_bits: f64,
) -> Result<Vec<PacketBin>, TraceError> {
    let mut counts = [0u64; NUM_BINS];
    for p in packets {
        if p.timestamp_s < 0.0 {
            return Err(TraceError::NegativeTimestamp(p.timestamp_s));
        }
        if p.timestamp_s >= 1.0 {
            continue;
        }
        let mut k = (p.timestamp_s * 1000.0).floor() as usize;
        k = k.min(NUM_BINS - 1);
        // Land exactly on the half-open interval under f64 comparison.
        while k > 0 && p.timestamp_s < k as f64 * BIN_WIDTH_S {
            k -= 1;
        }
        while k + 1 < NUM_BINS && p.timestamp_s >= (k + 1) as f64 * BIN_WIDTH_S {
            k += 1;
        }
        counts[k] += 1;
    }
    Ok(counts
        .iter()
        .map(|&c| PacketBin {
            packet_count: c,
            bits: c as f64 * packet_size_bits,
        })
        .collect())
}

/// Features subject to min-max normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    LinkBandwidth,
    FlowAvgLoad,
    FlowNumPackets,
    FlowPacketSize,
    BinCount,
    BinBits,
}

pub const ALL_FEATURES: [Feature; 6] = [
    Feature::LinkBandwidth,
    Feature::FlowAvgLoad,
    Feature::FlowNumPackets,
    Feature::FlowPacketSize,
    Feature::BinCount,
    Feature::BinBits,
];

impl Feature {
    pub fn as_str(&self) -> &'static str {
        match self {
            Feature::LinkBandwidth => "link_bandwidth",
            Feature::FlowAvgLoad => "flow_avg_load",
            Feature::FlowNumPackets => "flow_num_packets",
            Feature::FlowPacketSize => "flow_packet_size",
            Feature::BinCount => "bin_count",
            Feature::BinBits => "bin_bits",
        }
    }

    pub fn from_str(s: &str) -> Option<Feature> {
        ALL_FEATURES.iter().copied().find(|f| f.as_str() == s)
    }

    fn index(&self) -> usize {
        *self as usize
    }
}

/// Per-feature (min, max) fitted on the training split and persisted with the
/// model checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    ranges: [(f64, f64); 6],
}

impl NormStats {
    pub fn range(&self, feature: Feature) -> (f64, f64) {
        self.ranges[feature.index()]
    }

    pub fn from_ranges(ranges: [(f64, f64); 6]) -> NormStats {
        NormStats { ranges }
    }
}

/// Fit global min-max statistics over every occurrence in the training split.
/// Packet bins are pooled across all flows and scenarios, like the scalar
/// features.
pub fn fit_normalization(training: &[NetworkScenario]) -> Result<NormStats, TraceError> {
    let mut ranges = [(f64::INFINITY, f64::NEG_INFINITY); 6];
    let mut any_flow = false;
    let feed = |f: Feature, v: f64, ranges: &mut [(f64, f64); 6]| {
        let r = &mut ranges[f.index()];
        r.0 = r.0.min(v);
        r.1 = r.1.max(v);
    };
    for s in training {
        for lp in s.linkports() {
            feed(Feature::LinkBandwidth, lp.bandwidth_bps, &mut ranges);
        }
        for fl in s.flows() {
            any_flow = true;
            feed(Feature::FlowAvgLoad, fl.avg_load_bps, &mut ranges);
            feed(Feature::FlowNumPackets, fl.num_packets as f64, &mut ranges);
            feed(Feature::FlowPacketSize, fl.packet_size_bits, &mut ranges);
            for b in &fl.packet_bins {
                feed(Feature::BinCount, b.packet_count as f64, &mut ranges);
                feed(Feature::BinBits, b.bits, &mut ranges);
            }
        }
    }
    if !any_flow {
        return Err(TraceError::EmptyDataset);
    }
    Ok(NormStats { ranges })
}

/// `(value - min) / (max - min)`, clamped to [0, 1]; 0 when max == min.
pub fn apply_normalization(value: f64, feature: Feature, stats: &NormStats) -> f64 {
    let (min, max) = stats.range(feature);
    if max == min {
        return 0.0;
    }
    ((value - min) / (max - min)).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// Scenario file format
// ---------------------------------------------------------------------------

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> TraceError {
    TraceError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Serialize a scenario to the line-oriented text format.
pub fn write_scenario(s: &NetworkScenario, w: &mut impl Write) -> io::Result<()> {
    writeln!(w, "# netdelay scenario v1")?;
    for d in s.devices() {
        let ports: Vec<&str> = d.port_ids.iter().map(|p| p.as_str()).collect();
        writeln!(
            w,
            "device {} {} ports={}",
            d.id,
            d.kind.as_str(),
            ports.join(",")
        )?;
    }
    for lp in s.linkports() {
        writeln!(
            w,
            "linkport {} device={} bandwidth_bps={} propagation_delay_s={}",
            lp.id, lp.device_id, lp.bandwidth_bps, lp.propagation_delay_s
        )?;
    }
    for f in s.flows() {
        let path: Vec<&str> = f.path.iter().map(|p| p.as_str()).collect();
        writeln!(
            w,
            "flow {} path={} avg_load_bps={} num_packets={} packet_size_bits={} distribution={}",
            f.id,
            path.join(","),
            f.avg_load_bps,
            f.num_packets,
            f.packet_size_bits,
            f.distribution.as_str()
        )?;
        // Sparse bins: only non-zero entries as index:count. Bits are implied
        // by count x packet size.
        let mut parts = Vec::new();
        for (k, b) in f.packet_bins.iter().enumerate() {
            if b.packet_count > 0 {
                parts.push(format!("{}:{}", k, b.packet_count));
            }
        }
        writeln!(w, "bins {} {}", f.id, parts.join(" "))?;
    }
    if let Some(labels) = s.labels() {
        for (f, &l) in s.flows().iter().zip(labels) {
            writeln!(w, "label {} {}", f.id, l)?;
        }
    }
    Ok(())
}

pub fn save_scenario(s: &NetworkScenario, path: &Path) -> Result<(), TraceError> {
    let mut buf = Vec::new();
    write_scenario(s, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_scenario(path: &Path) -> Result<NetworkScenario, TraceError> {
    let text = fs::read_to_string(path)?;
    parse_scenario(&text, path)
}

fn split_kv<'a>(
    tok: &'a str,
    key: &str,
    path: &Path,
    line_no: usize,
) -> Result<&'a str, TraceError> {
    tok.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| parse_err(path, line_no, format!("expected '{key}=...', got '{tok}'")))
}

fn parse_f64(tok: &str, what: &str, path: &Path, line_no: usize) -> Result<f64, TraceError> {
    tok.parse::<f64>()
        .map_err(|_| parse_err(path, line_no, format!("bad {what} '{tok}'")))
}

pub fn parse_scenario(text: &str, path: &Path) -> Result<NetworkScenario, TraceError> {
    let mut devices: Vec<Device> = Vec::new();
    let mut linkports: Vec<LinkPort> = Vec::new();
    let mut flows: Vec<Flow> = Vec::new();
    let mut labels: Vec<(FlowId, f64)> = Vec::new();
    // flows whose bins line has been seen
    let mut bins_seen: Vec<FlowId> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        let keyword = toks.next().unwrap();
        match keyword {
            "device" => {
                let id = toks
                    .next()
                    .ok_or_else(|| parse_err(path, line_no, "device missing id"))?;
                let kind = match toks.next() {
                    Some("router") => DeviceKind::Router,
                    Some("switch") => DeviceKind::Switch,
                    other => {
                        return Err(parse_err(
                            path,
                            line_no,
                            format!("bad device kind {other:?}"),
                        ))
                    }
                };
                let ports_tok = toks
                    .next()
                    .ok_or_else(|| parse_err(path, line_no, "device missing ports"))?;
                let ports = split_kv(ports_tok, "ports", path, line_no)?;
                devices.push(Device {
                    id: id.into(),
                    kind,
                    port_ids: ports.split(',').filter(|p| !p.is_empty()).map(Into::into).collect(),
                });
            }
            "linkport" => {
                let id = toks
                    .next()
                    .ok_or_else(|| parse_err(path, line_no, "linkport missing id"))?;
                let dev = split_kv(
                    toks.next()
                        .ok_or_else(|| parse_err(path, line_no, "linkport missing device"))?,
                    "device",
                    path,
                    line_no,
                )?;
                let bw_tok = split_kv(
                    toks.next()
                        .ok_or_else(|| parse_err(path, line_no, "linkport missing bandwidth"))?,
                    "bandwidth_bps",
                    path,
                    line_no,
                )?;
                let prop_tok = split_kv(
                    toks.next()
                        .ok_or_else(|| parse_err(path, line_no, "linkport missing propagation"))?,
                    "propagation_delay_s",
                    path,
                    line_no,
                )?;
                linkports.push(LinkPort {
                    id: id.into(),
                    device_id: dev.into(),
                    bandwidth_bps: parse_f64(bw_tok, "bandwidth", path, line_no)?,
                    propagation_delay_s: parse_f64(prop_tok, "propagation delay", path, line_no)?,
                });
            }
            "flow" => {
                let id = toks
                    .next()
                    .ok_or_else(|| parse_err(path, line_no, "flow missing id"))?;
                let path_tok = split_kv(
                    toks.next()
                        .ok_or_else(|| parse_err(path, line_no, "flow missing path"))?,
                    "path",
                    path,
                    line_no,
                )?;
                let load_tok = split_kv(
                    toks.next()
                        .ok_or_else(|| parse_err(path, line_no, "flow missing avg load"))?,
                    "avg_load_bps",
                    path,
                    line_no,
                )?;
                let np_tok = split_kv(
                    toks.next()
                        .ok_or_else(|| parse_err(path, line_no, "flow missing num packets"))?,
                    "num_packets",
                    path,
                    line_no,
                )?;
                let ps_tok = split_kv(
                    toks.next()
                        .ok_or_else(|| parse_err(path, line_no, "flow missing packet size"))?,
                    "packet_size_bits",
                    path,
                    line_no,
                )?;
                let dist_tok = split_kv(
                    toks.next()
                        .ok_or_else(|| parse_err(path, line_no, "flow missing distribution"))?,
                    "distribution",
                    path,
                    line_no,
                )?;
                let distribution = match dist_tok {
                    "cbr" => TrafficKind::Cbr,
                    "mb" => TrafficKind::Mb,
                    other => {
                        return Err(parse_err(
                            path,
                            line_no,
                            format!("bad distribution '{other}'"),
                        ))
                    }
                };
                let num_packets = np_tok.parse::<u64>().map_err(|_| {
                    parse_err(path, line_no, format!("bad num_packets '{np_tok}'"))
                })?;
                let packet_size_bits = parse_f64(ps_tok, "packet size", path, line_no)?;
                flows.push(Flow {
                    id: id.into(),
                    path: path_tok
                        .split(',')
                        .filter(|p| !p.is_empty())
                        .map(Into::into)
                        .collect(),
                    avg_load_bps: parse_f64(load_tok, "avg load", path, line_no)?,
                    num_packets,
                    packet_size_bits,
                    packet_bins: Vec::new(), // filled by the bins line
                    distribution,
                });
            }
            "bins" => {
                let id: FlowId = toks
                    .next()
                    .ok_or_else(|| parse_err(path, line_no, "bins missing flow id"))?
                    .into();
                let flow = flows.iter_mut().find(|f| f.id == id).ok_or_else(|| {
                    parse_err(path, line_no, format!("bins for unknown flow '{id}'"))
                })?;
                if bins_seen.contains(&id) {
                    return Err(parse_err(
                        path,
                        line_no,
                        format!("duplicate bins line for flow '{id}'"),
                    ));
                }
                let mut counts = vec![0u64; NUM_BINS];
                for entry in toks {
                    let (k, c) = entry.split_once(':').ok_or_else(|| {
                        parse_err(path, line_no, format!("bad bin entry '{entry}'"))
                    })?;
                    let k: usize = k.parse().map_err(|_| {
                        parse_err(path, line_no, format!("bad bin index '{k}'"))
                    })?;
                    if k >= NUM_BINS {
                        return Err(parse_err(
                            path,
                            line_no,
                            format!("bin index {k} out of range"),
                        ));
                    }
                    counts[k] = c.parse().map_err(|_| {
                        parse_err(path, line_no, format!("bad bin count '{c}'"))
                    })?;
                }
                flow.packet_bins = counts
                    .iter()
                    .map(|&c| PacketBin {
                        packet_count: c,
                        bits: c as f64 * flow.packet_size_bits,
                    })
                    .collect();
                bins_seen.push(id);
            }
            "label" => {
                let id = toks
                    .next()
                    .ok_or_else(|| parse_err(path, line_no, "label missing flow id"))?;
                let v_tok = toks
                    .next()
                    .ok_or_else(|| parse_err(path, line_no, "label missing value"))?;
                labels.push((id.into(), parse_f64(v_tok, "label", path, line_no)?));
            }
            other => {
                return Err(parse_err(path, line_no, format!("unknown record '{other}'")));
            }
        }
    }

    for f in &flows {
        if !bins_seen.contains(&f.id) {
            return Err(parse_err(
                path,
                0,
                format!("flow '{}' has no bins line (truncated file?)", f.id),
            ));
        }
    }

    let label_vec = if labels.is_empty() {
        None
    } else {
        let mut vs = Vec::with_capacity(flows.len());
        for f in &flows {
            let Some(&(_, v)) = labels.iter().find(|(id, _)| *id == f.id) else {
                return Err(parse_err(
                    path,
                    0,
                    format!("missing label for flow '{}'", f.id),
                ));
            };
            vs.push(v);
        }
        Some(vs)
    };

    Ok(build_scenario(devices, linkports, flows, label_vec)?)
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// A loaded dataset: named scenarios per split.
#[derive(Debug, Default)]
pub struct Dataset {
    pub train: Vec<(String, NetworkScenario)>,
    pub validation: Vec<(String, NetworkScenario)>,
    pub test: Vec<(String, NetworkScenario)>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[(String, NetworkScenario)] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &(String, NetworkScenario)> {
        self.train
            .iter()
            .chain(self.validation.iter())
            .chain(self.test.iter())
    }
}

/// Write `manifest.txt` for a set of (split, file name) entries.
pub fn write_manifest(
    dir: &Path,
    seed: u64,
    entries: &[(Split, String)],
) -> Result<(), TraceError> {
    let mut buf = String::new();
    buf.push_str("# netdelay dataset manifest v1\n");
    buf.push_str(&format!("seed {seed}\n"));
    for (split, name) in entries {
        buf.push_str(&format!("{} {}\n", split.as_str(), name));
    }
    fs::write(dir.join("manifest.txt"), buf)?;
    Ok(())
}

/// Load a dataset directory via its manifest.
pub fn load_dataset(dir: &Path) -> Result<Dataset, TraceError> {
    let manifest: PathBuf = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest)?;
    let mut ds = Dataset::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("seed ") {
            continue;
        }
        let (split, name) = line
            .split_once(' ')
            .ok_or_else(|| parse_err(&manifest, i + 1, "expected '<split> <file>'"))?;
        let scenario = load_scenario(&dir.join(name))?;
        let entry = (name.to_string(), scenario);
        match split {
            "train" => ds.train.push(entry),
            "validation" => ds.validation.push(entry),
            "test" => ds.test.push(entry),
            other => {
                return Err(parse_err(
                    &manifest,
                    i + 1,
                    format!("unknown split '{other}'"),
                ))
            }
        }
    }
    Ok(ds)
}
