//! Model parameter store: embedding sizes, the named tensor catalog, seeded
//! initialisation, and the bit-exact parameter payload format.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::nn::tensor::Tensor;
use crate::nn::NnError;
use crate::rng::Rng;

/// Embedding widths of the delay model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub flow_embed: usize,
    pub linkport_embed: usize,
    pub device_embed: usize,
    /// Hidden width of the packet-sequence encoder; defaults to the flow
    /// embedding size.
    pub pkt_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            flow_embed: 64,
            linkport_embed: 64,
            device_embed: 16,
            pkt_hidden: 64,
        }
    }
}

impl ModelConfig {
    /// Uniformly small widths; used by gradient checks and fast tests.
    pub fn tiny(flow: usize, linkport: usize, device: usize) -> ModelConfig {
        ModelConfig {
            flow_embed: flow,
            linkport_embed: linkport,
            device_embed: device,
            pkt_hidden: flow,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        for (name, v) in [
            ("flow_embed", self.flow_embed),
            ("linkport_embed", self.linkport_embed),
            ("device_embed", self.device_embed),
            ("pkt_hidden", self.pkt_hidden),
        ] {
            if v == 0 {
                return Err(NnError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Number of packet-bin features fed to the encoder per millisecond
/// (normalized count and bits).
pub const BIN_FEATURES: usize = 2;
/// Scalar flow features fed to the flow encoder (load, packet size, packets).
pub const FLOW_FEATURES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

fn mlp_specs(out: &mut Vec<ParamSpec>, name: &str, in_w: usize, hidden: usize, out_w: usize) {
    // two hidden layers plus a linear output layer
    let widths = [in_w, hidden, hidden, out_w];
    for l in 0..3 {
        out.push(ParamSpec {
            name: format!("{name}.l{l}.w"),
            shape: vec![widths[l + 1], widths[l]],
        });
        out.push(ParamSpec {
            name: format!("{name}.l{l}.b"),
            shape: vec![widths[l + 1]],
        });
    }
}

fn gru_specs(out: &mut Vec<ParamSpec>, name: &str, x_w: usize, h_w: usize) {
    for gate in ["wz", "wr", "wc"] {
        out.push(ParamSpec {
            name: format!("{name}.{gate}"),
            shape: vec![h_w, x_w + h_w],
        });
    }
    for gate in ["bz", "br", "bc"] {
        out.push(ParamSpec {
            name: format!("{name}.{gate}"),
            shape: vec![h_w],
        });
    }
}

/// The full catalog of learnable tensors for a configuration.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let f = cfg.flow_embed;
    let lq = cfg.linkport_embed;
    let d = cfg.device_embed;
    let pk = cfg.pkt_hidden;

    mlp_specs(&mut specs, "enc_flow", FLOW_FEATURES + pk, f, f);
    mlp_specs(&mut specs, "enc_lq_router", 1, lq, lq);
    mlp_specs(&mut specs, "enc_lq_switch", 1, lq, lq);
    mlp_specs(&mut specs, "enc_dev_router", lq, d, d);
    mlp_specs(&mut specs, "enc_dev_switch", lq, d, d);
    // readout hidden width follows the flow embedding, its input width
    mlp_specs(&mut specs, "readout", f, f, 1);
    gru_specs(&mut specs, "pkt_enc.l1", BIN_FEATURES, pk);
    gru_specs(&mut specs, "pkt_enc.l2", pk, pk);
    gru_specs(&mut specs, "rnn_flow", d + lq, f);
    gru_specs(&mut specs, "upd_lq", f, lq);
    gru_specs(&mut specs, "upd_dev", lq, d);
    specs
}

/// Every learnable weight of the encoders, message-passing cells, and
/// readout, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Draw weights from U(-s, s) with s = 1/sqrt(fan_in); biases are zero.
    /// Tensors are initialised in sorted-name order, so the layout is a pure
    /// function of (seed, config).
    pub fn init(seed: u64, cfg: &ModelConfig) -> Result<ModelParams, NnError> {
        cfg.validate()?;
        let mut specs = param_specs(cfg);
        specs.sort_by(|a, b| a.name.cmp(&b.name));
        let mut rng = Rng::new(seed).derive(0x70a7_a35);
        let mut tensors = BTreeMap::new();
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data = if spec.shape.len() == 2 {
                let fan_in = spec.shape[1] as f64;
                let s = (1.0 / fan_in).sqrt();
                (0..n).map(|_| rng.uniform(-s, s)).collect()
            } else {
                vec![0.0; n]
            };
            tensors.insert(spec.name, Tensor::new(spec.shape, data));
        }
        Ok(ModelParams { tensors })
    }

    /// All-zero parameters; useful for fixed-point tests.
    pub fn zeros(cfg: &ModelConfig) -> Result<ModelParams, NnError> {
        cfg.validate()?;
        let tensors = param_specs(cfg)
            .into_iter()
            .map(|s| (s.name, Tensor::zeros(s.shape)))
            .collect();
        Ok(ModelParams { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NnError> {
        self.tensors
            .get(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, NnError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Write the named parameter list: one text header per tensor followed by
    /// its raw little-endian 64-bit payload. Round-trips bit-exactly.
    pub fn write(&self, w: &mut impl Write) -> Result<(), NnError> {
        writeln!(w, "params {}", self.tensors.len())?;
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            writeln!(w, "param {} {} {}", name, t.shape().len(), dims.join(" "))?;
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl BufRead) -> Result<ModelParams, NnError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let count: usize = line
            .trim()
            .strip_prefix("params ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| NnError::Parse(format!("bad params header '{}'", line.trim())))?;
        Self::read_body(r, count)
    }

    /// Read `count` tensors after the `params` header line was consumed.
    pub fn read_body(r: &mut impl BufRead, count: usize) -> Result<ModelParams, NnError> {
        let mut line = String::new();
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            line.clear();
            r.read_line(&mut line)?;
            let mut toks = line.trim().split_whitespace();
            if toks.next() != Some("param") {
                return Err(NnError::Parse(format!("bad param header '{}'", line.trim())));
            }
            let name = toks
                .next()
                .ok_or_else(|| NnError::Parse("param header missing name".into()))?
                .to_string();
            let rank: usize = toks
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| NnError::Parse("param header missing rank".into()))?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(
                    toks.next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| NnError::Parse("param header missing dim".into()))?,
                );
            }
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, Tensor::new(shape, data));
        }
        Ok(ModelParams { tensors })
    }
}
