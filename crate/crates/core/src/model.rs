//! The delay model: initial encoding of flows, link-ports, and devices,
//! iterative three-stage message passing with a convergence stop, and a
//! readout that splits the prediction into queuing, transmission, and
//! propagation delay.
//!
//! The whole forward pass is recorded on a [`Tape`], so a scalar loss built
//! on top of the predictions backpropagates through every executed message
//! passing iteration and the packet encoders.
//!
//! Aggregations (port states into devices, partial flow states into
//! link-ports) use value-ordered summation, so predictions are bit-identical
//! under any relabeling or reordering of scenario entities.

use crate::nn::{
    gru_cell, gru_sequence, mlp_forward, stacked_gru_encode, BoundGru, BoundMlp, BoundParams,
    ModelConfig, ModelParams, NnError, Tape, VarId,
};

use crate::scenario::{DeviceKind, NetworkScenario};
use crate::trace::{apply_normalization, Feature, NormStats};

/// Guard added to the denominator of the relative-difference reduction.
pub const CONVERGENCE_EPS: f64 = 1e-9;

/// Message passing loop controls.
#[derive(Debug, Clone, PartialEq)]
pub struct MessagePassingConfig {
    /// Maximum number of iterations.
    pub t_max: usize,
    /// Per-flow mean absolute relative difference below which a flow counts
    /// as converged.
    pub rel_threshold: f64,
    /// Fraction of converged flows required to stop.
    pub frac_threshold: f64,
}

impl Default for MessagePassingConfig {
    fn default() -> Self {
        MessagePassingConfig {
            t_max: 40,
            rel_threshold: 0.05,
            frac_threshold: 0.95,
        }
    }
}

/// Tape handles for one forward pass. Per-iteration hidden states for every
/// flow, link-port, and device, plus the per-hop partial flow states.
#[derive(Debug, Clone)]
pub struct EmbeddingState {
    pub h_flow: Vec<VarId>,
    pub h_linkport: Vec<VarId>,
    pub h_device: Vec<VarId>,
    /// `m_tilde[flow][path position]`; empty until the first iteration.
    pub m_tilde: Vec<Vec<VarId>>,
    pub iteration: usize,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// Predicted per-flow mean delay in seconds, in scenario flow order.
    pub predictions: Vec<f64>,
    /// The prediction scalars on the tape, for building losses.
    pub prediction_vars: Vec<VarId>,
    /// Message passing iterations executed.
    pub iterations: usize,
    /// The parameter binding of this pass; maps gradients back to names.
    pub bound: BoundParams,
}

/// The model: parameters plus the normalization fitted on the training split.
pub struct DelayModel<'a> {
    pub config: &'a ModelConfig,
    pub params: &'a ModelParams,
    pub stats: &'a NormStats,
}

struct Handles {
    enc_flow: BoundMlp,
    enc_lq_router: BoundMlp,
    enc_lq_switch: BoundMlp,
    enc_dev_router: BoundMlp,
    enc_dev_switch: BoundMlp,
    readout: BoundMlp,
    pkt_l1: BoundGru,
    pkt_l2: BoundGru,
    rnn_flow: BoundGru,
    upd_lq: BoundGru,
    upd_dev: BoundGru,
}

fn bind_handles(bound: &BoundParams) -> Result<Handles, NnError> {
    Ok(Handles {
        enc_flow: bound.mlp("enc_flow")?,
        enc_lq_router: bound.mlp("enc_lq_router")?,
        enc_lq_switch: bound.mlp("enc_lq_switch")?,
        enc_dev_router: bound.mlp("enc_dev_router")?,
        enc_dev_switch: bound.mlp("enc_dev_switch")?,
        readout: bound.mlp("readout")?,
        pkt_l1: bound.gru("pkt_enc.l1")?,
        pkt_l2: bound.gru("pkt_enc.l2")?,
        rnn_flow: bound.gru("rnn_flow")?,
        upd_lq: bound.gru("upd_lq")?,
        upd_dev: bound.gru("upd_dev")?,
    })
}

/// Sum of `packet_size/bandwidth + propagation` along a flow's path: the
/// physical floor under any prediction.
pub fn transmission_propagation_delay(scenario: &NetworkScenario, flow_idx: usize) -> f64 {
    let flow = &scenario.flows()[flow_idx];
    let mut total = 0.0;
    for port in &flow.path {
        let lp = scenario.linkport(port).expect("validated scenario");
        total += flow.packet_size_bits / lp.bandwidth_bps + lp.propagation_delay_s;
    }
    total
}

/// Per-flow mean absolute relative difference between two partial-state
/// snapshots, then a converged-fraction vote. Stops strictly below
/// `rel_threshold`, so a zero threshold never converges.
pub fn has_converged(
    m_t: &[Vec<Vec<f64>>],
    m_prev: &[Vec<Vec<f64>>],
    rel_threshold: f64,
    frac_threshold: f64,
) -> Result<bool, NnError> {
    if m_t.len() != m_prev.len() {
        return Err(NnError::ShapeMismatch {
            context: "convergence flow count".into(),
            expected: m_prev.len(),
            got: m_t.len(),
        });
    }
    if m_t.is_empty() {
        return Ok(true);
    }
    let mut converged = 0usize;
    for (cur, prev) in m_t.iter().zip(m_prev) {
        if cur.len() != prev.len() {
            return Err(NnError::ShapeMismatch {
                context: "convergence path length".into(),
                expected: prev.len(),
                got: cur.len(),
            });
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for (cv, pv) in cur.iter().zip(prev) {
            if cv.len() != pv.len() {
                return Err(NnError::ShapeMismatch {
                    context: "convergence state width".into(),
                    expected: pv.len(),
                    got: cv.len(),
                });
            }
            for (&c, &p) in cv.iter().zip(pv) {
                sum += (c - p).abs() / (p.abs() + CONVERGENCE_EPS);
                count += 1;
            }
        }
        if sum / (count as f64) < rel_threshold {
            converged += 1;
        }
    }
    Ok(converged as f64 / m_t.len() as f64 >= frac_threshold)
}

/// Drive `step` until the partial flow states stabilise or `t_max` is hit.
/// `step(t)` runs iteration `t` (1-based) and returns the new snapshot; the
/// convergence check starts once two snapshots exist. Returns the number of
/// iterations executed.
pub fn iterate_until_converged(
    t_max: usize,
    rel_threshold: f64,
    frac_threshold: f64,
    mut step: impl FnMut(usize) -> Result<Vec<Vec<Vec<f64>>>, NnError>,
) -> Result<usize, NnError> {
    let mut prev: Option<Vec<Vec<Vec<f64>>>> = None;
    let mut t = 0;
    while t < t_max {
        t += 1;
        let cur = step(t)?;
        if let Some(p) = &prev {
            if has_converged(&cur, p, rel_threshold, frac_threshold)? {
                return Ok(t);
            }
        }
        prev = Some(cur);
    }
    Ok(t)
}

impl DelayModel<'_> {
    fn norm(&self, value: f64, feature: Feature) -> f64 {
        apply_normalization(value, feature, self.stats)
    }

    /// Initial flow embeddings: the 1000 normalized bins through the stacked
    /// GRU encoder, concatenated with the normalized scalar features, through
    /// the flow MLP.
    fn encode_flows_with(
        &self,
        h: &Handles,
        scenario: &NetworkScenario,
        tape: &mut Tape,
    ) -> Result<Vec<VarId>, NnError> {
        let mut out = Vec::with_capacity(scenario.flows().len());
        for flow in scenario.flows() {
            let bin_vars: Vec<VarId> = flow
                .packet_bins
                .iter()
                .map(|b| {
                    tape.leaf(&[
                        self.norm(b.packet_count as f64, Feature::BinCount),
                        self.norm(b.bits, Feature::BinBits),
                    ])
                })
                .collect();
            let h_pkts = stacked_gru_encode(tape, &h.pkt_l1, &h.pkt_l2, &bin_vars)?;
            let feats = tape.leaf(&[
                self.norm(flow.avg_load_bps, Feature::FlowAvgLoad),
                self.norm(flow.packet_size_bits, Feature::FlowPacketSize),
                self.norm(flow.num_packets as f64, Feature::FlowNumPackets),
            ]);
            let x = tape.concat(feats, h_pkts);
            out.push(mlp_forward(tape, &h.enc_flow, x)?);
        }
        Ok(out)
    }

    /// Initial link-port embeddings: normalized bandwidth through the encoder
    /// selected by the owning device's kind.
    fn encode_linkports_with(
        &self,
        h: &Handles,
        scenario: &NetworkScenario,
        tape: &mut Tape,
    ) -> Result<Vec<VarId>, NnError> {
        let mut out = Vec::with_capacity(scenario.linkports().len());
        for lp in scenario.linkports() {
            let kind = scenario
                .device(&lp.device_id)
                .expect("validated scenario")
                .kind;
            let x = tape.leaf(&[self.norm(lp.bandwidth_bps, Feature::LinkBandwidth)]);
            let enc = match kind {
                DeviceKind::Router => &h.enc_lq_router,
                DeviceKind::Switch => &h.enc_lq_switch,
            };
            out.push(mlp_forward(tape, enc, x)?);
        }
        Ok(out)
    }

    /// Initial device embeddings: sum of the device's port embeddings through
    /// the encoder for its kind.
    fn encode_devices_with(
        &self,
        h: &Handles,
        scenario: &NetworkScenario,
        tape: &mut Tape,
        h_linkport: &[VarId],
    ) -> Result<Vec<VarId>, NnError> {
        let mut out = Vec::with_capacity(scenario.devices().len());
        for dev in scenario.devices() {
            let ports: Vec<VarId> = dev
                .port_ids
                .iter()
                .map(|p| h_linkport[scenario.port_storage_index(p).expect("validated")])
                .collect();
            let agg = tape.sum_vectors(&ports, self.config.linkport_embed);
            let enc = match dev.kind {
                DeviceKind::Router => &h.enc_dev_router,
                DeviceKind::Switch => &h.enc_dev_switch,
            };
            out.push(mlp_forward(tape, enc, agg)?);
        }
        Ok(out)
    }

    /// One message passing iteration:
    /// (a) each flow's RNN walks its path over the previous device and
    ///     link-port states, recording per-hop partial states;
    /// (b) each link-port aggregates the partial states of crossing flows and
    ///     updates through its GRU;
    /// (c) each device aggregates its ports' fresh states and updates.
    fn message_passing_iteration_with(
        &self,
        h: &Handles,
        scenario: &NetworkScenario,
        tape: &mut Tape,
        state: &EmbeddingState,
    ) -> Result<EmbeddingState, NnError> {
        let dev_of_port: Vec<usize> = scenario
            .linkports()
            .iter()
            .map(|lp| scenario.device_storage_index(&lp.device_id).expect("validated"))
            .collect();

        let mut m_tilde = Vec::with_capacity(scenario.flows().len());
        let mut h_flow = Vec::with_capacity(scenario.flows().len());
        for (fi, flow) in scenario.flows().iter().enumerate() {
            let inputs: Vec<VarId> = flow
                .path
                .iter()
                .map(|p| {
                    let pi = scenario.port_storage_index(p).expect("validated");
                    tape.concat(state.h_device[dev_of_port[pi]], state.h_linkport[pi])
                })
                .collect();
            let (ms, h_final) = gru_sequence(tape, &h.rnn_flow, &inputs, state.h_flow[fi])?;
            m_tilde.push(ms);
            h_flow.push(h_final);
        }

        let mut h_linkport = Vec::with_capacity(scenario.linkports().len());
        for pi in 0..scenario.linkports().len() {
            let msgs: Vec<VarId> = scenario
                .crossings_of(pi)
                .iter()
                .map(|&(fi, pos)| m_tilde[fi][pos])
                .collect();
            let agg = tape.sum_vectors(&msgs, self.config.flow_embed);
            h_linkport.push(gru_cell(tape, &h.upd_lq, agg, state.h_linkport[pi])?);
        }

        let mut h_device = Vec::with_capacity(scenario.devices().len());
        for (di, dev) in scenario.devices().iter().enumerate() {
            let ports: Vec<VarId> = dev
                .port_ids
                .iter()
                .map(|p| h_linkport[scenario.port_storage_index(p).expect("validated")])
                .collect();
            let agg = tape.sum_vectors(&ports, self.config.linkport_embed);
            h_device.push(gru_cell(tape, &h.upd_dev, agg, state.h_device[di])?);
        }

        Ok(EmbeddingState {
            h_flow,
            h_linkport,
            h_device,
            m_tilde,
            iteration: state.iteration + 1,
        })
    }

    /// Readout: queuing delay as the sum of softplus-mapped per-hop readouts,
    /// plus raw transmission and propagation delay.
    fn readout_with(
        &self,
        h: &Handles,
        scenario: &NetworkScenario,
        tape: &mut Tape,
        m_tilde: &[Vec<VarId>],
    ) -> Result<Vec<VarId>, NnError> {
        let mut out = Vec::with_capacity(scenario.flows().len());
        for fi in 0..scenario.flows().len() {
            let mut hop_delays = Vec::with_capacity(m_tilde[fi].len());
            for &m in &m_tilde[fi] {
                let r = mlp_forward(tape, &h.readout, m)?;
                hop_delays.push(tape.softplus_op(r));
            }
            let d_queue = tape.sum_vectors(&hop_delays, 1);
            out.push(tape.add_const(d_queue, transmission_propagation_delay(scenario, fi)));
        }
        Ok(out)
    }

    /// Full forward pass. Records every executed iteration on the tape, so
    /// losses built on the returned prediction vars differentiate end to end.
    pub fn forward(
        &self,
        scenario: &NetworkScenario,
        tape: &mut Tape,
        mp: &MessagePassingConfig,
    ) -> Result<ForwardOutput, NnError> {
        Ok(self.forward_with_state(scenario, tape, mp)?.0)
    }

    /// As [`forward`](Self::forward), also returning the final embeddings.
    pub fn forward_with_state(
        &self,
        scenario: &NetworkScenario,
        tape: &mut Tape,
        mp: &MessagePassingConfig,
    ) -> Result<(ForwardOutput, EmbeddingState), NnError> {
        self.config.validate()?;
        if mp.t_max == 0 {
            return Err(NnError::InvalidConfig("t_max must be at least 1".into()));
        }
        let bound = self.params.bind(tape);
        let handles = bind_handles(&bound)?;

        let h_flow = self.encode_flows_with(&handles, scenario, tape)?;
        let h_linkport = self.encode_linkports_with(&handles, scenario, tape)?;
        let h_device = self.encode_devices_with(&handles, scenario, tape, &h_linkport)?;
        let mut state = EmbeddingState {
            h_flow,
            h_linkport,
            h_device,
            m_tilde: Vec::new(),
            iteration: 0,
        };

        let iterations = iterate_until_converged(
            mp.t_max,
            mp.rel_threshold,
            mp.frac_threshold,
            |_t| {
                state = self.message_passing_iteration_with(&handles, scenario, tape, &state)?;
                Ok(state
                    .m_tilde
                    .iter()
                    .map(|per_pos| per_pos.iter().map(|&m| tape.value(m).to_vec()).collect())
                    .collect())
            },
        )?;

        let prediction_vars = self.readout_with(&handles, scenario, tape, &state.m_tilde)?;
        let predictions = prediction_vars
            .iter()
            .map(|&v| tape.value(v)[0])
            .collect();
        Ok((
            ForwardOutput {
                predictions,
                prediction_vars,
                iterations,
                bound,
            },
            state,
        ))
    }

    /// Initial flow embeddings (phase 1 of the forward pass).
    pub fn encode_flows(
        &self,
        scenario: &NetworkScenario,
        tape: &mut Tape,
    ) -> Result<Vec<VarId>, NnError> {
        let bound = self.params.bind(tape);
        let handles = bind_handles(&bound)?;
        self.encode_flows_with(&handles, scenario, tape)
    }

    /// Initial link-port embeddings.
    pub fn encode_linkports(
        &self,
        scenario: &NetworkScenario,
        tape: &mut Tape,
    ) -> Result<Vec<VarId>, NnError> {
        let bound = self.params.bind(tape);
        let handles = bind_handles(&bound)?;
        self.encode_linkports_with(&handles, scenario, tape)
    }

    /// Initial device embeddings from already-encoded link-ports.
    pub fn encode_devices(
        &self,
        scenario: &NetworkScenario,
        tape: &mut Tape,
        h_linkport: &[VarId],
    ) -> Result<Vec<VarId>, NnError> {
        let bound = self.params.bind(tape);
        let handles = bind_handles(&bound)?;
        self.encode_devices_with(&handles, scenario, tape, h_linkport)
    }

    /// One message passing iteration from an explicit state.
    pub fn message_passing_iteration(
        &self,
        scenario: &NetworkScenario,
        tape: &mut Tape,
        state: &EmbeddingState,
    ) -> Result<EmbeddingState, NnError> {
        let bound = self.params.bind(tape);
        let handles = bind_handles(&bound)?;
        self.message_passing_iteration_with(&handles, scenario, tape, state)
    }

    /// Readout over final partial flow states; returns prediction scalars.
    pub fn readout(
        &self,
        scenario: &NetworkScenario,
        tape: &mut Tape,
        m_tilde: &[Vec<VarId>],
    ) -> Result<Vec<VarId>, NnError> {
        let bound = self.params.bind(tape);
        let handles = bind_handles(&bound)?;
        self.readout_with(&handles, scenario, tape, m_tilde)
    }
}
