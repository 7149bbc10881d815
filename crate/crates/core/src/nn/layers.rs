//! Differentiable kernels composed on the tape: MLP, GRU cell, GRU sequence,
//! and the two-layer packet encoder.
//!
//! A forward pass binds every parameter tensor onto the tape exactly once via
//! [`ModelParams::bind`]; the returned [`BoundParams`] hands out weight
//! handles, and after backward it maps the gradient arena back to named
//! tensors.

use std::collections::BTreeMap;

use crate::nn::params::ModelParams;
use crate::nn::tape::{Gradients, Tape, VarId};
use crate::nn::tensor::Tensor;
use crate::nn::NnError;

/// Every parameter tensor bound as a tape leaf, keyed by name.
#[derive(Debug)]
pub struct BoundParams {
    entries: BTreeMap<String, (VarId, Vec<usize>)>,
}

impl ModelParams {
    /// Bind all tensors as leaves, in sorted-name order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut entries = BTreeMap::new();
        for (name, t) in self.iter() {
            let var = tape.leaf(t.data());
            entries.insert(name.clone(), (var, t.shape().to_vec()));
        }
        BoundParams { entries }
    }
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<VarId, NnError> {
        self.entries
            .get(name)
            .map(|&(v, _)| v)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    fn shape(&self, name: &str) -> Result<&[usize], NnError> {
        self.entries
            .get(name)
            .map(|(_, s)| s.as_slice())
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    /// Handle for the MLP stack `{name}.l0 .. l{k}`.
    pub fn mlp(&self, name: &str) -> Result<BoundMlp, NnError> {
        let mut layers = Vec::new();
        for l in 0.. {
            let wname = format!("{name}.l{l}.w");
            if !self.entries.contains_key(&wname) {
                break;
            }
            let shape = self.shape(&wname)?.to_vec();
            let w = self.var(&wname)?;
            let b = self.var(&format!("{name}.l{l}.b"))?;
            layers.push((w, b, shape[1], shape[0]));
        }
        if layers.is_empty() {
            return Err(NnError::UnknownParam(format!("{name}.l0.w")));
        }
        Ok(BoundMlp { layers })
    }

    /// Handle for the GRU cell `{name}.{wz,wr,wc,bz,br,bc}`.
    pub fn gru(&self, name: &str) -> Result<BoundGru, NnError> {
        let shape = self.shape(&format!("{name}.wz"))?;
        let h_width = shape[0];
        let x_width = shape[1] - h_width;
        Ok(BoundGru {
            wz: self.var(&format!("{name}.wz"))?,
            wr: self.var(&format!("{name}.wr"))?,
            wc: self.var(&format!("{name}.wc"))?,
            bz: self.var(&format!("{name}.bz"))?,
            br: self.var(&format!("{name}.br"))?,
            bc: self.var(&format!("{name}.bc"))?,
            x_width,
            h_width,
        })
    }

    /// Gather the gradient of every bound tensor into a named map.
    pub fn named_gradients(&self, tape: &Tape, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(name, (var, shape))| {
                let g = tape.grad_of(grads, *var).to_vec();
                (name.clone(), Tensor::new(shape.clone(), g))
            })
            .collect()
    }
}

/// An MLP's weights bound onto a tape: (weight, bias) per affine layer.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    layers: Vec<(VarId, VarId, usize, usize)>, // (w, b, in_width, out_width)
}

impl BoundMlp {
    pub fn in_width(&self) -> usize {
        self.layers[0].2
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().unwrap().3
    }
}

/// A GRU cell's weights bound onto a tape.
#[derive(Debug, Clone)]
pub struct BoundGru {
    wz: VarId,
    wr: VarId,
    wc: VarId,
    bz: VarId,
    br: VarId,
    bc: VarId,
    pub x_width: usize,
    pub h_width: usize,
}

/// Affine layers with tanh between them; the final layer is linear.
pub fn mlp_forward(tape: &mut Tape, mlp: &BoundMlp, x: VarId) -> Result<VarId, NnError> {
    if tape.len(x) != mlp.in_width() {
        return Err(NnError::ShapeMismatch {
            context: "mlp input".into(),
            expected: mlp.in_width(),
            got: tape.len(x),
        });
    }
    let last = mlp.layers.len() - 1;
    let mut h = x;
    for (l, &(w, b, _, out_w)) in mlp.layers.iter().enumerate() {
        let a = tape.matvec(w, h, out_w);
        h = tape.add(a, b);
        if l != last {
            h = tape.tanh_op(h);
        }
    }
    Ok(h)
}

/// Standard GRU cell:
///   z = sigmoid(Wz [x,h] + bz)
///   r = sigmoid(Wr [x,h] + br)
///   c = tanh(Wc [x, r*h] + bc)
///   h' = (1-z)*h + z*c
pub fn gru_cell(tape: &mut Tape, gru: &BoundGru, x: VarId, h: VarId) -> Result<VarId, NnError> {
    if tape.len(x) != gru.x_width {
        return Err(NnError::ShapeMismatch {
            context: "gru input".into(),
            expected: gru.x_width,
            got: tape.len(x),
        });
    }
    if tape.len(h) != gru.h_width {
        return Err(NnError::ShapeMismatch {
            context: "gru state".into(),
            expected: gru.h_width,
            got: tape.len(h),
        });
    }
    let hw = gru.h_width;
    let xh = tape.concat(x, h);

    let za = tape.matvec(gru.wz, xh, hw);
    let zb = tape.add(za, gru.bz);
    let z = tape.sigmoid_op(zb);

    let ra = tape.matvec(gru.wr, xh, hw);
    let rb = tape.add(ra, gru.br);
    let r = tape.sigmoid_op(rb);

    let rh = tape.mul(r, h);
    let xrh = tape.concat(x, rh);
    let ca = tape.matvec(gru.wc, xrh, hw);
    let cb = tape.add(ca, gru.bc);
    let c = tape.tanh_op(cb);

    let one_minus_z = tape.one_minus(z);
    let keep = tape.mul(one_minus_z, h);
    let take = tape.mul(z, c);
    Ok(tape.add(keep, take))
}

/// Left-to-right GRU over a sequence; returns the state after each input and
/// the final state.
pub fn gru_sequence(
    tape: &mut Tape,
    gru: &BoundGru,
    xs: &[VarId],
    h0: VarId,
) -> Result<(Vec<VarId>, VarId), NnError> {
    if xs.is_empty() {
        return Err(NnError::EmptySequence);
    }
    let mut h = h0;
    let mut ys = Vec::with_capacity(xs.len());
    for &x in xs {
        h = gru_cell(tape, gru, x, h)?;
        ys.push(h);
    }
    Ok((ys, h))
}

/// Two-layer GRU encoder: layer 1's output sequence feeds layer 2; both start
/// from zero state; returns layer 2's final state.
pub fn stacked_gru_encode(
    tape: &mut Tape,
    layer1: &BoundGru,
    layer2: &BoundGru,
    xs: &[VarId],
) -> Result<VarId, NnError> {
    if xs.is_empty() {
        return Err(NnError::EmptySequence);
    }
    let h0_1 = tape.zeros(layer1.h_width);
    let (ys, _) = gru_sequence(tape, layer1, xs, h0_1)?;
    let h0_2 = tape.zeros(layer2.h_width);
    let (_, h_final) = gru_sequence(tape, layer2, &ys, h0_2)?;
    Ok(h_final)
}
