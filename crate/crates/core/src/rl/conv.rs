//! Batched 3×3 convolution and 2×2 max-pooling as tape ops.
//!
//! Activations are stored as `[batch, channels·height·width]` matrices in
//! channel-major, row-major order so they compose with `Tape::linear`.

use std::sync::Arc;

use crate::autodiff::{CustomOp, NodeId, Tape, Tensor};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape after 2×2 pooling with ceil rounding.
    pub fn pooled(&self) -> Self {
        Self {
            channels: self.channels,
            height: self.height.div_ceil(2),
            width: self.width.div_ceil(2),
        }
    }
}

/// Same-padded 3×3 convolution. Weight layout `[out, in·9]`, bias `[out]`.
struct Conv3x3 {
    input: FeatureShape,
    out_channels: usize,
    batch: usize,
    /// In-bounds taps grouped into row runs: `(out_start, in_start, len, k)`
    /// pairs `out[out_start..+len]` with `in[in_start..+len]` under kernel
    /// entry `k`.
    spans: Vec<(usize, usize, usize, usize)>,
}

impl Conv3x3 {
    fn new(input: FeatureShape, out_channels: usize, batch: usize) -> Self {
        let (h, w) = (input.height as isize, input.width as isize);
        let mut spans = Vec::new();
        for dr in -1..=1isize {
            for dc in -1..=1isize {
                let k = ((dr + 1) * 3 + dc + 1) as usize;
                let (c0, c1) = ((-dc).max(0), (w - dc).min(w));
                if c1 <= c0 {
                    continue;
                }
                for r in (-dr).max(0)..(h - dr).min(h) {
                    spans.push((
                        (r * w + c0) as usize,
                        ((r + dr) * w + c0 + dc) as usize,
                        (c1 - c0) as usize,
                        k,
                    ));
                }
            }
        }
        Self {
            input,
            out_channels,
            batch,
            spans,
        }
    }

    fn forward(&self, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let ci = self.input.channels;
        let hw = self.input.height * self.input.width;
        let co = self.out_channels;
        let mut y = vec![0.0; self.batch * co * hw];
        for b in 0..self.batch {
            let xb = &x[b * ci * hw..(b + 1) * ci * hw];
            let yb = &mut y[b * co * hw..(b + 1) * co * hw];
            for o in 0..co {
                let yo = &mut yb[o * hw..(o + 1) * hw];
                yo.fill(bias[o]);
                for i in 0..ci {
                    let xi = &xb[i * hw..(i + 1) * hw];
                    let wk = &weight[(o * ci + i) * 9..(o * ci + i + 1) * 9];
                    for &(p, q, n, k) in &self.spans {
                        let c = wk[k];
                        for (y, x) in yo[p..p + n].iter_mut().zip(&xi[q..q + n]) {
                            *y += c * x;
                        }
                    }
                }
            }
        }
        y
    }
}

impl CustomOp for Conv3x3 {
    fn name(&self) -> &'static str {
        "conv3x3"
    }

    fn vjp(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f64],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, weight) = (inputs[0].data(), inputs[1].data());
        let ci = self.input.channels;
        let hw = self.input.height * self.input.width;
        let co = self.out_channels;
        let mut dx = needs_grad[0].then(|| vec![0.0; x.len()]);
        let mut dw = needs_grad[1].then(|| vec![0.0; weight.len()]);
        let mut db = needs_grad[2].then(|| vec![0.0; co]);
        for b in 0..self.batch {
            let xb = &x[b * ci * hw..(b + 1) * ci * hw];
            let gb = &grad_out[b * co * hw..(b + 1) * co * hw];
            for o in 0..co {
                let go = &gb[o * hw..(o + 1) * hw];
                if let Some(db) = db.as_mut() {
                    db[o] += go.iter().sum::<f64>();
                }
                for i in 0..ci {
                    let wi = (o * ci + i) * 9;
                    if let Some(dw) = dw.as_mut() {
                        let xi = &xb[i * hw..(i + 1) * hw];
                        let dwk = &mut dw[wi..wi + 9];
                        for &(p, q, n, k) in &self.spans {
                            dwk[k] += go[p..p + n]
                                .iter()
                                .zip(&xi[q..q + n])
                                .map(|(g, x)| g * x)
                                .sum::<f64>();
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let wk = &weight[wi..wi + 9];
                        let dxi = &mut dx[(b * ci + i) * hw..(b * ci + i + 1) * hw];
                        for &(p, q, n, k) in &self.spans {
                            let c = wk[k];
                            for (d, g) in dxi[q..q + n].iter_mut().zip(&go[p..p + n]) {
                                *d += c * g;
                            }
                        }
                    }
                }
            }
        }
        vec![dx, dw, db]
    }
}

/// 2×2 max-pooling, stride 2, ceil mode (edge windows are truncated).
struct MaxPool2 {
    /// Flat input index of the winner for every output element.
    argmax: Vec<usize>,
    input_len: usize,
}

impl CustomOp for MaxPool2 {
    fn name(&self) -> &'static str {
        "maxpool2"
    }

    fn vjp(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f64],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        if !needs_grad[0] {
            return vec![None];
        }
        let mut dx = vec![0.0; self.input_len];
        for (g, &j) in grad_out.iter().zip(&self.argmax) {
            dx[j] += g;
        }
        vec![Some(dx)]
    }
}

/// `x`: `[batch, shape.len()]`; `weight`: `[out, in·9]`; `bias`: `[out]`.
pub fn conv3x3(
    tape: &mut Tape,
    x: NodeId,
    shape: FeatureShape,
    weight: NodeId,
    bias: NodeId,
) -> Result<NodeId> {
    let (vx, vw, vb) = (tape.value(x), tape.value(weight), tape.value(bias));
    if vx.rank() != 2 || vx.cols() != shape.len() {
        return Err(shape_err(
            "conv3x3",
            format!("input {:?} for {shape:?}", vx.shape()),
        ));
    }
    if vw.rank() != 2 || vw.cols() != shape.channels * 9 || vb.len() != vw.rows() {
        return Err(shape_err(
            "conv3x3",
            format!("weight {:?}, bias {:?}", vw.shape(), vb.shape()),
        ));
    }
    let op = Conv3x3::new(shape, vw.rows(), vx.rows());
    let y = op.forward(vx.data(), vw.data(), vb.data());
    let out = Tensor::matrix(op.batch, op.out_channels * shape.height * shape.width, y)?;
    Ok(tape.custom(Arc::new(op), &[x, weight, bias], out))
}

pub fn max_pool2(tape: &mut Tape, x: NodeId, shape: FeatureShape) -> Result<NodeId> {
    let vx = tape.value(x);
    if vx.rank() != 2 || vx.cols() != shape.len() {
        return Err(shape_err(
            "max_pool2",
            format!("input {:?} for {shape:?}", vx.shape()),
        ));
    }
    let batch = vx.rows();
    let out_shape = shape.pooled();
    let (h, w) = (shape.height, shape.width);
    let (oh, ow) = (out_shape.height, out_shape.width);
    let data = vx.data();
    let mut y = Vec::with_capacity(batch * out_shape.len());
    let mut argmax = Vec::with_capacity(batch * out_shape.len());
    for b in 0..batch {
        for ch in 0..shape.channels {
            let base = (b * shape.channels + ch) * h * w;
            for r in 0..oh {
                for c in 0..ow {
                    let mut best = base + 2 * r * w + 2 * c;
                    for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                        let (rr, cc) = (2 * r + dr, 2 * c + dc);
                        if rr < h && cc < w {
                            let j = base + rr * w + cc;
                            if data[j] > data[best] {
                                best = j;
                            }
                        }
                    }
                    y.push(data[best]);
                    argmax.push(best);
                }
            }
        }
    }
    let op = MaxPool2 {
        argmax,
        input_len: data.len(),
    };
    let out = Tensor::matrix(batch, out_shape.len(), y)?;
    Ok(tape.custom(Arc::new(op), &[x], out))
}
