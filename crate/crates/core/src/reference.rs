//! Direct-loop layer implementations over B, C, H, W tensors.
//!
//! Nothing here touches the GCONV machinery; these are the oracles the
//! lowered chains are checked against.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::gconv::DimName;
use crate::lowering::{topo_layers, LayerKind, LayerSpec, Mode, NetworkIR};
use crate::tensor::{bchw, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RefError {
    #[error("layer `{0}`: reference has no {1}")]
    Unsupported(String, String),
    #[error("layer `{layer}`: {msg}")]
    Shape { layer: String, msg: String },
    #[error("unbound tensor `{0}`")]
    Unbound(String),
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
}

fn dims(t: &Tensor) -> Dims {
    let e = |d| t.shape.get(&d).copied().unwrap_or(1) as usize;
    Dims {
        b: e(DimName::B),
        c: e(DimName::C),
        h: e(DimName::H),
        w: e(DimName::W),
    }
}

fn at(t: &Tensor, d: Dims, b: usize, c: usize, y: usize, x: usize) -> f64 {
    t.data[((b * d.c + c) * d.h + y) * d.w + x]
}

fn new4(b: usize, c: usize, h: usize, w: usize) -> (Tensor, Dims) {
    (
        Tensor::zeros(bchw(b as u64, c as u64, h as u64, w as u64)),
        Dims { b, c, h, w },
    )
}

fn set(t: &mut Tensor, d: Dims, b: usize, c: usize, y: usize, x: usize, v: f64) {
    t.data[((b * d.c + c) * d.h + y) * d.w + x] = v;
}

/// Grouped 2-D convolution; `weight` is laid out `[noc][nic / group][ky][kx]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    input: &Tensor,
    weight: &[f64],
    noc: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    pad: usize,
    group: usize,
) -> Tensor {
    let d = dims(input);
    let cig = d.c / group;
    let cog = noc / group;
    let noy = (d.h + 2 * pad - ky) / stride + 1;
    let nox = (d.w + 2 * pad - kx) / stride + 1;
    let (mut out, od) = new4(d.b, noc, noy, nox);
    for b in 0..d.b {
        for oc in 0..noc {
            let grp = oc / cog;
            for oy in 0..noy {
                for ox in 0..nox {
                    let mut acc = 0.0;
                    for ic in 0..cig {
                        for i in 0..ky {
                            for j in 0..kx {
                                let y = (oy * stride + i) as isize - pad as isize;
                                let x = (ox * stride + j) as isize - pad as isize;
                                if y < 0 || x < 0 || y >= d.h as isize || x >= d.w as isize {
                                    continue;
                                }
                                let wv = weight[((oc * cig + ic) * ky + i) * kx + j];
                                acc += at(input, d, b, grp * cig + ic, y as usize, x as usize) * wv;
                            }
                        }
                    }
                    set(&mut out, od, b, oc, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// `out[b][o] = sum_i in[b][i] * w[o][i]` with the input flattened per batch.
pub fn fully_connected(input: &Tensor, weight: &[f64], noc: usize) -> Tensor {
    let d = dims(input);
    let per = d.c * d.h * d.w;
    let (mut out, od) = new4(d.b, noc, 1, 1);
    for b in 0..d.b {
        for o in 0..noc {
            let row = &weight[o * per..(o + 1) * per];
            let x = &input.data[b * per..(b + 1) * per];
            let v: f64 = row.iter().zip(x).map(|(w, x)| w * x).sum();
            set(&mut out, od, b, o, 0, 0, v);
        }
    }
    out
}

pub fn pool2d(input: &Tensor, window: usize, stride: usize, pad: usize, max: bool) -> Tensor {
    let d = dims(input);
    let noy = (d.h + 2 * pad - window) / stride + 1;
    let nox = (d.w + 2 * pad - window) / stride + 1;
    let (mut out, od) = new4(d.b, d.c, noy, nox);
    for b in 0..d.b {
        for c in 0..d.c {
            for oy in 0..noy {
                for ox in 0..nox {
                    let mut best = f64::NEG_INFINITY;
                    let mut sum = 0.0;
                    for i in 0..window {
                        for j in 0..window {
                            let y = (oy * stride + i) as isize - pad as isize;
                            let x = (ox * stride + j) as isize - pad as isize;
                            if y < 0 || x < 0 || y >= d.h as isize || x >= d.w as isize {
                                continue;
                            }
                            let v = at(input, d, b, c, y as usize, x as usize);
                            best = best.max(v);
                            sum += v;
                        }
                    }
                    let v = if max {
                        best
                    } else {
                        sum / (window * window) as f64
                    };
                    set(&mut out, od, b, c, oy, ox, v);
                }
            }
        }
    }
    out
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Cross-channel normalization: `x / (k + alpha / n * sum(x^2))^beta` over a
/// window of `n` channels centred on the output channel.
pub fn lrn(input: &Tensor, n: usize, k: f64, alpha: f64, beta: f64) -> Tensor {
    let d = dims(input);
    let half = (n / 2) as isize;
    let (mut out, od) = new4(d.b, d.c, d.h, d.w);
    for b in 0..d.b {
        for c in 0..d.c {
            for y in 0..d.h {
                for x in 0..d.w {
                    let mut ss = 0.0;
                    for cc in (c as isize - half)..=(c as isize + half) {
                        if cc >= 0 && (cc as usize) < d.c {
                            let v = at(input, d, b, cc as usize, y, x);
                            ss += v * v;
                        }
                    }
                    let den = (k + alpha / n as f64 * ss).powf(beta);
                    set(&mut out, od, b, c, y, x, at(input, d, b, c, y, x) / den);
                }
            }
        }
    }
    out
}

/// Batch statistics per (c, y, x): mean and biased variance over B.
fn batch_stats(input: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let d = dims(input);
    let per = d.c * d.h * d.w;
    let mut mean = vec![0.0; per];
    let mut var = vec![0.0; per];
    for i in 0..per {
        let xs = (0..d.b).map(|b| input.data[b * per + i]);
        let m = xs.clone().sum::<f64>() / d.b as f64;
        mean[i] = m;
        var[i] = xs.map(|v| (v - m) * (v - m)).sum::<f64>() / d.b as f64;
    }
    (mean, var)
}

pub fn batch_norm_forward(input: &Tensor, eps: f64) -> Tensor {
    let d = dims(input);
    let per = d.c * d.h * d.w;
    let (mean, var) = batch_stats(input);
    let data = input
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - mean[i % per]) / (var[i % per] + eps).sqrt())
        .collect();
    Tensor {
        shape: input.shape.clone(),
        data,
    }
}

/// Input gradient of batch normalization given the forward input and the
/// output gradient.
pub fn batch_norm_backward(input: &Tensor, grad_out: &Tensor, eps: f64) -> Tensor {
    let d = dims(input);
    let per = d.c * d.h * d.w;
    let nb = d.b as f64;
    let out = batch_norm_forward(input, eps);
    let (_, var) = batch_stats(input);
    let mut gi = vec![0.0; input.data.len()];
    for i in 0..per {
        let idx = |b: usize| b * per + i;
        let mean_g: f64 = (0..d.b).map(|b| grad_out.data[idx(b)]).sum::<f64>() / nb;
        let mean_og: f64 = (0..d.b)
            .map(|b| grad_out.data[idx(b)] * out.data[idx(b)])
            .sum::<f64>()
            / nb;
        let inv = 1.0 / (var[i] + eps).sqrt();
        for b in 0..d.b {
            gi[idx(b)] = (grad_out.data[idx(b)] - mean_g - out.data[idx(b)] * mean_og) * inv;
        }
    }
    Tensor {
        shape: input.shape.clone(),
        data: gi,
    }
}

/// Per-channel multiply.
pub fn scale(input: &Tensor, factors: &[f64]) -> Tensor {
    let d = dims(input);
    let hw = d.h * d.w;
    Tensor {
        shape: input.shape.clone(),
        data: input
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v * factors[(i / hw) % d.c])
            .collect(),
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    }
}

pub fn dropout_inference(input: &Tensor, keep_prob: f64) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input.data.iter().map(|v| v * keep_prob).collect(),
    }
}

/// Concatenation of B, C, H, W tensors along `axis`.
pub fn concat(parts: &[&Tensor], axis: DimName) -> Tensor {
    let mut shape = parts[0].shape.clone();
    *shape.get_mut(&axis).unwrap() = parts.iter().map(|p| p.shape[&axis]).sum();
    let od = {
        let e = |d| shape[&d] as usize;
        Dims {
            b: e(DimName::B),
            c: e(DimName::C),
            h: e(DimName::H),
            w: e(DimName::W),
        }
    };
    let mut out = Tensor::zeros(shape);
    let mut offset = 0;
    for p in parts {
        let d = dims(p);
        for b in 0..d.b {
            for c in 0..d.c {
                for y in 0..d.h {
                    for x in 0..d.w {
                        let (mut ob, mut oc, mut oy, mut ox) = (b, c, y, x);
                        match axis {
                            DimName::B => ob += offset,
                            DimName::C => oc += offset,
                            DimName::H => oy += offset,
                            _ => ox += offset,
                        }
                        set(&mut out, od, ob, oc, oy, ox, at(p, d, b, c, y, x));
                    }
                }
            }
        }
        offset += p.shape[&axis] as usize;
    }
    out
}

/// Evaluate one layer. `params` holds `<id>.weight` / `<id>.scale` tensors;
/// backward batch norm reads `(forward input, output gradient)`.
pub fn reference_layer(
    layer: &LayerSpec,
    inputs: &[&Tensor],
    params: &BTreeMap<String, Tensor>,
) -> Result<Tensor, RefError> {
    let param = |suffix: &str| {
        let key = format!("{}.{}", layer.id, suffix);
        params.get(&key).ok_or(RefError::Unbound(key))
    };
    let first = *inputs.first().ok_or_else(|| RefError::Shape {
        layer: layer.id.clone(),
        msg: "no inputs".into(),
    })?;
    let d = dims(first);
    if layer.mode == Mode::Backward {
        return match &layer.kind {
            LayerKind::BatchNorm { eps } if inputs.len() == 2 => {
                Ok(batch_norm_backward(inputs[0], inputs[1], *eps))
            }
            other => Err(RefError::Unsupported(
                layer.id.clone(),
                format!("backward {}", other.name()),
            )),
        };
    }
    Ok(match &layer.kind {
        LayerKind::Conv(c) => conv2d(
            first,
            &param("weight")?.data,
            c.num_output as usize,
            c.kernel[0] as usize,
            c.kernel[1] as usize,
            c.stride as usize,
            c.pad as usize,
            c.group as usize,
        ),
        LayerKind::DepthwiseConv(c) => conv2d(
            first,
            &param("weight")?.data,
            d.c,
            c.kernel[0] as usize,
            c.kernel[1] as usize,
            c.stride as usize,
            c.pad as usize,
            d.c,
        ),
        LayerKind::FullyConnected { num_output } => {
            fully_connected(first, &param("weight")?.data, *num_output as usize)
        }
        LayerKind::MaxPool(p) => pool2d(first, p.window as usize, p.stride as usize, p.pad as usize, true),
        LayerKind::AvgPool(p) => pool2d(first, p.window as usize, p.stride as usize, p.pad as usize, false),
        LayerKind::Relu {} => relu(first),
        LayerKind::Lrn(p) => lrn(first, p.local_size as usize, p.k, p.alpha, p.beta),
        LayerKind::BatchNorm { eps } => batch_norm_forward(first, *eps),
        LayerKind::Scale {} => scale(first, &param("scale")?.data),
        LayerKind::ElementwiseAdd {} => add(first, inputs.get(1).ok_or_else(|| RefError::Shape {
            layer: layer.id.clone(),
            msg: "elementwise_add needs two inputs".into(),
        })?),
        LayerKind::Concat { axis } => concat(inputs, *axis),
        LayerKind::DropoutInference { keep_prob } => dropout_inference(first, *keep_prob),
    })
}

/// Evaluate a whole network layer by layer; returns every layer's output.
pub fn reference_network(
    net: &NetworkIR,
    bindings: &BTreeMap<String, Tensor>,
) -> Result<BTreeMap<String, Tensor>, RefError> {
    let order = topo_layers(net).map_err(|e| RefError::Shape {
        layer: "<network>".into(),
        msg: e.to_string(),
    })?;
    let mut vals: BTreeMap<String, Tensor> = BTreeMap::new();
    for i in &net.inputs {
        let t = bindings
            .get(&i.id)
            .ok_or_else(|| RefError::Unbound(i.id.clone()))?;
        vals.insert(i.id.clone(), t.clone());
    }
    let mut fwd_inputs: BTreeMap<String, String> = BTreeMap::new();
    for layer in order {
        let ins: Vec<String> = if layer.mode == Mode::Backward {
            // The forward layer's own input stands in for its id.
            let fwd = &layer.inputs[0];
            let src = fwd_inputs
                .get(fwd)
                .cloned()
                .ok_or_else(|| RefError::Unbound(fwd.clone()))?;
            vec![src, layer.inputs[1].clone()]
        } else {
            layer.inputs.clone()
        };
        let ts: Vec<&Tensor> = ins
            .iter()
            .map(|i| vals.get(i).ok_or_else(|| RefError::Unbound(i.clone())))
            .collect::<Result<_, _>>()?;
        let out = reference_layer(layer, &ts, bindings)?;
        if let (LayerKind::BatchNorm { .. }, Mode::Forward) = (&layer.kind, layer.mode) {
            fwd_inputs.insert(layer.id.clone(), layer.inputs[0].clone());
        }
        vals.insert(layer.id.clone(), out);
    }
    for i in &net.inputs {
        vals.remove(&i.id);
    }
    Ok(vals)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(b: u64, c: u64, h: u64, w: u64, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(bchw(b, c, h, w), data).unwrap()
    }

    #[test]
    fn conv_valid_2x2() {
        let x = t(1, 1, 3, 3, (1..=9).map(f64::from).collect());
        let out = conv2d(&x, &[1.0, 0.0, 0.0, 1.0], 1, 2, 2, 1, 0, 1);
        // hand-computed: x[y][x] + x[y+1][x+1]
        assert_eq!(out.data, vec![1.0 + 5.0, 2.0 + 6.0, 4.0 + 8.0, 5.0 + 9.0]);
    }

    #[test]
    fn pools_on_a_row() {
        let x = t(1, 1, 1, 4, vec![1.0, 3.0, 2.0, 5.0]);
        // two identical rows so a square window sees the 1-D row twice
        let wide = t(1, 1, 2, 4, vec![1.0, 3.0, 2.0, 5.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!(pool2d(&wide, 2, 2, 0, true).data, vec![3.0, 5.0]);
        assert_eq!(pool2d(&wide, 2, 2, 0, false).data, vec![2.0, 3.5]);
        assert_eq!(relu(&x).data, x.data);
    }

    #[test]
    fn lrn_three_channels() {
        let x = t(1, 3, 1, 1, vec![1.0; 3]);
        let out = lrn(&x, 3, 1.0, 3.0, 1.0);
        assert_eq!(out.data, vec![1.0 / 3.0, 0.25, 1.0 / 3.0]);
    }

    #[test]
    fn batch_norm_two_samples() {
        let x = t(2, 1, 1, 1, vec![1.0, 3.0]);
        assert_eq!(batch_norm_forward(&x, 0.0).data, vec![-1.0, 1.0]);
        let zero = t(2, 1, 1, 1, vec![0.0, 0.0]);
        assert_eq!(batch_norm_backward(&x, &zero, 0.0).data, vec![0.0, 0.0]);
    }

    #[test]
    fn elementwise_layers() {
        let x = t(1, 1, 1, 2, vec![-1.0, 2.0]);
        assert_eq!(relu(&x).data, vec![0.0, 2.0]);
        let y = t(1, 1, 1, 2, vec![3.0, 4.0]);
        assert_eq!(scale(&y, &[2.0]).data, vec![6.0, 8.0]);
        let a = t(1, 1, 1, 2, vec![1.0, 2.0]);
        let b = t(1, 1, 1, 2, vec![10.0, 20.0]);
        assert_eq!(add(&a, &b).data, vec![11.0, 22.0]);
    }

    #[test]
    fn concat_channels() {
        let a = t(1, 1, 1, 2, vec![1.0, 2.0]);
        let b = t(1, 2, 1, 2, vec![3.0, 4.0, 5.0, 6.0]);
        let c = concat(&[&a, &b], DimName::C);
        assert_eq!(c.shape, bchw(1, 3, 1, 2));
        assert_eq!(c.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
