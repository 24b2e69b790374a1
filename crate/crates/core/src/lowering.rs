//! Layer-level networks lowered into GCONV chains.

use std::collections::{BTreeMap, BTreeSet};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{Chain, ChainError, TensorDecl, TensorSource};
use crate::gconv::{
    DimName, DimParams, GConv, Lut, MainOp, Operators, PointOp, ReduceOp, Shape,
};
use crate::tensor::bchw;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Forward,
    Backward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvParams {
    pub num_output: u64,
    /// `[ky, kx]`
    pub kernel: [u64; 2],
    #[serde(default = "one")]
    pub stride: u64,
    #[serde(default)]
    pub pad: u64,
    #[serde(default = "one")]
    pub group: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthwiseParams {
    pub kernel: [u64; 2],
    #[serde(default = "one")]
    pub stride: u64,
    #[serde(default)]
    pub pad: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolParams {
    pub window: u64,
    #[serde(default = "one")]
    pub stride: u64,
    #[serde(default)]
    pub pad: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrnParams {
    pub local_size: u64,
    #[serde(default = "one_f")]
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
}

fn one() -> u64 {
    1
}

fn one_f() -> f64 {
    1.0
}

fn default_eps() -> f64 {
    1e-5
}

fn channel_axis() -> DimName {
    DimName::C
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerKind {
    Conv(ConvParams),
    DepthwiseConv(DepthwiseParams),
    FullyConnected {
        num_output: u64,
    },
    MaxPool(PoolParams),
    AvgPool(PoolParams),
    Relu {},
    Lrn(LrnParams),
    BatchNorm {
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Scale {},
    ElementwiseAdd {},
    Concat {
        #[serde(default = "channel_axis")]
        axis: DimName,
    },
    DropoutInference {
        keep_prob: f64,
    },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv(_) => "conv",
            LayerKind::DepthwiseConv(_) => "depthwise_conv",
            LayerKind::FullyConnected { .. } => "fully_connected",
            LayerKind::MaxPool(_) => "max_pool",
            LayerKind::AvgPool(_) => "avg_pool",
            LayerKind::Relu {} => "relu",
            LayerKind::Lrn(_) => "lrn",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::Scale {} => "scale",
            LayerKind::ElementwiseAdd {} => "elementwise_add",
            LayerKind::Concat { .. } => "concat",
            LayerKind::DropoutInference { .. } => "dropout_inference",
        }
    }
}

/// One layer. In JSON the kind tag and its hyperparameters sit beside
/// `id`, `inputs` and `mode` in a single flat object.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSpec {
    pub id: String,
    pub inputs: Vec<String>,
    pub mode: Mode,
    #[serde(flatten)]
    pub kind: LayerKind,
}

pub const LAYER_KINDS: [&str; 12] = [
    "conv",
    "depthwise_conv",
    "fully_connected",
    "max_pool",
    "avg_pool",
    "relu",
    "lrn",
    "batch_norm",
    "scale",
    "elementwise_add",
    "concat",
    "dropout_inference",
];

impl<'de> Deserialize<'de> for LayerSpec {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let mut map = serde_json::Map::<String, serde_json::Value>::deserialize(de)?;
        let mut take = |k: &str| map.remove(k);
        let id: String = take("id")
            .ok_or_else(|| D::Error::missing_field("id"))
            .and_then(|v| serde_json::from_value(v).map_err(D::Error::custom))?;
        let inputs: Vec<String> = take("inputs")
            .ok_or_else(|| D::Error::missing_field("inputs"))
            .and_then(|v| serde_json::from_value(v).map_err(D::Error::custom))?;
        let mode: Mode = match take("mode") {
            Some(v) => serde_json::from_value(v).map_err(D::Error::custom)?,
            None => Mode::Forward,
        };
        match map.get("kind") {
            Some(serde_json::Value::String(k)) if !LAYER_KINDS.contains(&k.as_str()) => {
                return Err(D::Error::custom(format!("unsupported layer kind `{k}`")));
            }
            None => return Err(D::Error::missing_field("kind")),
            _ => {}
        }
        let kind = serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| D::Error::custom(format!("layer `{id}`: {e}")))?;
        Ok(LayerSpec {
            id,
            inputs,
            mode,
            kind,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputDecl {
    pub id: String,
    pub shape: Shape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkIR {
    pub inputs: Vec<InputDecl>,
    pub layers: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LowerError {
    #[error("layer `{layer}`: unsupported {what}")]
    Unsupported { layer: String, what: String },
    #[error("layer `{layer}`: group {group} does not divide channels (in {nic}, out {noc})")]
    InvalidGrouping {
        layer: String,
        group: u64,
        nic: u64,
        noc: u64,
    },
    #[error("layer `{layer}`: {msg}")]
    Geometry { layer: String, msg: String },
    #[error("layer `{layer}`: missing dependency `{dep}`")]
    Dependency { layer: String, dep: String },
    #[error("layer `{layer}`: expected {want} inputs, got {got}")]
    Arity {
        layer: String,
        want: usize,
        got: usize,
    },
    #[error("cyclic layer graph")]
    Cyclic,
    #[error("duplicate id `{0}`")]
    Duplicate(String),
    #[error(transparent)]
    Chain(#[from] ChainError),
}

/// Output of lowering one layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerLowering {
    pub nodes: Vec<GConv>,
    pub params: Vec<(String, Shape)>,
    /// Tensor holding the layer's result.
    pub output: String,
    pub output_shape: Shape,
}

fn geom(layer: &str, msg: impl Into<String>) -> LowerError {
    LowerError::Geometry {
        layer: layer.to_string(),
        msg: msg.into(),
    }
}

fn extents(layer: &LayerSpec, s: &Shape) -> Result<(u64, u64, u64, u64), LowerError> {
    let get = |d| {
        s.get(&d)
            .copied()
            .ok_or_else(|| geom(&layer.id, format!("input lacks dimension {d}")))
    };
    if s.len() != 4 {
        return Err(geom(&layer.id, "inputs must be B, C, H, W tensors"));
    }
    Ok((get(DimName::B)?, get(DimName::C)?, get(DimName::H)?, get(DimName::W)?))
}

/// Sliding-window output count; the window must tile the padded input exactly.
fn window_outputs(layer: &str, n: u64, k: u64, s: u64, p: u64) -> Result<u64, LowerError> {
    if s == 0 || k == 0 {
        return Err(geom(layer, "window and stride must be positive"));
    }
    let span = n + 2 * p;
    if span < k || (span - k) % s != 0 {
        return Err(geom(
            layer,
            format!("window {k} stride {s} pad {p} does not tile extent {n}"),
        ));
    }
    if 2 * p >= k + (span - k) {
        return Err(geom(layer, "padding consumes the input"));
    }
    Ok((span - k) / s + 1)
}

fn elementwise_dims(b: u64, c: u64, h: u64, w: u64) -> [(DimName, DimParams); 4] {
    [
        (DimName::B, DimParams::grouped(b)),
        (DimName::C, DimParams::grouped(c)),
        (DimName::H, DimParams::grouped(h)),
        (DimName::W, DimParams::grouped(w)),
    ]
}

/// Convolution, depthwise convolution and fully-connected layers.
pub fn lower_conv(layer: &LayerSpec, input: &str, in_shape: &Shape) -> Result<LayerLowering, LowerError> {
    let (nbs, nic, niy, nix) = extents(layer, in_shape)?;
    let (noc, ky, kx, stride, pad, group) = match &layer.kind {
        LayerKind::Conv(c) => (c.num_output, c.kernel[0], c.kernel[1], c.stride, c.pad, c.group),
        LayerKind::DepthwiseConv(c) => (nic, c.kernel[0], c.kernel[1], c.stride, c.pad, nic),
        LayerKind::FullyConnected { num_output } => (*num_output, niy, nix, 1, 0, 1),
        other => {
            return Err(LowerError::Unsupported {
                layer: layer.id.clone(),
                what: format!("conv lowering of {}", other.name()),
            })
        }
    };
    if group == 0 || noc == 0 || nic % group != 0 || noc % group != 0 {
        return Err(LowerError::InvalidGrouping {
            layer: layer.id.clone(),
            group,
            nic,
            noc,
        });
    }
    let noy = window_outputs(&layer.id, niy, ky, stride, pad)?;
    let nox = window_outputs(&layer.id, nix, kx, stride, pad)?;
    let weight = format!("{}.weight", layer.id);
    let g = GConv::new(&layer.id, input)
        .with_kernel(&weight)
        .with_ops(Operators::mac())
        .with_dims([
            (DimName::B, DimParams::outputs(nbs)),
            (
                DimName::C,
                DimParams {
                    ng: group,
                    nop: noc / group,
                    nks: nic / group,
                    ..Default::default()
                },
            ),
            (
                DimName::H,
                DimParams {
                    nks: ky,
                    nopc: noy,
                    ps: pad,
                    s: stride,
                    ..Default::default()
                },
            ),
            (
                DimName::W,
                DimParams {
                    nks: kx,
                    nopc: nox,
                    ps: pad,
                    s: stride,
                    ..Default::default()
                },
            ),
        ]);
    let ks = g.kernel_shape();
    Ok(LayerLowering {
        output_shape: g.output_shape(),
        nodes: vec![g],
        params: vec![(weight, ks)],
        output: layer.id.clone(),
    })
}

/// Max and average pooling as reduce-only GCONVs.
pub fn lower_pool(layer: &LayerSpec, input: &str, in_shape: &Shape) -> Result<LayerLowering, LowerError> {
    let (nbs, nic, niy, nix) = extents(layer, in_shape)?;
    let (p, reduce) = match &layer.kind {
        LayerKind::MaxPool(p) => (p, ReduceOp::Max),
        LayerKind::AvgPool(p) => (p, ReduceOp::Add),
        other => {
            return Err(LowerError::Unsupported {
                layer: layer.id.clone(),
                what: format!("pool lowering of {}", other.name()),
            })
        }
    };
    let noy = window_outputs(&layer.id, niy, p.window, p.stride, p.pad)?;
    let nox = window_outputs(&layer.id, nix, p.window, p.stride, p.pad)?;
    let spatial = |nopc| DimParams {
        nks: p.window,
        nopc,
        ps: p.pad,
        s: p.stride,
        ..Default::default()
    };
    let mut ops = Operators {
        reduce,
        ..Default::default()
    };
    if reduce == ReduceOp::Add {
        ops.post
            .push(PointOp::Scale(Ratio::new(1, (p.window * p.window) as i64)));
    }
    let g = GConv::new(&layer.id, input).with_ops(ops).with_dims([
        (DimName::B, DimParams::grouped(nbs)),
        (DimName::C, DimParams::grouped(nic)),
        (DimName::H, spatial(noy)),
        (DimName::W, spatial(nox)),
    ]);
    Ok(LayerLowering {
        output_shape: g.output_shape(),
        nodes: vec![g],
        params: vec![],
        output: layer.id.clone(),
    })
}

/// Local response normalization: a channel-window sum of squares, then an
/// elementwise multiply by its power-law response.
pub fn lower_lrn(layer: &LayerSpec, input: &str, in_shape: &Shape) -> Result<LayerLowering, LowerError> {
    let (nbs, nic, niy, nix) = extents(layer, in_shape)?;
    let LayerKind::Lrn(p) = &layer.kind else {
        return Err(LowerError::Unsupported {
            layer: layer.id.clone(),
            what: format!("lrn lowering of {}", layer.kind.name()),
        });
    };
    let n = p.local_size;
    if n == 0 || n % 2 == 0 {
        return Err(LowerError::Unsupported {
            layer: layer.id.clone(),
            what: format!("even local_size {n} (asymmetric padding)"),
        });
    }
    let denom_id = format!("{}/denom", layer.id);
    let denom = GConv::new(&denom_id, input)
        .with_ops(Operators {
            pre: vec![PointOp::Square],
            reduce: ReduceOp::Add,
            post: vec![PointOp::Lut(Lut::lrn_pow(p.k, p.alpha, n as f64, p.beta))],
            ..Default::default()
        })
        .with_dims([
            (DimName::B, DimParams::grouped(nbs)),
            (
                DimName::C,
                DimParams {
                    nks: n,
                    ps: (n - 1) / 2,
                    nopc: nic,
                    ..Default::default()
                },
            ),
            (DimName::H, DimParams::grouped(niy)),
            (DimName::W, DimParams::grouped(nix)),
        ]);
    let out_id = format!("{}/out", layer.id);
    let out = GConv::new(&out_id, input)
        .with_kernel(&denom_id)
        .with_ops(Operators {
            main: MainOp::Multiply,
            ..Default::default()
        })
        .with_dims(elementwise_dims(nbs, nic, niy, nix));
    Ok(LayerLowering {
        output_shape: out.output_shape(),
        nodes: vec![denom, out],
        params: vec![],
        output: out_id,
    })
}

/// Node ids of a lowered forward batch normalization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchNormNodes {
    pub input: String,
    pub shape: Shape,
    /// `1 / sqrt(var + eps)`
    pub inv_std: String,
    /// Normalized output.
    pub output: String,
}

fn bn_reduce_dims(nbs: u64, nic: u64, niy: u64, nix: u64) -> [(DimName, DimParams); 4] {
    [
        (DimName::B, DimParams::reduce(nbs)),
        (DimName::C, DimParams::outputs(nic)),
        (DimName::H, DimParams::outputs(niy)),
        (DimName::W, DimParams::outputs(nix)),
    ]
}

fn bn_broadcast_dims(nbs: u64, nic: u64, niy: u64, nix: u64) -> [(DimName, DimParams); 4] {
    [
        (DimName::B, DimParams::outputs(nbs)),
        (DimName::C, DimParams::grouped(nic)),
        (DimName::H, DimParams::grouped(niy)),
        (DimName::W, DimParams::grouped(nix)),
    ]
}

/// Forward batch normalization as four GCONVs: mean, centering, inverse
/// standard deviation, normalization.
pub fn lower_batchnorm_fp(
    layer: &LayerSpec,
    input: &str,
    in_shape: &Shape,
) -> Result<(LayerLowering, BatchNormNodes), LowerError> {
    let (nbs, nic, niy, nix) = extents(layer, in_shape)?;
    let LayerKind::BatchNorm { eps } = layer.kind else {
        return Err(LowerError::Unsupported {
            layer: layer.id.clone(),
            what: format!("batch norm lowering of {}", layer.kind.name()),
        });
    };
    let id = |s: &str| format!("{}/{}", layer.id, s);
    let inv_nbs = Ratio::new(1, nbs as i64);
    let fp1 = GConv::new(id("fp1"), input)
        .with_ops(Operators {
            reduce: ReduceOp::Add,
            post: vec![PointOp::Scale(inv_nbs)],
            ..Default::default()
        })
        .with_dims(bn_reduce_dims(nbs, nic, niy, nix));
    let fp2 = GConv::new(id("fp2"), input)
        .with_kernel(id("fp1"))
        .with_ops(Operators {
            main: MainOp::Subtract,
            ..Default::default()
        })
        .with_dims(bn_broadcast_dims(nbs, nic, niy, nix));
    let fp3 = GConv::new(id("fp3"), id("fp2"))
        .with_ops(Operators {
            main: MainOp::SquareOfInput,
            reduce: ReduceOp::Add,
            post: vec![PointOp::Lut(Lut::rsqrt_eps(eps, 1.0 / nbs as f64))],
            ..Default::default()
        })
        .with_dims(bn_reduce_dims(nbs, nic, niy, nix));
    let fp4 = GConv::new(id("fp4"), id("fp2"))
        .with_kernel(id("fp3"))
        .with_ops(Operators {
            main: MainOp::Multiply,
            ..Default::default()
        })
        .with_dims(bn_broadcast_dims(nbs, nic, niy, nix));
    let nodes = BatchNormNodes {
        input: input.to_string(),
        shape: in_shape.clone(),
        inv_std: id("fp3"),
        output: id("fp4"),
    };
    Ok((
        LayerLowering {
            output_shape: fp4.output_shape(),
            nodes: vec![fp1, fp2, fp3, fp4],
            params: vec![],
            output: id("fp4"),
        },
        nodes,
    ))
}

/// Backward batch normalization as six GCONVs over the forward's inverse
/// standard deviation and normalized output.
pub fn lower_batchnorm_bp(
    layer: &LayerSpec,
    fwd: Option<&BatchNormNodes>,
    grad: &str,
) -> Result<LayerLowering, LowerError> {
    let fwd = fwd.ok_or_else(|| LowerError::Dependency {
        layer: layer.id.clone(),
        dep: layer.inputs.first().cloned().unwrap_or_default(),
    })?;
    let (nbs, nic, niy, nix) = extents(layer, &fwd.shape)?;
    let id = |s: &str| format!("{}/{}", layer.id, s);
    let inv_nbs = Ratio::new(1, nbs as i64);
    let mean_of = |name: &str, kernel: Option<&str>, main| {
        let mut g = GConv::new(id(name), grad)
            .with_ops(Operators {
                main,
                reduce: ReduceOp::Add,
                post: vec![PointOp::Scale(inv_nbs)],
                ..Default::default()
            })
            .with_dims([
                (DimName::B, DimParams::reduce(nbs)),
                (DimName::C, DimParams::grouped(nic)),
                (DimName::H, DimParams::grouped(niy)),
                (DimName::W, DimParams::grouped(nix)),
            ]);
        g.kernel_ref = kernel.map(str::to_string);
        g
    };
    let binary = |name: &str, input: &str, kernel: &str, main, dims| {
        GConv::new(id(name), input)
            .with_kernel(kernel)
            .with_ops(Operators {
                main,
                ..Default::default()
            })
            .with_dims(dims)
    };
    // t3 = sum(O * gO) / Nbs
    let bp1 = mean_of("bp1", Some(&fwd.output), MainOp::Multiply);
    // t4 = O * t3; O is the full-extent operand, so it is the input.
    let bp2 = binary(
        "bp2",
        &fwd.output,
        &id("bp1"),
        MainOp::Multiply,
        bn_broadcast_dims(nbs, nic, niy, nix),
    );
    // t5 = sum(gO) / Nbs
    let mut bp3 = mean_of("bp3", None, MainOp::Identity);
    bp3.dims = bn_reduce_dims(nbs, nic, niy, nix).into_iter().collect();
    // t6 = gO - t5
    let bp4 = binary(
        "bp4",
        grad,
        &id("bp3"),
        MainOp::Subtract,
        bn_broadcast_dims(nbs, nic, niy, nix),
    );
    // t7 = t6 - t4, both full extent
    let bp5 = binary(
        "bp5",
        &id("bp4"),
        &id("bp2"),
        MainOp::Subtract,
        elementwise_dims(nbs, nic, niy, nix),
    );
    // gI = t7 * t2
    let bp6 = binary(
        "bp6",
        &id("bp5"),
        &fwd.inv_std,
        MainOp::Multiply,
        bn_broadcast_dims(nbs, nic, niy, nix),
    );
    Ok(LayerLowering {
        output_shape: bp6.output_shape(),
        nodes: vec![bp1, bp2, bp3, bp4, bp5, bp6],
        params: vec![],
        output: id("bp6"),
    })
}

/// Reduce-free layers: ReLU, per-channel scale, elementwise add, inference dropout.
pub fn lower_elementwise(
    layer: &LayerSpec,
    inputs: &[(&str, &Shape)],
) -> Result<LayerLowering, LowerError> {
    let (input, in_shape) = *inputs.first().ok_or(LowerError::Arity {
        layer: layer.id.clone(),
        want: 1,
        got: 0,
    })?;
    let (nbs, nic, niy, nix) = extents(layer, in_shape)?;
    let mut g = GConv::new(&layer.id, input).with_dims(elementwise_dims(nbs, nic, niy, nix));
    let mut params = vec![];
    match &layer.kind {
        LayerKind::Relu {} => g.ops.post.push(PointOp::Lut(Lut::relu())),
        LayerKind::Scale {} => {
            let factor = format!("{}.scale", layer.id);
            g.dims = bn_broadcast_dims(nbs, nic, niy, nix).into_iter().collect();
            g.dims.insert(
                DimName::H,
                DimParams::outputs(niy),
            );
            g.dims.insert(DimName::W, DimParams::outputs(nix));
            g.kernel_ref = Some(factor.clone());
            g.ops.main = MainOp::Multiply;
            params.push((factor, g.kernel_shape()));
        }
        LayerKind::ElementwiseAdd {} => {
            let (other, other_shape) = *inputs.get(1).ok_or(LowerError::Arity {
                layer: layer.id.clone(),
                want: 2,
                got: inputs.len(),
            })?;
            if other_shape != in_shape {
                return Err(geom(&layer.id, "elementwise_add operands differ in shape"));
            }
            g.kernel_ref = Some(other.to_string());
            g.ops.main = MainOp::Add;
        }
        LayerKind::DropoutInference { keep_prob } => {
            let r = Ratio::<i64>::approximate_float(*keep_prob)
                .ok_or_else(|| geom(&layer.id, "keep_prob is not representable"))?;
            g.ops.post.push(PointOp::Scale(r));
        }
        other => {
            return Err(LowerError::Unsupported {
                layer: layer.id.clone(),
                what: format!("elementwise lowering of {}", other.name()),
            })
        }
    }
    Ok(LayerLowering {
        output_shape: g.output_shape(),
        nodes: vec![g],
        params,
        output: layer.id.clone(),
    })
}

/// Order layers so every layer follows its inputs.
pub fn topo_layers(net: &NetworkIR) -> Result<Vec<&LayerSpec>, LowerError> {
    let mut known: BTreeSet<&str> = BTreeSet::new();
    for i in &net.inputs {
        if !known.insert(&i.id) {
            return Err(LowerError::Duplicate(i.id.clone()));
        }
    }
    let ids: BTreeSet<&str> = net.layers.iter().map(|l| l.id.as_str()).collect();
    if ids.len() != net.layers.len() || net.inputs.iter().any(|i| ids.contains(i.id.as_str())) {
        let dup = net
            .layers
            .iter()
            .enumerate()
            .find(|(i, l)| {
                net.layers[..*i].iter().any(|m| m.id == l.id)
                    || net.inputs.iter().any(|x| x.id == l.id)
            })
            .map(|(_, l)| l.id.clone())
            .unwrap_or_default();
        return Err(LowerError::Duplicate(dup));
    }
    for l in &net.layers {
        for i in &l.inputs {
            if !ids.contains(i.as_str()) && !known.contains(i.as_str()) {
                return Err(LowerError::Dependency {
                    layer: l.id.clone(),
                    dep: i.clone(),
                });
            }
        }
    }
    let mut placed: BTreeSet<&str> = known;
    let mut order = Vec::new();
    let mut pending: Vec<&LayerSpec> = net.layers.iter().collect();
    while !pending.is_empty() {
        let pos = pending
            .iter()
            .position(|l| l.inputs.iter().all(|i| placed.contains(i.as_str())))
            .ok_or(LowerError::Cyclic)?;
        let l = pending.remove(pos);
        placed.insert(&l.id);
        order.push(l);
    }
    Ok(order)
}

/// Result of lowering a whole network.
#[derive(Clone, Debug, PartialEq)]
pub struct Lowered {
    pub chain: Chain,
    /// Layer id to the tensor holding its result.
    pub layer_outputs: BTreeMap<String, String>,
}

/// Lower every layer in dependency order and stitch the results into one chain.
pub fn lower_network(net: &NetworkIR) -> Result<Lowered, LowerError> {
    let order = topo_layers(net)?;
    let mut chain = Chain::default();
    let mut layer_out: BTreeMap<String, String> = BTreeMap::new();
    let mut bn: BTreeMap<String, BatchNormNodes> = BTreeMap::new();
    for i in &net.inputs {
        chain.tensors.insert(
            i.id.clone(),
            TensorDecl {
                shape: i.shape.clone(),
                source: TensorSource::Input,
            },
        );
        layer_out.insert(i.id.clone(), i.id.clone());
    }

    for layer in order {
        let ins: Vec<(String, Shape)> = layer
            .inputs
            .iter()
            .map(|i| {
                let t = layer_out[i].clone();
                let s = chain.tensors[&t].shape.clone();
                (t, s)
            })
            .collect();
        let need = |n: usize| {
            if ins.len() == n {
                Ok(())
            } else {
                Err(LowerError::Arity {
                    layer: layer.id.clone(),
                    want: n,
                    got: ins.len(),
                })
            }
        };
        let lowering = match (&layer.kind, layer.mode) {
            (LayerKind::BatchNorm { .. }, Mode::Backward) => {
                need(2)?;
                lower_batchnorm_bp(layer, bn.get(&layer.inputs[0]), &ins[1].0)?
            }
            (_, Mode::Backward) => {
                return Err(LowerError::Unsupported {
                    layer: layer.id.clone(),
                    what: format!("backward pass of {}", layer.kind.name()),
                })
            }
            (LayerKind::Conv(_) | LayerKind::DepthwiseConv(_) | LayerKind::FullyConnected { .. }, _) => {
                need(1)?;
                lower_conv(layer, &ins[0].0, &ins[0].1)?
            }
            (LayerKind::MaxPool(_) | LayerKind::AvgPool(_), _) => {
                need(1)?;
                lower_pool(layer, &ins[0].0, &ins[0].1)?
            }
            (LayerKind::Lrn(_), _) => {
                need(1)?;
                lower_lrn(layer, &ins[0].0, &ins[0].1)?
            }
            (LayerKind::BatchNorm { .. }, _) => {
                need(1)?;
                let (l, nodes) = lower_batchnorm_fp(layer, &ins[0].0, &ins[0].1)?;
                bn.insert(layer.id.clone(), nodes);
                l
            }
            (LayerKind::Concat { axis }, _) => {
                if ins.is_empty() {
                    return Err(LowerError::Arity {
                        layer: layer.id.clone(),
                        want: 1,
                        got: 0,
                    });
                }
                let mut shape = ins[0].1.clone();
                let mut total = 0;
                for (_, s) in &ins {
                    for (d, e) in s {
                        if d == axis {
                            total += e;
                        } else if shape.get(d) != Some(e) {
                            return Err(geom(&layer.id, "concat parts differ off-axis"));
                        }
                    }
                }
                shape.insert(*axis, total);
                chain.tensors.insert(
                    layer.id.clone(),
                    TensorDecl {
                        shape,
                        source: TensorSource::Concat {
                            axis: *axis,
                            parts: ins.iter().map(|(t, _)| t.clone()).collect(),
                        },
                    },
                );
                layer_out.insert(layer.id.clone(), layer.id.clone());
                continue;
            }
            _ => {
                let refs: Vec<(&str, &Shape)> = ins.iter().map(|(t, s)| (t.as_str(), s)).collect();
                lower_elementwise(layer, &refs)?
            }
        };
        for (p, s) in lowering.params {
            if chain.tensors.contains_key(&p) {
                return Err(LowerError::Duplicate(p));
            }
            chain.tensors.insert(
                p,
                TensorDecl {
                    shape: s,
                    source: TensorSource::Param,
                },
            );
        }
        for g in lowering.nodes {
            if chain.tensors.contains_key(&g.output_id) {
                return Err(LowerError::Duplicate(g.output_id.clone()));
            }
            chain.tensors.insert(
                g.output_id.clone(),
                TensorDecl {
                    shape: g.output_shape(),
                    source: TensorSource::Node,
                },
            );
            chain.nodes.push(g);
        }
        layer_out.insert(layer.id.clone(), lowering.output);
    }

    chain.outputs = match &net.outputs {
        Some(outs) => outs
            .iter()
            .map(|o| {
                layer_out.get(o).cloned().ok_or_else(|| LowerError::Dependency {
                    layer: "<outputs>".into(),
                    dep: o.clone(),
                })
            })
            .collect::<Result<_, _>>()?,
        None => {
            let consumed: BTreeSet<&str> = net
                .layers
                .iter()
                .flat_map(|l| l.inputs.iter().map(String::as_str))
                .collect();
            net.layers
                .iter()
                .filter(|l| !consumed.contains(l.id.as_str()))
                .map(|l| layer_out[&l.id].clone())
                .collect()
        }
    };
    chain.validate()?;
    layer_out.retain(|k, _| net.layers.iter().any(|l| &l.id == k));
    Ok(Lowered {
        chain,
        layer_outputs: layer_out,
    })
}

/// Standalone forward and backward batch-norm chains over one input tensor,
/// for gradient checking. The backward chain reads the forward's tensors by name.
pub fn batchnorm_chains(shape: &Shape, eps: f64) -> Result<(Chain, Chain), LowerError> {
    let (c, h, w) = (shape[&DimName::C], shape[&DimName::H], shape[&DimName::W]);
    let fwd_layer = LayerSpec {
        id: "bn".into(),
        inputs: vec!["x".into()],
        mode: Mode::Forward,
        kind: LayerKind::BatchNorm { eps },
    };
    let (fl, nodes) = lower_batchnorm_fp(&fwd_layer, "x", shape)?;
    let mut fp = Chain::default();
    fp.tensors.insert(
        "x".into(),
        TensorDecl {
            shape: shape.clone(),
            source: TensorSource::Input,
        },
    );
    for g in fl.nodes {
        fp.tensors.insert(
            g.output_id.clone(),
            TensorDecl {
                shape: g.output_shape(),
                source: TensorSource::Node,
            },
        );
        fp.nodes.push(g);
    }
    fp.outputs = vec![fl.output];
    fp.validate()?;

    let bwd_layer = LayerSpec {
        id: "bn_grad".into(),
        inputs: vec!["bn".into(), "gy".into()],
        mode: Mode::Backward,
        kind: LayerKind::BatchNorm { eps },
    };
    let bl = lower_batchnorm_bp(&bwd_layer, Some(&nodes), "gy")?;
    let mut bp = Chain::default();
    let stat = bchw(1, c, h, w);
    for (id, s) in [
        ("gy".to_string(), shape.clone()),
        (nodes.output.clone(), shape.clone()),
        (nodes.inv_std.clone(), stat),
    ] {
        bp.tensors.insert(
            id,
            TensorDecl {
                shape: s,
                source: TensorSource::Input,
            },
        );
    }
    for g in bl.nodes {
        bp.tensors.insert(
            g.output_id.clone(),
            TensorDecl {
                shape: g.output_shape(),
                source: TensorSource::Node,
            },
        );
        bp.nodes.push(g);
    }
    bp.outputs = vec![bl.output];
    bp.validate()?;
    Ok((fp, bp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gconv::{effective_loops, LoopParam};
    use crate::interp::exec_chain;
    use crate::tensor::Tensor;

    fn layer(id: &str, kind: LayerKind) -> LayerSpec {
        LayerSpec {
            id: id.into(),
            inputs: vec!["x".into()],
            mode: Mode::Forward,
            kind,
        }
    }

    fn run_one(l: LayerSpec, shape: Shape, data: Vec<f64>) -> Vec<f64> {
        let net = NetworkIR {
            inputs: vec![InputDecl {
                id: "x".into(),
                shape: shape.clone(),
            }],
            layers: vec![l],
            outputs: None,
        };
        let low = lower_network(&net).unwrap();
        let bind = [("x".to_string(), Tensor::from_vec(shape, data).unwrap())].into();
        let run = exec_chain(&low.chain, &bind).unwrap();
        run.get(&low.chain.outputs[0]).unwrap().data.clone()
    }

    #[test]
    fn conv_dims_follow_the_grouped_form() {
        let l = layer(
            "c",
            LayerKind::Conv(ConvParams {
                num_output: 8,
                kernel: [3, 3],
                stride: 1,
                pad: 1,
                group: 2,
            }),
        );
        let out = lower_conv(&l, "x", &bchw(2, 4, 6, 6)).unwrap();
        let g = &out.nodes[0];
        assert_eq!(g.params(DimName::B), DimParams::outputs(2));
        assert_eq!(
            g.params(DimName::C),
            DimParams {
                ng: 2,
                nop: 4,
                nks: 2,
                ..Default::default()
            }
        );
        assert_eq!(g.params(DimName::H).nopc, 6);
        assert_eq!(out.output_shape, bchw(2, 8, 6, 6));
        assert_eq!(out.params[0].1, bchw(1, 16, 3, 3));
    }

    #[test]
    fn depthwise_and_fc_shapes() {
        let dw = layer(
            "d",
            LayerKind::DepthwiseConv(DepthwiseParams {
                kernel: [3, 3],
                stride: 1,
                pad: 0,
            }),
        );
        let g = &lower_conv(&dw, "x", &bchw(1, 5, 4, 4)).unwrap().nodes[0];
        assert_eq!(g.params(DimName::C), DimParams::grouped(5));

        let fc = layer("f", LayerKind::FullyConnected { num_output: 7 });
        let g = &lower_conv(&fc, "x", &bchw(3, 2, 4, 5)).unwrap().nodes[0];
        assert_eq!(g.params(DimName::H), DimParams::reduce(4));
        assert_eq!(g.params(DimName::W), DimParams::reduce(5));
        assert_eq!(
            g.params(DimName::C),
            DimParams {
                nks: 2,
                nop: 7,
                ..Default::default()
            }
        );
    }

    #[test]
    fn bad_grouping_is_rejected() {
        let l = layer(
            "c",
            LayerKind::Conv(ConvParams {
                num_output: 6,
                kernel: [1, 1],
                stride: 1,
                pad: 0,
                group: 4,
            }),
        );
        assert!(matches!(
            lower_conv(&l, "x", &bchw(1, 4, 2, 2)),
            Err(LowerError::InvalidGrouping { .. })
        ));
    }

    #[test]
    fn batchnorm_fp1_loops() {
        let l = layer("bn", LayerKind::BatchNorm { eps: 1e-5 });
        let (low, _) = lower_batchnorm_fp(&l, "x", &bchw(32, 64, 7, 7)).unwrap();
        assert_eq!(
            effective_loops(&low.nodes[0]),
            vec![
                (DimName::B, LoopParam::Ks, 32),
                (DimName::C, LoopParam::Opc, 64),
                (DimName::H, LoopParam::Opc, 7),
                (DimName::W, LoopParam::Opc, 7),
            ]
        );
    }

    #[test]
    fn batchnorm_two_samples() {
        let l = layer("bn", LayerKind::BatchNorm { eps: 0.0 });
        assert_eq!(run_one(l, bchw(2, 1, 1, 1), vec![1.0, 3.0]), vec![-1.0, 1.0]);
        let l = layer("bn", LayerKind::BatchNorm { eps: 1e-3 });
        assert_eq!(run_one(l, bchw(1, 1, 1, 2), vec![4.0, -2.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn lrn_three_channels() {
        let l = layer(
            "n",
            LayerKind::Lrn(LrnParams {
                local_size: 3,
                k: 1.0,
                alpha: 3.0,
                beta: 1.0,
            }),
        );
        let low = lower_lrn(&l, "x", &bchw(1, 3, 1, 1)).unwrap();
        let wide: Vec<_> = low.nodes[0]
            .dims
            .iter()
            .filter(|(_, p)| p.nks > 1)
            .map(|(d, _)| *d)
            .collect();
        assert_eq!(wide, vec![DimName::C]);
        assert_eq!(
            run_one(l, bchw(1, 3, 1, 1), vec![1.0; 3]),
            vec![1.0 / 3.0, 0.25, 1.0 / 3.0]
        );
    }

    #[test]
    fn even_lrn_window_is_unsupported() {
        let l = layer(
            "n",
            LayerKind::Lrn(LrnParams {
                local_size: 4,
                k: 1.0,
                alpha: 1.0,
                beta: 1.0,
            }),
        );
        assert!(matches!(
            lower_lrn(&l, "x", &bchw(1, 4, 1, 1)),
            Err(LowerError::Unsupported { .. })
        ));
    }

    #[test]
    fn pools_on_a_row() {
        let p = PoolParams {
            window: 2,
            stride: 2,
            pad: 0,
        };
        let shape = bchw(1, 1, 2, 4);
        let data = vec![1.0, 3.0, 2.0, 5.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(
            run_one(layer("p", LayerKind::MaxPool(p.clone())), shape.clone(), data.clone()),
            vec![3.0, 5.0]
        );
        assert_eq!(
            run_one(layer("p", LayerKind::AvgPool(p)), shape, data),
            vec![2.0, 3.5]
        );
    }

    #[test]
    fn relu_and_dropout() {
        assert_eq!(
            run_one(layer("r", LayerKind::Relu {}), bchw(1, 1, 1, 2), vec![-1.0, 2.0]),
            vec![0.0, 2.0]
        );
        assert_eq!(
            run_one(
                layer("d", LayerKind::DropoutInference { keep_prob: 0.5 }),
                bchw(1, 1, 1, 2),
                vec![4.0, 2.0]
            ),
            vec![2.0, 1.0]
        );
    }

    #[test]
    fn two_convs_are_wired() {
        let conv = |id: &str, input: &str| LayerSpec {
            id: id.into(),
            inputs: vec![input.into()],
            mode: Mode::Forward,
            kind: LayerKind::Conv(ConvParams {
                num_output: 2,
                kernel: [1, 1],
                stride: 1,
                pad: 0,
                group: 1,
            }),
        };
        let net = NetworkIR {
            inputs: vec![InputDecl {
                id: "x".into(),
                shape: bchw(1, 2, 3, 3),
            }],
            layers: vec![conv("b", "a"), conv("a", "x")],
            outputs: None,
        };
        let low = lower_network(&net).unwrap();
        assert_eq!(low.chain.nodes.len(), 2);
        assert_eq!(low.chain.nodes[1].input_ref, low.chain.nodes[0].output_id);
        assert_eq!(low.chain.outputs, vec!["b".to_string()]);
    }

    #[test]
    fn cycles_and_missing_inputs() {
        let relu = |id: &str, input: &str| LayerSpec {
            id: id.into(),
            inputs: vec![input.into()],
            mode: Mode::Forward,
            kind: LayerKind::Relu {},
        };
        let mut net = NetworkIR {
            inputs: vec![InputDecl {
                id: "x".into(),
                shape: bchw(1, 1, 1, 1),
            }],
            layers: vec![relu("a", "b"), relu("b", "a")],
            outputs: None,
        };
        assert_eq!(lower_network(&net).unwrap_err(), LowerError::Cyclic);
        net.layers = vec![relu("a", "nope")];
        assert!(matches!(
            lower_network(&net),
            Err(LowerError::Dependency { .. })
        ));
    }

    #[test]
    fn backward_bn_without_forward_is_a_dependency_error() {
        let l = LayerSpec {
            id: "g".into(),
            inputs: vec!["bn".into(), "gy".into()],
            mode: Mode::Backward,
            kind: LayerKind::BatchNorm { eps: 1e-5 },
        };
        assert!(matches!(
            lower_batchnorm_bp(&l, None, "gy"),
            Err(LowerError::Dependency { .. })
        ));
    }

    #[test]
    fn layer_json_is_flat_and_strict() {
        let l: LayerSpec = serde_json::from_str(
            r#"{"id":"c","inputs":["x"],"kind":"conv","num_output":4,"kernel":[3,3]}"#,
        )
        .unwrap();
        assert_eq!(l.kind.name(), "conv");
        assert_eq!(l.mode, Mode::Forward);
        let back = serde_json::to_value(&l).unwrap();
        assert_eq!(back["kind"], "conv");
        assert_eq!(serde_json::from_value::<LayerSpec>(back).unwrap(), l);
        let unknown = serde_json::from_str::<LayerSpec>(
            r#"{"id":"c","inputs":["x"],"kind":"relu","slope":0.1}"#,
        );
        assert!(unknown.unwrap_err().to_string().contains("slope"));
        let kind = serde_json::from_str::<LayerSpec>(r#"{"id":"s","inputs":[],"kind":"softmax"}"#);
        assert!(kind.unwrap_err().to_string().contains("unsupported layer kind"));
    }
}
