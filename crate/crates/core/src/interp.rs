//! Functional execution of GCONVs and chains on small dense tensors.
//!
//! Reductions follow the canonical loop order: output multi-index over the
//! dimensions in B, C, H, W order, and for each output the kernel multi-index
//! with the last dimension varying fastest. Padded positions are skipped, so
//! they contribute the identity of the reduction.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::chain::{broadcast_shape, Chain, TensorSource};
use crate::gconv::{
    input_extent, scale_value, DimName, FusedParam, GConv, LutRegistry, PointOp, Shape, Slot,
};
use crate::tensor::{element_count, strides_of, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecError {
    #[error("`{node}`: {role} shape mismatch in dimension {dim:?} (got {got:?}, expected {want:?})")]
    Shape {
        node: String,
        role: String,
        dim: Option<DimName>,
        got: Shape,
        want: Shape,
    },
    #[error("`{node}`: kernel tensor required but not bound")]
    MissingKernel { node: String },
    #[error("`{node}`: lut `{name}` is not registered")]
    Registry { node: String, name: String },
    #[error("`{node}`: {msg}")]
    Geometry { node: String, msg: String },
    #[error("external tensor `{0}` is not bound")]
    Unbound(String),
    #[error("tensor `{0}` is unknown to the chain")]
    Unknown(String),
}

fn shape_error(node: &str, role: &str, got: &Shape, want: &Shape) -> ExecError {
    let dim = want
        .keys()
        .chain(got.keys())
        .find(|d| got.get(d) != want.get(d))
        .copied();
    ExecError::Shape {
        node: node.to_string(),
        role: role.to_string(),
        dim,
        got: got.clone(),
        want: want.clone(),
    }
}

/// Per-dimension tap table: for each output coordinate, the (input, kernel)
/// coordinates of every kernel position.
struct DimTaps {
    out_extent: usize,
    nks: usize,
    /// `taps[o * nks + ks]`
    taps: Vec<(Option<usize>, usize)>,
}

fn dim_taps(dim: DimName, g: &GConv) -> Result<DimTaps, ExecError> {
    let dp = g.params(dim);
    let ipe = input_extent(dim, &dp).map_err(|e| ExecError::Geometry {
        node: g.id.clone(),
        msg: e.to_string(),
    })? as i64;
    let (ng, nop, nks, nopc) = (dp.ng as usize, dp.nop as usize, dp.nks as usize, dp.nopc as usize);
    let mut taps = Vec::with_capacity(ng * nop * nopc * nks);
    for grp in 0..ng {
        for op in 0..nop {
            for opc in 0..nopc {
                for ks in 0..nks {
                    let pos = (opc * dp.s as usize + ks) as i64 - dp.ps as i64;
                    let input = (0..ipe)
                        .contains(&pos)
                        .then(|| grp * ipe as usize + pos as usize);
                    taps.push((input, (grp * nop + op) * nks + ks));
                }
            }
        }
    }
    Ok(DimTaps {
        out_extent: ng * nop * nopc,
        nks,
        taps,
    })
}

struct ParamView<'a> {
    tensor: &'a Tensor,
    strides: Vec<usize>,
    broadcast: Vec<bool>,
}

impl ParamView<'_> {
    fn at(&self, coords: &[usize]) -> f64 {
        let idx: usize = coords
            .iter()
            .zip(&self.strides)
            .zip(&self.broadcast)
            .map(|((&c, &s), &b)| if b { 0 } else { c * s })
            .sum();
        self.tensor.data[idx]
    }
}

fn apply_steps(
    reg: &LutRegistry,
    node: &str,
    steps: &[PointOp],
    mut x: f64,
    coords: &[usize],
    params: &[Option<ParamView<'_>>],
) -> Result<f64, ExecError> {
    for step in steps {
        x = match step {
            PointOp::Square => x * x,
            PointOp::Scale(r) => scale_value(r, x),
            PointOp::Lut(l) => {
                let f = reg.resolve(l).ok_or_else(|| ExecError::Registry {
                    node: node.to_string(),
                    name: l.name.clone(),
                })?;
                f(&l.args, x)
            }
            PointOp::WithParam { op, param } => {
                let view = params
                    .get(*param)
                    .and_then(Option::as_ref)
                    .ok_or_else(|| ExecError::Unknown(format!("{node} fused param {param}")))?;
                op.apply(x, view.at(coords))
            }
        };
    }
    Ok(x)
}

/// Decompose a linear index into per-dimension coordinates.
fn unravel(mut i: usize, extents: &[usize], coords: &mut [usize]) {
    for k in (0..extents.len()).rev() {
        coords[k] = i % extents[k];
        i /= extents[k];
    }
}

fn bind_params<'a>(
    g: &GConv,
    params: &[&'a Tensor],
    slot: Slot,
    target: &Shape,
) -> Result<Vec<Option<ParamView<'a>>>, ExecError> {
    g.fused_params
        .iter()
        .enumerate()
        .map(|(i, p): (usize, &FusedParam)| {
            if p.slot != slot {
                return Ok(None);
            }
            let t = *params
                .get(i)
                .ok_or_else(|| ExecError::Unbound(p.tensor.clone()))?;
            let want = broadcast_shape(target, &p.broadcast);
            if t.shape != want {
                return Err(shape_error(&g.id, "fused param", &t.shape, &want));
            }
            Ok(Some(ParamView {
                tensor: t,
                strides: strides_of(&t.shape),
                broadcast: target.keys().map(|d| p.broadcast.contains(d)).collect(),
            }))
        })
        .collect()
}

/// Execute one GCONV. `params` binds `g.fused_params` positionally.
pub fn exec_gconv(
    g: &GConv,
    input: &Tensor,
    kernel: Option<&Tensor>,
    params: &[&Tensor],
) -> Result<Tensor, ExecError> {
    let in_shape = g.input_shape().map_err(|e| ExecError::Geometry {
        node: g.id.clone(),
        msg: e.to_string(),
    })?;
    if input.shape != in_shape {
        return Err(shape_error(&g.id, "input", &input.shape, &in_shape));
    }
    let needs_kernel = g.ops.main.is_binary();
    let kernel = match (needs_kernel, kernel) {
        (true, None) => return Err(ExecError::MissingKernel { node: g.id.clone() }),
        (true, Some(k)) => {
            let ks = g.kernel_shape();
            if k.shape != ks {
                return Err(shape_error(&g.id, "kernel", &k.shape, &ks));
            }
            Some(k)
        }
        (false, _) => None,
    };
    let out_shape = g.output_shape();
    let pre_params = bind_params(g, params, Slot::Pre, &in_shape)?;
    let post_params = bind_params(g, params, Slot::Post, &out_shape)?;

    let reg = LutRegistry::builtin();
    let dims: Vec<DimName> = g.dims.keys().copied().collect();
    let nd = dims.len();
    let in_ext: Vec<usize> = in_shape.values().map(|&e| e as usize).collect();
    let in_strides = strides_of(&in_shape);

    // Preprocessed input, evaluated once per element.
    let pre_input: Vec<f64> = if g.ops.pre.is_empty() {
        input.data.clone()
    } else {
        let mut coords = vec![0; nd];
        input
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                unravel(i, &in_ext, &mut coords);
                apply_steps(&reg, &g.id, &g.ops.pre, x, &coords, &pre_params)
            })
            .collect::<Result<_, _>>()?
    };

    let taps: Vec<DimTaps> = dims.iter().map(|&d| dim_taps(d, g)).collect::<Result<_, _>>()?;
    let out_ext: Vec<usize> = taps.iter().map(|t| t.out_extent).collect();
    let ks_ext: Vec<usize> = taps.iter().map(|t| t.nks).collect();
    let k_strides = strides_of(&g.kernel_shape());
    let ks_total: usize = ks_ext.iter().product();
    let n_out = element_count(&out_shape);

    let reduce = g.ops.reduce;
    let main = g.ops.main;
    let mut out = Vec::with_capacity(n_out);
    let mut oc = vec![0usize; nd];
    let mut kc = vec![0usize; nd];
    for o in 0..n_out {
        unravel(o, &out_ext, &mut oc);
        let rows: Vec<&[(Option<usize>, usize)]> = (0..nd)
            .map(|j| &taps[j].taps[oc[j] * ks_ext[j]..(oc[j] + 1) * ks_ext[j]])
            .collect();
        kc.fill(0);
        let mut acc = reduce.identity();
        for _ in 0..ks_total {
            let mut in_idx = 0usize;
            let mut k_idx = 0usize;
            let mut padded = false;
            for j in 0..nd {
                let (ii, kk) = rows[j][kc[j]];
                match ii {
                    Some(ii) => in_idx += ii * in_strides[j],
                    None => {
                        padded = true;
                        break;
                    }
                }
                k_idx += kk * k_strides[j];
            }
            if !padded {
                let kv = kernel.map_or(0.0, |t| t.data[k_idx]);
                acc = reduce.combine(acc, main.apply(pre_input[in_idx], kv));
            }
            for j in (0..nd).rev() {
                kc[j] += 1;
                if kc[j] < ks_ext[j] {
                    break;
                }
                kc[j] = 0;
            }
        }
        out.push(apply_steps(&reg, &g.id, &g.ops.post, acc, &oc, &post_params)?);
    }
    Ok(Tensor {
        shape: out_shape,
        data: out,
    })
}

/// Every tensor materialized by a chain run.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainRun {
    pub tensors: BTreeMap<String, Tensor>,
    pub outputs: Vec<String>,
}

impl ChainRun {
    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.tensors.get(id)
    }

    pub fn designated(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.outputs.iter().filter_map(|o| self.tensors.get_key_value(o))
    }
}

fn concat(axis: DimName, parts: &[&Tensor], shape: &Shape) -> Tensor {
    let axis_pos = shape.keys().position(|d| *d == axis).unwrap_or(0);
    let ext: Vec<usize> = shape.values().map(|&e| e as usize).collect();
    let outer: usize = ext[..axis_pos].iter().product();
    let mut data = Vec::with_capacity(element_count(shape));
    for o in 0..outer {
        for p in parts {
            let chunk = p.len() / outer;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor {
        shape: shape.clone(),
        data,
    }
}

fn materialize(
    chain: &Chain,
    id: &str,
    tensors: &mut BTreeMap<String, Tensor>,
) -> Result<(), ExecError> {
    if tensors.contains_key(id) {
        return Ok(());
    }
    let decl = chain
        .tensors
        .get(id)
        .ok_or_else(|| ExecError::Unknown(id.to_string()))?;
    match &decl.source {
        TensorSource::Concat { axis, parts } => {
            for p in parts {
                materialize(chain, p, tensors)?;
            }
            let refs: Vec<&Tensor> = parts.iter().map(|p| &tensors[p]).collect();
            let t = concat(*axis, &refs, &decl.shape);
            tensors.insert(id.to_string(), t);
            Ok(())
        }
        TensorSource::Input | TensorSource::Param => Err(ExecError::Unbound(id.to_string())),
        TensorSource::Node => Err(ExecError::Unknown(id.to_string())),
    }
}

/// Execute a chain in node order, retaining every intermediate tensor.
pub fn exec_chain(chain: &Chain, bindings: &BTreeMap<String, Tensor>) -> Result<ChainRun, ExecError> {
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for (id, decl) in chain.externals() {
        let t = bindings
            .get(id)
            .ok_or_else(|| ExecError::Unbound(id.clone()))?;
        if t.shape != decl.shape {
            return Err(shape_error(id, "binding", &t.shape, &decl.shape));
        }
        tensors.insert(id.clone(), t.clone());
    }
    for g in &chain.nodes {
        for t in Chain::reads(g) {
            materialize(chain, t, &mut tensors)?;
        }
        let input = &tensors[&g.input_ref];
        let kernel = g.kernel_ref.as_ref().map(|k| &tensors[k]);
        let params: Vec<&Tensor> = g.fused_params.iter().map(|p| &tensors[&p.tensor]).collect();
        let out = exec_gconv(g, input, kernel, &params)?;
        tensors.insert(g.output_id.clone(), out);
    }
    for o in &chain.outputs {
        materialize(chain, o, &mut tensors)?;
    }
    Ok(ChainRun {
        tensors,
        outputs: chain.outputs.clone(),
    })
}

/// Compare a backward chain's input gradient with central finite differences
/// of the scalar loss `sum(O * gO)` over the forward chain. Returns the
/// maximum absolute deviation.
///
/// The backward chain's externals are bound from `inputs`, `grad` and the
/// forward run's tensors of the same name.
pub fn grad_check(
    fp_chain: &Chain,
    bp_chain: &Chain,
    inputs: &BTreeMap<String, Tensor>,
    wrt: &str,
    grad: (&str, &Tensor),
    step: f64,
) -> Result<f64, ExecError> {
    let fp_out = fp_chain
        .outputs
        .first()
        .ok_or_else(|| ExecError::Unknown("forward output".into()))?
        .clone();
    let loss = |bind: &BTreeMap<String, Tensor>| -> Result<f64, ExecError> {
        let run = exec_chain(fp_chain, bind)?;
        let o = &run.tensors[&fp_out];
        Ok(o.data.iter().zip(&grad.1.data).map(|(a, b)| a * b).sum())
    };

    let fwd = exec_chain(fp_chain, inputs)?;
    let mut bp_bind = BTreeMap::new();
    for (id, _) in bp_chain.externals() {
        let t = if id == grad.0 {
            grad.1.clone()
        } else if let Some(t) = fwd.tensors.get(id).or_else(|| inputs.get(id)) {
            t.clone()
        } else {
            return Err(ExecError::Unbound(id.clone()));
        };
        bp_bind.insert(id.clone(), t);
    }
    let bp = exec_chain(bp_chain, &bp_bind)?;
    let g_in = bp
        .designated()
        .next()
        .map(|(_, t)| t.clone())
        .ok_or_else(|| ExecError::Unknown("backward output".into()))?;

    let x0 = inputs
        .get(wrt)
        .ok_or_else(|| ExecError::Unbound(wrt.to_string()))?;
    let mut worst: f64 = 0.0;
    let mut bind = inputs.clone();
    for i in 0..x0.len() {
        let mut plus = x0.clone();
        plus.data[i] += step;
        bind.insert(wrt.to_string(), plus);
        let lp = loss(&bind)?;
        let mut minus = x0.clone();
        minus.data[i] -= step;
        bind.insert(wrt.to_string(), minus);
        let lm = loss(&bind)?;
        let fd = (lp - lm) / (2.0 * step);
        worst = worst.max((fd - g_in.data[i]).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gconv::{DimParams, MainOp, Operators, ReduceOp};

    fn one_d(id: &str, dp: DimParams) -> GConv {
        GConv::new(id, "x").with_dims([(DimName::W, dp)])
    }

    fn t1(data: &[f64]) -> Tensor {
        Tensor::from_vec([(DimName::W, data.len() as u64)].into_iter().collect(), data.to_vec())
            .unwrap()
    }

    /// Straight transcription of the 1-D loop nest.
    fn naive_1d(dp: &DimParams, x: &[f64], k: &[f64]) -> Vec<f64> {
        let ipe = ((dp.nopc - 1) * dp.s + dp.nks - 2 * dp.ps) as i64;
        let mut out = vec![];
        for g in 0..dp.ng {
            for op in 0..dp.nop {
                for opc in 0..dp.nopc {
                    let mut acc = 0.0;
                    for ks in 0..dp.nks {
                        let pos = (opc * dp.s + ks) as i64 - dp.ps as i64;
                        if pos >= 0 && pos < ipe {
                            acc += x[(g as i64 * ipe + pos) as usize]
                                * k[((g * dp.nop + op) * dp.nks + ks) as usize];
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn sliding_sum_example() {
        let g = one_d(
            "c",
            DimParams {
                nks: 3,
                nopc: 2,
                ..Default::default()
            },
        )
        .with_kernel("k")
        .with_ops(Operators::mac());
        let out = exec_gconv(&g, &t1(&[1., 2., 3., 4.]), Some(&t1(&[1., 1., 1.])), &[]).unwrap();
        assert_eq!(out.data, vec![6.0, 9.0]);
    }

    #[test]
    fn pointwise_scaling_example() {
        let g = one_d("c", DimParams::outputs(2))
            .with_kernel("k")
            .with_ops(Operators {
                main: MainOp::Multiply,
                ..Default::default()
            });
        let out = exec_gconv(&g, &t1(&[3., 5.]), Some(&t1(&[2.])), &[]).unwrap();
        assert_eq!(out.data, vec![6.0, 10.0]);
    }

    #[test]
    fn windowed_max_example() {
        let g = one_d(
            "m",
            DimParams {
                nks: 2,
                s: 2,
                nopc: 2,
                ..Default::default()
            },
        )
        .with_ops(Operators {
            reduce: ReduceOp::Max,
            ..Default::default()
        });
        let out = exec_gconv(&g, &t1(&[1., 3., 2., 5.]), None, &[]).unwrap();
        assert_eq!(out.data, vec![3.0, 5.0]);
    }

    #[test]
    fn kernel_shape_mismatch_names_dimension() {
        let g = one_d("c", DimParams::reduce(3))
            .with_kernel("k")
            .with_ops(Operators::mac());
        let err = exec_gconv(&g, &t1(&[1., 2., 3.]), Some(&t1(&[1.])), &[]).unwrap_err();
        assert!(matches!(err, ExecError::Shape { dim: Some(DimName::W), .. }));
    }

    #[test]
    fn unresolved_lut_is_a_registry_error() {
        let mut g = one_d("c", DimParams::default());
        g.ops.post.push(PointOp::Lut(crate::gconv::Lut {
            name: "missing".into(),
            args: vec![],
        }));
        let err = exec_gconv(&g, &t1(&[1.]), None, &[]).unwrap_err();
        assert!(matches!(err, ExecError::Registry { .. }));
    }

    proptest::proptest! {
        #[test]
        fn matches_naive_1d(ng in 1u64..=3, nop in 1u64..=3, nks in 1u64..=4, nopc in 1u64..=4, s in 1u64..=3, ps in 0u64..=2, seed in 0u64..1000) {
            let dp = DimParams { ng, nop, nks, nopc, s, ps };
            proptest::prop_assume!(2 * ps < (nopc - 1) * s + nks);
            let ipe = ((nopc - 1) * s + nks - 2 * ps) as usize;
            let x: Vec<f64> = (0..ng as usize * ipe).map(|i| ((i as u64 * 7 + seed) % 11) as f64 - 5.0).collect();
            let k: Vec<f64> = (0..(ng * nop * nks) as usize).map(|i| ((i as u64 * 3 + seed) % 5) as f64 - 2.0).collect();
            let g = one_d("c", dp).with_kernel("k").with_ops(Operators::mac());
            let out = exec_gconv(&g, &t1(&x), Some(&t1(&k)), &[]).unwrap();
            proptest::prop_assert_eq!(out.data, naive_1d(&dp, &x, &k));
        }
    }
}
