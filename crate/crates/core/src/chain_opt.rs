//! Chain-level optimizations: fusion of reduce-free GCONVs into their
//! neighbours, and loop exchange for producer/consumer format consistency.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::accel::{apply_exchange, legal_exchanges, Exchange, UnrollPlan};
use crate::chain::{Chain, TensorSource};
use crate::gconv::{DimName, FusedParam, GConv, LoopParam, MainOp, PointOp, ReduceOp, Slot};

/// Whether `g` is a pure elementwise map that can ride in another node's
/// pre or post slot.
pub fn is_fusable(g: &GConv) -> bool {
    if g.ops.reduce != ReduceOp::None {
        return false;
    }
    let elementwise = g
        .dims
        .values()
        .all(|p| p.nks == 1 && p.nop == 1 && p.s == 1 && p.ps == 0);
    // a kernel indexed by group but repeated across opc is not a broadcast
    let kernel_ok = g.kernel_ref.is_none() || g.dims.values().all(|p| p.ng == 1 || p.nopc == 1);
    elementwise && kernel_ok
}

/// The node's operators as one elementwise step sequence, with its own and
/// its kernel's parameters re-targeted to `slot`.
fn as_steps(g: &GConv, slot: Slot, base: usize) -> (Vec<PointOp>, Vec<FusedParam>) {
    let mut params: Vec<FusedParam> = g
        .fused_params
        .iter()
        .map(|p| FusedParam {
            slot,
            ..p.clone()
        })
        .collect();
    let shift = |steps: &[PointOp]| -> Vec<PointOp> {
        steps
            .iter()
            .map(|s| match s {
                PointOp::WithParam { op, param } => PointOp::WithParam {
                    op: *op,
                    param: param + base,
                },
                other => other.clone(),
            })
            .collect()
    };
    let mut steps = shift(&g.ops.pre);
    match g.ops.main {
        MainOp::Identity => {}
        MainOp::SquareOfInput => steps.push(PointOp::Square),
        op => {
            let out = g.output_shape();
            let ks = g.kernel_shape();
            let broadcast: Vec<DimName> = out
                .iter()
                .filter(|(d, &e)| e > 1 && ks.get(d).copied().unwrap_or(1) == 1)
                .map(|(&d, _)| d)
                .collect();
            steps.push(PointOp::WithParam {
                op,
                param: base + params.len(),
            });
            params.push(FusedParam {
                slot,
                tensor: g.kernel_ref.clone().unwrap_or_default(),
                broadcast,
            });
        }
    }
    steps.extend(shift(&g.ops.post));
    (steps, params)
}

fn only_input_reads(chain: &Chain, tensor: &str) -> Option<Vec<usize>> {
    if chain.outputs.iter().any(|o| o == tensor) {
        return None;
    }
    let concat = chain.tensors.values().any(
        |d| matches!(&d.source, TensorSource::Concat { parts, .. } if parts.iter().any(|p| p == tensor)),
    );
    if concat {
        return None;
    }
    let mut users = Vec::new();
    for (i, g) in chain.nodes.iter().enumerate() {
        let other = g.kernel_ref.as_deref() == Some(tensor)
            || g.fused_params.iter().any(|p| p.tensor == tensor);
        if other {
            return None;
        }
        if g.input_ref == tensor {
            users.push(i);
        }
    }
    (!users.is_empty()).then_some(users)
}

/// Absorb `chain.nodes[fi]` into its producer's post slot.
fn fuse_into_producer(chain: &Chain, fi: usize) -> Option<Chain> {
    let f = &chain.nodes[fi];
    let pi = chain.nodes.iter().position(|g| g.output_id == f.input_ref)?;
    let p = &chain.nodes[pi];
    if chain.use_count(&p.output_id) != 1 || p.output_shape() != f.output_shape() {
        return None;
    }
    if f.kernel_ref.as_deref() == Some(p.output_id.as_str()) {
        return None;
    }
    let mut out = chain.clone();
    let (steps, params) = as_steps(f, Slot::Post, p.fused_params.len());
    let old = p.output_id.clone();
    let node = &mut out.nodes[pi];
    node.ops.post.extend(steps);
    node.fused_params.extend(params);
    node.output_id = f.output_id.clone();
    out.tensors.remove(&old);
    out.nodes.remove(fi);
    out.toposort().ok()?;
    Some(out)
}

/// Absorb `chain.nodes[fi]` into the pre slot of every consumer.
fn fuse_into_consumers(chain: &Chain, fi: usize) -> Option<Chain> {
    let f = &chain.nodes[fi];
    let users = only_input_reads(chain, &f.output_id)?;
    let mut out = chain.clone();
    for &ci in &users {
        let c = &mut out.nodes[ci];
        let (steps, params) = as_steps(f, Slot::Pre, c.fused_params.len());
        let mut pre = steps;
        pre.append(&mut c.ops.pre);
        c.ops.pre = pre;
        c.fused_params.extend(params);
        c.input_ref = f.input_ref.clone();
    }
    out.tensors.remove(&f.output_id);
    out.nodes.remove(fi);
    out.toposort().ok()?;
    Some(out)
}

/// Fuse reduce-free nodes until nothing changes. Producer-post fusion is
/// tried first; consumer-pre fusion duplicates the steps into each consumer.
pub fn fuse_chain(chain: &Chain) -> Chain {
    let mut cur = chain.clone();
    'outer: loop {
        for fi in 0..cur.nodes.len() {
            if !is_fusable(&cur.nodes[fi]) {
                continue;
            }
            if let Some(next) = fuse_into_producer(&cur, fi).or_else(|| fuse_into_consumers(&cur, fi)) {
                if next.validate().is_ok() {
                    cur = next;
                    continue 'outer;
                }
            }
        }
        return cur;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Producer,
    Consumer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatEntry {
    pub param: LoopParam,
    pub dim: DimName,
    pub factor: u64,
}

/// Innermost layout-determining loops, innermost first.
pub type FormatDesc = Vec<FormatEntry>;

/// A producer's storage format comes from the innermost opc/op/g entries of
/// its output-format spatial list; a consumer's loading format from the
/// innermost ks/opc/g entries of its temporal list.
pub fn derive_formats(plan: &UnrollPlan, role: Role) -> FormatDesc {
    let to = |e: &crate::accel::UnrollEntry| FormatEntry {
        param: e.param,
        dim: e.dim,
        factor: e.factor,
    };
    match role {
        Role::Producer => plan
            .spatial
            .get(plan.output_format_dim)
            .map(|l| {
                l.entries
                    .iter()
                    .rev()
                    .take_while(|e| e.param != LoopParam::Ks)
                    .map(to)
                    .collect()
            })
            .unwrap_or_default(),
        Role::Consumer => plan
            .temporal
            .iter()
            .take_while(|e| e.param != LoopParam::Op)
            .map(to)
            .collect(),
    }
}

/// Length of the common prefix: same dimension, factors dividing one another.
pub fn consistency_depth(producer: &FormatDesc, consumer: &FormatDesc) -> usize {
    producer
        .iter()
        .zip(consumer)
        .take_while(|(p, c)| p.dim == c.dim && (p.factor % c.factor == 0 || c.factor % p.factor == 0))
        .count()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedExchange {
    pub node: String,
    pub exchange: Exchange,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeReport {
    pub producer: String,
    pub consumer: String,
    pub tensor: String,
    pub depth_before: usize,
    pub depth_after: usize,
    pub consistent: bool,
    pub exchanges: Vec<AppliedExchange>,
}

fn edge_depth(plans: &BTreeMap<String, UnrollPlan>, p: &str, c: &str) -> usize {
    consistency_depth(
        &derive_formats(&plans[p], Role::Producer),
        &derive_formats(&plans[c], Role::Consumer),
    )
}

/// Best single exchange on `node` for this edge, if it improves the depth.
fn best_step(
    plans: &BTreeMap<String, UnrollPlan>,
    node: &str,
    producer: &str,
    consumer: &str,
    allow: impl Fn(&Exchange) -> bool,
) -> Option<(Exchange, UnrollPlan, usize)> {
    let base = edge_depth(plans, producer, consumer);
    let plan = &plans[node];
    let mut best: Option<(Exchange, UnrollPlan, usize)> = None;
    for x in legal_exchanges(plan).into_iter().filter(|x| allow(x)) {
        let after = apply_exchange(plan, x);
        let mut trial = plans.clone();
        trial.insert(node.to_string(), after.clone());
        let d = edge_depth(&trial, producer, consumer);
        if d > best.as_ref().map_or(base, |b| b.2) {
            best = Some((x, after, d));
        }
    }
    best
}

/// Greedy per-edge loop exchange in topological order: consumer temporal
/// swaps first, then producer exchanges. Every applied exchange is legal, so
/// modeled cycles and movement are unchanged.
pub fn exchange_for_consistency(
    chain: &Chain,
    plans: &mut BTreeMap<String, UnrollPlan>,
) -> Vec<EdgeReport> {
    let mut reports = Vec::new();
    for c in &chain.nodes {
        let Some(p) = chain.nodes.iter().find(|g| g.output_id == c.input_ref) else {
            continue;
        };
        if !plans.contains_key(&p.id) || !plans.contains_key(&c.id) {
            continue;
        }
        let before = edge_depth(plans, &p.id, &c.id);
        let mut applied = Vec::new();
        let phases: [(&str, fn(&Exchange) -> bool); 2] = [
            (&c.id, |x| {
                matches!(x, Exchange::Temporal { .. } | Exchange::SpatialTemporal { .. })
            }),
            (&p.id, |_| true),
        ];
        for (node, allow) in phases {
            // each step strictly improves a bounded depth
            while let Some((x, plan, _)) = best_step(plans, node, &p.id, &c.id, allow) {
                plans.insert(node.to_string(), plan);
                applied.push(AppliedExchange {
                    node: node.to_string(),
                    exchange: x,
                });
            }
        }
        let after = edge_depth(plans, &p.id, &c.id);
        let full = derive_formats(&plans[&p.id], Role::Producer)
            .len()
            .min(derive_formats(&plans[&c.id], Role::Consumer).len());
        reports.push(EdgeReport {
            producer: p.id.clone(),
            consumer: c.id.clone(),
            tensor: c.input_ref.clone(),
            depth_before: before,
            depth_after: after,
            consistent: after == full,
            exchanges: applied,
        });
    }
    reports
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accel::{map_gconv, preset, Phase, UnrollEntry};
    use crate::gconv::{DimParams, Lut, Operators};
    use crate::interp::exec_chain;
    use crate::lowering::batchnorm_chains;
    use crate::tensor::{bchw, Tensor};
    use crate::chain::TensorDecl;

    fn e(param: LoopParam, dim: DimName, factor: u64) -> UnrollEntry {
        UnrollEntry {
            param,
            dim,
            factor,
            phase: Phase::Temporal,
        }
    }

    fn conv_relu_conv() -> Chain {
        let shape = bchw(1, 2, 4, 4);
        let conv = |id: &str, input: &str, w: &str| {
            GConv::new(id, input)
                .with_kernel(w)
                .with_ops(Operators::mac())
                .with_dims([
                    (DimName::B, DimParams::default()),
                    (DimName::C, DimParams { nop: 2, nks: 2, ..Default::default() }),
                    (DimName::H, DimParams { nks: 3, nopc: 4, ps: 1, ..Default::default() }),
                    (DimName::W, DimParams { nks: 3, nopc: 4, ps: 1, ..Default::default() }),
                ])
        };
        let relu = GConv::new("r", "a")
            .with_ops(Operators {
                post: vec![PointOp::Lut(Lut::relu())],
                ..Default::default()
            })
            .with_dims([
                (DimName::B, DimParams::grouped(1)),
                (DimName::C, DimParams::grouped(2)),
                (DimName::H, DimParams::grouped(4)),
                (DimName::W, DimParams::grouped(4)),
            ]);
        let mut c = Chain::default();
        let decl = |shape, source| TensorDecl { shape, source };
        c.tensors.insert("x".into(), decl(shape.clone(), TensorSource::Input));
        for w in ["w1", "w2"] {
            c.tensors.insert(w.into(), decl(bchw(1, 4, 3, 3), TensorSource::Param));
        }
        for g in [conv("a", "x", "w1"), relu, conv("b", "r", "w2")] {
            c.tensors.insert(g.output_id.clone(), decl(g.output_shape(), TensorSource::Node));
            c.nodes.push(g);
        }
        c.outputs = vec!["b".into()];
        c.validate().unwrap();
        c
    }

    fn random(shape: crate::gconv::Shape, seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) % 2001) as f64 / 1000.0 - 1.0
        })
    }

    #[test]
    fn relu_between_convs_joins_the_first() {
        let c = conv_relu_conv();
        let f = fuse_chain(&c);
        assert_eq!(f.nodes.len(), 2);
        assert_eq!(f.nodes[0].ops.post, vec![PointOp::Lut(Lut::relu())]);
        let bind: BTreeMap<String, Tensor> = [
            ("x".to_string(), random(bchw(1, 2, 4, 4), 1)),
            ("w1".to_string(), random(bchw(1, 4, 3, 3), 2)),
            ("w2".to_string(), random(bchw(1, 4, 3, 3), 3)),
        ]
        .into();
        let a = exec_chain(&c, &bind).unwrap();
        let b = exec_chain(&f, &bind).unwrap();
        assert_eq!(a.get("b").unwrap().data, b.get("b").unwrap().data);
        assert_eq!(fuse_chain(&f), f);
    }

    #[test]
    fn batchnorm_forward_loses_fp2() {
        let (fp, _) = batchnorm_chains(&bchw(2, 3, 2, 2), 1e-5).unwrap();
        let f = fuse_chain(&fp);
        assert_eq!((fp.nodes.len(), f.nodes.len()), (4, 3));
        assert!(f.node("bn/fp2").is_none());
    }

    #[test]
    fn lone_conv_is_unchanged() {
        let mut c = conv_relu_conv();
        c.nodes.truncate(1);
        c.tensors.retain(|k, _| ["x", "w1", "a"].contains(&k.as_str()));
        c.outputs = vec!["a".into()];
        assert_eq!(fuse_chain(&c), c);
    }

    #[test]
    fn formats_from_hand_plans() {
        let g = GConv::new("g", "x");
        let mut p = map_gconv(&g, &preset("eyeriss").unwrap());
        assert!(derive_formats(&p, Role::Producer).is_empty());
        assert!(derive_formats(&p, Role::Consumer).is_empty());
        p.spatial[1].entries.push(UnrollEntry {
            phase: Phase::Spatial,
            ..e(LoopParam::Opc, DimName::C, 4)
        });
        assert_eq!(
            derive_formats(&p, Role::Producer),
            vec![FormatEntry { param: LoopParam::Opc, dim: DimName::C, factor: 4 }]
        );
        p.temporal = vec![e(LoopParam::Ks, DimName::C, 4), e(LoopParam::Ks, DimName::W, 3), e(LoopParam::Op, DimName::C, 2)];
        assert_eq!(
            derive_formats(&p, Role::Consumer),
            vec![
                FormatEntry { param: LoopParam::Ks, dim: DimName::C, factor: 4 },
                FormatEntry { param: LoopParam::Ks, dim: DimName::W, factor: 3 },
            ]
        );
    }

    #[test]
    fn depth_matches_dims_with_divisible_factors() {
        let f = |d, n| FormatEntry { param: LoopParam::Opc, dim: d, factor: n };
        assert_eq!(consistency_depth(&vec![f(DimName::W, 3)], &vec![f(DimName::W, 6)]), 1);
        assert_eq!(consistency_depth(&vec![f(DimName::W, 4)], &vec![f(DimName::W, 6)]), 0);
        assert_eq!(consistency_depth(&vec![f(DimName::C, 4)], &vec![f(DimName::W, 4)]), 0);
    }
}
