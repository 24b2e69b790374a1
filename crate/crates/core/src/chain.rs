//! GCONV chains: a DAG of GCONV nodes linked through a tensor table.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gconv::{validate, DimName, GConv, Shape, Slot, Violation};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum TensorSource {
    /// External activation or gradient supplied at run time.
    Input,
    /// External parameter (weights, per-channel factors).
    Param,
    /// Produced by the GCONV node of the same id.
    Node,
    /// Zero-cost alias concatenating other tensors along one dimension.
    Concat { axis: DimName, parts: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDecl {
    pub shape: Shape,
    #[serde(flatten)]
    pub source: TensorSource,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    /// Nodes in a valid execution (topological) order.
    pub nodes: Vec<GConv>,
    pub tensors: BTreeMap<String, TensorDecl>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChainError {
    #[error("node `{node}`: {violations:?}")]
    InvalidNode {
        node: String,
        violations: Vec<Violation>,
    },
    #[error("node `{node}`: {msg}")]
    Geometry { node: String, msg: String },
    #[error("duplicate tensor id `{0}`")]
    Duplicate(String),
    #[error("node `{node}` references unknown tensor `{tensor}`")]
    UnknownTensor { node: String, tensor: String },
    #[error("node `{node}` reads `{tensor}` before it is produced (cycle or bad order)")]
    NotYetProduced { node: String, tensor: String },
    #[error("node `{node}`: {role} `{tensor}` has shape {got:?}, expected {want:?}")]
    ShapeMismatch {
        node: String,
        role: &'static str,
        tensor: String,
        got: Shape,
        want: Shape,
    },
    #[error("concat `{0}` has inconsistent parts")]
    BadConcat(String),
    #[error("designated output `{0}` does not exist")]
    UnknownOutput(String),
    #[error("chain graph is cyclic")]
    Cyclic,
}

/// Shape a fused parameter must have against `target`.
pub fn broadcast_shape(target: &Shape, broadcast: &[DimName]) -> Shape {
    target
        .iter()
        .map(|(&d, &e)| (d, if broadcast.contains(&d) { 1 } else { e }))
        .collect()
}

impl Chain {
    pub fn node(&self, id: &str) -> Option<&GConv> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn externals(&self) -> impl Iterator<Item = (&String, &TensorDecl)> {
        self.tensors
            .iter()
            .filter(|(_, t)| matches!(t.source, TensorSource::Input | TensorSource::Param))
    }

    /// Every tensor a node reads: input, kernel and fused parameters.
    pub fn reads(g: &GConv) -> impl Iterator<Item = &String> {
        std::iter::once(&g.input_ref)
            .chain(g.kernel_ref.iter())
            .chain(g.fused_params.iter().map(|p| &p.tensor))
    }

    /// Node tensors a tensor reference ultimately depends on (through concat aliases).
    pub fn producers_of(&self, tensor: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut stack = vec![tensor.to_string()];
        while let Some(t) = stack.pop() {
            match self.tensors.get(&t).map(|d| &d.source) {
                Some(TensorSource::Node) => {
                    out.insert(t);
                }
                Some(TensorSource::Concat { parts, .. }) => stack.extend(parts.iter().cloned()),
                _ => {}
            }
        }
        out
    }

    /// Places a tensor is read: node inputs, kernels, fused params, concat parts, outputs.
    pub fn use_count(&self, tensor: &str) -> usize {
        let node_reads = self
            .nodes
            .iter()
            .flat_map(Chain::reads)
            .filter(|t| *t == tensor)
            .count();
        let concat_reads = self
            .tensors
            .values()
            .filter(|d| matches!(&d.source, TensorSource::Concat { parts, .. } if parts.iter().any(|p| p == tensor)))
            .count();
        let outs = self.outputs.iter().filter(|o| *o == tensor).count();
        node_reads + concat_reads + outs
    }

    /// Reorder nodes topologically (stable). Fails on cycles.
    pub fn toposort(&mut self) -> Result<(), ChainError> {
        let n = self.nodes.len();
        let index: BTreeMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, g)| (g.output_id.as_str(), i))
            .collect();
        let deps: Vec<BTreeSet<usize>> = self
            .nodes
            .iter()
            .map(|g| {
                Chain::reads(g)
                    .flat_map(|t| self.producers_of(t))
                    .filter_map(|p| index.get(p.as_str()).copied())
                    .collect()
            })
            .collect();
        let mut placed = vec![false; n];
        let mut order = Vec::with_capacity(n);
        while order.len() < n {
            let next = (0..n).find(|&i| !placed[i] && deps[i].iter().all(|&d| placed[d]));
            match next {
                Some(i) => {
                    placed[i] = true;
                    order.push(i);
                }
                None => return Err(ChainError::Cyclic),
            }
        }
        let mut old: Vec<Option<GConv>> = std::mem::take(&mut self.nodes).into_iter().map(Some).collect();
        self.nodes = order.into_iter().map(|i| old[i].take().unwrap()).collect();
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ChainError> {
        let mut produced: BTreeSet<&str> = self
            .tensors
            .iter()
            .filter(|(_, t)| matches!(t.source, TensorSource::Input | TensorSource::Param))
            .map(|(k, _)| k.as_str())
            .collect();
        let mut seen_nodes = BTreeSet::new();

        for g in &self.nodes {
            if !seen_nodes.insert(g.id.as_str()) {
                return Err(ChainError::Duplicate(g.id.clone()));
            }
            validate(g).map_err(|violations| ChainError::InvalidNode {
                node: g.id.clone(),
                violations,
            })?;
            let input_shape = g.input_shape().map_err(|e| ChainError::Geometry {
                node: g.id.clone(),
                msg: e.to_string(),
            })?;
            self.check_read(g, "input", &g.input_ref, &input_shape, &produced)?;
            if let Some(k) = &g.kernel_ref {
                self.check_read(g, "kernel", k, &g.kernel_shape(), &produced)?;
            }
            let out_shape = g.output_shape();
            for p in &g.fused_params {
                let target = match p.slot {
                    Slot::Pre => &input_shape,
                    Slot::Post => &out_shape,
                };
                let want = broadcast_shape(target, &p.broadcast);
                self.check_read(g, "fused param", &p.tensor, &want, &produced)?;
            }
            match self.tensors.get(&g.output_id) {
                Some(TensorDecl {
                    shape,
                    source: TensorSource::Node,
                }) if *shape == out_shape => {}
                Some(d) => {
                    return Err(ChainError::ShapeMismatch {
                        node: g.id.clone(),
                        role: "output",
                        tensor: g.output_id.clone(),
                        got: d.shape.clone(),
                        want: out_shape,
                    })
                }
                None => {
                    return Err(ChainError::UnknownTensor {
                        node: g.id.clone(),
                        tensor: g.output_id.clone(),
                    })
                }
            }
            produced.insert(g.output_id.as_str());
        }
        for (id, decl) in &self.tensors {
            if let TensorSource::Concat { axis, parts } = &decl.source {
                self.check_concat(id, *axis, parts, &decl.shape)?;
            }
        }
        let node_outputs: BTreeSet<&str> = self.nodes.iter().map(|g| g.output_id.as_str()).collect();
        for (id, decl) in &self.tensors {
            if decl.source == TensorSource::Node && !node_outputs.contains(id.as_str()) {
                return Err(ChainError::UnknownTensor {
                    node: id.clone(),
                    tensor: id.clone(),
                });
            }
        }
        for o in &self.outputs {
            if !self.tensors.contains_key(o) {
                return Err(ChainError::UnknownOutput(o.clone()));
            }
        }
        Ok(())
    }

    fn available(&self, t: &str, produced: &BTreeSet<&str>) -> bool {
        match self.tensors.get(t).map(|d| &d.source) {
            Some(TensorSource::Concat { parts, .. }) => {
                parts.iter().all(|p| self.available(p, produced))
            }
            Some(_) => produced.contains(t),
            None => false,
        }
    }

    fn check_read(
        &self,
        g: &GConv,
        role: &'static str,
        tensor: &str,
        want: &Shape,
        produced: &BTreeSet<&str>,
    ) -> Result<(), ChainError> {
        let decl = self.tensors.get(tensor).ok_or_else(|| ChainError::UnknownTensor {
            node: g.id.clone(),
            tensor: tensor.to_string(),
        })?;
        if !self.available(tensor, produced) {
            return Err(ChainError::NotYetProduced {
                node: g.id.clone(),
                tensor: tensor.to_string(),
            });
        }
        if decl.shape != *want {
            return Err(ChainError::ShapeMismatch {
                node: g.id.clone(),
                role,
                tensor: tensor.to_string(),
                got: decl.shape.clone(),
                want: want.clone(),
            });
        }
        Ok(())
    }

    fn check_concat(
        &self,
        id: &str,
        axis: DimName,
        parts: &[String],
        shape: &Shape,
    ) -> Result<(), ChainError> {
        let bad = || ChainError::BadConcat(id.to_string());
        let mut total = 0;
        for p in parts {
            let ps = &self.tensors.get(p).ok_or_else(bad)?.shape;
            if ps.len() != shape.len() {
                return Err(bad());
            }
            for (d, e) in ps {
                if *d == axis {
                    total += e;
                } else if shape.get(d) != Some(e) {
                    return Err(bad());
                }
            }
        }
        if parts.is_empty() || shape.get(&axis) != Some(&total) {
            return Err(bad());
        }
        Ok(())
    }
}
