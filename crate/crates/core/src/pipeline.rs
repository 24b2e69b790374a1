//! End-to-end compilation: lower, fuse, map, exchange for consistency,
//! analyze and emit, plus seeded verification against the reference layers.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accel::{map_gconv, validate_plan, AcceleratorSpec, UnrollPlan};
use crate::chain::{Chain, TensorSource};
use crate::chain_opt::{exchange_for_consistency, fuse_chain, EdgeReport};
use crate::interp::exec_chain;
use crate::isa::{emit_instructions, InstructionStream};
use crate::lowering::{lower_network, Lowered, NetworkIR};
use crate::perf::{analyze_chain, PerfReport};
use crate::reference::reference_network;
use crate::tensor::Tensor;

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Lower,
    Fuse,
    Map,
    Exchange,
    Analyze,
    Emit,
    Verify,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Lower => "lower",
            Stage::Fuse => "fuse",
            Stage::Map => "map",
            Stage::Exchange => "exchange",
            Stage::Analyze => "analyze",
            Stage::Emit => "emit",
            Stage::Verify => "verify",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{stage} stage: {msg}")]
pub struct PipelineError {
    pub stage: Stage,
    pub msg: String,
}

fn fail(stage: Stage) -> impl Fn(&dyn fmt::Display) -> PipelineError {
    move |e| PipelineError {
        stage,
        msg: e.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PipelineOptions {
    pub fuse: bool,
    pub exchange: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            fuse: true,
            exchange: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileReport {
    pub version: u32,
    pub accelerator: String,
    pub fused: bool,
    pub exchanged: bool,
    pub unfused_chain_length: usize,
    pub chain_length: usize,
    pub perf: PerfReport,
    pub edges: Vec<EdgeReport>,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub lowered: Lowered,
    /// The chain after optional fusion.
    pub chain: Chain,
    pub plans: BTreeMap<String, UnrollPlan>,
    pub report: CompileReport,
    pub stream: InstructionStream,
}

pub fn lower(net: &NetworkIR) -> Result<Lowered, PipelineError> {
    let l = lower_network(net).map_err(|e| fail(Stage::Lower)(&e))?;
    l.chain.validate().map_err(|e| fail(Stage::Lower)(&e))?;
    Ok(l)
}

pub fn fuse(chain: &Chain) -> Result<Chain, PipelineError> {
    let c = fuse_chain(chain);
    c.validate().map_err(|e| fail(Stage::Fuse)(&e))?;
    Ok(c)
}

/// Map every node and check each plan's invariants.
pub fn map_chain(
    chain: &Chain,
    accel: &AcceleratorSpec,
) -> Result<BTreeMap<String, UnrollPlan>, PipelineError> {
    accel.validate().map_err(|e| fail(Stage::Map)(&e))?;
    chain
        .nodes
        .iter()
        .map(|g| {
            let plan = map_gconv(g, accel);
            validate_plan(&plan).map_err(|v| PipelineError {
                stage: Stage::Map,
                msg: format!("node `{}`: {v:?}", g.id),
            })?;
            Ok((g.id.clone(), plan))
        })
        .collect()
}

pub fn run_pipeline(
    net: &NetworkIR,
    accel: &AcceleratorSpec,
    opts: PipelineOptions,
) -> Result<PipelineOutput, PipelineError> {
    let lowered = lower(net)?;
    let chain = if opts.fuse {
        fuse(&lowered.chain)?
    } else {
        lowered.chain.clone()
    };
    let mut plans = map_chain(&chain, accel)?;
    let edges = if opts.exchange {
        let edges = exchange_for_consistency(&chain, &mut plans);
        for p in plans.values() {
            validate_plan(p).map_err(|v| PipelineError {
                stage: Stage::Exchange,
                msg: format!("node `{}`: {v:?}", p.gconv),
            })?;
        }
        edges
    } else {
        vec![]
    };
    let perf = analyze_chain(&chain, &plans, accel).map_err(|e| fail(Stage::Analyze)(&e))?;
    let stream = emit_instructions(&chain, &plans).map_err(|e| fail(Stage::Emit)(&e))?;
    let report = CompileReport {
        version: REPORT_VERSION,
        accelerator: accel.name.clone(),
        fused: opts.fuse,
        exchanged: opts.exchange,
        unfused_chain_length: lowered.chain.nodes.len(),
        chain_length: chain.nodes.len(),
        perf,
        edges,
    };
    Ok(PipelineOutput {
        lowered,
        chain,
        plans,
        report,
        stream,
    })
}

/// `|a - b| <= rel * max(|a|, |b|) + 1e-9`; exact equality (including
/// equal infinities) always passes.
pub fn within_tolerance(a: f64, b: f64, rel: f64) -> bool {
    a == b || (a - b).abs() <= rel * a.abs().max(b.abs()) + 1e-9
}

/// Random values in `[-1, 1)` for every external input and parameter.
pub fn random_bindings(chain: &Chain, seed: u64) -> BTreeMap<String, Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    chain
        .tensors
        .iter()
        .filter(|(_, t)| matches!(t.source, TensorSource::Input | TensorSource::Param))
        .map(|(id, t)| {
            let v = Tensor::from_fn(t.shape.clone(), |_| rng.gen_range(-1.0..1.0));
            (id.clone(), v)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub seed: u64,
    pub layer: String,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub seeds: u64,
    pub fused: bool,
    /// Layer outputs compared, summed over seeds.
    pub checks: u64,
    pub mismatches: Vec<Mismatch>,
    pub passed: bool,
}

/// Interpret the (optionally fused) chain on `seeds` random bindings and
/// compare every surviving layer output with the reference layers.
pub fn verify_network(net: &NetworkIR, seeds: u64, fused: bool) -> Result<VerifySummary, PipelineError> {
    let lowered = lower(net)?;
    let chain = if fused {
        fuse(&lowered.chain)?
    } else {
        lowered.chain.clone()
    };
    let err = fail(Stage::Verify);
    let mut checks = 0;
    let mut mismatches = vec![];
    for seed in 0..seeds {
        let bindings = random_bindings(&lowered.chain, seed);
        let want = reference_network(net, &bindings).map_err(|e| err(&e))?;
        let run = exec_chain(&chain, &bindings).map_err(|e| err(&e))?;
        for (layer, expected) in &want {
            let Some(got) = lowered.layer_outputs.get(layer).and_then(|t| run.get(t)) else {
                continue;
            };
            checks += 1;
            let ok = got.shape == expected.shape
                && got
                    .data
                    .iter()
                    .zip(&expected.data)
                    .all(|(&a, &b)| within_tolerance(a, b, 1e-5));
            if !ok {
                let max_abs_error = got
                    .data
                    .iter()
                    .zip(&expected.data)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                mismatches.push(Mismatch {
                    seed,
                    layer: layer.clone(),
                    max_abs_error,
                });
            }
        }
    }
    Ok(VerifySummary {
        seeds,
        fused,
        checks,
        passed: mismatches.is_empty() && checks > 0,
        mismatches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accel::preset;
    use crate::network::parse_network;

    const BN_NET: &str = r#"{
        "inputs": [{"id": "x", "shape": {"B": 2, "C": 3, "H": 4, "W": 4}}],
        "layers": [{"id": "bn", "kind": "batch_norm", "inputs": ["x"]}]
    }"#;

    #[test]
    fn fusion_shortens_bn_chain() {
        let net = parse_network(BN_NET).unwrap();
        let accel = preset("eyeriss").unwrap();
        let plain = run_pipeline(&net, &accel, PipelineOptions { fuse: false, exchange: true }).unwrap();
        let fused = run_pipeline(&net, &accel, PipelineOptions::default()).unwrap();
        assert_eq!(plain.report.chain_length, 4);
        assert_eq!(fused.report.chain_length, 3);
        assert_eq!(fused.report.unfused_chain_length, 4);
    }

    #[test]
    fn verify_bn_both_ways() {
        let net = parse_network(BN_NET).unwrap();
        for fused in [false, true] {
            let s = verify_network(&net, 3, fused).unwrap();
            assert!(s.passed, "{s:?}");
        }
    }

    #[test]
    fn stage_is_named_in_errors() {
        let net = parse_network(BN_NET).unwrap();
        let mut accel = preset("tpu").unwrap();
        accel.spatial_dims.clear();
        let e = run_pipeline(&net, &accel, PipelineOptions::default()).unwrap_err();
        assert_eq!(e.stage, Stage::Map);
        assert!(e.to_string().starts_with("map stage: "));
    }

    #[test]
    fn tolerance() {
        assert!(within_tolerance(0.0, 0.0, 1e-5));
        assert!(within_tolerance(1.0, 1.0 + 1e-6, 1e-5));
        assert!(!within_tolerance(1.0, 1.001, 1e-5));
        assert!(within_tolerance(f64::INFINITY, f64::INFINITY, 1e-5));
    }
}
