//! GCONV chain compiler: lowering, fusion, accelerator mapping, analytic
//! performance modeling, interpretation and instruction encoding.

pub mod accel;
pub mod chain;
pub mod chain_opt;
pub mod gconv;
pub mod interp;
pub mod isa;
pub mod lowering;
pub mod network;
pub mod perf;
pub mod pipeline;
pub mod reference;
pub mod tensor;

pub use accel::{
    map_gconv, preset, presets, AcceleratorSpec, Exchange, UnrollEntry, UnrollPlan,
};
pub use chain::{Chain, ChainError, TensorDecl, TensorSource};
pub use gconv::{
    effective_loops, input_extent, output_extent, reuse_profile, validate, DimName, DimParams,
    FusedParam, GConv, GeometryError, LoopParam, Lut, LutRegistry, MainOp, Operators, PointOp,
    ReduceOp, ReuseProfile, Shape, Slot, Violation,
};
pub use interp::{exec_chain, exec_gconv, grad_check, ChainRun, ExecError};
pub use isa::{decode, emit_instructions, encode, InstructionStream, IsaError, Program};
pub use lowering::{lower_network, LayerKind, LayerSpec, LowerError, Mode, NetworkIR};
pub use tensor::{bchw, Tensor, TensorError};
pub use perf::{analyze_chain, DataClass, Level, Movement, NodeReport, PerfReport};
pub use chain_opt::{exchange_for_consistency, fuse_chain, EdgeReport};
pub use network::{parse_network, ParseError};
pub use pipeline::{run_pipeline, verify_network, CompileReport, PipelineError, PipelineOptions, PipelineOutput, Stage};
