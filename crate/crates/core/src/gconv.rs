//! The generalized convolution (GCONV) operation model.
//!
//! A GCONV is a 1-D convolution described by four loop parameters
//! (`ng`, `nop`, `nks`, `nopc`) plus padding and stride, replicated once per
//! tensor dimension. Four operator slots (pre, main, reduce, post) say what
//! the loop nest computes.

use std::collections::BTreeMap;
use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tensor dimension labels, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DimName {
    B,
    C,
    H,
    W,
    T,
    V,
}

impl DimName {
    pub const ALL: [DimName; 6] = [
        DimName::B,
        DimName::C,
        DimName::H,
        DimName::W,
        DimName::T,
        DimName::V,
    ];

    /// Scan order used by the mapper (innermost spatial dimension first).
    pub const SCAN: [DimName; 6] = [
        DimName::W,
        DimName::H,
        DimName::C,
        DimName::B,
        DimName::T,
        DimName::V,
    ];

    pub fn code(self) -> u16 {
        self as u16 + 1
    }

    pub fn from_code(code: u16) -> Option<Self> {
        Self::ALL.get(code.checked_sub(1)? as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DimName::B => "B",
            DimName::C => "C",
            DimName::H => "H",
            DimName::W => "W",
            DimName::T => "T",
            DimName::V => "V",
        }
    }
}

impl fmt::Display for DimName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One of the four loops a GCONV has in each dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoopParam {
    G,
    Op,
    Ks,
    Opc,
}

impl LoopParam {
    pub const ALL: [LoopParam; 4] = [LoopParam::G, LoopParam::Op, LoopParam::Ks, LoopParam::Opc];

    pub fn code(self) -> u16 {
        self as u16 + 1
    }

    pub fn from_code(code: u16) -> Option<Self> {
        Self::ALL.get(code.checked_sub(1)? as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LoopParam::G => "g",
            LoopParam::Op => "op",
            LoopParam::Ks => "ks",
            LoopParam::Opc => "opc",
        }
    }
}

impl fmt::Display for LoopParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Loop parameters of one GCONV dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DimParams {
    pub ng: u64,
    pub nop: u64,
    pub nks: u64,
    pub nopc: u64,
    pub ps: u64,
    pub s: u64,
}

impl Default for DimParams {
    fn default() -> Self {
        DimParams {
            ng: 1,
            nop: 1,
            nks: 1,
            nopc: 1,
            ps: 0,
            s: 1,
        }
    }
}

impl DimParams {
    pub fn grouped(ng: u64) -> Self {
        DimParams {
            ng,
            ..Default::default()
        }
    }

    pub fn outputs(nopc: u64) -> Self {
        DimParams {
            nopc,
            ..Default::default()
        }
    }

    pub fn reduce(nks: u64) -> Self {
        DimParams {
            nks,
            ..Default::default()
        }
    }

    pub fn trip(&self, p: LoopParam) -> u64 {
        match p {
            LoopParam::G => self.ng,
            LoopParam::Op => self.nop,
            LoopParam::Ks => self.nks,
            LoopParam::Opc => self.nopc,
        }
    }

    pub fn set_trip(&mut self, p: LoopParam, v: u64) {
        match p {
            LoopParam::G => self.ng = v,
            LoopParam::Op => self.nop = v,
            LoopParam::Ks => self.nks = v,
            LoopParam::Opc => self.nopc = v,
        }
    }

    pub fn is_default(&self) -> bool {
        *self == DimParams::default()
    }

    /// Kernel elements per dimension: `ng * nop * nks`.
    pub fn kernel_extent(&self) -> u64 {
        self.ng * self.nop * self.nks
    }

    /// Full input tensor extent: every group reads its own `input_extent` slice.
    pub fn input_tensor_extent(&self, dim: DimName) -> Result<u64, GeometryError> {
        Ok(self.ng * input_extent(dim, self)?)
    }

    fn positive(&self) -> bool {
        self.ng >= 1 && self.nop >= 1 && self.nks >= 1 && self.nopc >= 1 && self.s >= 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("invalid geometry in dimension {dim}: {reason}")]
    Invalid { dim: DimName, reason: String },
}

/// Unpadded input extent read per group: `(nopc - 1) * s + nks - 2 * ps`.
pub fn input_extent(dim: DimName, dp: &DimParams) -> Result<u64, GeometryError> {
    if !dp.positive() {
        return Err(GeometryError::Invalid {
            dim,
            reason: "loop counts and stride must be positive".into(),
        });
    }
    let span = (dp.nopc - 1) * dp.s + dp.nks;
    match span.checked_sub(2 * dp.ps) {
        Some(n) if n >= 1 => Ok(n),
        _ => Err(GeometryError::Invalid {
            dim,
            reason: format!("padding {} consumes the whole input span {}", dp.ps, span),
        }),
    }
}

/// Output extent: `ng * nop * nopc`.
pub fn output_extent(dp: &DimParams) -> u64 {
    dp.ng * dp.nop * dp.nopc
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReuseProfile {
    pub input_parallel: u64,
    pub kernel_parallel: u64,
    pub output_parallel: u64,
    pub overlap: bool,
}

/// Parallel and overlap reuse available in one dimension.
pub fn reuse_profile(dp: &DimParams) -> ReuseProfile {
    ReuseProfile {
        input_parallel: dp.nop,
        kernel_parallel: dp.nopc,
        output_parallel: dp.nks,
        overlap: dp.nks > dp.s,
    }
}

/// Binary (or unary) combination of the preprocessed input with the kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MainOp {
    Identity,
    Multiply,
    Add,
    Subtract,
    SquareOfInput,
    LogicalAnd,
}

impl MainOp {
    pub fn is_binary(self) -> bool {
        matches!(
            self,
            MainOp::Multiply | MainOp::Add | MainOp::Subtract | MainOp::LogicalAnd
        )
    }

    pub fn apply(self, x: f64, k: f64) -> f64 {
        match self {
            MainOp::Identity => x,
            MainOp::Multiply => x * k,
            MainOp::Add => x + k,
            MainOp::Subtract => x - k,
            MainOp::SquareOfInput => x * x,
            MainOp::LogicalAnd => ((x as i64) & (k as i64)) as f64,
        }
    }

    pub fn code(self) -> u16 {
        match self {
            MainOp::Identity => 1,
            MainOp::Multiply => 2,
            MainOp::Add => 3,
            MainOp::Subtract => 4,
            MainOp::SquareOfInput => 5,
            MainOp::LogicalAnd => 6,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        Some(match code {
            1 => MainOp::Identity,
            2 => MainOp::Multiply,
            3 => MainOp::Add,
            4 => MainOp::Subtract,
            5 => MainOp::SquareOfInput,
            6 => MainOp::LogicalAnd,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceOp {
    Add,
    Max,
    None,
}

impl ReduceOp {
    pub fn identity(self) -> f64 {
        match self {
            ReduceOp::Add | ReduceOp::None => 0.0,
            ReduceOp::Max => f64::NEG_INFINITY,
        }
    }

    pub fn combine(self, acc: f64, v: f64) -> f64 {
        match self {
            ReduceOp::Add => acc + v,
            ReduceOp::Max => acc.max(v),
            ReduceOp::None => v,
        }
    }

    /// Operator code; `None` is the absent code 0.
    pub fn code(self) -> u16 {
        match self {
            ReduceOp::None => 0,
            ReduceOp::Add => 1,
            ReduceOp::Max => 2,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        Some(match code {
            0 => ReduceOp::None,
            1 => ReduceOp::Add,
            2 => ReduceOp::Max,
            _ => return None,
        })
    }
}

/// A named scalar function evaluated through the [`LutRegistry`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lut {
    pub name: String,
    #[serde(default)]
    pub args: Vec<f64>,
}

impl Lut {
    pub fn relu() -> Self {
        Lut {
            name: "relu".into(),
            args: vec![],
        }
    }

    /// `x -> 1 / sqrt(x * scale + eps)`.
    pub fn rsqrt_eps(eps: f64, scale: f64) -> Self {
        Lut {
            name: "rsqrt_eps".into(),
            args: vec![eps, scale],
        }
    }

    /// `x -> (k + alpha * x / n)^(-beta)`.
    pub fn lrn_pow(k: f64, alpha: f64, n: f64, beta: f64) -> Self {
        Lut {
            name: "lrn_pow".into(),
            args: vec![k, alpha, n, beta],
        }
    }
}

/// Elementwise step in a pre or post slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointOp {
    Square,
    Scale(Ratio<i64>),
    Lut(Lut),
    /// `x <op> param[idx]`, where `param` indexes [`GConv::fused_params`].
    WithParam { op: MainOp, param: usize },
}

impl PointOp {
    pub fn code(&self) -> u16 {
        match self {
            PointOp::Square => 1,
            PointOp::Scale(_) => 2,
            PointOp::Lut(_) => 3,
            PointOp::WithParam { .. } => 4,
        }
    }
}

pub fn scale_value(r: &Ratio<i64>, x: f64) -> f64 {
    x * *r.numer() as f64 / *r.denom() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Operators {
    #[serde(default)]
    pub pre: Vec<PointOp>,
    pub main: MainOp,
    pub reduce: ReduceOp,
    #[serde(default)]
    pub post: Vec<PointOp>,
}

impl Default for Operators {
    fn default() -> Self {
        Operators {
            pre: vec![],
            main: MainOp::Identity,
            reduce: ReduceOp::None,
            post: vec![],
        }
    }
}

impl Operators {
    pub fn mac() -> Self {
        Operators {
            main: MainOp::Multiply,
            reduce: ReduceOp::Add,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Pre,
    Post,
}

/// Parameter tensor absorbed by operation fusion.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusedParam {
    pub slot: Slot,
    pub tensor: String,
    /// Dimensions along which the parameter has extent 1 and is reused.
    pub broadcast: Vec<DimName>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GConv {
    pub id: String,
    pub dims: BTreeMap<DimName, DimParams>,
    pub ops: Operators,
    pub input_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fused_params: Vec<FusedParam>,
    pub output_id: String,
}

pub type Shape = BTreeMap<DimName, u64>;

impl GConv {
    pub fn new(id: impl Into<String>, input_ref: impl Into<String>) -> Self {
        let id = id.into();
        GConv {
            output_id: id.clone(),
            id,
            dims: BTreeMap::new(),
            ops: Operators::default(),
            input_ref: input_ref.into(),
            kernel_ref: None,
            fused_params: vec![],
        }
    }

    pub fn with_dims(mut self, dims: impl IntoIterator<Item = (DimName, DimParams)>) -> Self {
        self.dims.extend(dims);
        self
    }

    pub fn with_ops(mut self, ops: Operators) -> Self {
        self.ops = ops;
        self
    }

    pub fn with_kernel(mut self, kernel: impl Into<String>) -> Self {
        self.kernel_ref = Some(kernel.into());
        self
    }

    pub fn input_shape(&self) -> Result<Shape, GeometryError> {
        self.dims
            .iter()
            .map(|(&d, dp)| Ok((d, dp.input_tensor_extent(d)?)))
            .collect()
    }

    pub fn kernel_shape(&self) -> Shape {
        self.dims
            .iter()
            .map(|(&d, dp)| (d, dp.kernel_extent()))
            .collect()
    }

    pub fn output_shape(&self) -> Shape {
        self.dims.iter().map(|(&d, dp)| (d, output_extent(dp))).collect()
    }

    pub fn params(&self, d: DimName) -> DimParams {
        self.dims.get(&d).copied().unwrap_or_default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LoopId {
    pub dim: DimName,
    pub param: LoopParam,
}

/// Loops whose trip count exceeds one, in canonical (dimension, parameter) order.
pub fn effective_loops(g: &GConv) -> Vec<(DimName, LoopParam, u64)> {
    g.dims
        .iter()
        .flat_map(|(&d, dp)| {
            LoopParam::ALL
                .iter()
                .map(move |&p| (d, p, dp.trip(p)))
                .filter(|&(_, _, n)| n > 1)
        })
        .collect()
}

/// Scalar functions usable as `lut` operators.
pub struct LutRegistry {
    fns: BTreeMap<&'static str, (usize, fn(&[f64], f64) -> f64)>,
}

impl Default for LutRegistry {
    fn default() -> Self {
        let mut fns: BTreeMap<&'static str, (usize, fn(&[f64], f64) -> f64)> = BTreeMap::new();
        fns.insert("relu", (0, |_, x| if x > 0.0 { x } else { 0.0 }));
        fns.insert("rsqrt_eps", (2, |a, x| 1.0 / (x * a[1] + a[0]).sqrt()));
        fns.insert("lrn_pow", (4, |a, x| (a[0] + a[1] * x / a[2]).powf(-a[3])));
        LutRegistry { fns }
    }
}

impl LutRegistry {
    pub fn builtin() -> &'static LutRegistry {
        static REG: std::sync::OnceLock<LutRegistry> = std::sync::OnceLock::new();
        REG.get_or_init(LutRegistry::default)
    }

    pub fn resolve(&self, lut: &Lut) -> Option<fn(&[f64], f64) -> f64> {
        self.fns
            .get(lut.name.as_str())
            .filter(|(arity, _)| *arity == lut.args.len())
            .map(|(_, f)| *f)
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.fns.keys().copied()
    }

    /// Stable numeric id used by the instruction encoder.
    pub fn id_of(&self, name: &str) -> Option<u16> {
        self.fns.keys().position(|n| *n == name).map(|i| i as u16 + 1)
    }

    pub fn name_of(&self, id: u16) -> Option<&'static str> {
        self.fns.keys().nth(id.checked_sub(1)? as usize).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("{dim}: stride must be positive")]
    ZeroStride { dim: DimName },
    #[error("{dim}: loop counts must be positive")]
    ZeroTrip { dim: DimName },
    #[error("{dim}: padding {ps} leaves no input (span {span})")]
    PaddingTooLarge { dim: DimName, ps: u64, span: u64 },
    #[error("binary main requires kernel")]
    BinaryMainWithoutKernel,
    #[error("unary main {0:?} does not read a kernel")]
    UnaryMainWithKernel(MainOp),
    #[error("{dim}: reduce none requires nks = 1")]
    UnreducedKernel { dim: DimName },
    #[error("lut `{0}` is not registered with that arity")]
    UnknownLut(String),
    #[error("scale with zero denominator")]
    ZeroScale,
    #[error("{slot:?} step references missing fused parameter {index}")]
    DanglingParam { slot: Slot, index: usize },
}

/// Check every GCONV invariant, collecting all violations.
pub fn validate(g: &GConv) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    for (&dim, dp) in &g.dims {
        if dp.s == 0 {
            out.push(Violation::ZeroStride { dim });
        }
        if dp.ng == 0 || dp.nop == 0 || dp.nks == 0 || dp.nopc == 0 {
            out.push(Violation::ZeroTrip { dim });
        } else if dp.s > 0 {
            let span = (dp.nopc - 1) * dp.s + dp.nks;
            if 2 * dp.ps >= span {
                out.push(Violation::PaddingTooLarge {
                    dim,
                    ps: dp.ps,
                    span,
                });
            }
        }
        if g.ops.reduce == ReduceOp::None && dp.nks != 1 {
            out.push(Violation::UnreducedKernel { dim });
        }
    }
    match (g.ops.main.is_binary(), g.kernel_ref.is_some()) {
        (true, false) => out.push(Violation::BinaryMainWithoutKernel),
        (false, true) => out.push(Violation::UnaryMainWithKernel(g.ops.main)),
        _ => {}
    }
    let reg = LutRegistry::builtin();
    for (slot, steps) in [(Slot::Pre, &g.ops.pre), (Slot::Post, &g.ops.post)] {
        for step in steps {
            match step {
                PointOp::Lut(l) if reg.resolve(l).is_none() => {
                    out.push(Violation::UnknownLut(l.name.clone()))
                }
                PointOp::Scale(r) if *r.denom() == 0 => out.push(Violation::ZeroScale),
                PointOp::WithParam { param, .. } => {
                    if g.fused_params.get(*param).map(|p| p.slot) != Some(slot) {
                        out.push(Violation::DanglingParam {
                            slot,
                            index: *param,
                        });
                    }
                }
                _ => {}
            }
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dp(nks: u64, s: u64, ps: u64, nopc: u64) -> DimParams {
        DimParams {
            nks,
            s,
            ps,
            nopc,
            ..Default::default()
        }
    }

    /// Count distinct unpadded input indices touched by the 1-D loop nest.
    fn touched(p: &DimParams) -> (u64, u64) {
        let mut seen = std::collections::BTreeSet::new();
        let (mut lo, mut hi) = (i64::MAX, i64::MIN);
        for opc in 0..p.nopc as i64 {
            for ks in 0..p.nks as i64 {
                let i = opc * p.s as i64 + ks - p.ps as i64;
                seen.insert(i);
                lo = lo.min(i);
                hi = hi.max(i);
            }
        }
        // padded index range minus the pad on each side
        let extent = hi - lo + 1 - 2 * p.ps as i64;
        (extent as u64, seen.len() as u64)
    }

    #[test]
    fn input_extent_examples() {
        assert_eq!(input_extent(DimName::H, &dp(3, 1, 0, 5)).unwrap(), 7);
        assert_eq!(input_extent(DimName::H, &dp(1, 1, 0, 9)).unwrap(), 9);
        assert_eq!(input_extent(DimName::H, &dp(2, 2, 0, 3)).unwrap(), 6);
        assert_eq!(touched(&dp(3, 1, 0, 5)).0, 7);
        assert_eq!(touched(&dp(2, 2, 0, 3)).0, 6);
    }

    #[test]
    fn input_extent_rejects_over_padding() {
        let err = input_extent(DimName::W, &dp(3, 1, 2, 1)).unwrap_err();
        assert!(err.to_string().contains("dimension W"));
    }

    #[test]
    fn output_extent_examples() {
        assert_eq!(output_extent(&DimParams::default()), 1);
        let p = DimParams {
            ng: 2,
            nop: 3,
            nopc: 4,
            ..Default::default()
        };
        assert_eq!(output_extent(&p), 24);
    }

    #[test]
    fn reuse_examples() {
        let p = DimParams {
            nop: 64,
            ..Default::default()
        };
        assert_eq!(reuse_profile(&p).input_parallel, 64);
        assert!(reuse_profile(&dp(3, 1, 0, 1)).overlap);
        assert!(!reuse_profile(&dp(1, 1, 0, 1)).overlap);
    }

    #[test]
    fn effective_loops_prunes_defaults() {
        let g = GConv::new("x", "in").with_dims(DimName::ALL.map(|d| (d, DimParams::default())));
        assert!(effective_loops(&g).is_empty());

        let bn = GConv::new("fp1", "in").with_dims([
            (DimName::B, DimParams::reduce(32)),
            (DimName::C, DimParams::outputs(64)),
            (DimName::H, DimParams::outputs(7)),
            (DimName::W, DimParams::outputs(7)),
        ]);
        assert_eq!(
            effective_loops(&bn),
            vec![
                (DimName::B, LoopParam::Ks, 32),
                (DimName::C, LoopParam::Opc, 64),
                (DimName::H, LoopParam::Opc, 7),
                (DimName::W, LoopParam::Opc, 7),
            ]
        );
    }

    #[test]
    fn validate_examples() {
        let ok = GConv::new("a", "in")
            .with_kernel("k")
            .with_ops(Operators::mac())
            .with_dims([(DimName::B, DimParams::default())]);
        assert_eq!(validate(&ok), Ok(()));

        let mut bad = ok.clone();
        bad.dims.get_mut(&DimName::B).unwrap().s = 0;
        let v = validate(&bad).unwrap_err();
        assert!(v.iter().any(|v| v.to_string().contains("stride must be positive")));

        let mut nok = ok.clone();
        nok.kernel_ref = None;
        let v = validate(&nok).unwrap_err();
        assert_eq!(v, vec![Violation::BinaryMainWithoutKernel]);
        assert_eq!(v[0].to_string(), "binary main requires kernel");
    }

    #[test]
    fn validate_lut_and_reduce_rules() {
        let mut g = GConv::new("a", "in").with_dims([(DimName::C, DimParams::reduce(3))]);
        g.ops.post.push(PointOp::Lut(Lut {
            name: "nope".into(),
            args: vec![],
        }));
        let v = validate(&g).unwrap_err();
        assert!(v.contains(&Violation::UnknownLut("nope".into())));
        assert!(v.contains(&Violation::UnreducedKernel { dim: DimName::C }));
    }

    #[test]
    fn luts_evaluate() {
        let reg = LutRegistry::builtin();
        let relu = reg.resolve(&Lut::relu()).unwrap();
        assert_eq!(relu(&[], -1.0), 0.0);
        let l = Lut::lrn_pow(1.0, 3.0, 3.0, 1.0);
        assert_eq!(reg.resolve(&l).unwrap()(&l.args, 2.0), 1.0 / 3.0);
        let r = Lut::rsqrt_eps(0.0, 0.5);
        assert_eq!(reg.resolve(&r).unwrap()(&r.args, 8.0), 0.5);
        for name in reg.names() {
            assert_eq!(reg.name_of(reg.id_of(name).unwrap()), Some(name));
        }
    }

    proptest::proptest! {
        #[test]
        fn extent_matches_enumeration(nks in 1u64..=8, nopc in 1u64..=8, s in 1u64..=8, ps in 0u64..=8) {
            let p = dp(nks, s, ps, nopc);
            let span = (nopc - 1) * s + nks;
            proptest::prop_assume!(2 * ps < span);
            let (extent, distinct) = touched(&p);
            proptest::prop_assert_eq!(input_extent(DimName::H, &p).unwrap(), extent);
            if s <= nks {
                proptest::prop_assert_eq!(distinct - 2 * ps, extent);
            }
        }

        #[test]
        fn overlap_matches_enumeration(nks in 1u64..=8, nopc in 2u64..=8, s in 1u64..=8) {
            let p = dp(nks, s, 0, nopc);
            let mut owners: std::collections::BTreeMap<u64, std::collections::BTreeSet<u64>> = Default::default();
            for opc in 0..nopc {
                for ks in 0..nks {
                    owners.entry(opc * s + ks).or_default().insert(opc);
                }
            }
            let shared = owners.values().any(|o| o.len() > 1);
            proptest::prop_assert_eq!(reuse_profile(&p).overlap, shared);
        }
    }
}
