//! Accelerator descriptions and the GCONV-to-unroll-plan mapping.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gconv::{DimName, GConv, LoopId, LoopParam};
use crate::perf::{cycles, tile_footprint, DataClass};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialDim {
    pub label: String,
    pub size: u64,
    #[serde(default)]
    pub can_reduce: bool,
    /// Fill order for this dimension; `g` is always moved last.
    pub priority_params: Vec<LoopParam>,
}

/// Spatial overlap-reuse primitive: `ks` of an overlapping dimension goes to
/// `ks_dim`, its `opc` to `opc_dim` (indices into `spatial_dims`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialOverlap {
    pub ks_dim: usize,
    pub opc_dim: usize,
}

/// Per-PE local scratchpad capacities in elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scratchpads {
    #[serde(default = "one")]
    pub ils: u64,
    #[serde(default = "one")]
    pub kls: u64,
    #[serde(default = "one")]
    pub ols: u64,
}

impl Default for Scratchpads {
    fn default() -> Self {
        Scratchpads {
            ils: 1,
            kls: 1,
            ols: 1,
        }
    }
}

/// A quantity per data class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerClass {
    pub input: u64,
    pub kernel: u64,
    pub output: u64,
}

impl PerClass {
    pub fn get(&self, c: DataClass) -> u64 {
        match c {
            DataClass::Input => self.input,
            DataClass::Kernel => self.kernel,
            DataClass::Output => self.output,
        }
    }

    pub fn get_mut(&mut self, c: DataClass) -> &mut u64 {
        match c {
            DataClass::Input => &mut self.input,
            DataClass::Kernel => &mut self.kernel,
            DataClass::Output => &mut self.output,
        }
    }
}

fn one() -> u64 {
    1
}

fn default_temporal_priority() -> Vec<LoopParam> {
    vec![LoopParam::Op, LoopParam::Ks, LoopParam::Opc, LoopParam::G]
}

fn default_element_bytes() -> u64 {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceleratorSpec {
    pub name: String,
    pub spatial_dims: Vec<SpatialDim>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spatial_overlap: Option<SpatialOverlap>,
    /// Sliding-window primitive in the temporal list (ks then opc).
    #[serde(default)]
    pub temporal_overlap: bool,
    #[serde(default = "default_temporal_priority")]
    pub temporal_priority: Vec<LoopParam>,
    /// Spatial dimension whose inner output loops fix the storage format.
    #[serde(default)]
    pub output_format_dim: usize,
    #[serde(default)]
    pub scratchpads: Scratchpads,
    /// Global buffer capacity per class, in elements.
    pub global_buffer: PerClass,
    /// Elements per cycle per class; reported only.
    pub bandwidth: PerClass,
    #[serde(default = "default_element_bytes")]
    pub element_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AccelError {
    #[error("accelerator `{name}`: {msg}")]
    Invalid { name: String, msg: String },
    #[error("unknown accelerator preset `{0}`")]
    UnknownPreset(String),
}

impl AcceleratorSpec {
    pub fn validate(&self) -> Result<(), AccelError> {
        let bad = |msg: String| {
            Err(AccelError::Invalid {
                name: self.name.clone(),
                msg,
            })
        };
        if self.spatial_dims.is_empty() {
            return bad("needs at least one spatial dimension".into());
        }
        for d in &self.spatial_dims {
            if d.size == 0 {
                return bad(format!("spatial dimension `{}` has size 0", d.label));
            }
        }
        if let Some(o) = self.spatial_overlap {
            let n = self.spatial_dims.len();
            if o.ks_dim >= n || o.opc_dim >= n {
                return bad("overlap primitive names a missing spatial dimension".into());
            }
            if !self.spatial_dims[o.ks_dim].can_reduce {
                return bad("overlap primitive needs a reduce-capable ks dimension".into());
            }
        }
        if self.output_format_dim >= self.spatial_dims.len() {
            return bad("output_format_dim out of range".into());
        }
        let sp = self.scratchpads;
        let gb = self.global_buffer;
        if [sp.ils, sp.kls, sp.ols, gb.input, gb.kernel, gb.output, self.element_bytes].contains(&0) {
            return bad("capacities must be at least 1".into());
        }
        Ok(())
    }

    pub fn total_pes(&self) -> u64 {
        self.spatial_dims.iter().map(|d| d.size).product()
    }

    pub fn from_json(text: &str) -> Result<Self, AccelError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let spec: AcceleratorSpec =
            serde_path_to_error::deserialize(de).map_err(|e| AccelError::Invalid {
                name: "<document>".into(),
                msg: format!("{} at {}", e.inner(), e.path()),
            })?;
        spec.validate()?;
        Ok(spec)
    }
}

fn sdim(label: &str, size: u64, can_reduce: bool, prio: &[LoopParam]) -> SpatialDim {
    SpatialDim {
        label: label.into(),
        size,
        can_reduce,
        priority_params: prio.to_vec(),
    }
}

const KB: u64 = 1024;
const MB: u64 = 1024 * 1024;

/// The five shipped machine configurations.
pub fn presets() -> Vec<AcceleratorSpec> {
    use LoopParam::*;
    let elems = |bytes: u64| bytes / 2;
    vec![
        AcceleratorSpec {
            name: "tpu".into(),
            spatial_dims: vec![
                sdim("rows", 64, true, &[Ks, Opc, Op, G]),
                sdim("cols", 64, false, &[Op, Opc, Ks, G]),
            ],
            spatial_overlap: None,
            temporal_overlap: false,
            temporal_priority: default_temporal_priority(),
            output_format_dim: 1,
            scratchpads: Scratchpads::default(),
            global_buffer: PerClass {
                input: elems(3 * MB / 2),
                kernel: elems(MB / 4),
                output: elems(3 * MB / 2),
            },
            bandwidth: PerClass {
                input: 64,
                kernel: 11,
                output: 64,
            },
            element_bytes: 2,
        },
        AcceleratorSpec {
            name: "dnnweaver".into(),
            spatial_dims: vec![
                sdim("pu", 14, false, &[Op, Opc, G]),
                sdim("pe", 74, true, &[Ks, Opc, Op, G]),
            ],
            spatial_overlap: Some(SpatialOverlap {
                ks_dim: 1,
                opc_dim: 1,
            }),
            temporal_overlap: false,
            temporal_priority: default_temporal_priority(),
            output_format_dim: 0,
            scratchpads: Scratchpads::default(),
            global_buffer: PerClass {
                input: elems(17 * KB / 2),
                kernel: elems(17 * KB / 2),
                output: elems(17 * KB / 2),
            },
            bandwidth: PerClass {
                input: 37,
                kernel: 14,
                output: 37,
            },
            element_bytes: 2,
        },
        AcceleratorSpec {
            name: "eyeriss".into(),
            spatial_dims: vec![
                sdim("py", 12, true, &[Ks, Opc, Op, G]),
                sdim("px", 14, false, &[Opc, Op, Ks, G]),
            ],
            spatial_overlap: Some(SpatialOverlap {
                ks_dim: 0,
                opc_dim: 1,
            }),
            temporal_overlap: true,
            temporal_priority: default_temporal_priority(),
            output_format_dim: 1,
            scratchpads: Scratchpads {
                ils: 12,
                kls: 224,
                ols: 24,
            },
            global_buffer: PerClass {
                input: elems(100 * KB),
                kernel: elems(8 * KB),
                output: elems(100 * KB),
            },
            bandwidth: PerClass {
                input: 1,
                kernel: 4,
                output: 4,
            },
            element_bytes: 2,
        },
        AcceleratorSpec {
            name: "eager_pruning".into(),
            spatial_dims: vec![
                sdim("subsystem", 4, false, &[Op, Opc, G]),
                sdim("pe", 512, true, &[Ks, Opc, Op, G]),
            ],
            spatial_overlap: Some(SpatialOverlap {
                ks_dim: 1,
                opc_dim: 1,
            }),
            temporal_overlap: false,
            temporal_priority: default_temporal_priority(),
            output_format_dim: 1,
            scratchpads: Scratchpads {
                ils: 64,
                kls: 1,
                ols: 1,
            },
            global_buffer: PerClass {
                input: elems(3 * MB / 2),
                kernel: elems(3 * MB / 2),
                output: elems(3 * MB / 2),
            },
            bandwidth: PerClass {
                input: 128,
                kernel: 128,
                output: 128,
            },
            element_bytes: 2,
        },
        AcceleratorSpec {
            name: "nlr".into(),
            spatial_dims: vec![
                sdim("tm", 64, false, &[Op, Opc, G]),
                sdim("tn", 7, true, &[Ks, Opc, G]),
            ],
            spatial_overlap: None,
            temporal_overlap: false,
            temporal_priority: default_temporal_priority(),
            output_format_dim: 0,
            scratchpads: Scratchpads::default(),
            global_buffer: PerClass {
                input: elems(3 * MB / 2),
                kernel: elems(3 * MB / 2),
                output: elems(3 * MB / 4),
            },
            bandwidth: PerClass {
                input: 7,
                kernel: 7,
                output: 64,
            },
            element_bytes: 2,
        },
    ]
}

pub fn preset(name: &str) -> Result<AcceleratorSpec, AccelError> {
    presets()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| AccelError::UnknownPreset(name.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Overlap,
    Spatial,
    Temporal,
    Remainder,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Overlap, Phase::Spatial, Phase::Temporal, Phase::Remainder];

    pub fn code(self) -> u16 {
        self as u16
    }

    pub fn from_code(c: u16) -> Option<Self> {
        Phase::ALL.get(c as usize).copied()
    }
}

/// `[param, dim, factor]`, tagged with the phase that placed it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UnrollEntry {
    pub param: LoopParam,
    pub dim: DimName,
    pub factor: u64,
    pub phase: Phase,
}

impl UnrollEntry {
    pub fn loop_id(&self) -> LoopId {
        LoopId {
            dim: self.dim,
            param: self.param,
        }
    }
}

impl fmt::Display for UnrollEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}]", self.param, self.dim, self.factor)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialList {
    pub label: String,
    pub size: u64,
    pub entries: Vec<UnrollEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopTrip {
    pub dim: DimName,
    pub param: LoopParam,
    pub trip: u64,
}

/// Number of temporal entries (from the innermost) held by each level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pointers {
    pub ilst: usize,
    pub klst: usize,
    pub olst: usize,
    pub global_buffer: PointerSet,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointerSet {
    pub input: usize,
    pub kernel: usize,
    pub output: usize,
}

impl Pointers {
    pub fn local(&self, c: DataClass) -> usize {
        match c {
            DataClass::Input => self.ilst,
            DataClass::Kernel => self.klst,
            DataClass::Output => self.olst,
        }
    }

    pub fn local_mut(&mut self, c: DataClass) -> &mut usize {
        match c {
            DataClass::Input => &mut self.ilst,
            DataClass::Kernel => &mut self.klst,
            DataClass::Output => &mut self.olst,
        }
    }

    pub fn buffer(&self, c: DataClass) -> usize {
        match c {
            DataClass::Input => self.global_buffer.input,
            DataClass::Kernel => self.global_buffer.kernel,
            DataClass::Output => self.global_buffer.output,
        }
    }

    pub fn buffer_mut(&mut self, c: DataClass) -> &mut usize {
        match c {
            DataClass::Input => &mut self.global_buffer.input,
            DataClass::Kernel => &mut self.global_buffer.kernel,
            DataClass::Output => &mut self.global_buffer.output,
        }
    }
}

/// Capacities the plan was built against, in elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanCapacities {
    pub local: PerClass,
    pub global_buffer: PerClass,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnrollPlan {
    pub gconv: String,
    /// Original trip counts of every loop with more than one iteration.
    pub loops: Vec<LoopTrip>,
    /// Stride per dimension; dimensions absent here have stride 1.
    pub strides: BTreeMap<DimName, u64>,
    pub has_kernel: bool,
    pub spatial: Vec<SpatialList>,
    pub output_format_dim: usize,
    /// Index 0 is the innermost temporal loop.
    pub temporal: Vec<UnrollEntry>,
    pub pointers: Pointers,
    pub capacities: PlanCapacities,
}

impl UnrollPlan {
    pub fn trip(&self, l: LoopId) -> u64 {
        self.loops
            .iter()
            .find(|t| t.dim == l.dim && t.param == l.param)
            .map_or(1, |t| t.trip)
    }

    pub fn stride(&self, d: DimName) -> u64 {
        self.strides.get(&d).copied().unwrap_or(1)
    }

    pub fn spatial_entries(&self) -> impl Iterator<Item = &UnrollEntry> + Clone {
        self.spatial.iter().flat_map(|l| l.entries.iter())
    }

    /// Total spatial factor of one loop.
    pub fn spatial_factor(&self, l: LoopId) -> u64 {
        self.spatial_entries()
            .filter(|e| e.loop_id() == l)
            .map(|e| e.factor)
            .product()
    }

    /// Entries in ceil-chain order: by phase, then list (spatial lists first,
    /// temporal last), then position.
    pub fn chain_order(&self) -> Vec<UnrollEntry> {
        let mut all: Vec<(Phase, usize, usize, UnrollEntry)> = Vec::new();
        for (li, l) in self.spatial.iter().enumerate() {
            for (i, e) in l.entries.iter().enumerate() {
                all.push((e.phase, li, i, *e));
            }
        }
        for (i, e) in self.temporal.iter().enumerate() {
            all.push((e.phase, self.spatial.len(), i, *e));
        }
        all.sort_by_key(|&(p, l, i, _)| (p, l, i));
        all.into_iter().map(|(.., e)| e).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.temporal.is_empty() && self.spatial.iter().all(|l| l.entries.is_empty())
    }
}

/// `min(resource, trip)`, with the updated `(resource, trip)` pair.
pub fn alloc_factor(resource: u64, trip: u64) -> (u64, u64, u64) {
    let f = resource.min(trip).max(1);
    (f, resource / f, trip.div_ceil(f))
}

fn scan_loops(g: &GConv) -> BTreeMap<LoopId, u64> {
    let mut m = BTreeMap::new();
    for &d in &DimName::SCAN {
        let dp = g.params(d);
        for &p in &LoopParam::ALL {
            let n = dp.trip(p);
            if n > 1 {
                m.insert(LoopId { dim: d, param: p }, n);
            }
        }
    }
    m
}

fn g_last(prio: &[LoopParam]) -> Vec<LoopParam> {
    let mut v: Vec<LoopParam> = prio.iter().copied().filter(|&p| p != LoopParam::G).collect();
    v.dedup();
    v.push(LoopParam::G);
    v
}

struct Mapper<'a> {
    spec: &'a AcceleratorSpec,
    plan: UnrollPlan,
    remaining: BTreeMap<LoopId, u64>,
    resources: Vec<u64>,
}

impl Mapper<'_> {
    fn trip(&self, l: LoopId) -> u64 {
        self.remaining.get(&l).copied().unwrap_or(1)
    }

    fn set_trip(&mut self, l: LoopId, t: u64) {
        self.remaining.insert(l, t);
    }

    fn spatial(&mut self, list: usize, l: LoopId, phase: Phase) {
        let (f, res, trip) = alloc_factor(self.resources[list], self.trip(l));
        if f > 1 {
            self.resources[list] = res;
            self.set_trip(l, trip);
            self.plan.spatial[list].entries.push(UnrollEntry {
                param: l.param,
                dim: l.dim,
                factor: f,
                phase,
            });
        }
    }

    fn temporal(&mut self, l: LoopId, f: u64, phase: Phase) {
        if f > 1 {
            let t = self.trip(l);
            self.set_trip(l, t.div_ceil(f));
            self.plan.temporal.push(UnrollEntry {
                param: l.param,
                dim: l.dim,
                factor: f,
                phase,
            });
        }
    }

    /// Largest factor for `l` keeping every open dependent local level
    /// within capacity; `None` when no dependent level is still open.
    fn ls_factor(&self, l: LoopId) -> Option<u64> {
        let n = self.trip(l);
        let len = self.plan.temporal.len();
        let open: Vec<DataClass> = DataClass::ALL
            .into_iter()
            .filter(|&c| c.depends_on(l.param))
            .filter(|&c| c != DataClass::Kernel || self.plan.has_kernel)
            .filter(|&c| local_pointer(&self.plan, c) == len)
            .collect();
        if open.is_empty() {
            return None;
        }
        let fits = |f: u64| {
            let probe = UnrollEntry {
                param: l.param,
                dim: l.dim,
                factor: f,
                phase: Phase::Temporal,
            };
            open.iter().all(|&c| {
                let fp = tile_footprint(
                    self.plan.temporal.iter().chain(std::iter::once(&probe)),
                    c,
                    &self.plan.strides,
                );
                fp <= self.plan.capacities.local.get(c)
            })
        };
        // footprints are monotone in the factor
        let (mut lo, mut hi) = (1, n);
        while lo < hi {
            let mid = lo + (hi - lo).div_ceil(2);
            if fits(mid) {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        Some(lo)
    }
}

/// Longest temporal prefix whose per-PE footprint fits the local level.
pub fn local_pointer(plan: &UnrollPlan, c: DataClass) -> usize {
    let cap = plan.capacities.local.get(c);
    longest_prefix(&plan.temporal, |k| {
        tile_footprint(plan.temporal[..k].iter(), c, &plan.strides) <= cap
    })
}

/// Longest temporal prefix whose whole-array tile fits the global buffer.
pub fn buffer_pointer(plan: &UnrollPlan, c: DataClass) -> usize {
    let cap = plan.capacities.global_buffer.get(c);
    let sp = tile_footprint(plan.spatial_entries(), c, &plan.strides);
    longest_prefix(&plan.temporal, |k| {
        sp.saturating_mul(tile_footprint(plan.temporal[..k].iter(), c, &plan.strides)) <= cap
    })
}

fn longest_prefix(t: &[UnrollEntry], fits: impl Fn(usize) -> bool) -> usize {
    (0..=t.len()).take_while(|&k| fits(k)).last().unwrap_or(0)
}

/// Set every pointer to its longest capacity-respecting prefix.
pub fn assign_pointers(plan: &mut UnrollPlan) {
    for c in DataClass::ALL {
        let l = local_pointer(plan, c);
        let b = buffer_pointer(plan, c);
        *plan.pointers.local_mut(c) = l;
        *plan.pointers.buffer_mut(c) = b;
    }
}

fn empty_plan(g: &GConv, spec: &AcceleratorSpec) -> UnrollPlan {
    UnrollPlan {
        gconv: g.id.clone(),
        loops: scan_loops(g)
            .into_iter()
            .map(|(l, trip)| LoopTrip {
                dim: l.dim,
                param: l.param,
                trip,
            })
            .collect(),
        strides: g
            .dims
            .iter()
            .filter(|(_, p)| p.s != 1)
            .map(|(&d, p)| (d, p.s))
            .collect(),
        has_kernel: g.kernel_ref.is_some(),
        spatial: spec
            .spatial_dims
            .iter()
            .map(|d| SpatialList {
                label: d.label.clone(),
                size: d.size,
                entries: vec![],
            })
            .collect(),
        output_format_dim: spec.output_format_dim,
        temporal: vec![],
        pointers: Pointers::default(),
        capacities: PlanCapacities {
            local: PerClass {
                input: spec.scratchpads.ils,
                kernel: spec.scratchpads.kls,
                output: spec.scratchpads.ols,
            },
            global_buffer: spec.global_buffer,
        },
    }
}

/// Map one GCONV onto the accelerator: overlap primitives, spatial fill,
/// scratchpad-bounded temporal fill, then the remaining loops.
pub fn map_gconv(g: &GConv, spec: &AcceleratorSpec) -> UnrollPlan {
    let mut m = Mapper {
        spec,
        plan: empty_plan(g, spec),
        remaining: scan_loops(g),
        resources: spec.spatial_dims.iter().map(|d| d.size).collect(),
    };
    let id = |dim, param| LoopId { dim, param };

    // Phase 1: overlap-reuse primitives.
    let overlap: Vec<DimName> = DimName::SCAN
        .into_iter()
        .filter(|&d| {
            let p = g.params(d);
            p.nks > p.s && p.nopc > 1
        })
        .collect();
    let (temporal_dim, spatial_dim) = match (spec.temporal_overlap, spec.spatial_overlap.is_some()) {
        (true, true) if overlap.len() >= 2 => (Some(overlap[0]), Some(overlap[1])),
        (_, true) => (None, overlap.first().copied()),
        (true, false) => (overlap.first().copied(), None),
        (false, false) => (None, None),
    };
    if let (Some(d), Some(o)) = (spatial_dim, m.spec.spatial_overlap) {
        m.spatial(o.ks_dim, id(d, LoopParam::Ks), Phase::Overlap);
        m.spatial(o.opc_dim, id(d, LoopParam::Opc), Phase::Overlap);
    }
    if let Some(d) = temporal_dim {
        let ks = id(d, LoopParam::Ks);
        let f = m.ls_factor(ks).unwrap_or(1);
        m.temporal(ks, f, Phase::Overlap);
        let opc = id(d, LoopParam::Opc);
        let f = m.trip(opc);
        m.temporal(opc, f, Phase::Overlap);
    }

    // Phase 2: spatial fill by per-dimension priority.
    for (i, sd) in spec.spatial_dims.iter().enumerate() {
        for p in g_last(&sd.priority_params) {
            for d in DimName::SCAN {
                m.spatial(i, id(d, p), Phase::Spatial);
            }
        }
    }

    // Phase 3: temporal fill bounded by the local scratchpads.
    for p in g_last(&spec.temporal_priority) {
        for d in DimName::SCAN {
            let l = id(d, p);
            if m.trip(l) > 1 {
                if let Some(f) = m.ls_factor(l) {
                    m.temporal(l, f, Phase::Temporal);
                }
            }
        }
    }

    // Phase 4: everything left.
    for p in [LoopParam::Opc, LoopParam::Op, LoopParam::Ks, LoopParam::G] {
        for d in DimName::SCAN {
            let l = id(d, p);
            let t = m.trip(l);
            m.temporal(l, t, Phase::Remainder);
        }
    }

    let mut plan = m.plan;
    assign_pointers(&mut plan);
    plan
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanViolation {
    #[error("loop {dim}.{param}: factor {factor} exceeds remaining trip {remaining}")]
    FactorTooLarge {
        dim: DimName,
        param: LoopParam,
        factor: u64,
        remaining: u64,
    },
    #[error("loop {dim}.{param}: {left} iterations left uncovered")]
    Uncovered {
        dim: DimName,
        param: LoopParam,
        left: u64,
    },
    #[error("spatial list `{label}` uses {used} of {size} PEs")]
    SpatialOverflow { label: String, used: u64, size: u64 },
    #[error("{class} tile of {footprint} exceeds capacity {capacity} at pointer {pointer}")]
    PointerOverflow {
        class: DataClass,
        pointer: usize,
        footprint: u64,
        capacity: u64,
    },
    #[error("pointer {0} beyond the temporal list")]
    PointerRange(usize),
    #[error("entry {0} has factor 1")]
    UnitFactor(UnrollEntry),
}

/// Check coverage, spatial capacity and pointer capacities.
pub fn validate_plan(plan: &UnrollPlan) -> Result<(), Vec<PlanViolation>> {
    let mut out = Vec::new();
    let mut left: BTreeMap<LoopId, u64> = plan
        .loops
        .iter()
        .map(|t| (LoopId { dim: t.dim, param: t.param }, t.trip))
        .collect();
    for e in plan.chain_order() {
        if e.factor < 2 {
            out.push(PlanViolation::UnitFactor(e));
        }
        let rem = left.get(&e.loop_id()).copied().unwrap_or(1);
        if e.factor > rem {
            out.push(PlanViolation::FactorTooLarge {
                dim: e.dim,
                param: e.param,
                factor: e.factor,
                remaining: rem,
            });
        }
        left.insert(e.loop_id(), rem.div_ceil(e.factor.max(1)));
    }
    for (l, n) in left {
        if n != 1 {
            out.push(PlanViolation::Uncovered {
                dim: l.dim,
                param: l.param,
                left: n,
            });
        }
    }
    for s in &plan.spatial {
        let used: u64 = s.entries.iter().map(|e| e.factor).product();
        if used > s.size {
            out.push(PlanViolation::SpatialOverflow {
                label: s.label.clone(),
                used,
                size: s.size,
            });
        }
    }
    let sp_len = plan.temporal.len();
    for c in DataClass::ALL {
        for (ptr, cap, spatial) in [
            (plan.pointers.local(c), plan.capacities.local.get(c), 1),
            (
                plan.pointers.buffer(c),
                plan.capacities.global_buffer.get(c),
                tile_footprint(plan.spatial_entries(), c, &plan.strides),
            ),
        ] {
            if ptr > sp_len {
                out.push(PlanViolation::PointerRange(ptr));
                continue;
            }
            let fp = spatial.saturating_mul(tile_footprint(plan.temporal[..ptr].iter(), c, &plan.strides));
            if fp > cap {
                out.push(PlanViolation::PointerOverflow {
                    class: c,
                    pointer: ptr,
                    footprint: fp,
                    capacity: cap,
                });
            }
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// A swap of two unroll entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Exchange {
    /// Two temporal entries.
    Temporal { a: usize, b: usize },
    /// A spatial entry and a temporal entry of the same parameter.
    SpatialTemporal {
        list: usize,
        spatial: usize,
        temporal: usize,
    },
    /// Two entries of one spatial list with different parameters.
    Spatial { list: usize, a: usize, b: usize },
}

pub fn apply_exchange(plan: &UnrollPlan, x: Exchange) -> UnrollPlan {
    let mut p = plan.clone();
    match x {
        Exchange::Temporal { a, b } => p.temporal.swap(a, b),
        Exchange::SpatialTemporal {
            list,
            spatial,
            temporal,
        } => {
            let s = p.spatial[list].entries[spatial];
            let t = p.temporal[temporal];
            p.spatial[list].entries[spatial] = UnrollEntry { phase: s.phase, ..t };
            p.temporal[temporal] = UnrollEntry { phase: t.phase, ..s };
        }
        Exchange::Spatial { list, a, b } => p.spatial[list].entries.swap(a, b),
    }
    p
}

/// Quantities the cost model reads from a plan; an exchange is legal only
/// when it leaves them untouched.
fn model_signature(plan: &UnrollPlan) -> Vec<u64> {
    let mut sig = vec![cycles(plan)];
    let outside = |k: usize| plan.temporal[k..].iter().map(|e| e.factor).product::<u64>();
    for c in DataClass::ALL {
        sig.push(tile_footprint(plan.spatial_entries(), c, &plan.strides));
        for k in [plan.pointers.local(c), plan.pointers.buffer(c)] {
            sig.push(tile_footprint(plan.temporal[..k].iter(), c, &plan.strides));
            sig.push(outside(k));
            if c == DataClass::Output {
                sig.push(crate::perf::distinct_output_tiles(plan, k));
            }
        }
    }
    sig
}

/// Whether `x` keeps the plan valid and leaves the modeled cost unchanged.
pub fn is_legal(plan: &UnrollPlan, x: Exchange) -> bool {
    let after = apply_exchange(plan, x);
    validate_plan(&after).is_ok() && model_signature(&after) == model_signature(plan)
}

fn candidates(plan: &UnrollPlan) -> Vec<Exchange> {
    let mut out = Vec::new();
    let t = &plan.temporal;
    for a in 0..t.len() {
        for b in a + 1..t.len() {
            if t[a] != t[b] {
                out.push(Exchange::Temporal { a, b });
            }
        }
    }
    for (li, l) in plan.spatial.iter().enumerate() {
        for (si, s) in l.entries.iter().enumerate() {
            for (ti, te) in t.iter().enumerate() {
                if s.param == te.param && (s.dim, s.factor) != (te.dim, te.factor) {
                    out.push(Exchange::SpatialTemporal {
                        list: li,
                        spatial: si,
                        temporal: ti,
                    });
                }
            }
        }
        for a in 0..l.entries.len() {
            for b in a + 1..l.entries.len() {
                if l.entries[a].param != l.entries[b].param {
                    out.push(Exchange::Spatial { list: li, a, b });
                }
            }
        }
    }
    out
}

/// Every legal exchange of the plan, in deterministic order.
pub fn legal_exchanges(plan: &UnrollPlan) -> Vec<Exchange> {
    candidates(plan)
        .into_iter()
        .filter(|&x| is_legal(plan, x))
        .collect()
}
