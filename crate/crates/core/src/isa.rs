//! Binary instruction stream: fixed-width entries of four little-endian
//! `u16` fields, grouped in a header, basic-info, unroll-list and
//! output-address section. Every section, block and list ends in an
//! all-zero entry; no valid entry has a zero first field.
//!
//! The layout is documented in `docs/instruction-format.md`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_rational::Ratio;
use thiserror::Error;

use crate::accel::{
    LoopTrip, Phase, PerClass, PlanCapacities, Pointers, PointerSet, SpatialList,
    UnrollEntry, UnrollPlan,
};
use crate::chain::{Chain, TensorDecl, TensorSource};
use crate::perf::DataClass;
use crate::gconv::{
    DimName, DimParams, FusedParam, GConv, LoopParam, Lut, MainOp, Operators, PointOp, ReduceOp,
    Shape, Slot,
};

pub type Entry = [u16; 4];

pub const MAGIC: [u16; 2] = [0x4347, 0x4843];
pub const VERSION: u16 = 1;
pub const DELIMITER: Entry = [0; 4];

pub mod tag {
    pub const CONFIG: u16 = 0x01;
    pub const TENSOR: u16 = 0x02;
    pub const EXTENT: u16 = 0x03;
    pub const OUTPUTS: u16 = 0x04;
    pub const STRING: u16 = 0x08;
    pub const STRING_DATA: u16 = 0x09;
    pub const GCONV: u16 = 0x10;
    pub const DIM_A: u16 = 0x11;
    pub const DIM_B: u16 = 0x12;
    pub const OPS: u16 = 0x13;
    pub const STEP: u16 = 0x14;
    pub const CONST_LO: u16 = 0x15;
    pub const CONST_HI: u16 = 0x16;
    pub const FUSED: u16 = 0x17;
    pub const PLAN: u16 = 0x20;
    pub const LIST: u16 = 0x21;
    pub const POINTERS_LOCAL: u16 = 0x22;
    pub const POINTERS_BUFFER: u16 = 0x23;
    pub const CAPACITY: u16 = 0x24;
    pub const ADDRESS: u16 = 0x30;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IsaError {
    #[error("encoding overflow: {what} = {value} does not fit in {bits} bits")]
    Overflow {
        what: String,
        value: u64,
        bits: u32,
    },
    #[error("no plan for node `{0}`")]
    MissingPlan(String),
    #[error("malformed stream at entry {index}: {msg}")]
    Malformed { index: usize, msg: String },
}

/// A decoded stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub chain: Chain,
    pub plans: BTreeMap<String, UnrollPlan>,
    /// Output address of each node, in node order, in elements.
    pub addresses: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstructionStream {
    pub bytes: Vec<u8>,
    pub text: String,
}

pub fn emit_instructions(
    chain: &Chain,
    plans: &BTreeMap<String, UnrollPlan>,
) -> Result<InstructionStream, IsaError> {
    let bytes = encode(chain, plans)?;
    let text = disassemble(&bytes)?;
    Ok(InstructionStream { bytes, text })
}

/// Bump allocation of node outputs over the data buffer, in emission order.
pub fn output_addresses(chain: &Chain) -> Vec<u64> {
    let mut next = 0;
    chain
        .nodes
        .iter()
        .map(|g| {
            let at = next;
            next += g.output_shape().values().product::<u64>();
            at
        })
        .collect()
}

fn main_code(m: MainOp) -> u16 {
    if m == MainOp::Identity {
        0
    } else {
        m.code()
    }
}

fn first_code(steps: &[PointOp]) -> u16 {
    steps.first().map_or(0, PointOp::code)
}

/// Packed 4-bit operator codes `pre|main|reduce|post`, 0 meaning absent.
pub fn operator_codes(ops: &Operators) -> u16 {
    first_code(&ops.pre) << 12
        | main_code(ops.main) << 8
        | ops.reduce.code() << 4
        | first_code(&ops.post)
}

fn slot_code(s: Slot) -> u16 {
    match s {
        Slot::Pre => 1,
        Slot::Post => 2,
    }
}

fn class_code(c: DataClass) -> u16 {
    match c {
        DataClass::Input => 1,
        DataClass::Kernel => 2,
        DataClass::Output => 3,
    }
}

const CLASSES: [DataClass; 3] = [DataClass::Input, DataClass::Kernel, DataClass::Output];

struct Writer {
    entries: Vec<Entry>,
}

fn fit16(what: impl FnOnce() -> String, value: u64) -> Result<u16, IsaError> {
    u16::try_from(value).map_err(|_| IsaError::Overflow {
        what: what(),
        value,
        bits: 16,
    })
}

fn split48(what: impl FnOnce() -> String, value: u64) -> Result<[u16; 3], IsaError> {
    if value >> 48 != 0 {
        return Err(IsaError::Overflow {
            what: what(),
            value,
            bits: 48,
        });
    }
    Ok([value as u16, (value >> 16) as u16, (value >> 32) as u16])
}

impl Writer {
    fn push(&mut self, e: Entry) {
        debug_assert!(e[0] != 0);
        self.entries.push(e);
    }

    fn end(&mut self) {
        self.entries.push(DELIMITER);
    }

    fn string(&mut self, s: &str) -> Result<(), IsaError> {
        let len = fit16(|| format!("length of `{s}`"), s.len() as u64)?;
        self.push([tag::STRING, len, 0, 0]);
        for chunk in s.as_bytes().chunks(6) {
            let mut b = [0u8; 6];
            b[..chunk.len()].copy_from_slice(chunk);
            self.push([
                tag::STRING_DATA,
                u16::from_le_bytes([b[0], b[1]]),
                u16::from_le_bytes([b[2], b[3]]),
                u16::from_le_bytes([b[4], b[5]]),
            ]);
        }
        Ok(())
    }

    fn word(&mut self, bits: u64) {
        self.push([tag::CONST_LO, bits as u16, (bits >> 16) as u16, (bits >> 32) as u16]);
        self.push([tag::CONST_HI, (bits >> 48) as u16, 0, 0]);
    }

    fn shape(&mut self, shape: &Shape, ctx: &str) -> Result<(), IsaError> {
        for (&d, &e) in shape {
            let [a, b, c] = split48(|| format!("{ctx} extent {d}"), e)?;
            self.push([tag::EXTENT | d.code() << 8, a, b, c]);
        }
        Ok(())
    }

    fn steps(&mut self, slot: Slot, steps: &[PointOp]) -> Result<(), IsaError> {
        let sc = slot_code(slot) << 8;
        for st in steps {
            match st {
                PointOp::Square => self.push([tag::STEP | sc, st.code(), 0, 0]),
                PointOp::Scale(r) => {
                    self.push([tag::STEP | sc, st.code(), 0, 0]);
                    self.word(*r.numer() as u64);
                    self.word(*r.denom() as u64);
                }
                PointOp::Lut(l) => {
                    let n = fit16(|| format!("argument count of lut `{}`", l.name), l.args.len() as u64)?;
                    self.push([tag::STEP | sc, st.code(), n, 0]);
                    self.string(&l.name)?;
                    for a in &l.args {
                        self.word(a.to_bits());
                    }
                }
                PointOp::WithParam { op, param } => {
                    let p = fit16(|| "fused parameter index".into(), *param as u64)?;
                    self.push([tag::STEP | sc, st.code(), op.code(), p]);
                }
            }
        }
        Ok(())
    }

    fn gconv(&mut self, g: &GConv) -> Result<(), IsaError> {
        let id = &g.id;
        let ndims = g.dims.len() as u16;
        let nfused = fit16(|| format!("{id} fused parameter count"), g.fused_params.len() as u64)?;
        self.push([tag::GCONV, ndims, nfused, g.kernel_ref.is_some() as u16]);
        self.string(id)?;
        self.string(&g.output_id)?;
        self.string(&g.input_ref)?;
        if let Some(k) = &g.kernel_ref {
            self.string(k)?;
        }
        for (&d, p) in &g.dims {
            let f = |name: &'static str, v: u64| fit16(|| format!("{id} {d}.{name}"), v);
            self.push([tag::DIM_A | d.code() << 8, f("ng", p.ng)?, f("nop", p.nop)?, f("nks", p.nks)?]);
            self.push([tag::DIM_B | d.code() << 8, f("nopc", p.nopc)?, f("s", p.s)?, f("ps", p.ps)?]);
        }
        let ops = &g.ops;
        let npre = fit16(|| format!("{id} pre steps"), ops.pre.len() as u64)?;
        let npost = fit16(|| format!("{id} post steps"), ops.post.len() as u64)?;
        self.push([tag::OPS, operator_codes(ops), npre, npost]);
        // Unpacked main and reduce codes.
        self.push([tag::OPS, ops.main.code(), ops.reduce.code() | 0x100, 0]);
        self.steps(Slot::Pre, &ops.pre)?;
        self.steps(Slot::Post, &ops.post)?;
        for fp in &g.fused_params {
            let mut packed = 0u32;
            for (i, d) in fp.broadcast.iter().enumerate() {
                packed |= (d.code() as u32) << (4 * i);
            }
            if fp.broadcast.len() > 6 {
                return Err(IsaError::Overflow {
                    what: format!("{id} broadcast dims"),
                    value: fp.broadcast.len() as u64,
                    bits: 3,
                });
            }
            self.push([
                tag::FUSED | slot_code(fp.slot) << 8,
                fp.broadcast.len() as u16,
                packed as u16,
                (packed >> 16) as u16,
            ]);
            self.string(&fp.tensor)?;
        }
        self.end();
        Ok(())
    }

    fn unroll_entry(&mut self, e: &UnrollEntry, plan: &UnrollPlan) -> Result<(), IsaError> {
        let ctx = || format!("{} {}.{}", plan.gconv, e.dim, e.param);
        let factor = fit16(|| format!("{} factor", ctx()), e.factor)?;
        let arg = fit16(|| format!("{} argument", ctx()), plan.trip(e.loop_id()))?;
        self.push([e.dim.code() | e.phase.code() << 8, e.param.code(), factor, arg]);
        Ok(())
    }

    fn plan(&mut self, plan: &UnrollPlan) -> Result<(), IsaError> {
        let id = &plan.gconv;
        let n = |what: &str, v: usize| fit16(|| format!("{id} {what}"), v as u64);
        self.push([
            tag::PLAN,
            n("spatial lists", plan.spatial.len())?,
            n("temporal entries", plan.temporal.len())?,
            n("output format dim", plan.output_format_dim)? | 0x8000,
        ]);
        for l in &plan.spatial {
            let [a, b, c] = split48(|| format!("{id} size of {}", l.label), l.size)?;
            self.push([tag::LIST, a, b, c]);
            self.string(&l.label)?;
            for e in &l.entries {
                self.unroll_entry(e, plan)?;
            }
            self.end();
        }
        for e in &plan.temporal {
            self.unroll_entry(e, plan)?;
        }
        self.end();
        let p = &plan.pointers;
        self.push([
            tag::POINTERS_LOCAL,
            n("ilst", p.ilst)?,
            n("klst", p.klst)?,
            n("olst", p.olst)?,
        ]);
        let gb = &p.global_buffer;
        self.push([
            tag::POINTERS_BUFFER,
            n("gb input pointer", gb.input)?,
            n("gb kernel pointer", gb.kernel)?,
            n("gb output pointer", gb.output)?,
        ]);
        for (lvl, per) in [(1u16, &plan.capacities.local), (2, &plan.capacities.global_buffer)] {
            for c in CLASSES {
                let [a, b, cc] = split48(|| format!("{id} capacity"), per.get(c))?;
                self.push([tag::CAPACITY | class_code(c) << 8 | lvl << 12, a, b, cc]);
            }
        }
        Ok(())
    }
}

fn kind_code(s: &TensorSource) -> u16 {
    match s {
        TensorSource::Input => 1,
        TensorSource::Param => 2,
        TensorSource::Node => 3,
        TensorSource::Concat { .. } => 4,
    }
}

pub fn encode_entries(
    chain: &Chain,
    plans: &BTreeMap<String, UnrollPlan>,
) -> Result<Vec<Entry>, IsaError> {
    let mut w = Writer { entries: vec![] };
    let cnt = |what: &str, v: usize| fit16(|| what.to_string(), v as u64);
    w.entries
        .push([MAGIC[0], MAGIC[1], VERSION, cnt("node count", chain.nodes.len())?]);
    w.push([
        tag::CONFIG,
        cnt("tensor count", chain.tensors.len())?,
        cnt("output count", chain.outputs.len())?,
        0,
    ]);
    for (name, decl) in &chain.tensors {
        let (axis, parts) = match &decl.source {
            TensorSource::Concat { axis, parts } => (axis.code(), parts.as_slice()),
            _ => (0, &[][..]),
        };
        w.push([
            tag::TENSOR | kind_code(&decl.source) << 8,
            decl.shape.len() as u16,
            axis,
            cnt("concat parts", parts.len())?,
        ]);
        w.string(name)?;
        w.shape(&decl.shape, name)?;
        for p in parts {
            w.string(p)?;
        }
    }
    w.push([tag::OUTPUTS, chain.outputs.len() as u16, 0, 0]);
    for o in &chain.outputs {
        w.string(o)?;
    }
    w.end();

    for g in &chain.nodes {
        w.gconv(g)?;
    }
    w.end();

    for g in &chain.nodes {
        let plan = plans
            .get(&g.id)
            .ok_or_else(|| IsaError::MissingPlan(g.id.clone()))?;
        w.plan(plan)?;
    }
    w.end();

    for (i, a) in output_addresses(chain).into_iter().enumerate() {
        if a >> 32 != 0 {
            return Err(IsaError::Overflow {
                what: format!("address of node {i}"),
                value: a,
                bits: 32,
            });
        }
        w.push([tag::ADDRESS, cnt("node index", i + 1)?, a as u16, (a >> 16) as u16]);
    }
    w.end();
    Ok(w.entries)
}

pub fn encode(chain: &Chain, plans: &BTreeMap<String, UnrollPlan>) -> Result<Vec<u8>, IsaError> {
    Ok(encode_entries(chain, plans)?
        .iter()
        .flat_map(|e| e.iter().flat_map(|f| f.to_le_bytes()))
        .collect())
}

pub fn entries_from_bytes(bytes: &[u8]) -> Result<Vec<Entry>, IsaError> {
    if bytes.len() % 8 != 0 {
        return Err(IsaError::Malformed {
            index: bytes.len() / 8,
            msg: format!("length {} is not a multiple of 8 bytes", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| {
            let f = |i: usize| u16::from_le_bytes([c[2 * i], c[2 * i + 1]]);
            [f(0), f(1), f(2), f(3)]
        })
        .collect())
}

struct Reader<'a> {
    entries: &'a [Entry],
    pos: usize,
}

impl Reader<'_> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T, IsaError> {
        Err(IsaError::Malformed {
            index: self.pos,
            msg: msg.into(),
        })
    }

    fn next(&mut self) -> Result<Entry, IsaError> {
        match self.entries.get(self.pos) {
            Some(&e) => {
                self.pos += 1;
                Ok(e)
            }
            None => self.err("unexpected end of stream"),
        }
    }

    fn peek(&self) -> Option<Entry> {
        self.entries.get(self.pos).copied()
    }

    /// Next entry, whose low tag byte must be `t`; returns it and the high byte.
    fn tagged(&mut self, t: u16) -> Result<(Entry, u16), IsaError> {
        let e = self.next()?;
        if e[0] & 0xff != t {
            self.pos -= 1;
            return self.err(format!("expected tag {t:#04x}, found {:#06x}", e[0]));
        }
        Ok((e, e[0] >> 8))
    }

    fn delimiter(&mut self) -> Result<(), IsaError> {
        let e = self.next()?;
        if e != DELIMITER {
            self.pos -= 1;
            return self.err(format!("expected delimiter, found {e:?}"));
        }
        Ok(())
    }

    fn string(&mut self) -> Result<String, IsaError> {
        let (e, _) = self.tagged(tag::STRING)?;
        let len = e[1] as usize;
        let mut bytes = Vec::with_capacity(len + 6);
        while bytes.len() < len {
            let (d, _) = self.tagged(tag::STRING_DATA)?;
            for f in &d[1..] {
                bytes.extend(f.to_le_bytes());
            }
        }
        bytes.truncate(len);
        String::from_utf8(bytes).or_else(|_| self.err("string is not UTF-8"))
    }

    fn word(&mut self) -> Result<u64, IsaError> {
        let (lo, _) = self.tagged(tag::CONST_LO)?;
        let (hi, _) = self.tagged(tag::CONST_HI)?;
        Ok(lo[1] as u64 | (lo[2] as u64) << 16 | (lo[3] as u64) << 32 | (hi[1] as u64) << 48)
    }

    fn dim(&self, code: u16) -> Result<DimName, IsaError> {
        DimName::from_code(code).map_or_else(|| self.err(format!("bad dim code {code}")), Ok)
    }

    fn shape(&mut self, n: usize) -> Result<Shape, IsaError> {
        let mut s = Shape::new();
        for _ in 0..n {
            let (e, d) = self.tagged(tag::EXTENT)?;
            s.insert(self.dim(d)?, join48(e[1], e[2], e[3]));
        }
        Ok(s)
    }

    fn steps(&mut self, slot: Slot, n: usize) -> Result<Vec<PointOp>, IsaError> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let (e, s) = self.tagged(tag::STEP)?;
            if s != slot_code(slot) {
                return self.err("step in the wrong slot");
            }
            out.push(match e[1] {
                1 => PointOp::Square,
                2 => {
                    let n = self.word()? as i64;
                    let d = self.word()? as i64;
                    if d == 0 {
                        return self.err("zero denominator");
                    }
                    PointOp::Scale(Ratio::new_raw(n, d))
                }
                3 => {
                    let name = self.string()?;
                    let args = (0..e[2])
                        .map(|_| self.word().map(f64::from_bits))
                        .collect::<Result<_, _>>()?;
                    PointOp::Lut(Lut { name, args })
                }
                4 => PointOp::WithParam {
                    op: MainOp::from_code(e[2])
                        .map_or_else(|| self.err(format!("bad main op code {}", e[2])), Ok)?,
                    param: e[3] as usize,
                },
                c => return self.err(format!("bad step code {c}")),
            });
        }
        Ok(out)
    }

    fn gconv(&mut self) -> Result<GConv, IsaError> {
        let (h, _) = self.tagged(tag::GCONV)?;
        let id = self.string()?;
        let output_id = self.string()?;
        let input_ref = self.string()?;
        let kernel_ref = if h[3] & 1 != 0 {
            Some(self.string()?)
        } else {
            None
        };
        let mut dims = BTreeMap::new();
        for _ in 0..h[1] {
            let (a, d) = self.tagged(tag::DIM_A)?;
            let (b, d2) = self.tagged(tag::DIM_B)?;
            if d != d2 {
                return self.err("dimension entries disagree");
            }
            let dp = DimParams {
                ng: a[1] as u64,
                nop: a[2] as u64,
                nks: a[3] as u64,
                nopc: b[1] as u64,
                s: b[2] as u64,
                ps: b[3] as u64,
            };
            dims.insert(self.dim(d)?, dp);
        }
        let (packed, _) = self.tagged(tag::OPS)?;
        let (full, _) = self.tagged(tag::OPS)?;
        let main = MainOp::from_code(full[1])
            .map_or_else(|| self.err(format!("bad main op code {}", full[1])), Ok)?;
        let reduce = ReduceOp::from_code(full[2] & 0xff)
            .map_or_else(|| self.err(format!("bad reduce code {}", full[2])), Ok)?;
        let ops = Operators {
            pre: self.steps(Slot::Pre, packed[2] as usize)?,
            main,
            reduce,
            post: self.steps(Slot::Post, packed[3] as usize)?,
        };
        if operator_codes(&ops) != packed[1] {
            return self.err("operator codes disagree with the operator steps");
        }
        let mut fused_params = Vec::with_capacity(h[2] as usize);
        for _ in 0..h[2] {
            let (e, s) = self.tagged(tag::FUSED)?;
            let slot = match s {
                1 => Slot::Pre,
                2 => Slot::Post,
                _ => return self.err(format!("bad slot code {s}")),
            };
            let packed = e[2] as u32 | (e[3] as u32) << 16;
            let broadcast = (0..e[1])
                .map(|i| self.dim(((packed >> (4 * i)) & 0xf) as u16))
                .collect::<Result<_, _>>()?;
            fused_params.push(FusedParam {
                slot,
                tensor: self.string()?,
                broadcast,
            });
        }
        self.delimiter()?;
        Ok(GConv {
            id,
            dims,
            ops,
            input_ref,
            kernel_ref,
            fused_params,
            output_id,
        })
    }

    fn unroll_entry(&mut self, loops: &mut BTreeMap<(DimName, LoopParam), u64>) -> Result<UnrollEntry, IsaError> {
        let e = self.next()?;
        let dim = self.dim(e[0] & 0xff)?;
        let phase = Phase::from_code(e[0] >> 8)
            .map_or_else(|| self.err(format!("bad phase code {}", e[0] >> 8)), Ok)?;
        let param = LoopParam::from_code(e[1])
            .map_or_else(|| self.err(format!("bad param code {}", e[1])), Ok)?;
        if let Some(&prev) = loops.get(&(dim, param)) {
            if prev != e[3] as u64 {
                return self.err(format!("argument of {dim}.{param} disagrees between entries"));
            }
        }
        loops.insert((dim, param), e[3] as u64);
        Ok(UnrollEntry {
            param,
            dim,
            factor: e[2] as u64,
            phase,
        })
    }

    fn plan(&mut self, g: &GConv) -> Result<UnrollPlan, IsaError> {
        let (h, _) = self.tagged(tag::PLAN)?;
        let mut loops = BTreeMap::new();
        let mut spatial = Vec::with_capacity(h[1] as usize);
        for _ in 0..h[1] {
            let (l, _) = self.tagged(tag::LIST)?;
            let label = self.string()?;
            let mut entries = vec![];
            while self.peek().is_some_and(|e| e != DELIMITER) {
                entries.push(self.unroll_entry(&mut loops)?);
            }
            self.delimiter()?;
            spatial.push(SpatialList {
                label,
                size: join48(l[1], l[2], l[3]),
                entries,
            });
        }
        let temporal = (0..h[2])
            .map(|_| self.unroll_entry(&mut loops))
            .collect::<Result<Vec<_>, _>>()?;
        self.delimiter()?;
        let (lp, _) = self.tagged(tag::POINTERS_LOCAL)?;
        let (bp, _) = self.tagged(tag::POINTERS_BUFFER)?;
        let mut caps = PlanCapacities {
            local: PerClass::default(),
            global_buffer: PerClass::default(),
        };
        for lvl in [1u16, 2] {
            for c in CLASSES {
                let (e, hi) = self.tagged(tag::CAPACITY)?;
                if hi != class_code(c) | lvl << 4 {
                    return self.err("capacity entries out of order");
                }
                let per = if lvl == 1 {
                    &mut caps.local
                } else {
                    &mut caps.global_buffer
                };
                *per.get_mut(c) = join48(e[1], e[2], e[3]);
            }
        }
        Ok(UnrollPlan {
            gconv: g.id.clone(),
            loops: loops
                .into_iter()
                .filter(|&(_, trip)| trip > 1)
                .map(|((dim, param), trip)| LoopTrip { dim, param, trip })
                .collect(),
            strides: g
                .dims
                .iter()
                .filter(|(_, p)| p.s != 1)
                .map(|(&d, p)| (d, p.s))
                .collect(),
            has_kernel: g.kernel_ref.is_some(),
            spatial,
            output_format_dim: (h[3] & 0x7fff) as usize,
            temporal,
            pointers: Pointers {
                ilst: lp[1] as usize,
                klst: lp[2] as usize,
                olst: lp[3] as usize,
                global_buffer: PointerSet {
                    input: bp[1] as usize,
                    kernel: bp[2] as usize,
                    output: bp[3] as usize,
                },
            },
            capacities: caps,
        })
    }
}

fn join48(a: u16, b: u16, c: u16) -> u64 {
    a as u64 | (b as u64) << 16 | (c as u64) << 32
}

pub fn decode(bytes: &[u8]) -> Result<Program, IsaError> {
    decode_entries(&entries_from_bytes(bytes)?)
}

pub fn decode_entries(entries: &[Entry]) -> Result<Program, IsaError> {
    let mut r = Reader { entries, pos: 0 };
    let h = r.next()?;
    if h[..2] != MAGIC {
        r.pos = 0;
        return r.err("bad magic");
    }
    if h[2] != VERSION {
        r.pos = 0;
        return r.err(format!("unsupported version {}", h[2]));
    }
    let n_nodes = h[3] as usize;
    let (cfg, _) = r.tagged(tag::CONFIG)?;
    let mut tensors = BTreeMap::new();
    for _ in 0..cfg[1] {
        let (e, kind) = r.tagged(tag::TENSOR)?;
        let name = r.string()?;
        let shape = r.shape(e[1] as usize)?;
        let source = match kind {
            1 => TensorSource::Input,
            2 => TensorSource::Param,
            3 => TensorSource::Node,
            4 => TensorSource::Concat {
                axis: r.dim(e[2])?,
                parts: (0..e[3]).map(|_| r.string()).collect::<Result<_, _>>()?,
            },
            k => return r.err(format!("bad tensor kind {k}")),
        };
        tensors.insert(name, TensorDecl { shape, source });
    }
    let (o, _) = r.tagged(tag::OUTPUTS)?;
    let outputs = (0..o[1]).map(|_| r.string()).collect::<Result<_, _>>()?;
    r.delimiter()?;

    let nodes = (0..n_nodes).map(|_| r.gconv()).collect::<Result<Vec<_>, _>>()?;
    r.delimiter()?;

    let mut plans = BTreeMap::new();
    for g in &nodes {
        plans.insert(g.id.clone(), r.plan(g)?);
    }
    r.delimiter()?;

    let mut addresses = Vec::with_capacity(n_nodes);
    for i in 0..n_nodes {
        let (e, _) = r.tagged(tag::ADDRESS)?;
        if e[1] as usize != i + 1 {
            return r.err("address entries out of order");
        }
        addresses.push(e[2] as u64 | (e[3] as u64) << 16);
    }
    r.delimiter()?;
    if r.pos != entries.len() {
        return r.err("trailing entries after the address section");
    }
    Ok(Program {
        chain: Chain {
            nodes,
            tensors,
            outputs,
        },
        plans,
        addresses,
    })
}

fn fmt_shape(s: &Shape) -> String {
    s.iter()
        .map(|(d, e)| format!("{d}{e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn fmt_step(st: &PointOp) -> String {
    match st {
        PointOp::Square => "square".into(),
        PointOp::Scale(r) => format!("scale {r}"),
        PointOp::Lut(l) => format!("lut {}{:?}", l.name, l.args),
        PointOp::WithParam { op, param } => format!("{op:?}(p{param})").to_lowercase(),
    }
}

/// Human-readable listing of a stream, one line per logical instruction.
pub fn disassemble(bytes: &[u8]) -> Result<String, IsaError> {
    let p = decode(bytes)?;
    let mut out = String::new();
    let c = &p.chain;
    let _ = writeln!(out, "; gconv instruction stream v{VERSION}, {} bytes", bytes.len());
    let _ = writeln!(out, "[header]");
    for (name, t) in &c.tensors {
        let kind = match &t.source {
            TensorSource::Input => "input".to_string(),
            TensorSource::Param => "param".to_string(),
            TensorSource::Node => "node".to_string(),
            TensorSource::Concat { axis, parts } => format!("concat {axis} [{}]", parts.join(", ")),
        };
        let _ = writeln!(out, "tensor {name} {kind} ({})", fmt_shape(&t.shape));
    }
    let _ = writeln!(out, "outputs {}", c.outputs.join(", "));
    let _ = writeln!(out, "[basic-info]");
    for (i, g) in c.nodes.iter().enumerate() {
        let _ = writeln!(
            out,
            "gconv {i} {} in={} kernel={} out={}",
            g.id,
            g.input_ref,
            g.kernel_ref.as_deref().unwrap_or("-"),
            g.output_id
        );
        for (d, dp) in &g.dims {
            let _ = writeln!(
                out,
                "  dim {d} ng={} nop={} nks={} nopc={} s={} ps={}",
                dp.ng, dp.nop, dp.nks, dp.nopc, dp.s, dp.ps
            );
        }
        let o = &g.ops;
        let steps = |v: &[PointOp]| v.iter().map(fmt_step).collect::<Vec<_>>().join(", ");
        let _ = writeln!(
            out,
            "  ops {:#06x} pre=[{}] main={:?} reduce={:?} post=[{}]",
            operator_codes(o),
            steps(&o.pre),
            o.main,
            o.reduce,
            steps(&o.post)
        );
        for fp in &g.fused_params {
            let b: Vec<_> = fp.broadcast.iter().map(|d| d.as_str()).collect();
            let _ = writeln!(out, "  fused {:?} {} broadcast=[{}]", fp.slot, fp.tensor, b.join(","));
        }
    }
    let _ = writeln!(out, "[unroll]");
    for g in &c.nodes {
        let plan = &p.plans[&g.id];
        let _ = writeln!(out, "plan {}", g.id);
        let list = |v: &[UnrollEntry]| {
            v.iter()
                .map(|e| format!("{e}/{}", plan.trip(e.loop_id())))
                .collect::<Vec<_>>()
                .join(" ")
        };
        for l in &plan.spatial {
            let _ = writeln!(out, "  {}({}): {}", l.label, l.size, list(&l.entries));
        }
        let _ = writeln!(out, "  temporal: {}", list(&plan.temporal));
        let pt = &plan.pointers;
        let _ = writeln!(
            out,
            "  pointers local i={} k={} o={} buffer i={} k={} o={}",
            pt.ilst, pt.klst, pt.olst, pt.global_buffer.input, pt.global_buffer.kernel, pt.global_buffer.output
        );
    }
    let _ = writeln!(out, "[address]");
    for (g, a) in c.nodes.iter().zip(&p.addresses) {
        let _ = writeln!(out, "addr {} {a:#010x}", g.id);
    }
    Ok(out)
}
