//! Analytic cycle and data-movement model over unroll plans.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accel::{AcceleratorSpec, PerClass, UnrollEntry, UnrollPlan};
use crate::chain::Chain;
use crate::gconv::{DimName, GConv, LoopParam};
use crate::tensor::element_count;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataClass {
    Input,
    Kernel,
    Output,
}

impl DataClass {
    pub const ALL: [DataClass; 3] = [DataClass::Input, DataClass::Kernel, DataClass::Output];

    /// Whether the tile of this class grows with loop parameter `p`.
    pub fn depends_on(self, p: LoopParam) -> bool {
        !matches!(
            (self, p),
            (DataClass::Input, LoopParam::Op)
                | (DataClass::Kernel, LoopParam::Opc)
                | (DataClass::Output, LoopParam::Ks)
        )
    }
}

impl fmt::Display for DataClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataClass::Input => "input",
            DataClass::Kernel => "kernel",
            DataClass::Output => "output",
        })
    }
}

#[derive(Clone, Copy)]
struct Prod {
    g: u64,
    op: u64,
    ks: u64,
    opc: u64,
}

/// Elements of one class touched by a set of unroll entries.
///
/// Per dimension: input `Pg * (Pks + s' * (Popc - 1))` with `s' = min(s, Pks)`,
/// kernel `Pg * Pop * Pks`, output `Pg * Pop * Popc`; the tile is the product
/// over dimensions. An empty set touches one element.
pub fn tile_footprint<'a>(
    entries: impl IntoIterator<Item = &'a UnrollEntry>,
    class: DataClass,
    strides: &BTreeMap<DimName, u64>,
) -> u64 {
    let mut per: BTreeMap<DimName, Prod> = BTreeMap::new();
    for e in entries {
        let p = per.entry(e.dim).or_insert(Prod {
            g: 1,
            op: 1,
            ks: 1,
            opc: 1,
        });
        match e.param {
            LoopParam::G => p.g *= e.factor,
            LoopParam::Op => p.op *= e.factor,
            LoopParam::Ks => p.ks *= e.factor,
            LoopParam::Opc => p.opc *= e.factor,
        }
    }
    per.iter()
        .map(|(d, p)| match class {
            DataClass::Input => {
                let s = strides.get(d).copied().unwrap_or(1).min(p.ks);
                p.g * (p.ks + s * (p.opc - 1))
            }
            DataClass::Kernel => p.g * p.op * p.ks,
            DataClass::Output => p.g * p.op * p.opc,
        })
        .fold(1u64, |a, b| a.saturating_mul(b))
}

/// Product over loops of `ceil(N / spatial factor)`.
pub fn cycles(plan: &UnrollPlan) -> u64 {
    plan.loops
        .iter()
        .map(|t| {
            let sp = plan.spatial_factor(crate::gconv::LoopId {
                dim: t.dim,
                param: t.param,
            });
            t.trip.div_ceil(sp)
        })
        .product()
}

/// Distinct output tiles visited by the temporal loops outside `pointer`.
pub fn distinct_output_tiles(plan: &UnrollPlan, pointer: usize) -> u64 {
    plan.temporal[pointer..]
        .iter()
        .filter(|e| DataClass::Output.depends_on(e.param))
        .map(|e| e.factor)
        .product()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    /// The class's per-PE scratchpad (ILS, KLS or OLS).
    Local,
    GlobalBuffer,
    /// Off-chip memory: the whole temporal list fits.
    Dram,
}

/// Movement of one class into (or, for outputs, out of and back into) a level:
/// refills from loops outside the level's pointer, times the spatial tile,
/// times the per-PE temporal tile inside the pointer. Outputs add one reload
/// per revisit of a partially reduced tile.
pub fn level_movement(plan: &UnrollPlan, level: Level, class: DataClass) -> u64 {
    if class == DataClass::Kernel && !plan.has_kernel {
        return 0;
    }
    let ptr = match level {
        Level::Local => plan.pointers.local(class),
        Level::GlobalBuffer => plan.pointers.buffer(class),
        Level::Dram => plan.temporal.len(),
    };
    let refills: u64 = plan.temporal[ptr..].iter().map(|e| e.factor).product();
    let sp = tile_footprint(plan.spatial_entries(), class, &plan.strides);
    let tp = tile_footprint(plan.temporal[..ptr].iter(), class, &plan.strides);
    let passes = if class == DataClass::Output {
        2 * refills - distinct_output_tiles(plan, ptr)
    } else {
        refills
    };
    passes * sp * tp
}

/// Distinct real (unpadded) elements each class must move at least once.
pub fn compulsory(g: &GConv) -> PerClass {
    let input: u64 = g
        .dims
        .values()
        .map(|p| {
            let ext = (p.nopc - 1) * p.s + p.nks - 2 * p.ps;
            let mut hit = vec![false; ext as usize];
            for o in 0..p.nopc {
                for k in 0..p.nks {
                    let pos = o * p.s + k;
                    if pos >= p.ps && pos - p.ps < ext {
                        hit[(pos - p.ps) as usize] = true;
                    }
                }
            }
            p.ng * hit.iter().filter(|&&h| h).count() as u64
        })
        .product();
    PerClass {
        input,
        kernel: if g.kernel_ref.is_some() {
            element_count(&g.kernel_shape()) as u64
        } else {
            0
        },
        output: element_count(&g.output_shape()) as u64,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Movement {
    pub local: PerClass,
    pub global_buffer: PerClass,
    pub dram: PerClass,
}

impl Movement {
    pub fn total(&self) -> u64 {
        [self.local, self.global_buffer, self.dram]
            .iter()
            .map(|c| c.input + c.kernel + c.output)
            .sum()
    }

    fn add(&mut self, o: &Movement) {
        for (a, b) in [
            (&mut self.local, &o.local),
            (&mut self.global_buffer, &o.global_buffer),
            (&mut self.dram, &o.dram),
        ] {
            a.input += b.input;
            a.kernel += b.kernel;
            a.output += b.output;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeReport {
    pub id: String,
    pub cycles: u64,
    pub movement: Movement,
    pub compulsory: PerClass,
    /// Elements of parameters absorbed by fusion, charged to the kernel class.
    pub fused_param_elements: u64,
    pub lower_bound_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub cycles: u64,
    pub movement: Movement,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerfReport {
    pub accelerator: String,
    pub element_bytes: u64,
    pub nodes: Vec<NodeReport>,
    pub totals: Totals,
}

impl PerfReport {
    pub fn bytes(&self, elements: u64) -> u64 {
        elements * self.element_bytes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PerfError {
    #[error("no plan for node `{0}`")]
    MissingPlan(String),
}

pub fn analyze_gconv(g: &GConv, plan: &UnrollPlan, fused_param_elements: u64) -> NodeReport {
    let mut movement = Movement::default();
    for c in DataClass::ALL {
        *movement.local.get_mut(c) = level_movement(plan, Level::Local, c);
        *movement.global_buffer.get_mut(c) = level_movement(plan, Level::GlobalBuffer, c);
        *movement.dram.get_mut(c) = level_movement(plan, Level::Dram, c);
    }
    movement.global_buffer.kernel += fused_param_elements;
    movement.dram.kernel += fused_param_elements;
    let need = compulsory(g);
    let lower_bound_ok = DataClass::ALL.into_iter().all(|c| {
        [movement.local, movement.global_buffer, movement.dram]
            .iter()
            .all(|m| m.get(c) >= need.get(c))
    });
    NodeReport {
        id: g.id.clone(),
        cycles: cycles(plan),
        movement,
        compulsory: need,
        fused_param_elements,
        lower_bound_ok,
    }
}

/// Per-node cycles and movement plus chain totals.
pub fn analyze_chain(
    chain: &Chain,
    plans: &BTreeMap<String, UnrollPlan>,
    accel: &AcceleratorSpec,
) -> Result<PerfReport, PerfError> {
    let mut nodes = Vec::new();
    let mut totals = Totals {
        cycles: 0,
        movement: Movement::default(),
    };
    for g in &chain.nodes {
        let plan = plans
            .get(&g.id)
            .ok_or_else(|| PerfError::MissingPlan(g.id.clone()))?;
        let fused: u64 = g
            .fused_params
            .iter()
            .filter_map(|f| chain.tensors.get(&f.tensor))
            .map(|t| element_count(&t.shape) as u64)
            .sum();
        let r = analyze_gconv(g, plan, fused);
        totals.cycles += r.cycles;
        totals.movement.add(&r.movement);
        nodes.push(r);
    }
    Ok(PerfReport {
        accelerator: accel.name.clone(),
        element_bytes: accel.element_bytes,
        nodes,
        totals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accel::{Phase, PlanCapacities, Pointers, SpatialList, LoopTrip};

    fn ent(param: LoopParam, dim: DimName, factor: u64) -> UnrollEntry {
        UnrollEntry {
            param,
            dim,
            factor,
            phase: Phase::Temporal,
        }
    }

    fn plan(spatial: Vec<UnrollEntry>, temporal: Vec<UnrollEntry>) -> UnrollPlan {
        let mut trips: BTreeMap<(DimName, LoopParam), u64> = BTreeMap::new();
        for e in spatial.iter().chain(&temporal) {
            *trips.entry((e.dim, e.param)).or_insert(1) *= e.factor;
        }
        UnrollPlan {
            gconv: "t".into(),
            loops: trips
                .into_iter()
                .map(|((dim, param), trip)| LoopTrip { dim, param, trip })
                .collect(),
            strides: BTreeMap::new(),
            has_kernel: true,
            spatial: vec![SpatialList {
                label: "px".into(),
                size: 1 << 20,
                entries: spatial,
            }],
            output_format_dim: 0,
            temporal,
            pointers: Pointers::default(),
            capacities: PlanCapacities {
                local: PerClass {
                    input: u64::MAX,
                    kernel: u64::MAX,
                    output: u64::MAX,
                },
                global_buffer: PerClass {
                    input: u64::MAX,
                    kernel: u64::MAX,
                    output: u64::MAX,
                },
            },
        }
    }

    #[test]
    fn footprints_follow_the_reuse_table() {
        let s = BTreeMap::new();
        let input = [ent(LoopParam::Ks, DimName::W, 3), ent(LoopParam::Opc, DimName::W, 5)];
        assert_eq!(tile_footprint(&input, DataClass::Input, &s), 7);
        let kernel = [
            ent(LoopParam::G, DimName::C, 2),
            ent(LoopParam::Op, DimName::C, 3),
            ent(LoopParam::Ks, DimName::C, 4),
        ];
        assert_eq!(tile_footprint(&kernel, DataClass::Kernel, &s), 24);
        assert_eq!(tile_footprint(&[], DataClass::Output, &s), 1);
    }

    #[test]
    fn strided_windows_do_not_overlap() {
        let s = [(DimName::W, 4)].into_iter().collect();
        let input = [ent(LoopParam::Ks, DimName::W, 3), ent(LoopParam::Opc, DimName::W, 5)];
        assert_eq!(tile_footprint(&input, DataClass::Input, &s), 15);
    }

    #[test]
    fn cycles_ceil_over_spatial_factor() {
        let mut p = plan(vec![ent(LoopParam::Opc, DimName::H, 14)], vec![ent(LoopParam::Opc, DimName::H, 8)]);
        p.loops[0].trip = 100;
        assert_eq!(cycles(&p), 8);
    }

    #[test]
    fn kls_movement_counts_outer_refills() {
        let mut p = plan(
            vec![ent(LoopParam::Op, DimName::C, 6)],
            vec![ent(LoopParam::Op, DimName::C, 2), ent(LoopParam::Opc, DimName::H, 5)],
        );
        p.pointers.klst = 1;
        assert_eq!(level_movement(&p, Level::Local, DataClass::Kernel), 5 * 6 * 2);
        p.pointers.klst = 2;
        assert_eq!(level_movement(&p, Level::Local, DataClass::Kernel), 6 * 2);
    }

    #[test]
    fn output_revisits_are_reloaded() {
        // ks outside the pointer revisits the same outputs three times
        let p = plan(vec![], vec![ent(LoopParam::Opc, DimName::W, 4), ent(LoopParam::Ks, DimName::W, 3)]);
        let mut q = p.clone();
        q.pointers.olst = 1;
        assert_eq!(level_movement(&q, Level::Local, DataClass::Output), (2 * 3 - 1) * 4);
    }

    #[test]
    fn default_gconv_moves_compulsory_traffic_only() {
        let g = GConv::new("g", "x");
        let p = crate::accel::map_gconv(&g, &crate::accel::preset("eyeriss").unwrap());
        let r = analyze_gconv(&g, &p, 0);
        assert_eq!(r.cycles, 1);
        assert_eq!(r.movement.local, PerClass { input: 1, kernel: 0, output: 1 });
        assert!(r.lower_bound_ok);
    }
}
