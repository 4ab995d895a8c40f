//! The four linear-layer backward workflows, each executed on a fresh
//! [`MemSim`] so its traffic can be read off the counters.
//!
//! Tensor layouts (row-major): `X[b][t][p]`, `dY[b][t][d]`,
//! per-sample gradients `G[b][d][p]`, and `∇W[d][p]`.
//!
//! All workflows tile with the same [`BlockPlan`]. A tile of `G` needs the
//! X tile of its `p` range and the dY tile of its `d` range, so with `n_d`
//! output tiles and `n_p` input tiles one pass over the inputs loads
//! `B·T·(P·n_d + D·n_p)` elements. The single-tile plan loads each input
//! element exactly once.
//!
//! When the batch is split into several chunks, clipped partial sums are
//! combined with atomic adds in main memory and a final pass after a
//! barrier adds the noise. Noise is always applied once, to the fully
//! reduced element, through [`finalize_element`].

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dpcore::{clip_factor, finalize_element, DPConfig};
use crate::error::{Error, Result};
use crate::memmodel::{BlockId, MemSim, MemSpec, RegionId, StoreTag, TrafficReport};
use crate::scalar::Scalar;
use crate::tensor::{frob_norm_sq, outer_accumulate, Tensor};
use crate::tiling::{plan_blocks, BlockPlan, LayerDims};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkflowKind {
    NonDp,
    ExplicitDp,
    ImplicitDp,
    #[serde(rename = "flashdp")]
    FlashDp,
}

impl WorkflowKind {
    pub const ALL: [WorkflowKind; 4] =
        [WorkflowKind::NonDp, WorkflowKind::ExplicitDp, WorkflowKind::ImplicitDp, WorkflowKind::FlashDp];

    pub fn name(self) -> &'static str {
        match self {
            WorkflowKind::NonDp => "non_dp",
            WorkflowKind::ExplicitDp => "explicit_dp",
            WorkflowKind::ImplicitDp => "implicit_dp",
            WorkflowKind::FlashDp => "flashdp",
        }
    }

    pub fn is_private(self) -> bool {
        self != WorkflowKind::NonDp
    }
}

impl std::fmt::Display for WorkflowKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for WorkflowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WorkflowKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown workflow `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardResult<S> {
    pub grad_w: Tensor<S>,
    pub report: TrafficReport,
    /// Empty for the non-private workflow.
    pub per_sample_norms_sq: Vec<S>,
    /// Bytes loaded from the X and dY regions only.
    pub input_bytes_loaded: u64,
}

/// Order in which the simulated parallel blocks of one batch chunk run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum BlockOrder {
    /// `i_p` outer, `i_d` inner.
    #[default]
    RowMajor,
    Reversed,
    /// A seeded permutation, drawn independently for each phase.
    Shuffled(u64),
}

/// Knobs for the fused workflow; the defaults are the normal algorithm.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlashOptions {
    pub block_order: BlockOrder,
    /// Drops the synchronization between the norm all-reduce and clipping.
    /// Only useful to demonstrate the resulting ordering fault.
    pub skip_norm_barrier: bool,
}

/// Checks `X: B×T×P`, `dY: B×T×D` and returns the layer dims.
pub fn layer_dims<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>) -> Result<LayerDims> {
    match (x.shape(), dy.shape()) {
        (&[b, t, p], &[b2, t2, d]) if b == b2 && t == t2 => LayerDims::new(b, t, p, d),
        _ => Err(Error::Shape { lhs: x.shape().to_vec(), rhs: dy.shape().to_vec() }),
    }
}

fn ranges(n: usize, tile: usize) -> Vec<Range<usize>> {
    (0..n.div_ceil(tile)).map(|i| i * tile..((i + 1) * tile).min(n)).collect()
}

struct Geometry {
    dims: LayerDims,
    chunks: Vec<Range<usize>>,
    t_tiles: Vec<Range<usize>>,
    /// (d range, p range), `i_p` outer and `i_d` inner.
    blocks: Vec<(Range<usize>, Range<usize>)>,
}

impl Geometry {
    fn new(dims: LayerDims, plan: &BlockPlan) -> Self {
        let d_tiles = ranges(dims.D, plan.d);
        let p_tiles = ranges(dims.P, plan.p);
        let blocks = p_tiles.iter().flat_map(|ps| d_tiles.iter().map(move |ds| (ds.clone(), ps.clone()))).collect();
        Self { dims, chunks: ranges(dims.B, plan.b), t_tiles: ranges(dims.T, plan.t), blocks }
    }

    fn x_idx(&self, bs: &Range<usize>, ts: &Range<usize>, ps: &Range<usize>) -> Vec<usize> {
        let LayerDims { T, P, .. } = self.dims;
        let mut out = Vec::with_capacity(bs.len() * ts.len() * ps.len());
        for b in bs.clone() {
            for t in ts.clone() {
                out.extend(ps.clone().map(|p| (b * T + t) * P + p));
            }
        }
        out
    }

    fn dy_idx(&self, bs: &Range<usize>, ts: &Range<usize>, ds: &Range<usize>) -> Vec<usize> {
        let LayerDims { T, D, .. } = self.dims;
        let mut out = Vec::with_capacity(bs.len() * ts.len() * ds.len());
        for b in bs.clone() {
            for t in ts.clone() {
                out.extend(ds.clone().map(|d| (b * T + t) * D + d));
            }
        }
        out
    }

    fn g_idx(&self, bs: &Range<usize>, ds: &Range<usize>, ps: &Range<usize>) -> Vec<usize> {
        let LayerDims { P, D, .. } = self.dims;
        let mut out = Vec::with_capacity(bs.len() * ds.len() * ps.len());
        for b in bs.clone() {
            for d in ds.clone() {
                out.extend(ps.clone().map(|p| (b * D + d) * P + p));
            }
        }
        out
    }

    fn w_idx(&self, ds: &Range<usize>, ps: &Range<usize>) -> Vec<usize> {
        let cols = self.dims.P;
        ds.clone().flat_map(|d| ps.clone().map(move |p| d * cols + p)).collect()
    }
}

/// Main-memory residents shared by the workflows.
struct Inputs {
    x: RegionId,
    dy: RegionId,
}

fn upload<S: Scalar>(sim: &mut MemSim<S>, x: &Tensor<S>, dy: &Tensor<S>) -> Result<Inputs> {
    Ok(Inputs { x: sim.alloc_input(x.data().to_vec())?, dy: sim.alloc_input(dy.data().to_vec())? })
}

/// Computes the `bs × ds × ps` per-sample gradient tile into a new scratch
/// region, streaming X and dY tiles along `t`.
fn grad_tile<S: Scalar>(
    sim: &mut MemSim<S>,
    block: BlockId,
    geo: &Geometry,
    inputs: &Inputs,
    (bs, ds, ps): (&Range<usize>, &Range<usize>, &Range<usize>),
    redundant: bool,
) -> Result<RegionId> {
    let (bb, dd, pp) = (bs.len(), ds.len(), ps.len());
    let g = sim.alloc_scratch(block, bb * dd * pp)?;
    for ts in &geo.t_tiles {
        let tt = ts.len();
        let xr = sim.load_gather(block, inputs.x, &geo.x_idx(bs, ts, ps))?;
        let yr = sim.load_gather(block, inputs.dy, &geo.dy_idx(bs, ts, ds))?;
        let xv = sim.scratch(xr)?.to_vec();
        let yv = sim.scratch(yr)?.to_vec();
        let gv = sim.scratch_mut(g)?;
        for s in 0..bb {
            outer_accumulate(
                &mut gv[s * dd * pp..(s + 1) * dd * pp],
                &yv[s * tt * dd..(s + 1) * tt * dd],
                &xv[s * tt * pp..(s + 1) * tt * pp],
                tt,
                dd,
                pp,
            );
        }
        sim.record_flops((2 * bb * tt * dd * pp) as u64, redundant)?;
        sim.free_scratch(xr)?;
        sim.free_scratch(yr)?;
    }
    Ok(g)
}

/// `norms[s] += ‖tile[s]‖²` for each sample slice of a gradient tile.
fn add_norms_sq<S: Scalar>(sim: &mut MemSim<S>, tile: RegionId, norms: RegionId, per_sample: usize) -> Result<()> {
    let g = sim.scratch(tile)?.to_vec();
    let n = sim.scratch_mut(norms)?;
    for (s, slot) in n.iter_mut().enumerate() {
        *slot += frob_norm_sq(&g[s * per_sample..(s + 1) * per_sample]);
    }
    sim.record_flops((2 * g.len()) as u64, false)
}

/// Scales each sample slice of `tile` by its clip factor.
fn clip_tile<S: Scalar>(sim: &mut MemSim<S>, tile: RegionId, norms_sq: &[S], clip_c: f64) -> Result<()> {
    let c = S::from_f64_lossy(clip_c);
    let g = sim.scratch_mut(tile)?;
    let per_sample = g.len() / norms_sq.len();
    for (s, &n2) in norms_sq.iter().enumerate() {
        let f = clip_factor(n2, c);
        for v in &mut g[s * per_sample..(s + 1) * per_sample] {
            *v *= f;
        }
    }
    let n = g.len() as u64;
    sim.record_flops(n, false)
}

/// Sums the sample slices of `tile` into slice 0, in sample order.
fn reduce_samples<S: Scalar>(sim: &mut MemSim<S>, tile: RegionId, samples: usize) -> Result<()> {
    let g = sim.scratch_mut(tile)?;
    let per_sample = g.len() / samples;
    let (head, rest) = g.split_at_mut(per_sample);
    for s in 1..samples {
        for (h, &v) in head.iter_mut().zip(&rest[(s - 1) * per_sample..s * per_sample]) {
            *h += v;
        }
    }
    sim.record_flops(((samples - 1) * per_sample) as u64, false)
}

/// Finalizes the first `w_idx.len()` scratch elements in place and stores them.
fn finalize_and_store<S: Scalar>(
    sim: &mut MemSim<S>,
    tile: RegionId,
    grad: RegionId,
    w_idx: &[usize],
    batch: usize,
    cfg: &DPConfig,
) -> Result<()> {
    let v = sim.scratch_mut(tile)?;
    for (slot, &i) in v.iter_mut().zip(w_idx) {
        *slot = finalize_element(*slot, batch, cfg, i as u64);
    }
    sim.record_flops(w_idx.len() as u64, false)?;
    sim.store_scatter(tile, grad, w_idx, StoreTag::Plain)
}

/// Either finalizes a reduced tile directly (single chunk) or adds it to the
/// main-memory accumulator for the closing pass.
fn emit_partial<S: Scalar>(
    sim: &mut MemSim<S>,
    tile: RegionId,
    grad: RegionId,
    w_idx: &[usize],
    single_chunk: bool,
    batch: usize,
    cfg: &DPConfig,
) -> Result<()> {
    if single_chunk {
        finalize_and_store(sim, tile, grad, w_idx, batch, cfg)
    } else {
        let vals = sim.scratch(tile)?[..w_idx.len()].to_vec();
        sim.atomic_accumulate_at(grad, w_idx, &vals)
    }
}

/// Closing pass after all chunks accumulated: load, add noise, store.
fn closing_pass<S: Scalar>(
    sim: &mut MemSim<S>,
    geo: &Geometry,
    grad: RegionId,
    batch: usize,
    cfg: &DPConfig,
) -> Result<()> {
    sim.barrier()?;
    for (j, (ds, ps)) in geo.blocks.iter().enumerate() {
        let block = BlockId(j);
        let w_idx = geo.w_idx(ds, ps);
        let r = sim.load_gather(block, grad, &w_idx)?;
        finalize_and_store(sim, r, grad, &w_idx, batch, cfg)?;
        sim.free_scratch(r)?;
    }
    Ok(())
}

fn finish<S: Scalar>(
    sim: MemSim<S>,
    dims: LayerDims,
    grad: RegionId,
    norms: Option<RegionId>,
) -> Result<BackwardResult<S>> {
    let grad_w = Tensor::new(vec![dims.D, dims.P], sim.read_main(grad)?.to_vec())?;
    let per_sample_norms_sq = match norms {
        Some(r) => sim.read_main(r)?.to_vec(),
        None => Vec::new(),
    };
    Ok(BackwardResult {
        grad_w,
        report: sim.report(),
        per_sample_norms_sq,
        input_bytes_loaded: sim.input_bytes_loaded(),
    })
}

fn prepare<S: Scalar>(
    x: &Tensor<S>,
    dy: &Tensor<S>,
    plan: &BlockPlan,
    spec: MemSpec,
) -> Result<(LayerDims, Geometry, MemSim<S>, Inputs)> {
    let dims = layer_dims(x, dy)?;
    plan.validate(dims, spec)?;
    let mut sim = MemSim::new(spec)?;
    let inputs = upload(&mut sim, x, dy)?;
    Ok((dims, Geometry::new(dims, plan), sim, inputs))
}

/// Non-private backward: `∇W = Σ_b Σ_t dY[b][t]ᵀ X[b][t]` in one kernel,
/// without forming per-sample gradients.
pub fn backward_nondp<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>, spec: MemSpec) -> Result<BackwardResult<S>> {
    let plan = plan_blocks(layer_dims(x, dy)?, spec)?;
    backward_nondp_with_plan(x, dy, &plan, spec)
}

pub fn backward_nondp_with_plan<S: Scalar>(
    x: &Tensor<S>,
    dy: &Tensor<S>,
    plan: &BlockPlan,
    spec: MemSpec,
) -> Result<BackwardResult<S>> {
    let (dims, geo, mut sim, inputs) = prepare(x, dy, plan, spec)?;
    let grad = sim.alloc_main_zeroed(dims.D * dims.P)?;
    let k = sim.begin_kernel()?;
    for (j, (ds, ps)) in geo.blocks.iter().enumerate() {
        let block = BlockId(j);
        let (dd, pp) = (ds.len(), ps.len());
        let acc = sim.alloc_scratch(block, dd * pp)?;
        for bs in &geo.chunks {
            for ts in &geo.t_tiles {
                let tt = ts.len();
                let xr = sim.load_gather(block, inputs.x, &geo.x_idx(bs, ts, ps))?;
                let yr = sim.load_gather(block, inputs.dy, &geo.dy_idx(bs, ts, ds))?;
                let xv = sim.scratch(xr)?.to_vec();
                let yv = sim.scratch(yr)?.to_vec();
                let a = sim.scratch_mut(acc)?;
                for s in 0..bs.len() {
                    outer_accumulate(
                        a,
                        &yv[s * tt * dd..(s + 1) * tt * dd],
                        &xv[s * tt * pp..(s + 1) * tt * pp],
                        tt,
                        dd,
                        pp,
                    );
                }
                sim.record_flops((2 * bs.len() * tt * dd * pp) as u64, false)?;
                sim.free_scratch(xr)?;
                sim.free_scratch(yr)?;
            }
        }
        sim.store_scatter(acc, grad, &geo.w_idx(ds, ps), StoreTag::Plain)?;
        sim.free_scratch(acc)?;
    }
    sim.end_kernel(k)?;
    finish(sim, dims, grad, None)
}

/// Materializing DP backward in four kernels: per-sample gradients, norms,
/// clipping, then noise and aggregation.
pub fn backward_explicit<S: Scalar>(
    x: &Tensor<S>,
    dy: &Tensor<S>,
    cfg: &DPConfig,
    spec: MemSpec,
) -> Result<BackwardResult<S>> {
    let plan = plan_blocks(layer_dims(x, dy)?, spec)?;
    backward_explicit_with_plan(x, dy, cfg, &plan, spec)
}

pub fn backward_explicit_with_plan<S: Scalar>(
    x: &Tensor<S>,
    dy: &Tensor<S>,
    cfg: &DPConfig,
    plan: &BlockPlan,
    spec: MemSpec,
) -> Result<BackwardResult<S>> {
    cfg.validate()?;
    let (dims, geo, mut sim, inputs) = prepare(x, dy, plan, spec)?;
    let g_main = sim.alloc_main_zeroed(dims.B * dims.D * dims.P)?;
    let g_clipped = sim.alloc_main_zeroed(dims.B * dims.D * dims.P)?;
    let norms = sim.alloc_main_zeroed(dims.B)?;
    let grad = sim.alloc_main_zeroed(dims.D * dims.P)?;
    let single_chunk = geo.chunks.len() == 1;

    // per-sample gradients, written back
    let k = sim.begin_kernel()?;
    for bs in &geo.chunks {
        for (j, (ds, ps)) in geo.blocks.iter().enumerate() {
            let g = grad_tile(&mut sim, BlockId(j), &geo, &inputs, (bs, ds, ps), false)?;
            sim.store_scatter(g, g_main, &geo.g_idx(bs, ds, ps), StoreTag::PerSampleGrad)?;
            sim.free_scratch(g)?;
        }
    }
    sim.end_kernel(k)?;

    // norms
    let k = sim.begin_kernel()?;
    for bs in &geo.chunks {
        let block = BlockId(0);
        let nr = sim.alloc_scratch(block, bs.len())?;
        for (ds, ps) in &geo.blocks {
            let gt = sim.load_gather(block, g_main, &geo.g_idx(bs, ds, ps))?;
            add_norms_sq(&mut sim, gt, nr, ds.len() * ps.len())?;
            sim.free_scratch(gt)?;
        }
        let idx: Vec<usize> = bs.clone().collect();
        sim.store_scatter(nr, norms, &idx, StoreTag::Plain)?;
        sim.free_scratch(nr)?;
    }
    sim.end_kernel(k)?;

    // clipping
    let k = sim.begin_kernel()?;
    for bs in &geo.chunks {
        let block = BlockId(0);
        let nr = sim.load_range(block, norms, bs.start, bs.len())?;
        let n2 = sim.scratch(nr)?.to_vec();
        for (ds, ps) in &geo.blocks {
            let idx = geo.g_idx(bs, ds, ps);
            let gt = sim.load_gather(block, g_main, &idx)?;
            clip_tile(&mut sim, gt, &n2, cfg.clip_c)?;
            sim.store_scatter(gt, g_clipped, &idx, StoreTag::PerSampleGrad)?;
            sim.free_scratch(gt)?;
        }
        sim.free_scratch(nr)?;
    }
    sim.end_kernel(k)?;

    // noise and aggregation
    let k = sim.begin_kernel()?;
    for (j, (ds, ps)) in geo.blocks.iter().enumerate() {
        let block = BlockId(j);
        let w_idx = geo.w_idx(ds, ps);
        for bs in &geo.chunks {
            let gt = sim.load_gather(block, g_clipped, &geo.g_idx(bs, ds, ps))?;
            reduce_samples(&mut sim, gt, bs.len())?;
            emit_partial(&mut sim, gt, grad, &w_idx, single_chunk, dims.B, cfg)?;
            sim.free_scratch(gt)?;
        }
    }
    if !single_chunk {
        closing_pass(&mut sim, &geo, grad, dims.B, cfg)?;
    }
    sim.end_kernel(k)?;

    finish(sim, dims, grad, Some(norms))
}

/// Recomputation-based DP backward in two kernels: a fused norm pass that
/// discards the per-sample gradients, then a pass that recomputes, clips,
/// and aggregates them.
pub fn backward_implicit<S: Scalar>(
    x: &Tensor<S>,
    dy: &Tensor<S>,
    cfg: &DPConfig,
    spec: MemSpec,
) -> Result<BackwardResult<S>> {
    let plan = plan_blocks(layer_dims(x, dy)?, spec)?;
    backward_implicit_with_plan(x, dy, cfg, &plan, spec)
}

pub fn backward_implicit_with_plan<S: Scalar>(
    x: &Tensor<S>,
    dy: &Tensor<S>,
    cfg: &DPConfig,
    plan: &BlockPlan,
    spec: MemSpec,
) -> Result<BackwardResult<S>> {
    cfg.validate()?;
    let (dims, geo, mut sim, inputs) = prepare(x, dy, plan, spec)?;
    let norms = sim.alloc_main_zeroed(dims.B)?;
    let grad = sim.alloc_main_zeroed(dims.D * dims.P)?;
    let single_chunk = geo.chunks.len() == 1;
    let block = BlockId(0);

    let k = sim.begin_kernel()?;
    for bs in &geo.chunks {
        let nr = sim.alloc_scratch(block, bs.len())?;
        for (ds, ps) in &geo.blocks {
            let g = grad_tile(&mut sim, block, &geo, &inputs, (bs, ds, ps), false)?;
            add_norms_sq(&mut sim, g, nr, ds.len() * ps.len())?;
            sim.free_scratch(g)?;
        }
        let idx: Vec<usize> = bs.clone().collect();
        sim.store_scatter(nr, norms, &idx, StoreTag::Plain)?;
        sim.free_scratch(nr)?;
    }
    sim.end_kernel(k)?;

    let k = sim.begin_kernel()?;
    for bs in &geo.chunks {
        let nr = sim.load_range(block, norms, bs.start, bs.len())?;
        let n2 = sim.scratch(nr)?.to_vec();
        for (ds, ps) in &geo.blocks {
            let g = grad_tile(&mut sim, block, &geo, &inputs, (bs, ds, ps), true)?;
            clip_tile(&mut sim, g, &n2, cfg.clip_c)?;
            reduce_samples(&mut sim, g, bs.len())?;
            emit_partial(&mut sim, g, grad, &geo.w_idx(ds, ps), single_chunk, dims.B, cfg)?;
            sim.free_scratch(g)?;
        }
        sim.free_scratch(nr)?;
    }
    if !single_chunk {
        closing_pass(&mut sim, &geo, grad, dims.B, cfg)?;
    }
    sim.end_kernel(k)?;

    finish(sim, dims, grad, Some(norms))
}

/// Fused DP backward with a block-wise all-reduce of per-sample norms.
///
/// One kernel per batch chunk. Each (p, d) block computes its gradient
/// tile, reduces it to per-sample norm squares and adds them atomically to
/// a main-memory accumulator. After a barrier every block reloads the
/// reduced norms, clips its still-resident tile, and sums it over samples.
pub fn backward_flashdp<S: Scalar>(
    x: &Tensor<S>,
    dy: &Tensor<S>,
    cfg: &DPConfig,
    plan: &BlockPlan,
    spec: MemSpec,
) -> Result<BackwardResult<S>> {
    backward_flashdp_with(x, dy, cfg, plan, spec, FlashOptions::default())
}

pub fn backward_flashdp_with<S: Scalar>(
    x: &Tensor<S>,
    dy: &Tensor<S>,
    cfg: &DPConfig,
    plan: &BlockPlan,
    spec: MemSpec,
    opts: FlashOptions,
) -> Result<BackwardResult<S>> {
    cfg.validate()?;
    let (dims, geo, mut sim, inputs) = prepare(x, dy, plan, spec)?;
    let norms = sim.alloc_main_zeroed(dims.B)?;
    let grad = sim.alloc_main_zeroed(dims.D * dims.P)?;
    let single_chunk = geo.chunks.len() == 1;
    let mut rng = match opts.block_order {
        BlockOrder::Shuffled(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let mut order = |n: usize| -> Vec<usize> {
        let mut o: Vec<usize> = (0..n).collect();
        match opts.block_order {
            BlockOrder::RowMajor => {}
            BlockOrder::Reversed => o.reverse(),
            BlockOrder::Shuffled(_) => o.shuffle(rng.as_mut().expect("seeded")),
        }
        o
    };

    for bs in &geo.chunks {
        let bb = bs.len();
        let sample_idx: Vec<usize> = bs.clone().collect();
        let k = sim.begin_kernel()?;

        let mut tiles = vec![None; geo.blocks.len()];
        for j in order(geo.blocks.len()) {
            let (ds, ps) = &geo.blocks[j];
            let block = BlockId(j);
            let g = grad_tile(&mut sim, block, &geo, &inputs, (bs, ds, ps), false)?;
            // intra-block reduce
            let nr = sim.alloc_scratch(block, bb)?;
            add_norms_sq(&mut sim, g, nr, ds.len() * ps.len())?;
            // inter-block reduce
            let partial = sim.scratch(nr)?.to_vec();
            sim.atomic_accumulate_at(norms, &sample_idx, &partial)?;
            sim.free_scratch(nr)?;
            tiles[j] = Some(g);
        }

        if !opts.skip_norm_barrier {
            sim.barrier()?;
        }

        for j in order(geo.blocks.len()) {
            let (ds, ps) = &geo.blocks[j];
            let block = BlockId(j);
            let g = tiles[j].take().expect("tile computed in the first phase");
            let nr = sim.load_range(block, norms, bs.start, bb)?;
            let n2 = sim.scratch(nr)?.to_vec();
            clip_tile(&mut sim, g, &n2, cfg.clip_c)?;
            reduce_samples(&mut sim, g, bb)?;
            emit_partial(&mut sim, g, grad, &geo.w_idx(ds, ps), single_chunk, dims.B, cfg)?;
            sim.free_scratch(nr)?;
            sim.free_scratch(g)?;
        }

        if !single_chunk && bs.end == dims.B {
            closing_pass(&mut sim, &geo, grad, dims.B, cfg)?;
        }
        sim.end_kernel(k)?;
    }

    finish(sim, dims, grad, Some(norms))
}

/// Runs `kind` with the plan chosen by [`plan_blocks`].
pub fn run_workflow<S: Scalar>(
    kind: WorkflowKind,
    x: &Tensor<S>,
    dy: &Tensor<S>,
    cfg: &DPConfig,
    spec: MemSpec,
) -> Result<BackwardResult<S>> {
    let plan = plan_blocks(layer_dims(x, dy)?, spec)?;
    run_workflow_with_plan(kind, x, dy, cfg, &plan, spec)
}

pub fn run_workflow_with_plan<S: Scalar>(
    kind: WorkflowKind,
    x: &Tensor<S>,
    dy: &Tensor<S>,
    cfg: &DPConfig,
    plan: &BlockPlan,
    spec: MemSpec,
) -> Result<BackwardResult<S>> {
    match kind {
        WorkflowKind::NonDp => backward_nondp_with_plan(x, dy, plan, spec),
        WorkflowKind::ExplicitDp => backward_explicit_with_plan(x, dy, cfg, plan, spec),
        WorkflowKind::ImplicitDp => backward_implicit_with_plan(x, dy, cfg, plan, spec),
        WorkflowKind::FlashDp => backward_flashdp(x, dy, cfg, plan, spec),
    }
}
