//! Tile-size selection for the fused backward kernel.
//!
//! A block keeps an X tile (`b·t·p`), a dY tile (`b·t·d`), its per-sample
//! gradient tile (`b·d·p`) and `b` norm-square scalars resident. Planning
//! starts from the whole layer and halves one extent at a time until that
//! working set fits the scratchpad.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memmodel::MemSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct LayerDims {
    pub B: usize,
    pub T: usize,
    pub P: usize,
    pub D: usize,
}

impl LayerDims {
    #[allow(non_snake_case)]
    pub fn new(B: usize, T: usize, P: usize, D: usize) -> Result<Self> {
        let dims = Self { B, T, P, D };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.B == 0 || self.T == 0 || self.P == 0 || self.D == 0 {
            return Err(Error::usage(format!("layer dims must be positive, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockPlan {
    pub b: usize,
    pub t: usize,
    pub d: usize,
    pub p: usize,
    pub n_b: usize,
    pub n_t: usize,
    pub n_d: usize,
    pub n_p: usize,
}

impl BlockPlan {
    /// Plan with the given tile extents; counts derived from `dims`.
    pub fn from_tiles(dims: LayerDims, b: usize, t: usize, d: usize, p: usize) -> Result<Self> {
        dims.validate()?;
        let ok = |x: usize, max: usize| (1..=max).contains(&x);
        if !(ok(b, dims.B) && ok(t, dims.T) && ok(d, dims.D) && ok(p, dims.P)) {
            return Err(Error::usage(format!("tiles (b={b}, t={t}, d={d}, p={p}) out of range for {dims:?}")));
        }
        Ok(Self {
            b,
            t,
            d,
            p,
            n_b: dims.B.div_ceil(b),
            n_t: dims.T.div_ceil(t),
            n_d: dims.D.div_ceil(d),
            n_p: dims.P.div_ceil(p),
        })
    }

    pub fn footprint(&self) -> u64 {
        footprint(self.b, self.t, self.d, self.p)
    }

    /// Checks the plan against layer dims and scratchpad capacity.
    pub fn validate(&self, dims: LayerDims, spec: MemSpec) -> Result<()> {
        let expect = Self::from_tiles(dims, self.b, self.t, self.d, self.p)?;
        if expect != *self {
            return Err(Error::usage(format!("plan {self:?} does not match dims {dims:?}")));
        }
        let needed = self.footprint() * spec.dtype_width_bytes;
        if needed > spec.scratchpad_capacity_bytes {
            return Err(Error::Capacity { requested: needed, available: spec.scratchpad_capacity_bytes });
        }
        Ok(())
    }

    /// Number of (p, d) blocks launched per batch chunk.
    pub fn blocks_per_chunk(&self) -> usize {
        self.n_p * self.n_d
    }

    /// True when a single block covers the whole layer.
    pub fn is_single_block(&self) -> bool {
        self.n_b == 1 && self.n_t == 1 && self.n_d == 1 && self.n_p == 1
    }
}

/// Resident elements of one block: X tile, dY tile, gradient tile, norm scalars.
pub fn footprint(b: usize, t: usize, d: usize, p: usize) -> u64 {
    let (b, t, d, p) = (b as u64, t as u64, d as u64, p as u64);
    b * t * p + b * t * d + b * d * p + b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    T,
    D,
    P,
    B,
}

// Tie-break preference.
const AXIS_ORDER: [Axis; 4] = [Axis::T, Axis::D, Axis::P, Axis::B];

/// Next step of the halving chain, or `None` at (1,1,1,1).
fn halve_once(tiles: [usize; 4]) -> Option<[usize; 4]> {
    let [b, t, d, p] = tiles;
    let (bu, tu, du, pu) = (b as u64, t as u64, d as u64, p as u64);
    let mut addends = [
        (bu * tu * pu, [Axis::B, Axis::T, Axis::P]),
        (bu * tu * du, [Axis::B, Axis::T, Axis::D]),
        (bu * du * pu, [Axis::B, Axis::D, Axis::P]),
    ];
    addends.sort_by_key(|a| std::cmp::Reverse(a.0));
    let extent = |axis: Axis| match axis {
        Axis::B => b,
        Axis::T => t,
        Axis::D => d,
        Axis::P => p,
    };
    let mut i = 0;
    while i < addends.len() {
        // group of equal-valued addends
        let value = addends[i].0;
        let group: Vec<Axis> = addends.iter().filter(|a| a.0 == value).flat_map(|a| a.1).collect();
        if let Some(&axis) = AXIS_ORDER.iter().find(|&&ax| group.contains(&ax) && extent(ax) > 1) {
            let mut next = tiles;
            let slot = match axis {
                Axis::B => 0,
                Axis::T => 1,
                Axis::D => 2,
                Axis::P => 3,
            };
            next[slot] = next[slot].div_ceil(2);
            return Some(next);
        }
        i += addends.iter().filter(|a| a.0 == value).count();
    }
    None
}

/// The full halving chain from `(B, T, D, P)` down to `(1, 1, 1, 1)`,
/// as `[b, t, d, p]` states.
pub fn halving_chain(dims: LayerDims) -> Vec<[usize; 4]> {
    let mut chain = vec![[dims.B, dims.T, dims.D, dims.P]];
    while let Some(next) = halve_once(*chain.last().expect("non-empty")) {
        chain.push(next);
    }
    chain
}

/// Picks the first state of the halving chain whose footprint fits.
pub fn plan_blocks(dims: LayerDims, spec: MemSpec) -> Result<BlockPlan> {
    dims.validate()?;
    spec.validate()?;
    let width = spec.dtype_width_bytes;
    let minimal = footprint(1, 1, 1, 1) * width;
    if minimal > spec.scratchpad_capacity_bytes {
        return Err(Error::Infeasible { needed: minimal, capacity: spec.scratchpad_capacity_bytes });
    }
    let mut tiles = [dims.B, dims.T, dims.D, dims.P];
    loop {
        let [b, t, d, p] = tiles;
        if footprint(b, t, d, p) * width <= spec.scratchpad_capacity_bytes {
            let plan = BlockPlan::from_tiles(dims, b, t, d, p)?;
            debug_assert!(plan.validate(dims, spec).is_ok());
            return Ok(plan);
        }
        tiles = halve_once(tiles).expect("(1,1,1,1) fits, so the chain reaches a fitting state");
    }
}

/// Every distinct plan along the halving chain that fits `spec`.
pub fn feasible_chain_plans(dims: LayerDims, spec: MemSpec) -> Result<Vec<BlockPlan>> {
    halving_chain(dims)
        .into_iter()
        .filter(|&[b, t, d, p]| footprint(b, t, d, p) * spec.dtype_width_bytes <= spec.scratchpad_capacity_bytes)
        .map(|[b, t, d, p]| BlockPlan::from_tiles(dims, b, t, d, p))
        .collect()
}
