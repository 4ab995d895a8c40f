//! Two-level memory simulator: a large main memory and a bounded per-block
//! scratchpad, with exact counters for traffic, compute, barriers and
//! kernel launches.
//!
//! All data a workflow touches lives in regions owned by a [`MemSim`].
//! Kernels own their scratch regions; nothing in scratch survives
//! [`MemSim::end_kernel`]. Atomic accumulations into main memory stay
//! *pending* until the next [`MemSim::barrier`] or kernel end, and reading a
//! region with pending accumulations is an [`Error::OrderingFault`].
//!
//! Each simulated block has its own scratchpad of `scratchpad_capacity_bytes`
//! (the on-chip memory of one streaming multiprocessor).
//! `peak_scratch_bytes` is the high-water mark of any single block.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemSpec {
    pub scratchpad_capacity_bytes: u64,
    pub dtype_width_bytes: u64,
}

impl MemSpec {
    pub fn new(scratchpad_capacity_bytes: u64, dtype_width_bytes: u64) -> Result<Self> {
        let spec = Self { scratchpad_capacity_bytes, dtype_width_bytes };
        spec.validate()?;
        Ok(spec)
    }

    /// Capacity of `elements` elements at the given width.
    pub fn with_elements(elements: u64, dtype_width_bytes: u64) -> Result<Self> {
        Self::new(elements * dtype_width_bytes, dtype_width_bytes)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.dtype_width_bytes, 2 | 4 | 8) {
            return Err(Error::usage(format!("dtype_width_bytes must be 2, 4 or 8, got {}", self.dtype_width_bytes)));
        }
        if self.scratchpad_capacity_bytes < self.dtype_width_bytes {
            return Err(Error::usage(format!(
                "scratchpad of {} bytes cannot hold one {}-byte element",
                self.scratchpad_capacity_bytes, self.dtype_width_bytes
            )));
        }
        Ok(())
    }

    pub fn capacity_elements(&self) -> u64 {
        self.scratchpad_capacity_bytes / self.dtype_width_bytes
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub bytes_loaded: u64,
    pub bytes_stored: u64,
    pub flops: u64,
    pub redundant_flops: u64,
    pub barriers: u64,
    pub kernel_launches: u64,
    pub peak_scratch_bytes: u64,
    pub per_sample_grad_bytes_stored: u64,
}

impl TrafficReport {
    pub fn total_bytes(&self) -> u64 {
        self.bytes_loaded + self.bytes_stored
    }

    /// Combines the counters of two sequential runs: sums, except the peak.
    pub fn merge(&mut self, other: &TrafficReport) {
        self.bytes_loaded += other.bytes_loaded;
        self.bytes_stored += other.bytes_stored;
        self.flops += other.flops;
        self.redundant_flops += other.redundant_flops;
        self.barriers += other.barriers;
        self.kernel_launches += other.kernel_launches;
        self.peak_scratch_bytes = self.peak_scratch_bytes.max(other.peak_scratch_bytes);
        self.per_sample_grad_bytes_stored += other.per_sample_grad_bytes_stored;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegionId(usize);

impl RegionId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Main,
    Scratch,
}

/// Snapshot of a region's descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub id: RegionId,
    pub element_count: usize,
    pub level: Level,
}

/// Owner of a scratchpad.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreTag {
    Plain,
    PerSampleGrad,
}

/// Proof that a kernel is open; handed back to [`MemSim::end_kernel`].
#[derive(Debug, PartialEq, Eq)]
#[must_use = "a kernel must be closed with end_kernel"]
pub struct KernelToken {
    index: u64,
}

#[derive(Debug)]
struct RegionState<S> {
    data: Vec<S>,
    element_count: usize,
    level: Level,
    input: bool,
    kernel: Option<u64>,
    block: Option<BlockId>,
    live: bool,
    pending: usize,
}

#[derive(Debug)]
pub struct MemSim<S> {
    spec: MemSpec,
    report: TrafficReport,
    regions: Vec<RegionState<S>>,
    open_kernel: Option<u64>,
    resident: BTreeMap<BlockId, u64>,
    input_bytes_loaded: u64,
}

impl<S: Scalar> MemSim<S> {
    pub fn new(spec: MemSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            report: TrafficReport::default(),
            regions: Vec::new(),
            open_kernel: None,
            resident: BTreeMap::new(),
            input_bytes_loaded: 0,
        })
    }

    pub fn spec(&self) -> MemSpec {
        self.spec
    }

    pub fn report(&self) -> TrafficReport {
        self.report
    }

    /// Bytes loaded from regions allocated with [`MemSim::alloc_input`].
    pub fn input_bytes_loaded(&self) -> u64 {
        self.input_bytes_loaded
    }

    pub fn region(&self, id: RegionId) -> Result<Region> {
        let r = self.state(id)?;
        Ok(Region { id, element_count: r.element_count, level: r.level })
    }

    pub fn resident_bytes(&self, block: BlockId) -> u64 {
        self.resident.get(&block).copied().unwrap_or(0)
    }

    fn bytes(&self, elements: usize) -> u64 {
        elements as u64 * self.spec.dtype_width_bytes
    }

    fn state(&self, id: RegionId) -> Result<&RegionState<S>> {
        self.regions.get(id.0).ok_or_else(|| Error::usage(format!("unknown region {}", id.0)))
    }

    fn push_main(&mut self, data: Vec<S>, input: bool) -> RegionId {
        let id = RegionId(self.regions.len());
        self.regions.push(RegionState {
            element_count: data.len(),
            data,
            level: Level::Main,
            input,
            kernel: None,
            block: None,
            live: true,
            pending: 0,
        });
        id
    }

    /// Places data in main memory. Free: it models tensors that already live there.
    pub fn alloc_main(&mut self, data: Vec<S>) -> Result<RegionId> {
        if data.is_empty() {
            return Err(Error::usage("main region must hold at least one element"));
        }
        Ok(self.push_main(data, false))
    }

    pub fn alloc_main_zeroed(&mut self, elements: usize) -> Result<RegionId> {
        self.alloc_main(vec![S::zero(); elements])
    }

    /// Like [`MemSim::alloc_main`], but loads from this region are also
    /// counted in [`MemSim::input_bytes_loaded`].
    pub fn alloc_input(&mut self, data: Vec<S>) -> Result<RegionId> {
        if data.is_empty() {
            return Err(Error::usage("main region must hold at least one element"));
        }
        Ok(self.push_main(data, true))
    }

    pub fn kernel_open(&self) -> bool {
        self.open_kernel.is_some()
    }

    pub fn begin_kernel(&mut self) -> Result<KernelToken> {
        if let Some(k) = self.open_kernel {
            return Err(Error::usage(format!("kernel {k} is still open")));
        }
        let index = self.report.kernel_launches;
        self.report.kernel_launches += 1;
        self.open_kernel = Some(index);
        Ok(KernelToken { index })
    }

    /// Closes the kernel: scratch is discarded and pending accumulations
    /// become visible.
    pub fn end_kernel(&mut self, token: KernelToken) -> Result<()> {
        if self.open_kernel != Some(token.index) {
            return Err(Error::usage(format!("kernel {} is not the open kernel", token.index)));
        }
        for r in &mut self.regions {
            match r.level {
                Level::Scratch if r.live => {
                    r.live = false;
                    r.data = Vec::new();
                }
                Level::Main => r.pending = 0,
                _ => {}
            }
        }
        self.resident.clear();
        self.open_kernel = None;
        Ok(())
    }

    fn require_kernel(&self, op: &str) -> Result<u64> {
        self.open_kernel.ok_or_else(|| Error::usage(format!("{op} requires an open kernel")))
    }

    fn reserve(&mut self, block: BlockId, elements: usize) -> Result<()> {
        let requested = self.bytes(elements);
        let used = self.resident_bytes(block);
        let available = self.spec.scratchpad_capacity_bytes - used;
        if requested > available {
            return Err(Error::Capacity { requested, available });
        }
        let now = used + requested;
        self.resident.insert(block, now);
        self.report.peak_scratch_bytes = self.report.peak_scratch_bytes.max(now);
        Ok(())
    }

    fn push_scratch(&mut self, block: BlockId, data: Vec<S>) -> Result<RegionId> {
        let kernel = self.require_kernel("scratch allocation")?;
        if data.is_empty() {
            return Err(Error::usage("scratch region must hold at least one element"));
        }
        self.reserve(block, data.len())?;
        let id = RegionId(self.regions.len());
        self.regions.push(RegionState {
            element_count: data.len(),
            data,
            level: Level::Scratch,
            input: false,
            kernel: Some(kernel),
            block: Some(block),
            live: true,
            pending: 0,
        });
        Ok(id)
    }

    /// Zero-initialised scratch for values computed on chip; no traffic.
    pub fn alloc_scratch(&mut self, block: BlockId, elements: usize) -> Result<RegionId> {
        self.push_scratch(block, vec![S::zero(); elements])
    }

    fn readable_main(&self, id: RegionId) -> Result<&RegionState<S>> {
        let r = self.state(id)?;
        if r.level != Level::Main {
            return Err(Error::usage(format!("region {} is not in main memory", id.0)));
        }
        if r.pending > 0 {
            return Err(Error::OrderingFault { region: id.0, pending: r.pending });
        }
        Ok(r)
    }

    fn count_load(&mut self, src: RegionId, elements: usize) {
        let bytes = self.bytes(elements);
        self.report.bytes_loaded += bytes;
        if self.regions[src.0].input {
            self.input_bytes_loaded += bytes;
        }
    }

    /// Loads the first `elements` elements of a main region into a new
    /// scratch region owned by `block`.
    pub fn load_to_scratch(&mut self, block: BlockId, src: RegionId, elements: usize) -> Result<RegionId> {
        self.load_range(block, src, 0, elements)
    }

    pub fn load_range(&mut self, block: BlockId, src: RegionId, start: usize, elements: usize) -> Result<RegionId> {
        self.require_kernel("load")?;
        let r = self.readable_main(src)?;
        if start + elements > r.element_count {
            return Err(Error::usage(format!(
                "load of {elements} elements at offset {start} exceeds region {} of {} elements",
                src.0, r.element_count
            )));
        }
        let data = r.data[start..start + elements].to_vec();
        let id = self.push_scratch(block, data)?;
        self.count_load(src, elements);
        Ok(id)
    }

    /// Loads `src[indices[k]]` into element `k` of a new scratch region.
    pub fn load_gather(&mut self, block: BlockId, src: RegionId, indices: &[usize]) -> Result<RegionId> {
        self.require_kernel("load")?;
        let r = self.readable_main(src)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r.element_count) {
            return Err(Error::usage(format!(
                "gather index {bad} out of range for region {} of {} elements",
                src.0, r.element_count
            )));
        }
        let data: Vec<S> = indices.iter().map(|&i| r.data[i]).collect();
        let id = self.push_scratch(block, data)?;
        self.count_load(src, indices.len());
        Ok(id)
    }

    fn live_scratch(&self, id: RegionId) -> Result<&RegionState<S>> {
        let r = self.state(id)?;
        if r.level != Level::Scratch {
            return Err(Error::usage(format!("region {} is not a scratch region", id.0)));
        }
        if r.kernel != self.open_kernel {
            return Err(Error::usage(format!(
                "scratch region {} belongs to kernel {:?}, current kernel is {:?}",
                id.0, r.kernel, self.open_kernel
            )));
        }
        if !r.live {
            return Err(Error::usage(format!("scratch region {} was freed", id.0)));
        }
        Ok(r)
    }

    pub fn scratch(&self, id: RegionId) -> Result<&[S]> {
        Ok(&self.live_scratch(id)?.data)
    }

    pub fn scratch_mut(&mut self, id: RegionId) -> Result<&mut [S]> {
        self.live_scratch(id)?;
        Ok(&mut self.regions[id.0].data)
    }

    pub fn free_scratch(&mut self, id: RegionId) -> Result<()> {
        let r = self.live_scratch(id)?;
        let bytes = self.bytes(r.element_count);
        let block = r.block.expect("scratch regions have an owner");
        let r = &mut self.regions[id.0];
        r.live = false;
        r.data = Vec::new();
        if let Some(used) = self.resident.get_mut(&block) {
            *used -= bytes;
        }
        Ok(())
    }

    fn count_store(&mut self, elements: usize, tag: StoreTag) {
        let bytes = self.bytes(elements);
        self.report.bytes_stored += bytes;
        if tag == StoreTag::PerSampleGrad {
            self.report.per_sample_grad_bytes_stored += bytes;
        }
    }

    fn writable_main(&self, id: RegionId) -> Result<&RegionState<S>> {
        let r = self.state(id)?;
        if r.level != Level::Main {
            return Err(Error::usage(format!("region {} is not in main memory", id.0)));
        }
        Ok(r)
    }

    /// Stores the first `elements` scratch elements to the start of `dst`.
    pub fn store_to_main(&mut self, src: RegionId, dst: RegionId, elements: usize, tag: StoreTag) -> Result<()> {
        self.require_kernel("store")?;
        let s = self.live_scratch(src)?.element_count;
        let d = self.writable_main(dst)?.element_count;
        if elements > s || elements > d {
            return Err(Error::usage(format!(
                "store of {elements} elements from a {s}-element region into a {d}-element region"
            )));
        }
        let (src_state, dst_state) = two_mut(&mut self.regions, src.0, dst.0);
        dst_state.data[..elements].copy_from_slice(&src_state.data[..elements]);
        self.count_store(elements, tag);
        Ok(())
    }

    /// Stores scratch element `k` to `dst[indices[k]]`.
    pub fn store_scatter(&mut self, src: RegionId, dst: RegionId, indices: &[usize], tag: StoreTag) -> Result<()> {
        self.require_kernel("store")?;
        let s = self.live_scratch(src)?.element_count;
        let d = self.writable_main(dst)?.element_count;
        if indices.len() > s {
            return Err(Error::usage(format!("scatter of {} elements from a {s}-element region", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= d) {
            return Err(Error::usage(format!("scatter index {bad} out of range for {d} elements")));
        }
        let (src_state, dst_state) = two_mut(&mut self.regions, src.0, dst.0);
        for (k, &i) in indices.iter().enumerate() {
            dst_state.data[i] = src_state.data[k];
        }
        self.count_store(indices.len(), tag);
        Ok(())
    }

    /// `dst[k] += values[k]`; one store per element, no loads.
    pub fn atomic_accumulate(&mut self, dst: RegionId, values: &[S]) -> Result<()> {
        let indices: Vec<usize> = (0..values.len()).collect();
        self.atomic_accumulate_at(dst, &indices, values)
    }

    /// `dst[indices[k]] += values[k]`.
    pub fn atomic_accumulate_at(&mut self, dst: RegionId, indices: &[usize], values: &[S]) -> Result<()> {
        self.require_kernel("atomic_accumulate")?;
        if indices.len() != values.len() {
            return Err(Error::usage(format!("{} indices for {} accumulated values", indices.len(), values.len())));
        }
        let d = self.writable_main(dst)?.element_count;
        if values.len() > d {
            return Err(Error::usage(format!("{} values exceed destination of {d}", values.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= d) {
            return Err(Error::usage(format!("accumulate index {bad} out of range for {d} elements")));
        }
        let r = &mut self.regions[dst.0];
        for (&i, &v) in indices.iter().zip(values) {
            r.data[i] += v;
        }
        r.pending += 1;
        self.count_store(values.len(), StoreTag::Plain);
        Ok(())
    }

    /// Synchronisation point for all blocks of the open kernel.
    pub fn barrier(&mut self) -> Result<()> {
        self.require_kernel("barrier")?;
        self.report.barriers += 1;
        for r in &mut self.regions {
            r.pending = 0;
        }
        Ok(())
    }

    pub fn record_flops(&mut self, n: u64, redundant: bool) -> Result<()> {
        self.require_kernel("record_flops")?;
        self.report.flops += n;
        if redundant {
            self.report.redundant_flops += n;
        }
        Ok(())
    }

    /// Host-side read of a main region; faults while accumulations are pending.
    pub fn read_main(&self, id: RegionId) -> Result<&[S]> {
        Ok(&self.readable_main(id)?.data)
    }
}

fn two_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const B0: BlockId = BlockId(0);

    fn sim(elements: u64, width: u64) -> MemSim<f64> {
        MemSim::new(MemSpec::with_elements(elements, width).unwrap()).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(MemSpec::new(8, 8).is_ok());
        assert!(MemSpec::new(7, 8).is_err());
        assert!(MemSpec::new(64, 3).is_err());
        assert_eq!(MemSpec::new(100, 8).unwrap().capacity_elements(), 12);
    }

    #[test]
    fn kernel_launch_counting() {
        let mut s = sim(16, 8);
        let k = s.begin_kernel().unwrap();
        assert_eq!(s.report().kernel_launches, 1);
        assert!(matches!(s.begin_kernel(), Err(Error::Usage(_))));
        s.end_kernel(k).unwrap();
        let k = s.begin_kernel().unwrap();
        s.end_kernel(k).unwrap();
        assert_eq!(s.report().kernel_launches, 2);
    }

    #[test]
    fn load_counts_bytes() {
        let mut s = sim(64, 8);
        let src = s.alloc_main(vec![1.0; 48]).unwrap();
        let k = s.begin_kernel().unwrap();
        s.load_to_scratch(B0, src, 48).unwrap();
        assert_eq!(s.report().bytes_loaded, 384);
        assert_eq!(s.report().peak_scratch_bytes, 384);
        s.end_kernel(k).unwrap();

        let mut s = sim(64, 4);
        let src = s.alloc_main(vec![1.0; 32]).unwrap();
        let k = s.begin_kernel().unwrap();
        s.load_to_scratch(B0, src, 10).unwrap();
        s.load_to_scratch(B0, src, 20).unwrap();
        assert_eq!(s.report().bytes_loaded, 120);
        s.end_kernel(k).unwrap();
    }

    #[test]
    fn load_beyond_capacity_reports_bytes() {
        let mut s = sim(4, 8);
        let src = s.alloc_main(vec![1.0; 8]).unwrap();
        let _k = s.begin_kernel().unwrap();
        s.load_to_scratch(B0, src, 3).unwrap();
        match s.load_to_scratch(B0, src, 2).unwrap_err() {
            Error::Capacity { requested, available } => {
                assert_eq!(requested, 16);
                assert_eq!(available, 8);
            }
            e => panic!("unexpected {e:?}"),
        }
        // other blocks have their own scratchpad
        s.load_to_scratch(BlockId(1), src, 4).unwrap();
        assert_eq!(s.report().peak_scratch_bytes, 32);
    }

    #[test]
    fn free_releases_capacity() {
        let mut s = sim(4, 8);
        let src = s.alloc_main(vec![1.0; 4]).unwrap();
        let _k = s.begin_kernel().unwrap();
        let r = s.load_to_scratch(B0, src, 4).unwrap();
        s.free_scratch(r).unwrap();
        s.load_to_scratch(B0, src, 4).unwrap();
        assert!(s.scratch(r).is_err());
    }

    #[test]
    fn store_tags() {
        let mut s = sim(64, 8);
        let dst = s.alloc_main_zeroed(32).unwrap();
        let _k = s.begin_kernel().unwrap();
        let r = s.alloc_scratch(B0, 32).unwrap();
        s.scratch_mut(r).unwrap()[0] = 7.0;
        s.store_to_main(r, dst, 32, StoreTag::PerSampleGrad).unwrap();
        assert_eq!(s.report().bytes_stored, 256);
        assert_eq!(s.report().per_sample_grad_bytes_stored, 256);
        s.store_to_main(r, dst, 2, StoreTag::Plain).unwrap();
        assert_eq!(s.report().bytes_stored, 272);
        assert_eq!(s.report().per_sample_grad_bytes_stored, 256);
        assert!(matches!(s.store_to_main(r, dst, 33, StoreTag::Plain), Err(Error::Usage(_))));
        assert_eq!(s.read_main(dst).unwrap()[0], 7.0);
    }

    #[test]
    fn scatter_and_gather() {
        let mut s = sim(16, 8);
        let src = s.alloc_main(vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let dst = s.alloc_main_zeroed(4).unwrap();
        let k = s.begin_kernel().unwrap();
        let r = s.load_gather(B0, src, &[3, 1]).unwrap();
        assert_eq!(s.scratch(r).unwrap(), &[3.0, 1.0]);
        s.store_scatter(r, dst, &[0, 2], StoreTag::Plain).unwrap();
        s.end_kernel(k).unwrap();
        assert_eq!(s.read_main(dst).unwrap(), &[3.0, 0.0, 1.0, 0.0]);
        assert_eq!(s.report().bytes_loaded, 16);
        assert_eq!(s.report().bytes_stored, 16);
    }

    #[test]
    fn atomic_accumulate_adds_and_costs_stores() {
        let mut s = sim(16, 8);
        let dst = s.alloc_main_zeroed(2).unwrap();
        let _k = s.begin_kernel().unwrap();
        s.atomic_accumulate(dst, &[45.0, 200.0]).unwrap();
        s.barrier().unwrap();
        assert_eq!(s.read_main(dst).unwrap(), &[45.0, 200.0]);
        s.atomic_accumulate(dst, &[1.0, 1.0]).unwrap();
        s.barrier().unwrap();
        assert_eq!(s.read_main(dst).unwrap(), &[46.0, 201.0]);
        assert_eq!(s.report().bytes_stored, 32);
        assert_eq!(s.report().bytes_loaded, 0);
        assert!(matches!(s.atomic_accumulate(dst, &[1.0; 3]), Err(Error::Usage(_))));
    }

    #[test]
    fn atomic_accumulate_is_order_independent_for_three_blocks() {
        let xs = [0.1, 0.7, -0.3];
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let reference: f64 = xs.iter().sum();
        for order in perms {
            let mut s = sim(4, 8);
            let dst = s.alloc_main_zeroed(1).unwrap();
            let k = s.begin_kernel().unwrap();
            for i in order {
                s.atomic_accumulate(dst, &[xs[i]]).unwrap();
            }
            s.end_kernel(k).unwrap();
            assert!((s.read_main(dst).unwrap()[0] - reference).abs() <= 1e-12);
        }
    }

    #[test]
    fn read_before_barrier_is_an_ordering_fault() {
        let mut s = sim(16, 8);
        let dst = s.alloc_main_zeroed(2).unwrap();
        let _k = s.begin_kernel().unwrap();
        s.atomic_accumulate(dst, &[1.0, 2.0]).unwrap();
        assert!(matches!(s.load_to_scratch(B0, dst, 2), Err(Error::OrderingFault { .. })));
        assert!(matches!(s.read_main(dst), Err(Error::OrderingFault { .. })));
        s.barrier().unwrap();
        s.load_to_scratch(B0, dst, 2).unwrap();
    }

    #[test]
    fn empty_barrier_only_counts() {
        let mut s = sim(16, 8);
        let _k = s.begin_kernel().unwrap();
        s.barrier().unwrap();
        let r = s.report();
        assert_eq!(r.barriers, 1);
        assert_eq!(r.total_bytes(), 0);
        assert!(s.barrier().is_ok());
    }

    #[test]
    fn kernel_end_publishes_accumulations() {
        let mut s = sim(16, 8);
        let dst = s.alloc_main_zeroed(1).unwrap();
        let k = s.begin_kernel().unwrap();
        s.atomic_accumulate(dst, &[3.0]).unwrap();
        s.end_kernel(k).unwrap();
        assert_eq!(s.read_main(dst).unwrap(), &[3.0]);
    }

    #[test]
    fn scratch_does_not_survive_kernel_boundary() {
        let mut s = sim(16, 8);
        let src = s.alloc_main(vec![1.0; 4]).unwrap();
        let k = s.begin_kernel().unwrap();
        let r = s.load_to_scratch(B0, src, 4).unwrap();
        s.end_kernel(k).unwrap();
        let _k = s.begin_kernel().unwrap();
        assert!(matches!(s.scratch(r), Err(Error::Usage(_))));
        assert_eq!(s.resident_bytes(B0), 0);
    }

    #[test]
    fn operations_need_an_open_kernel() {
        let mut s = sim(16, 8);
        let src = s.alloc_main(vec![1.0; 4]).unwrap();
        assert!(s.load_to_scratch(B0, src, 1).is_err());
        assert!(s.barrier().is_err());
        assert!(s.record_flops(1, false).is_err());
        assert!(s.atomic_accumulate(src, &[1.0]).is_err());
    }

    #[test]
    fn flop_recording() {
        let mut s = sim(16, 8);
        let _k = s.begin_kernel().unwrap();
        s.record_flops(8, false).unwrap();
        assert_eq!(s.report().flops, 8);
        s.record_flops(8, true).unwrap();
        assert_eq!((s.report().flops, s.report().redundant_flops), (16, 8));
        s.record_flops(0, true).unwrap();
        assert_eq!((s.report().flops, s.report().redundant_flops), (16, 8));
    }

    #[test]
    fn report_serializes_with_flat_snake_case_keys() {
        let v = serde_json::to_value(TrafficReport::default()).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "barriers",
                "bytes_loaded",
                "bytes_stored",
                "flops",
                "kernel_launches",
                "peak_scratch_bytes",
                "per_sample_grad_bytes_stored",
                "redundant_flops"
            ]
        );
    }
}
