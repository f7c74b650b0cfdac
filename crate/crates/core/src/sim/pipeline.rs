//! Double-buffered tile pipeline: load i+1 ∥ compute i ∥ store i−1.
//!
//! With double buffering the slot before compute i is
//! `max(C[i−1], max_p(L[i][p] + S[i−2][p]))`, where `p` ranges over DMA
//! engines (one per level pair; commands on one pair serialize). The first
//! load and the final compute and two stores are exposed.

use std::collections::HashMap;
use std::collections::BTreeMap;
use std::ops::{Add, Mul, Sub};

use serde::Serialize;

use crate::hw::{HardwareConfig, Level};
use crate::solver::compile::{Compiled, TileCost};
use crate::solver::SolveError;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct Totals {
    pub cycles: u64,
    pub dma_bound_cycles: u64,
    pub compute_bound_cycles: u64,
    pub transfers: u64,
    pub bytes: [u64; 3],
    pub tensor_bytes: Vec<u64>,
    pub tiles: u64,
}

fn zip_with(a: &[u64], b: &[u64], f: impl Fn(u64, u64) -> u64) -> Vec<u64> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| f(a.get(i).copied().unwrap_or(0), b.get(i).copied().unwrap_or(0)))
        .collect()
}

impl Sub for &Totals {
    type Output = Totals;

    fn sub(self, o: &Totals) -> Totals {
        Totals {
            cycles: self.cycles - o.cycles,
            dma_bound_cycles: self.dma_bound_cycles - o.dma_bound_cycles,
            compute_bound_cycles: self.compute_bound_cycles - o.compute_bound_cycles,
            transfers: self.transfers - o.transfers,
            bytes: std::array::from_fn(|p| self.bytes[p] - o.bytes[p]),
            tensor_bytes: zip_with(&self.tensor_bytes, &o.tensor_bytes, |a, b| a - b),
            tiles: self.tiles - o.tiles,
        }
    }
}

impl Add for &Totals {
    type Output = Totals;

    fn add(self, o: &Totals) -> Totals {
        Totals {
            cycles: self.cycles + o.cycles,
            dma_bound_cycles: self.dma_bound_cycles + o.dma_bound_cycles,
            compute_bound_cycles: self.compute_bound_cycles + o.compute_bound_cycles,
            transfers: self.transfers + o.transfers,
            bytes: std::array::from_fn(|p| self.bytes[p] + o.bytes[p]),
            tensor_bytes: zip_with(&self.tensor_bytes, &o.tensor_bytes, |a, b| a + b),
            tiles: self.tiles + o.tiles,
        }
    }
}

impl Mul<u64> for &Totals {
    type Output = Totals;

    fn mul(self, k: u64) -> Totals {
        Totals {
            cycles: self.cycles * k,
            dma_bound_cycles: self.dma_bound_cycles * k,
            compute_bound_cycles: self.compute_bound_cycles * k,
            transfers: self.transfers * k,
            bytes: self.bytes.map(|b| b * k),
            tensor_bytes: self.tensor_bytes.iter().map(|b| b * k).collect(),
            tiles: self.tiles * k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pipeline {
    double_buffering: bool,
    pub totals: Totals,
    started: bool,
    prev_compute: u64,
    prev_store: [u64; 3],
    prev2_store: [u64; 3],
}

fn max3(a: [u64; 3]) -> u64 {
    a.into_iter().max().unwrap_or(0)
}

impl Pipeline {
    pub fn new(double_buffering: bool) -> Self {
        Self {
            double_buffering,
            totals: Totals::default(),
            started: false,
            prev_compute: 0,
            prev_store: [0; 3],
            prev2_store: [0; 3],
        }
    }

    fn state(&self) -> (bool, u64, [u64; 3], [u64; 3]) {
        (self.started, self.prev_compute, self.prev_store, self.prev2_store)
    }

    pub fn push(&mut self, cost: &TileCost) {
        let t = &mut self.totals;
        t.tiles += 1;
        t.transfers += cost.transfers;
        for p in 0..3 {
            t.bytes[p] += cost.bytes[p];
        }
        if t.tensor_bytes.len() < cost.tensor_bytes.len() {
            t.tensor_bytes.resize(cost.tensor_bytes.len(), 0);
        }
        for (acc, b) in t.tensor_bytes.iter_mut().zip(&cost.tensor_bytes) {
            *acc += b;
        }
        if !self.double_buffering {
            let dma = max3(cost.load) + max3(cost.store);
            t.cycles += dma + cost.compute;
            t.dma_bound_cycles += dma;
            t.compute_bound_cycles += cost.compute;
            return;
        }
        if !self.started {
            let l0 = max3(cost.load);
            t.cycles += l0;
            t.dma_bound_cycles += l0;
            self.started = true;
        } else {
            let dma = max3(std::array::from_fn(|p| cost.load[p] + self.prev2_store[p]));
            let slot = dma.max(self.prev_compute);
            t.cycles += slot;
            if dma > self.prev_compute {
                t.dma_bound_cycles += slot;
            } else {
                t.compute_bound_cycles += slot;
            }
        }
        self.prev2_store = self.prev_store;
        self.prev_store = cost.store;
        self.prev_compute = cost.compute;
    }

    pub fn finish(mut self) -> Totals {
        if self.double_buffering && self.started {
            let tail = max3(std::array::from_fn(|p| self.prev2_store[p] + self.prev_store[p]));
            self.totals.cycles += self.prev_compute + tail;
            self.totals.compute_bound_cycles += self.prev_compute;
            self.totals.dma_bound_cycles += tail;
        }
        self.totals
    }
}

/// Runs the group's loop nest without materializing it: repeated blocks are
/// evaluated until the pipeline state is periodic, then extrapolated.
pub fn run_compressed(
    compiled: &Compiled,
    loop_ext: &[u64],
    placement: &BTreeMap<String, Level>,
    hw: &HardwareConfig,
    double_buffering: bool,
) -> Result<Totals, SolveError> {
    let mut walker = Walker {
        compiled,
        loop_ext,
        placement,
        hw,
        cache: HashMap::new(),
    };
    let mut pipe = Pipeline::new(double_buffering);
    let mut prefix = Vec::with_capacity(loop_ext.len());
    walker.block(0, &mut prefix, &mut pipe)?;
    Ok(pipe.finish())
}

struct Walker<'a> {
    compiled: &'a Compiled,
    loop_ext: &'a [u64],
    placement: &'a BTreeMap<String, Level>,
    hw: &'a HardwareConfig,
    cache: HashMap<Vec<u64>, TileCost>,
}

impl Walker<'_> {
    fn block(&mut self, j: usize, prefix: &mut Vec<u64>, pipe: &mut Pipeline) -> Result<(), SolveError> {
        if j == self.loop_ext.len() {
            if !self.cache.contains_key(prefix.as_slice()) {
                let ext = self.compiled.class_extents(prefix);
                let cost = self.compiled.tile_cost(&ext, self.placement, self.hw)?;
                self.cache.insert(prefix.clone(), cost);
            }
            pipe.push(&self.cache[prefix.as_slice()]);
            return Ok(());
        }
        let t = self.loop_ext[j];
        let (n, last) = self.compiled.grid(j, t);
        let full_reps = if last == t { n } else { n - 1 };
        prefix.push(t);
        self.repeat(j, prefix, pipe, full_reps)?;
        prefix.pop();
        if last != t {
            prefix.push(last);
            self.block(j + 1, prefix, pipe)?;
            prefix.pop();
        }
        Ok(())
    }

    fn repeat(&mut self, j: usize, prefix: &mut Vec<u64>, pipe: &mut Pipeline, reps: u64) -> Result<(), SolveError> {
        let mut snaps = Vec::with_capacity(3);
        for _ in 0..reps.min(3) {
            self.block(j + 1, prefix, pipe)?;
            snaps.push((pipe.totals.clone(), pipe.state()));
        }
        if reps > 3 {
            // From the second repetition on the state entering a block is
            // the same, so every further repetition adds the same delta.
            debug_assert_eq!(snaps[1].1, snaps[2].1);
            let delta = &snaps[2].0 - &snaps[1].0;
            pipe.totals = &pipe.totals + &(&delta * (reps - 3));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile(load: u64, compute: u64, store: u64) -> TileCost {
        TileCost {
            load: [load, 0, 0],
            store: [store, 0, 0],
            compute,
            transfers: 2,
            ..TileCost::default()
        }
    }

    fn run(tiles: &[TileCost], db: bool) -> u64 {
        let mut p = Pipeline::new(db);
        for t in tiles {
            p.push(t);
        }
        p.finish().cycles
    }

    #[test]
    fn single_tile_is_serial() {
        let t = [tile(10, 20, 5)];
        assert_eq!(run(&t, false), 35);
        assert_eq!(run(&t, true), 35);
    }

    #[test]
    fn compute_bound_closed_form() {
        // Oracle: L + (n − 1)·C + C + 2S when C ≥ L + S.
        let (l, c, s, n) = (10, 100, 7, 9);
        let tiles = vec![tile(l, c, s); n as usize];
        assert_eq!(run(&tiles, true), l + (n - 1) * c + c + 2 * s);
        assert_eq!(run(&tiles, false), n * (l + c + s));
    }

    #[test]
    fn dma_bound_steady_state() {
        let (l, c, s, n) = (60, 20, 50, 6);
        let tiles = vec![tile(l, c, s); n as usize];
        // Slot 1 has no store in flight yet.
        let slots = l + (n - 2) * (l + s);
        assert_eq!(run(&tiles, true), l + slots + c + 2 * s);
    }

    #[test]
    fn stores_on_other_engines_overlap() {
        let mut a = tile(30, 10, 0);
        a.store = [0, 0, 30];
        let tiles = vec![a; 4];
        // Loads on L2-L1 and stores on L3-L1 never queue behind each other.
        assert_eq!(run(&tiles, true), 30 + 3 * 30 + 10 + 60);
    }
}
