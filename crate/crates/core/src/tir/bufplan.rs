//! Arena placement of temporaries by linear scan over the call sequence.
//!
//! A buffer is live from the first to the last call touching it. Freed
//! blocks are reused most-recently-freed first, first fit, without splitting.

use std::collections::BTreeMap;

use serde::Serialize;

use super::ir::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Interval {
    pub size: usize,
    pub first: usize,
    pub last: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Placement {
    pub offset: usize,
    pub size: usize,
    pub first: usize,
    pub last: usize,
}

fn align_up(x: usize, a: usize) -> usize {
    x.div_ceil(a) * a
}

/// Offsets for `items` and the arena size.
pub fn linear_scan(items: &[Interval], alignment: usize, reuse: bool) -> (Vec<usize>, usize) {
    let alignment = alignment.max(1);
    let steps = items.iter().map(|i| i.last + 1).max().unwrap_or(0);
    let mut offsets = vec![0; items.len()];
    let mut caps = vec![0; items.len()];
    let mut free: Vec<(usize, usize)> = Vec::new();
    let mut end = 0;
    for step in 0..steps {
        for (k, it) in items.iter().enumerate().filter(|(_, it)| it.first == step) {
            let hit = if reuse { free.iter().rposition(|&(_, cap)| cap >= it.size) } else { None };
            match hit {
                Some(p) => {
                    let (off, cap) = free.remove(p);
                    offsets[k] = off;
                    caps[k] = cap;
                }
                None => {
                    let off = align_up(end, alignment);
                    offsets[k] = off;
                    caps[k] = it.size;
                    end = off + it.size;
                }
            }
        }
        for (k, _) in items.iter().enumerate().filter(|(_, it)| it.last == step) {
            free.push((offsets[k], caps[k]));
        }
    }
    (offsets, end)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BufferPlan {
    /// Main arena placements.
    pub arena: BTreeMap<BufId, Placement>,
    pub arena_bytes: usize,
    /// Placements inside the fold function's own arena.
    pub fold_arena: BTreeMap<BufId, Placement>,
    pub fold_arena_bytes: usize,
    /// Offsets of local buffers inside each worker's scratch.
    pub scratch: BTreeMap<BufId, usize>,
    pub scratch_bytes: usize,
    /// Sum of the sizes of all arena-planned temporaries.
    pub temp_bytes: usize,
    pub peak_live_bytes: usize,
}

fn plan_calls(m: &Module, root: FuncId, alignment: usize, reuse: bool) -> (BTreeMap<BufId, Placement>, usize, usize, usize) {
    let calls = m.callees(root);
    let mut live: BTreeMap<BufId, (usize, usize)> = BTreeMap::new();
    for (i, f) in calls.iter().enumerate() {
        for b in buffer_accesses(&m.funcs[f.0].body).keys() {
            if m.bufs[b.0].kind == BufKind::Temp {
                let e = live.entry(*b).or_insert((i, i));
                e.1 = i;
            }
        }
    }
    let ids: Vec<BufId> = live.keys().copied().collect();
    let items: Vec<Interval> = ids.iter().map(|b| Interval { size: m.bufs[b.0].bytes(), first: live[b].0, last: live[b].1 }).collect();
    let (offs, arena) = linear_scan(&items, alignment, reuse);
    let mut peak = 0;
    for step in 0..calls.len() {
        let l: usize = items.iter().filter(|it| it.first <= step && step <= it.last).map(|it| it.size).sum();
        peak = peak.max(l);
    }
    let placements =
        ids.iter().zip(items.iter().zip(offs)).map(|(b, (it, off))| (*b, Placement { offset: off, size: it.size, first: it.first, last: it.last })).collect();
    (placements, arena, items.iter().map(|i| i.size).sum(), peak)
}

/// Places temporaries of the entry and fold call sequences and packs local
/// buffers into per-worker scratch.
pub fn plan_buffers(m: &Module, alignment: usize, reuse: bool) -> BufferPlan {
    let (arena, arena_bytes, temp_bytes, peak_live_bytes) = plan_calls(m, m.entry, alignment, reuse);
    let (fold_arena, fold_arena_bytes) = match m.fold {
        Some(f) => {
            let (p, n, _, _) = plan_calls(m, f, alignment, reuse);
            (p, n)
        }
        None => Default::default(),
    };
    let mut scratch = BTreeMap::new();
    let mut scratch_bytes = 0;
    for f in m.reachable() {
        let mut off = 0;
        for (i, b) in m.bufs.iter().enumerate() {
            if b.kind == BufKind::Local && b.owner == Some(f) {
                off = align_up(off, alignment.max(1));
                scratch.insert(BufId(i), off);
                off += b.bytes();
            }
        }
        scratch_bytes = scratch_bytes.max(off);
    }
    BufferPlan { arena, arena_bytes, fold_arena, fold_arena_bytes, scratch, scratch_bytes, temp_bytes, peak_live_bytes }
}

impl BufferPlan {
    /// Pairs of simultaneously live arena buffers whose byte ranges overlap.
    pub fn collisions(&self) -> Vec<(BufId, BufId)> {
        let mut out = Vec::new();
        for map in [&self.arena, &self.fold_arena] {
            let v: Vec<(&BufId, &Placement)> = map.iter().collect();
            for i in 0..v.len() {
                for j in i + 1..v.len() {
                    let (a, b) = (v[i].1, v[j].1);
                    let live = a.first <= b.last && b.first <= a.last;
                    let overlap = a.offset < b.offset + b.size && b.offset < a.offset + a.size;
                    if live && overlap && a.size > 0 && b.size > 0 {
                        out.push((*v[i].0, *v[j].0));
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> Vec<Interval> {
        // t1 feeds call 1, t2 feeds call 2, t3 feeds call 3
        vec![Interval { size: 100, first: 0, last: 1 }, Interval { size: 100, first: 1, last: 2 }, Interval { size: 50, first: 2, last: 3 }]
    }

    #[test]
    fn sequential_chain_reuses_freed_block() {
        let (offs, arena) = linear_scan(&chain(), 1, true);
        assert_eq!(offs, vec![0, 100, 0]);
        assert_eq!(arena, 200);
        let (offs, arena) = linear_scan(&chain(), 64, true);
        assert_eq!(offs, vec![0, 128, 0]);
        assert_eq!(arena, 228);
    }

    #[test]
    fn no_reuse_is_additive() {
        let (_, arena) = linear_scan(&chain(), 1, false);
        assert_eq!(arena, 250);
    }

    #[test]
    fn most_recently_freed_first() {
        let items = vec![Interval { size: 64, first: 0, last: 0 }, Interval { size: 64, first: 0, last: 1 }, Interval { size: 32, first: 2, last: 2 }];
        let (offs, _) = linear_scan(&items, 1, true);
        assert_eq!(offs[2], offs[1]);
    }
}
