//! Boykov-Kolmogorov max-flow on graphs with terminal links.
//!
//! Grows a search tree from the source and one from the sink, augments along
//! the path found when they touch, then adopts orphaned nodes. Trees are
//! reused between augmentations, which makes it fast on the shallow lattice
//! graphs produced by vision energies.

use std::collections::VecDeque;

const NONE: u32 = u32::MAX;
const TERMINAL: u32 = u32::MAX - 1;
const ORPHAN: u32 = u32::MAX - 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Source,
    Sink,
}

#[derive(Clone)]
struct Node {
    first: u32,
    /// Arc from this node to its parent, or NONE / TERMINAL / ORPHAN.
    parent: u32,
    /// Residual terminal capacity: > 0 from source, < 0 to sink.
    tr_cap: f64,
    is_sink: bool,
    active: bool,
    ts: u64,
    dist: u32,
}

/// Directed graph with paired residual arcs (`arc ^ 1` is the sister).
pub struct MaxFlow {
    nodes: Vec<Node>,
    head: Vec<u32>,
    next: Vec<u32>,
    r_cap: Vec<f64>,
    flow: f64,
    active: VecDeque<u32>,
    orphans: VecDeque<u32>,
    time: u64,
}

impl MaxFlow {
    pub fn new(node_count: usize, edge_hint: usize) -> Self {
        Self {
            nodes: vec![
                Node {
                    first: NONE,
                    parent: NONE,
                    tr_cap: 0.0,
                    is_sink: false,
                    active: false,
                    ts: 0,
                    dist: 0,
                };
                node_count
            ],
            head: Vec::with_capacity(2 * edge_hint),
            next: Vec::with_capacity(2 * edge_hint),
            r_cap: Vec::with_capacity(2 * edge_hint),
            flow: 0.0,
            active: VecDeque::new(),
            orphans: VecDeque::new(),
            time: 0,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Adds capacity `source_cap` on s→i and `sink_cap` on i→t.
    pub fn add_tweights(&mut self, i: usize, source_cap: f64, sink_cap: f64) {
        let mut cs = source_cap;
        let mut ct = sink_cap;
        let delta = self.nodes[i].tr_cap;
        if delta > 0.0 {
            cs += delta;
        } else {
            ct -= delta;
        }
        self.flow += cs.min(ct);
        self.nodes[i].tr_cap = cs - ct;
    }

    /// Adds arc i→j with capacity `cap` and j→i with capacity `rev_cap`.
    pub fn add_edge(&mut self, i: usize, j: usize, cap: f64, rev_cap: f64) {
        debug_assert!(i != j);
        let a = self.head.len() as u32;
        self.head.push(j as u32);
        self.next.push(self.nodes[i].first);
        self.r_cap.push(cap);
        self.nodes[i].first = a;
        self.head.push(i as u32);
        self.next.push(self.nodes[j].first);
        self.r_cap.push(rev_cap);
        self.nodes[j].first = a + 1;
    }

    #[inline]
    fn set_active(&mut self, i: u32) {
        let n = &mut self.nodes[i as usize];
        if !n.active {
            n.active = true;
            self.active.push_back(i);
        }
    }

    fn next_active(&mut self) -> Option<u32> {
        while let Some(i) = self.active.pop_front() {
            self.nodes[i as usize].active = false;
            if self.nodes[i as usize].parent != NONE {
                return Some(i);
            }
        }
        None
    }

    /// Runs max-flow and returns its value (including constant flow pushed
    /// directly through terminal links).
    pub fn solve(&mut self) -> f64 {
        self.active.clear();
        self.orphans.clear();
        self.time = 0;
        for i in 0..self.nodes.len() {
            let n = &mut self.nodes[i];
            n.ts = 0;
            n.active = false;
            if n.tr_cap > 0.0 {
                n.is_sink = false;
                n.parent = TERMINAL;
                n.dist = 1;
            } else if n.tr_cap < 0.0 {
                n.is_sink = true;
                n.parent = TERMINAL;
                n.dist = 1;
            } else {
                n.parent = NONE;
            }
            if n.parent != NONE {
                self.set_active(i as u32);
            }
        }

        let mut current: Option<u32> = None;
        loop {
            let i = match current {
                Some(i) if self.nodes[i as usize].parent != NONE => i,
                _ => match self.next_active() {
                    Some(i) => i,
                    None => break,
                },
            };
            current = None;

            let middle = self.grow(i);
            self.time += 1;

            if let Some(a) = middle {
                current = Some(i);
                self.augment(a);
                self.adopt();
            }
        }
        self.flow
    }

    /// Grows the tree containing `i`; returns the arc (source side → sink
    /// side) joining the two trees if one is found.
    fn grow(&mut self, i: u32) -> Option<u32> {
        let iu = i as usize;
        let i_sink = self.nodes[iu].is_sink;
        let (i_ts, i_dist) = (self.nodes[iu].ts, self.nodes[iu].dist);
        let mut a = self.nodes[iu].first;
        while a != NONE {
            let au = a as usize;
            let cap = if i_sink {
                self.r_cap[au ^ 1]
            } else {
                self.r_cap[au]
            };
            if cap > 0.0 {
                let j = self.head[au];
                let ju = j as usize;
                if self.nodes[ju].parent == NONE {
                    let n = &mut self.nodes[ju];
                    n.is_sink = i_sink;
                    n.parent = a ^ 1;
                    n.ts = i_ts;
                    n.dist = i_dist + 1;
                    self.set_active(j);
                } else if self.nodes[ju].is_sink != i_sink {
                    return Some(if i_sink { a ^ 1 } else { a });
                } else if self.nodes[ju].ts <= i_ts && self.nodes[ju].dist > i_dist {
                    let n = &mut self.nodes[ju];
                    n.parent = a ^ 1;
                    n.ts = i_ts;
                    n.dist = i_dist + 1;
                }
            }
            a = self.next[au];
        }
        None
    }

    fn augment(&mut self, middle: u32) {
        let mu = middle as usize;
        let mut bottleneck = self.r_cap[mu];

        // Source tree: walk from the tail of `middle` up to the source.
        let mut i = self.head[mu ^ 1] as usize;
        loop {
            let a = self.nodes[i].parent;
            if a == TERMINAL {
                break;
            }
            bottleneck = bottleneck.min(self.r_cap[a as usize ^ 1]);
            i = self.head[a as usize] as usize;
        }
        bottleneck = bottleneck.min(self.nodes[i].tr_cap);

        // Sink tree.
        let mut i = self.head[mu] as usize;
        loop {
            let a = self.nodes[i].parent;
            if a == TERMINAL {
                break;
            }
            bottleneck = bottleneck.min(self.r_cap[a as usize]);
            i = self.head[a as usize] as usize;
        }
        bottleneck = bottleneck.min(-self.nodes[i].tr_cap);

        self.r_cap[mu ^ 1] += bottleneck;
        self.r_cap[mu] -= bottleneck;

        let mut i = self.head[mu ^ 1] as usize;
        loop {
            let a = self.nodes[i].parent;
            if a == TERMINAL {
                break;
            }
            let au = a as usize;
            self.r_cap[au] += bottleneck;
            self.r_cap[au ^ 1] -= bottleneck;
            if self.r_cap[au ^ 1] <= 0.0 {
                self.r_cap[au ^ 1] = 0.0;
                self.make_orphan(i);
            }
            i = self.head[au] as usize;
        }
        self.nodes[i].tr_cap -= bottleneck;
        if self.nodes[i].tr_cap <= 0.0 {
            self.nodes[i].tr_cap = 0.0;
            self.make_orphan(i);
        }

        let mut i = self.head[mu] as usize;
        loop {
            let a = self.nodes[i].parent;
            if a == TERMINAL {
                break;
            }
            let au = a as usize;
            self.r_cap[au ^ 1] += bottleneck;
            self.r_cap[au] -= bottleneck;
            if self.r_cap[au] <= 0.0 {
                self.r_cap[au] = 0.0;
                self.make_orphan(i);
            }
            i = self.head[au] as usize;
        }
        self.nodes[i].tr_cap += bottleneck;
        if self.nodes[i].tr_cap >= 0.0 {
            self.nodes[i].tr_cap = 0.0;
            self.make_orphan(i);
        }

        self.flow += bottleneck;
    }

    #[inline]
    fn make_orphan(&mut self, i: usize) {
        self.nodes[i].parent = ORPHAN;
        self.orphans.push_front(i as u32);
    }

    fn adopt(&mut self) {
        while let Some(i) = self.orphans.pop_front() {
            self.process_orphan(i as usize);
        }
    }

    fn process_orphan(&mut self, i: usize) {
        let i_sink = self.nodes[i].is_sink;
        let mut best_arc = NONE;
        let mut best_dist = u32::MAX;

        let mut a0 = self.nodes[i].first;
        while a0 != NONE {
            let a0u = a0 as usize;
            // Capacity from the candidate parent into i (source tree) or
            // from i into the candidate parent (sink tree).
            let cap = if i_sink {
                self.r_cap[a0u]
            } else {
                self.r_cap[a0u ^ 1]
            };
            if cap > 0.0 {
                let j = self.head[a0u] as usize;
                if self.nodes[j].is_sink == i_sink && self.nodes[j].parent != NONE {
                    if let Some(d) = self.origin_distance(j) {
                        if d < best_dist {
                            best_arc = a0;
                            best_dist = d;
                        }
                    }
                }
            }
            a0 = self.next[a0u];
        }

        if best_arc != NONE {
            let n = &mut self.nodes[i];
            n.parent = best_arc;
            n.ts = self.time;
            n.dist = best_dist + 1;
            return;
        }

        self.nodes[i].parent = NONE;
        let mut a0 = self.nodes[i].first;
        while a0 != NONE {
            let a0u = a0 as usize;
            let j = self.head[a0u] as usize;
            let pj = self.nodes[j].parent;
            if self.nodes[j].is_sink == i_sink && pj != NONE {
                let cap = if i_sink {
                    self.r_cap[a0u]
                } else {
                    self.r_cap[a0u ^ 1]
                };
                if cap > 0.0 {
                    self.set_active(j as u32);
                }
                if pj != TERMINAL && pj != ORPHAN && self.head[pj as usize] as usize == i {
                    self.nodes[j].parent = ORPHAN;
                    self.orphans.push_back(j as u32);
                }
            }
            a0 = self.next[a0u];
        }
    }

    /// Distance from `j` to its terminal if `j` is still rooted; stamps the
    /// visited path with the current time.
    fn origin_distance(&mut self, j: usize) -> Option<u32> {
        let mut d = 0u32;
        let mut k = j;
        loop {
            if self.nodes[k].ts == self.time {
                d += self.nodes[k].dist;
                break;
            }
            let a = self.nodes[k].parent;
            d += 1;
            if a == TERMINAL {
                self.nodes[k].ts = self.time;
                self.nodes[k].dist = 1;
                break;
            }
            if a == ORPHAN || a == NONE {
                return None;
            }
            k = self.head[a as usize] as usize;
        }
        let mut k = j;
        let mut dd = d;
        while self.nodes[k].ts != self.time {
            self.nodes[k].ts = self.time;
            self.nodes[k].dist = dd;
            dd = dd.saturating_sub(1);
            k = self.head[self.nodes[k].parent as usize] as usize;
        }
        Some(d)
    }

    /// Side of the minimum cut containing node `i`. Nodes not reachable from
    /// the source in the residual graph are on the sink side.
    pub fn segment(&self, i: usize) -> Segment {
        let n = &self.nodes[i];
        if n.parent != NONE && !n.is_sink {
            Segment::Source
        } else {
            Segment::Sink
        }
    }
}
