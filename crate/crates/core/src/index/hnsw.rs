//! Hierarchical navigable small-world graph over inner-product similarity.
//!
//! The graph stores only adjacency; vectors live in the owning index's flat
//! buffer and are passed in on every call. Node levels are derived from a hash
//! of the slot number, so rebuilding from the same insertion sequence yields
//! the same graph.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::embedding::dot;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Scored {
    pub score: f32,
    pub node: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Min-heap adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Worst(Scored);

impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.cmp(&self.0)
    }
}

impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Visited {
    bits: Vec<u64>,
}

impl Visited {
    fn new(n: usize) -> Self {
        Self {
            bits: vec![0; n.div_ceil(64)],
        }
    }

    /// Marks `i`, returning whether it was unmarked before.
    #[inline]
    fn insert(&mut self, i: u32) -> bool {
        let (w, b) = ((i / 64) as usize, i % 64);
        let fresh = self.bits[w] & (1 << b) == 0;
        self.bits[w] |= 1 << b;
        fresh
    }
}

/// Flat vector storage view.
#[derive(Clone, Copy)]
pub(crate) struct Vectors<'a> {
    pub data: &'a [f32],
    pub dim: usize,
}

impl<'a> Vectors<'a> {
    #[inline]
    pub fn get(&self, node: u32) -> &'a [f32] {
        let start = node as usize * self.dim;
        &self.data[start..start + self.dim]
    }

    #[inline]
    fn sim(&self, query: &[f32], node: u32) -> f32 {
        dot(query, self.get(node))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Graph {
    pub m: usize,
    pub ef_construction: usize,
    pub seed: u64,
    /// `links[node][level]` for levels `0..=top level of node`.
    pub links: Vec<Vec<Vec<u32>>>,
    pub entry: Option<u32>,
    pub max_level: usize,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Graph {
    pub fn new(m: usize, ef_construction: usize, seed: u64) -> Self {
        Self {
            m,
            ef_construction,
            seed,
            links: Vec::new(),
            entry: None,
            max_level: 0,
        }
    }

    fn max_links(&self, level: usize) -> usize {
        if level == 0 {
            self.m * 2
        } else {
            self.m
        }
    }

    fn level_for(&self, node: u32) -> usize {
        let ml = 1.0 / (self.m as f64).ln();
        let u = ((mix(self.seed ^ u64::from(node)) >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
        ((-u.ln() * ml).floor() as usize).min(16)
    }

    /// Adds node `node` (which must equal the current length) to the graph.
    pub fn insert(&mut self, node: u32, vectors: Vectors<'_>) {
        debug_assert_eq!(node as usize, self.links.len());
        let level = self.level_for(node);
        self.links.push(vec![Vec::new(); level + 1]);
        let Some(entry) = self.entry else {
            self.entry = Some(node);
            self.max_level = level;
            return;
        };
        self.connect(node, level, entry, vectors);
        if level > self.max_level {
            self.max_level = level;
            self.entry = Some(node);
        }
    }

    /// Recomputes the outgoing links of a node whose vector changed.
    pub fn relink(&mut self, node: u32, vectors: Vectors<'_>) {
        let level = self.links[node as usize].len() - 1;
        for l in &mut self.links[node as usize] {
            l.clear();
        }
        let Some(entry) = self.entry else { return };
        if entry == node {
            // Route from any other node so the search does not start at itself.
            match (0..self.links.len() as u32).find(|&n| n != node) {
                Some(other) => self.connect(node, level, other, vectors),
                None => {}
            }
        } else {
            self.connect(node, level, entry, vectors);
        }
    }

    fn connect(&mut self, node: u32, level: usize, entry: u32, vectors: Vectors<'_>) {
        let query = vectors.get(node);
        let mut ep = vec![Scored {
            score: vectors.sim(query, entry),
            node: entry,
        }];
        let top = self.max_level.min(self.links[entry as usize].len() - 1);
        for lc in ((level + 1)..=top).rev() {
            ep = self.search_layer(query, &ep, 1, lc, vectors, None::<&fn(u32) -> bool>);
        }
        for lc in (0..=level.min(top)).rev() {
            let mut found = self.search_layer(query, &ep, self.ef_construction, lc, vectors, None::<&fn(u32) -> bool>);
            found.retain(|s| s.node != node);
            let chosen = self.select(&found, self.m, vectors);
            self.links[node as usize][lc] = chosen.iter().map(|s| s.node).collect();
            let cap = self.max_links(lc);
            for s in &chosen {
                let nb = s.node as usize;
                if self.links[nb].len() <= lc || self.links[nb][lc].contains(&node) {
                    continue;
                }
                self.links[nb][lc].push(node);
                if self.links[nb][lc].len() > cap {
                    let base = vectors.get(s.node);
                    let mut cands: Vec<Scored> = self.links[nb][lc]
                        .iter()
                        .map(|&n| Scored {
                            score: vectors.sim(base, n),
                            node: n,
                        })
                        .collect();
                    cands.sort_unstable_by(|a, b| b.cmp(a));
                    self.links[nb][lc] = self.select(&cands, cap, vectors).iter().map(|s| s.node).collect();
                }
            }
            if !found.is_empty() {
                ep = found;
            }
        }
    }

    /// Diversity heuristic: keep a candidate only if it is closer to the base
    /// than to every neighbour already kept. `cands` must be sorted best-first.
    fn select(&self, cands: &[Scored], m: usize, vectors: Vectors<'_>) -> Vec<Scored> {
        let mut kept: Vec<Scored> = Vec::with_capacity(m);
        for &c in cands {
            if kept.len() >= m {
                break;
            }
            let cv = vectors.get(c.node);
            if kept.iter().all(|k| vectors.sim(cv, k.node) < c.score) {
                kept.push(c);
            }
        }
        kept
    }

    /// Beam search on one level. With a filter, every visited node still
    /// steers the traversal but only accepted nodes enter the result set.
    pub fn search_layer<F: Fn(u32) -> bool>(
        &self,
        query: &[f32],
        entry: &[Scored],
        ef: usize,
        level: usize,
        vectors: Vectors<'_>,
        filter: Option<&F>,
    ) -> Vec<Scored> {
        let accept = |n: u32| filter.map_or(true, |f| f(n));
        let mut visited = Visited::new(self.links.len());
        let mut candidates: BinaryHeap<Scored> = BinaryHeap::new();
        let mut results: BinaryHeap<Worst> = BinaryHeap::new();
        for &e in entry {
            if visited.insert(e.node) {
                candidates.push(e);
                if accept(e.node) {
                    results.push(Worst(e));
                }
            }
        }
        while results.len() > ef {
            results.pop();
        }
        while let Some(c) = candidates.pop() {
            if results.len() >= ef {
                if let Some(w) = results.peek() {
                    if c.score < w.0.score {
                        break;
                    }
                }
            }
            let Some(neighbors) = self.links[c.node as usize].get(level) else {
                continue;
            };
            for &n in neighbors {
                if !visited.insert(n) {
                    continue;
                }
                let s = Scored {
                    score: vectors.sim(query, n),
                    node: n,
                };
                let worst = results.peek().map(|w| w.0.score);
                if results.len() < ef || worst.is_some_and(|w| s.score > w) {
                    candidates.push(s);
                    if accept(n) {
                        results.push(Worst(s));
                        if results.len() > ef {
                            results.pop();
                        }
                    }
                }
            }
        }
        let mut out: Vec<Scored> = results.into_iter().map(|w| w.0).collect();
        out.sort_unstable_by(|a, b| b.cmp(a));
        out
    }

    /// Greedy descent through the upper levels followed by a filtered beam
    /// search on level 0.
    pub fn search<F: Fn(u32) -> bool>(&self, query: &[f32], ef: usize, vectors: Vectors<'_>, filter: Option<&F>) -> Vec<Scored> {
        let Some(entry) = self.entry else {
            return Vec::new();
        };
        let mut ep = vec![Scored {
            score: vectors.sim(query, entry),
            node: entry,
        }];
        for lc in (1..=self.max_level).rev() {
            ep = self.search_layer(query, &ep, 1, lc, vectors, None::<&F>);
        }
        self.search_layer(query, &ep, ef, 0, vectors, filter)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            out.extend(v.iter().map(|x| x / norm));
        }
        out
    }

    #[test]
    fn degree_bounds_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 16;
        let data = random_unit(&mut rng, 2000, dim);
        let vectors = Vectors { data: &data, dim };
        let mut g = Graph::new(8, 64, 1);
        for i in 0..2000 {
            g.insert(i, vectors);
        }
        for node in &g.links {
            for (lvl, l) in node.iter().enumerate() {
                assert!(l.len() <= g.max_links(lvl));
            }
        }
        assert!(g.max_level >= 1);
    }

    #[test]
    fn finds_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dim = 24;
        let data = random_unit(&mut rng, 3000, dim);
        let vectors = Vectors { data: &data, dim };
        let mut g = Graph::new(16, 200, 7);
        for i in 0..3000 {
            g.insert(i, vectors);
        }
        let mut hits = 0;
        for i in (0..3000).step_by(7) {
            let r = g.search(vectors.get(i), 32, vectors, None::<&fn(u32) -> bool>);
            if r[0].node == i {
                hits += 1;
            }
        }
        assert!(hits as f64 / 429.0 > 0.99, "{hits}");
    }

    #[test]
    fn levels_are_deterministic() {
        let g = Graph::new(16, 200, 42);
        let h = Graph::new(16, 200, 42);
        for i in 0..100 {
            assert_eq!(g.level_for(i), h.level_for(i));
        }
    }
}
