//! Felzenszwalb-Huttenlocher graph segmentation over a weighted edge list.

/// Weighted undirected edge between node indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: u32,
    pub b: u32,
    pub w: f64,
}

struct DisjointSets {
    parent: Vec<u32>,
    size: Vec<u32>,
    /// Largest edge weight in the component's spanning tree.
    internal: Vec<f64>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        while self.parent[x as usize] != root {
            let next = self.parent[x as usize];
            self.parent[x as usize] = root;
            x = next;
        }
        root
    }

    fn union(&mut self, a: u32, b: u32, w: f64) {
        let (big, small) = if self.size[a as usize] >= self.size[b as usize] {
            (a, b)
        } else {
            (b, a)
        };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
        self.internal[big as usize] = w;
    }
}

/// Segments `n` nodes with threshold function `k / |C|`.
///
/// Edges are processed in non-decreasing weight order; equal weights keep
/// their input order. Returns a component id per node, numbered densely in
/// order of each component's first node.
pub fn segment_graph(n: usize, edges: &[Edge], k: f64) -> Vec<u32> {
    let mut order: Vec<u32> = (0..edges.len() as u32).collect();
    order.sort_by(|&x, &y| edges[x as usize].w.total_cmp(&edges[y as usize].w));

    let mut sets = DisjointSets::new(n);
    for idx in order {
        let e = edges[idx as usize];
        let ra = sets.find(e.a);
        let rb = sets.find(e.b);
        if ra == rb {
            continue;
        }
        let ta = sets.internal[ra as usize] + k / sets.size[ra as usize] as f64;
        let tb = sets.internal[rb as usize] + k / sets.size[rb as usize] as f64;
        if e.w <= ta.min(tb) {
            sets.union(ra, rb, e.w);
        }
    }

    let mut remap = vec![u32::MAX; n];
    let mut next = 0u32;
    (0..n as u32)
        .map(|v| {
            let r = sets.find(v) as usize;
            if remap[r] == u32::MAX {
                remap[r] = next;
                next += 1;
            }
            remap[r]
        })
        .collect()
}
