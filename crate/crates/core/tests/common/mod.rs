//! Independent oracles shared by the integration suites.

#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use prefixpack::partition::Partition;
use prefixpack::sim::modeled_traffic;
use prefixpack::workload::{BlockId, BlockTable, HeadConfig, QueryId, WorkloadSpec};
use prefixpack::attention::Tensor3;

/// Tree shape: a leaf is one query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Shape {
    Leaf,
    Node(Vec<Shape>),
}

impl Shape {
    pub fn leaves(&self) -> usize {
        match self {
            Shape::Leaf => 1,
            Shape::Node(c) => c.iter().map(Shape::leaves).sum(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Shape::Leaf => 1,
            Shape::Node(c) => 1 + c.iter().map(Shape::depth).max().unwrap_or(0),
        }
    }
}

/// Non-increasing sequences of positive parts summing to at most `max`,
/// with at least `min_parts` parts.
fn partitions(max: usize, largest: usize, min_parts: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    fn rec(left: usize, largest: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        out.push(cur.clone());
        for p in (1..=largest.min(left)).rev() {
            cur.push(p);
            rec(left - p, p, cur, out);
            cur.pop();
        }
    }
    rec(max, largest, &mut Vec::new(), &mut out);
    out.retain(|p| p.len() >= min_parts);
    out
}

/// Every prefix tree with at most `max_leaves` queries and at most three
/// levels in which each internal node has at least two children.
pub fn enumerate_shapes(max_leaves: usize) -> Vec<Shape> {
    let mut shapes = vec![Shape::Leaf];
    for k in 2..=max_leaves {
        shapes.push(Shape::Node(vec![Shape::Leaf; k]));
    }
    // three levels: children are leaves (size 1) or two-level nodes (size >= 2)
    for parts in partitions(max_leaves, max_leaves, 2) {
        if parts.iter().all(|&p| p == 1) {
            continue;
        }
        let children = parts
            .iter()
            .map(|&p| if p == 1 { Shape::Leaf } else { Shape::Node(vec![Shape::Leaf; p]) })
            .collect();
        shapes.push(Shape::Node(children));
    }
    shapes
}

/// A materialized tree: the table plus each query's root-to-leaf node path
/// as `(node id, tokens)`.
pub struct Materialized {
    pub table: BlockTable,
    pub paths: Vec<Vec<(usize, usize)>>,
}

/// Builds a table where every level-`j` node holds `lengths[j]` tokens.
pub fn materialize(shape: &Shape, lengths: &[usize], block_size: usize) -> Materialized {
    struct Ctx<'a> {
        lengths: &'a [usize],
        bs: usize,
        next_block: BlockId,
        next_node: usize,
        rows: Vec<Vec<BlockId>>,
        paths: Vec<Vec<(usize, usize)>>,
    }
    fn walk(s: &Shape, level: usize, prefix: &mut Vec<BlockId>, path: &mut Vec<(usize, usize)>, cx: &mut Ctx) {
        let tokens = cx.lengths[level];
        let blocks = tokens / cx.bs;
        let mark = prefix.len();
        prefix.extend((0..blocks as BlockId).map(|i| cx.next_block + i));
        cx.next_block += blocks as BlockId;
        path.push((cx.next_node, tokens));
        cx.next_node += 1;
        match s {
            Shape::Leaf => {
                cx.rows.push(prefix.clone());
                cx.paths.push(path.clone());
            }
            Shape::Node(children) => {
                for c in children {
                    walk(c, level + 1, prefix, path, cx);
                }
            }
        }
        prefix.truncate(mark);
        path.pop();
    }
    let mut cx = Ctx { lengths, bs: block_size, next_block: 0, next_node: 0, rows: Vec::new(), paths: Vec::new() };
    walk(shape, 0, &mut Vec::new(), &mut Vec::new(), &mut cx);
    Materialized { table: BlockTable::from_rows(block_size, cx.rows), paths: cx.paths }
}

/// Cost weights in bytes per head-dim element.
#[derive(Clone, Copy)]
pub struct CostModel {
    pub d: u64,
    pub kv_bytes: u64,
    pub intermediate_bytes: u64,
}

impl CostModel {
    pub fn of(spec: &WorkloadSpec) -> Self {
        CostModel {
            d: spec.heads.dim as u64,
            kv_bytes: spec.dtype_bytes.kv as u64,
            intermediate_bytes: spec.dtype_bytes.intermediate as u64,
        }
    }
}

/// Exhaustive optimum over every partition in which each query's path is cut
/// into contiguous node runs and identical runs share one CTA.
pub fn brute_force_optimum(paths: &[Vec<(usize, usize)>], cost: CostModel) -> u64 {
    let choices: Vec<u32> = paths.iter().map(|p| 1u32 << (p.len() - 1)).collect();
    let total: u64 = choices.iter().map(|&c| c as u64).product();
    let mut best = u64::MAX;
    let mut masks = vec![0u32; paths.len()];
    let mut runs: HashSet<(usize, usize)> = HashSet::new();
    for mut code in 0..total {
        for (i, &c) in choices.iter().enumerate() {
            masks[i] = (code % c as u64) as u32;
            code /= c as u64;
        }
        runs.clear();
        let mut kv_tokens = 0u64;
        let mut partials = 0u64;
        for (path, &mask) in paths.iter().zip(&masks) {
            let mut start = 0;
            let mut count = 0;
            for end in 0..path.len() {
                let cut_after = end + 1 == path.len() || mask & (1 << end) != 0;
                if cut_after {
                    let key = (path[start].0, path[end].0);
                    if runs.insert(key) {
                        kv_tokens += path[start..=end].iter().map(|&(_, t)| t as u64).sum::<u64>();
                    }
                    count += 1;
                    start = end + 1;
                }
            }
            if count > 1 {
                partials += count;
            }
        }
        let c = kv_tokens * cost.d * cost.kv_bytes + partials * 2 * cost.d * cost.intermediate_bytes;
        best = best.min(c);
    }
    best
}

pub fn modeled_total(p: &Partition, spec: &WorkloadSpec) -> u64 {
    modeled_traffic(p, spec).total
}

/// Softmax written out term by term without max subtraction; inputs are
/// bounded so the exponentials cannot overflow.
pub fn naive_attention(q: &Tensor3, k: &[Tensor3], v: &[Tensor3], heads: HeadConfig) -> Tensor3 {
    let mut out = Tensor3::zeros(q.dims);
    let g = heads.q / heads.kv;
    let scale = 1.0 / (heads.dim as f64).sqrt();
    for i in 0..q.dims[0] {
        for h in 0..heads.q {
            let kh = h / g;
            let len = k[i].dims[0];
            let mut num = vec![0.0; heads.dim];
            let mut den = 0.0;
            for t in 0..len {
                let mut s = 0.0;
                for j in 0..heads.dim {
                    s += q.row(i, h)[j] * k[i].row(t, kh)[j];
                }
                let e = (s * scale).exp();
                den += e;
                for j in 0..heads.dim {
                    num[j] += e * v[i].row(t, kh)[j];
                }
            }
            for j in 0..heads.dim {
                out.row_mut(i, h)[j] = num[j] / den;
            }
        }
    }
    out
}

/// Per-query token runs covered by the units, reassembled independently of
/// the library's coverage check.
pub fn covered_rows(table: &BlockTable, units: &[(&[QueryId], &[BlockId])]) -> HashMap<QueryId, Vec<BlockId>> {
    let mut per_query: HashMap<QueryId, Vec<&[BlockId]>> = HashMap::new();
    for (qs, blocks) in units {
        for q in *qs {
            per_query.entry(*q).or_default().push(blocks);
        }
    }
    let mut out = HashMap::new();
    for (q, mut spans) in per_query {
        let row = &table.rows[q];
        spans.sort_by_key(|s| row.iter().position(|b| *b == s[0]).unwrap_or(usize::MAX));
        out.insert(q, spans.concat());
    }
    out
}

pub fn ulps_apart(a: f64, b: f64) -> u64 {
    if a == b {
        return 0;
    }
    let key = |x: f64| {
        let bits = x.to_bits() as i64;
        if bits < 0 { i64::MIN - bits } else { bits }
    };
    key(a).abs_diff(key(b))
}
