//! Minimum-degree ordering on the block graph of a symmetric matrix.

use std::collections::BTreeSet;

use crate::sparse::CsrMatrix;

/// Block adjacency of a symmetric matrix with `bs × bs` blocks, without
/// self loops. Each list is sorted.
pub fn block_graph(a: &CsrMatrix, bs: usize) -> Vec<Vec<usize>> {
    let nb = a.nrows() / bs;
    let mut adj = vec![Vec::new(); nb];
    for (bi, list) in adj.iter_mut().enumerate() {
        for r in bi * bs..(bi + 1) * bs {
            list.extend(a.row(r).0.iter().map(|c| c / bs).filter(|&bj| bj != bi));
        }
        list.sort_unstable();
        list.dedup();
    }
    adj
}

/// Result of a symbolic elimination.
#[derive(Clone, Debug)]
pub struct Elimination {
    /// `order[k]` is the node eliminated at step `k`.
    pub order: Vec<usize>,
    /// `position[v]` is the step at which node `v` is eliminated.
    pub position: Vec<usize>,
    /// For step `k`, the (sorted) steps of the neighbors still present when
    /// `order[k]` was eliminated: the block rows of column `k` of the factor.
    pub structure: Vec<Vec<usize>>,
}

impl Elimination {
    /// Number of off-diagonal blocks in the factor.
    pub fn fill(&self) -> usize {
        self.structure.iter().map(Vec::len).sum()
    }
}

fn merge_without(a: &[usize], b: &[usize], skip: [usize; 2]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let v = if j == b.len() || (i < a.len() && a[i] < b[j]) {
            i += 1;
            a[i - 1]
        } else if i == a.len() || b[j] < a[i] {
            j += 1;
            b[j - 1]
        } else {
            i += 1;
            j += 1;
            a[i - 1]
        };
        if v != skip[0] && v != skip[1] {
            out.push(v);
        }
    }
    out
}

/// Greedy minimum-degree elimination on an explicit elimination graph.
/// Ties are broken by the lowest node index, so the result is deterministic.
pub fn minimum_degree(mut adj: Vec<Vec<usize>>) -> Elimination {
    let n = adj.len();
    let mut queue: BTreeSet<(usize, usize)> = adj.iter().enumerate().map(|(v, a)| (a.len(), v)).collect();
    let mut order = Vec::with_capacity(n);
    let mut cliques = Vec::with_capacity(n);
    while let Some((_, v)) = queue.pop_first() {
        let nbrs = std::mem::take(&mut adj[v]);
        for &u in &nbrs {
            queue.remove(&(adj[u].len(), u));
            adj[u] = merge_without(&adj[u], &nbrs, [u, v]);
            queue.insert((adj[u].len(), u));
        }
        order.push(v);
        cliques.push(nbrs);
    }
    let mut position = vec![0; n];
    for (k, &v) in order.iter().enumerate() {
        position[v] = k;
    }
    let structure = cliques
        .into_iter()
        .map(|c| {
            let mut s: Vec<usize> = c.into_iter().map(|u| position[u]).collect();
            s.sort_unstable();
            s
        })
        .collect();
    Elimination {
        order,
        position,
        structure,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(r: usize, c: usize) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); r * c];
        for i in 0..r {
            for j in 0..c {
                let v = i * c + j;
                if j + 1 < c {
                    adj[v].push(v + 1);
                    adj[v + 1].push(v);
                }
                if i + 1 < r {
                    adj[v].push(v + c);
                    adj[v + c].push(v);
                }
            }
        }
        adj.iter_mut().for_each(|a| a.sort_unstable());
        adj
    }

    #[test]
    fn path_has_no_fill() {
        let e = minimum_degree(grid(1, 10));
        assert_eq!(e.fill(), 9);
        assert_eq!(e.order[0], 0);
    }

    #[test]
    fn ordering_is_a_permutation_with_later_structure() {
        let e = minimum_degree(grid(7, 9));
        let mut seen = e.order.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..63).collect::<Vec<_>>());
        for (k, s) in e.structure.iter().enumerate() {
            assert!(s.iter().all(|&j| j > k));
        }
    }

    #[test]
    fn structure_is_closed_under_elimination() {
        // rows of column k must appear in the column of its first row
        let e = minimum_degree(grid(6, 6));
        for s in &e.structure {
            if let Some((&first, rest)) = s.split_first() {
                for r in rest {
                    assert!(e.structure[first].binary_search(r).is_ok());
                }
            }
        }
    }

    #[test]
    fn star_centre_waits_for_leaves() {
        let mut adj = vec![vec![1, 2, 3, 4], vec![0], vec![0], vec![0], vec![0]];
        adj.iter_mut().for_each(|a| a.sort_unstable());
        let e = minimum_degree(adj);
        assert!(e.position[0] >= 3);
        assert_eq!(e.fill(), 4);
    }
}
