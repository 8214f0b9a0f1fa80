//! Small helpers over binary relations stored as pair lists.

use std::collections::BTreeSet;

pub type Pairs = Vec<(usize, usize)>;

/// Whether the graph with `n` nodes and the given edges is acyclic.
pub fn acyclic<'a>(n: usize, edges: impl IntoIterator<Item = &'a (usize, usize)>) -> bool {
    let mut adj = vec![Vec::new(); n];
    let mut indeg = vec![0usize; n];
    for &(a, b) in edges {
        if a == b {
            return false;
        }
        adj[a].push(b);
        indeg[b] += 1;
    }
    let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut seen = 0;
    while let Some(u) = ready.pop() {
        seen += 1;
        for &v in &adj[u] {
            indeg[v] -= 1;
            if indeg[v] == 0 {
                ready.push(v);
            }
        }
    }
    seen == n
}

/// `a ; b`
pub fn compose(a: &[(usize, usize)], b: &[(usize, usize)]) -> Pairs {
    let mut out = BTreeSet::new();
    for &(x, y) in a {
        for &(y2, z) in b {
            if y == y2 {
                out.insert((x, z));
            }
        }
    }
    out.into_iter().collect()
}

pub fn inverse(a: &[(usize, usize)]) -> Pairs {
    a.iter().map(|&(x, y)| (y, x)).collect()
}

/// Pairs of a total order given as a sequence.
pub fn order_pairs(seq: &[usize]) -> Pairs {
    let mut out = Vec::new();
    for (i, &a) in seq.iter().enumerate() {
        for &b in &seq[i + 1..] {
            out.push((a, b));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_cycles() {
        assert!(acyclic(3, &[(0, 1), (1, 2)]));
        assert!(!acyclic(3, &[(0, 1), (1, 2), (2, 0)]));
        assert!(!acyclic(1, &[(0, 0)]));
    }

    #[test]
    fn compose_and_inverse() {
        assert_eq!(compose(&[(0, 1), (0, 2)], &[(1, 3), (2, 3)]), vec![(0, 3)]);
        assert_eq!(inverse(&[(0, 1)]), vec![(1, 0)]);
        assert_eq!(order_pairs(&[3, 1, 2]), vec![(3, 1), (3, 2), (1, 2)]);
    }
}
