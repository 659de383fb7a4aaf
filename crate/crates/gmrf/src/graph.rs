//! Region adjacency graphs.

use std::collections::VecDeque;

/// Undirected neighbourhood structure over `n` regions, indexed from zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGraph {
    neighbors: Vec<Vec<usize>>,
    labels: Vec<String>,
}

/// Structural report produced by [`RegionGraph::validate`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GraphReport {
    /// Pairs `(i, j)` where `j` lists as a neighbour of `i` but not vice versa.
    pub asymmetric_pairs: Vec<(usize, usize)>,
    pub self_loops: Vec<usize>,
    pub isolated: Vec<usize>,
    /// Connected components, each sorted ascending; ordered by smallest member.
    pub components: Vec<Vec<usize>>,
}

impl GraphReport {
    pub fn is_symmetric(&self) -> bool {
        self.asymmetric_pairs.is_empty()
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn is_valid(&self) -> bool {
        self.asymmetric_pairs.is_empty() && self.self_loops.is_empty()
    }
}

impl RegionGraph {
    /// Builds a graph from raw adjacency lists. Lists are kept as given (sorted and
    /// deduplicated) so that [`validate`](Self::validate) can report defects.
    pub fn from_adjacency(mut neighbors: Vec<Vec<usize>>) -> Self {
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        let labels = (0..neighbors.len()).map(|i| format!("{}", i + 1)).collect();
        Self { neighbors, labels }
    }

    /// Builds a symmetric graph from an undirected edge list.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        Self::from_adjacency(neighbors)
    }

    /// Path graph `0 - 1 - ... - (n-1)`.
    pub fn path(n: usize) -> Self {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::from_edges(n, &edges)
    }

    /// Rook-adjacency lattice with `rows * cols` regions, row-major.
    pub fn lattice(rows: usize, cols: usize) -> Self {
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    edges.push((i, i + 1));
                }
                if r + 1 < rows {
                    edges.push((i, i + cols));
                }
            }
        }
        Self::from_edges(rows * cols, &edges)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Self {
        assert_eq!(labels.len(), self.neighbors.len(), "one label per region");
        self.labels = labels;
        self
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn validate(&self) -> GraphReport {
        let n = self.len();
        let mut report = GraphReport::default();
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                if j == i {
                    report.self_loops.push(i);
                } else if j >= n || self.neighbors[j].binary_search(&i).is_err() {
                    report.asymmetric_pairs.push((i, j));
                }
            }
            if list.iter().all(|&j| j == i) {
                report.isolated.push(i);
            }
        }
        report.components = self.components();
        report
    }

    /// Connected components treating every listed edge as undirected.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.len();
        let mut undirected = vec![Vec::new(); n];
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                if j < n && j != i {
                    undirected[i].push(j);
                    undirected[j].push(i);
                }
            }
        }
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut comp = vec![start];
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                for &w in &undirected[v] {
                    if !seen[w] {
                        seen[w] = true;
                        comp.push(w);
                        queue.push_back(w);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Relabels regions so that old region `perm[k]` becomes region `k`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.len();
        assert_eq!(perm.len(), n);
        let mut inverse = vec![0; n];
        for (k, &old) in perm.iter().enumerate() {
            inverse[old] = k;
        }
        let neighbors = perm
            .iter()
            .map(|&old| self.neighbors[old].iter().map(|&j| inverse[j]).collect())
            .collect();
        let labels = perm.iter().map(|&old| self.labels[old].clone()).collect();
        let mut g = Self::from_adjacency(neighbors);
        g.labels = labels;
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_graph_is_clean() {
        let report = RegionGraph::path(3).validate();
        assert!(report.is_symmetric());
        assert_eq!(report.n_components(), 1);
        assert!(report.isolated.is_empty());
        assert!(report.self_loops.is_empty());
    }

    #[test]
    fn one_sided_edge_is_flagged() {
        let g = RegionGraph::from_adjacency(vec![vec![1], vec![], vec![]]);
        let report = g.validate();
        assert_eq!(report.asymmetric_pairs, vec![(0, 1)]);
        assert!(!report.is_valid());
        // region 2 is isolated, regions 0 and 1 are joined by the one-sided edge
        assert_eq!(report.components, vec![vec![0, 1], vec![2]]);
        assert_eq!(report.isolated, vec![1, 2]);
    }

    #[test]
    fn self_loop_is_flagged() {
        let g = RegionGraph::from_adjacency(vec![vec![0, 1], vec![0]]);
        assert_eq!(g.validate().self_loops, vec![0]);
    }

    #[test]
    fn permutation_preserves_degrees() {
        let g = RegionGraph::lattice(2, 3);
        let perm = [5, 3, 1, 0, 2, 4];
        let p = g.permuted(&perm);
        for (k, &old) in perm.iter().enumerate() {
            assert_eq!(p.degree(k), g.degree(old));
        }
        assert!(p.validate().is_valid());
    }
}
