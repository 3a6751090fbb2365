use crate::graph::LesionGraph;

/// `D^-1/2 (A + I) D^-1/2` in CSR form. Each row lists the self-loop and
/// every neighbour; the matrix is symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct NormAdj {
    pub offsets: Vec<usize>,
    pub cols: Vec<u32>,
    pub weights: Vec<f64>,
}

impl NormAdj {
    pub fn from_graph(g: &LesionGraph) -> Self {
        Self::from_edges(g.n_nodes(), &g.edges)
    }

    pub fn from_edges(n: usize, edges: &[[u32; 2]]) -> Self {
        let mut neighbors: Vec<Vec<u32>> = (0..n as u32).map(|i| vec![i]).collect();
        for &[a, b] in edges {
            neighbors[a as usize].push(b);
            neighbors[b as usize].push(a);
        }
        let inv_sqrt_deg: Vec<f64> = neighbors
            .iter()
            .map(|nb| 1.0 / (nb.len() as f64).sqrt())
            .collect();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for (i, nb) in neighbors.iter_mut().enumerate() {
            nb.sort_unstable();
            for &j in nb.iter() {
                cols.push(j);
                weights.push(inv_sqrt_deg[i] * inv_sqrt_deg[j as usize]);
            }
            offsets.push(cols.len());
        }
        NormAdj {
            offsets,
            cols,
            weights,
        }
    }

    pub fn n(&self) -> usize {
        self.offsets.len() - 1
    }

    /// `out = Â · x` for row-major `x` of width `width`.
    pub fn propagate(&self, x: &[f64], width: usize, out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n() * width);
        out.fill(0.0);
        for i in 0..self.n() {
            let row = &mut out[i * width..(i + 1) * width];
            for k in self.offsets[i]..self.offsets[i + 1] {
                let j = self.cols[k] as usize;
                let w = self.weights[k];
                for (o, v) in row.iter_mut().zip(&x[j * width..(j + 1) * width]) {
                    *o += w * v;
                }
            }
        }
    }

    pub fn dense(&self) -> Vec<Vec<f64>> {
        let n = self.n();
        let mut m = vec![vec![0.0; n]; n];
        for (i, row) in m.iter_mut().enumerate() {
            for k in self.offsets[i]..self.offsets[i + 1] {
                row[self.cols[k] as usize] = self.weights[k];
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_node_is_identity() {
        let a = NormAdj::from_edges(1, &[]);
        assert_eq!(a.dense(), vec![vec![1.0]]);
    }

    #[test]
    fn two_connected_nodes_are_one_half() {
        let a = NormAdj::from_edges(2, &[[0, 1]]);
        for row in a.dense() {
            for v in row {
                assert!((v - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn row_sums_and_symmetry_on_a_path() {
        // path 0-1-2: degrees with self loops 2,3,2
        let a = NormAdj::from_edges(3, &[[0, 1], [1, 2]]).dense();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(a[i][j], a[j][i]);
            }
        }
        let sums: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
        // 1/2 + 1/sqrt(6) and 1/3 + 2/sqrt(6)
        assert!((sums[0] - (0.5 + 1.0 / 6f64.sqrt())).abs() < 1e-15);
        assert!((sums[1] - (1.0 / 3.0 + 2.0 / 6f64.sqrt())).abs() < 1e-15);
        assert!(sums[0] < 1.0 && sums[1] > 1.0);
        // D^1/2 Â D^-1/2 is row-stochastic
        let deg = [2.0f64, 3.0, 2.0];
        for i in 0..3 {
            let s: f64 = (0..3).map(|j| a[i][j] * (deg[j] / deg[i]).sqrt()).sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
        let regular = NormAdj::from_edges(3, &[[0, 1], [1, 2], [0, 2]]).dense();
        for r in regular {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }
}
