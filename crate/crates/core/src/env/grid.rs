/// Uniform `n × n` node grid on the unit square, split into right
/// triangles along the (i, j)–(i+1, j+1) diagonal of each cell.
///
/// Node `(i, j)` sits at `(i·h, j·h)` and has flat index `j·n + i`, so a
/// flat vector reshaped row-major to `n × n` has rows indexed by x₂.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    n: usize,
}

impl Grid {
    pub fn new(n: usize) -> Self {
        assert!(n >= 2, "grid needs at least two nodes per side");
        Self { n }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nodes(&self) -> usize {
        self.n * self.n
    }

    pub fn spacing(&self) -> f64 {
        1.0 / (self.n - 1) as f64
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.n + i
    }

    pub fn coord(&self, k: usize) -> (f64, f64) {
        let h = self.spacing();
        ((k % self.n) as f64 * h, (k / self.n) as f64 * h)
    }

    /// 1-D coordinate of index `i` along either axis.
    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.spacing()
    }

    /// Closed interval owned by node `i` along one axis: `[x−h/2, x+h/2] ∩ [0, 1]`.
    pub fn dual_interval(&self, i: usize) -> (f64, f64) {
        let h = self.spacing();
        let x = self.x(i);
        ((x - 0.5 * h).max(0.0), (x + 0.5 * h).min(1.0))
    }

    /// Triangles as node triples, counter-clockwise.
    pub fn triangles(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let n = self.n;
        (0..n - 1).flat_map(move |j| {
            (0..n - 1).flat_map(move |i| {
                let (a, b, c, d) = (
                    j * n + i,
                    j * n + i + 1,
                    (j + 1) * n + i + 1,
                    (j + 1) * n + i,
                );
                [[a, b, c], [a, c, d]]
            })
        })
    }

    /// Nodes with x₁ strictly greater than `threshold`.
    pub fn mask_x1_above(&self, threshold: f64) -> Vec<bool> {
        (0..self.nodes())
            .map(|k| self.coord(k).0 > threshold)
            .collect()
    }
}
