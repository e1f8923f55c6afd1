//! P1 finite elements on the structured triangulation.

use std::sync::Arc;

use super::grid::Grid;
use super::params::ProblemParams;
use crate::autodiff::{BandedLu, CustomOp, SparseMatrix, Tensor};
use crate::error::Result;

/// Shape-function gradients and area of a triangle.
fn element(grid: &Grid, tri: [usize; 3]) -> ([[f64; 2]; 3], f64) {
    let p = tri.map(|k| grid.coord(k));
    let det = (p[1].0 - p[0].0) * (p[2].1 - p[0].1) - (p[2].0 - p[0].0) * (p[1].1 - p[0].1);
    let mut grads = [[0.0; 2]; 3];
    for a in 0..3 {
        let (b, c) = ((a + 1) % 3, (a + 2) % 3);
        grads[a] = [(p[b].1 - p[c].1) / det, (p[c].0 - p[b].0) / det];
    }
    (grads, 0.5 * det.abs())
}

/// Consistent mass matrix ∫ψᵢψⱼ.
pub fn mass_matrix(grid: &Grid) -> Result<SparseMatrix> {
    let mut trip = Vec::with_capacity(grid.nodes() * 14);
    for tri in grid.triangles() {
        let (_, area) = element(grid, tri);
        for a in 0..3 {
            for b in 0..3 {
                let w = if a == b { area / 6.0 } else { area / 12.0 };
                trip.push((tri[a], tri[b], w));
            }
        }
    }
    let mut m = SparseMatrix::from_triplets(grid.nodes(), grid.nodes(), trip)?;
    m.verify_symmetric(0.0);
    Ok(m)
}

/// Diffusion stiffness κ∫∇ψᵢ·∇ψⱼ.
pub fn stiffness_matrix(grid: &Grid, kappa: f64) -> Result<SparseMatrix> {
    let mut trip = Vec::with_capacity(grid.nodes() * 14);
    for tri in grid.triangles() {
        let (g, area) = element(grid, tri);
        for a in 0..3 {
            for b in 0..3 {
                let w = kappa * area * (g[a][0] * g[b][0] + g[a][1] * g[b][1]);
                trip.push((tri[a], tri[b], w));
            }
        }
    }
    let mut k = SparseMatrix::from_triplets(grid.nodes(), grid.nodes(), trip)?;
    k.verify_symmetric(1e-14);
    Ok(k)
}

/// Advection matrix ∫(ε·∇ψⱼ)ψᵢ with edge-midpoint quadrature (exact for
/// affine velocity fields).
pub fn advection_matrix(grid: &Grid, params: &ProblemParams) -> Result<SparseMatrix> {
    let mut trip = Vec::with_capacity(grid.nodes() * 14);
    for tri in grid.triangles() {
        let (g, area) = element(grid, tri);
        let p = tri.map(|k| grid.coord(k));
        // ∫ ε ψ_a over the triangle; ψ_a is ½ at the two midpoints on its edges
        let mut eps_psi = [[0.0; 2]; 3];
        for e in 0..3 {
            let (b, c) = ((e + 1) % 3, (e + 2) % 3);
            let mid = (0.5 * (p[b].0 + p[c].0), 0.5 * (p[b].1 + p[c].1));
            let v = params.velocity(mid.0, mid.1);
            for a in [b, c] {
                eps_psi[a][0] += area / 3.0 * 0.5 * v[0];
                eps_psi[a][1] += area / 3.0 * 0.5 * v[1];
            }
        }
        for a in 0..3 {
            for b in 0..3 {
                trip.push((
                    tri[a],
                    tri[b],
                    eps_psi[a][0] * g[b][0] + eps_psi[a][1] * g[b][1],
                ));
            }
        }
    }
    SparseMatrix::from_triplets(grid.nodes(), grid.nodes(), trip)
}

/// Inflow boundary matrix ∮ max(−ε·n, 0) ψᵢψⱼ ds, which weakly imposes a
/// clean (zero-concentration) inflow. Without it the Galerkin advection
/// operator is not dissipative at inflow edges and high-Péclet runs diverge.
pub fn inflow_matrix(grid: &Grid, params: &ProblemParams) -> Result<SparseMatrix> {
    let n = grid.n();
    let h = grid.spacing();
    let mut trip = Vec::with_capacity(8 * n);
    let mut edge = |a: usize, b: usize, normal: [f64; 2]| {
        let (pa, pb) = (grid.coord(a), grid.coord(b));
        let v = params.velocity(0.5 * (pa.0 + pb.0), 0.5 * (pa.1 + pb.1));
        let w = (-(v[0] * normal[0] + v[1] * normal[1])).max(0.0);
        if w > 0.0 {
            for (i, j, c) in [(a, a, 2.0), (b, b, 2.0), (a, b, 1.0), (b, a, 1.0)] {
                trip.push((i, j, w * h * c / 6.0));
            }
        }
    };
    for t in 0..n - 1 {
        edge(grid.index(0, t), grid.index(0, t + 1), [-1.0, 0.0]);
        edge(grid.index(n - 1, t), grid.index(n - 1, t + 1), [1.0, 0.0]);
        edge(grid.index(t, 0), grid.index(t + 1, 0), [0.0, -1.0]);
        edge(grid.index(t, n - 1), grid.index(t + 1, n - 1), [0.0, 1.0]);
    }
    SparseMatrix::from_triplets(grid.nodes(), grid.nodes(), trip)
}

/// ∫ₐᵇ exp(−|x−c|/σ) dx.
pub fn laplace_integral(a: f64, b: f64, c: f64, sigma: f64) -> f64 {
    let e = |d: f64| (-d.abs() / sigma).exp();
    if b <= c {
        sigma * (e(c - b) - e(c - a))
    } else if a >= c {
        sigma * (e(a - c) - e(b - c))
    } else {
        sigma * (2.0 - e(c - a) - e(b - c))
    }
}

/// d/dc of [`laplace_integral`].
pub fn laplace_integral_dc(a: f64, b: f64, c: f64, sigma: f64) -> f64 {
    (-(a - c).abs() / sigma).exp() - (-(b - c).abs() / sigma).exp()
}

/// Nodal loads of a separable profile `amp·exp(−|x₁−c₁|/σ₁ − |x₂−c₂|/σ₂)`,
/// integrated exactly over each node's dual box.
pub fn box_load(grid: &Grid, amp: f64, center: (f64, f64), widths: (f64, f64)) -> Vec<f64> {
    let n = grid.n();
    let ix: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b) = grid.dual_interval(i);
            laplace_integral(a, b, center.0, widths.0)
        })
        .collect();
    let iy: Vec<f64> = (0..n)
        .map(|j| {
            let (a, b) = grid.dual_interval(j);
            laplace_integral(a, b, center.1, widths.1)
        })
        .collect();
    (0..grid.nodes())
        .map(|k| amp * ix[k % n] * iy[k / n])
        .collect()
}

/// Localized sink profile `amp·exp(−|x₁−x₁ᶜ|/w₁ − |x₂−α|/w₂)` as a function
/// of the sink height α.
#[derive(Clone, Debug)]
pub struct SinkProfile {
    n: usize,
    amp: f64,
    width_x2: f64,
    /// amp-free x₁ factor per column.
    col: Vec<f64>,
    dual: Vec<(f64, f64)>,
}

impl SinkProfile {
    pub fn new(grid: &Grid, amp: f64, center_x1: f64, width_x1: f64, width_x2: f64) -> Self {
        let dual: Vec<_> = (0..grid.n()).map(|i| grid.dual_interval(i)).collect();
        let col = dual
            .iter()
            .map(|&(a, b)| laplace_integral(a, b, center_x1, width_x1))
            .collect();
        Self {
            n: grid.n(),
            amp,
            width_x2,
            col,
            dual,
        }
    }

    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn load(&self, alpha: f64) -> Vec<f64> {
        let row: Vec<f64> = self
            .dual
            .iter()
            .map(|&(a, b)| laplace_integral(a, b, alpha, self.width_x2))
            .collect();
        self.outer(&row)
    }

    pub fn load_dalpha(&self, alpha: f64) -> Vec<f64> {
        let row: Vec<f64> = self
            .dual
            .iter()
            .map(|&(a, b)| laplace_integral_dc(a, b, alpha, self.width_x2))
            .collect();
        self.outer(&row)
    }

    fn outer(&self, row: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|k| self.amp * self.col[k % self.n] * row[k / self.n])
            .collect()
    }
}

/// Tape op `α ↦ q(α)`.
#[derive(Debug)]
pub struct SinkOp(pub Arc<SinkProfile>);

impl CustomOp for SinkOp {
    fn name(&self) -> &'static str {
        "sink_load"
    }

    fn vjp(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f64],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        if !needs_grad[0] {
            return vec![None];
        }
        let dq = self.0.load_dalpha(inputs[0].data()[0]);
        vec![Some(vec![crate::autodiff::tensor::dot(&dq, grad_out)])]
    }
}

/// Assembled matrices and factorizations for one problem instance and step size.
#[derive(Clone, Debug)]
pub struct FemMatrices {
    pub mass: Arc<SparseMatrix>,
    pub stiffness: Arc<SparseMatrix>,
    pub advection: Arc<SparseMatrix>,
    /// Spatial operator `K + C`.
    pub operator: Arc<SparseMatrix>,
    /// Factorization of `M + Δs(K + C)`.
    pub implicit: Arc<BandedLu>,
    pub mass_lu: Arc<BandedLu>,
    pub lumped_mass: Vec<f64>,
}

impl FemMatrices {
    pub fn assemble(
        grid: &Grid,
        params: &ProblemParams,
        kappa: f64,
        dt: f64,
        clean_inflow: bool,
    ) -> Result<Self> {
        let mass = mass_matrix(grid)?;
        let stiffness = stiffness_matrix(grid, kappa)?;
        let mut advection = advection_matrix(grid, params)?;
        if clean_inflow {
            advection = advection.linear_combination(1.0, &inflow_matrix(grid, params)?, 1.0)?;
        }
        let operator = stiffness.linear_combination(1.0, &advection, 1.0)?;
        let implicit = BandedLu::factor(&mass.linear_combination(1.0, &operator, dt)?)?;
        let mass_lu = BandedLu::factor(&mass)?;
        let lumped_mass = mass.row_sums();
        Ok(Self {
            mass: Arc::new(mass),
            stiffness: Arc::new(stiffness),
            advection: Arc::new(advection),
            operator: Arc::new(operator),
            implicit: Arc::new(implicit),
            mass_lu: Arc::new(mass_lu),
            lumped_mass,
        })
    }
}
