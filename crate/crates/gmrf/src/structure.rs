//! Structure (scaled precision) matrices for random-effect blocks.

use crate::graph::RegionGraph;
use crate::linalg::{self, Cholesky, Dense};
use crate::GmrfError;

/// Largest block dimension handled by the dense engine.
pub const MAX_BLOCK_DIM: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StructureKind {
    Iid,
    Rw1,
    Rw2,
    Icar,
    /// Scaled ICAR used as the structured half of a BYM2 effect.
    Bym2,
    Kronecker,
}

/// Sparse symmetric positive-semidefinite structure matrix `R` together with an
/// orthonormal basis of its null space, which doubles as the block's sum-to-zero
/// style constraint set.
#[derive(Debug, Clone)]
pub struct StructureMatrix {
    kind: StructureKind,
    dim: usize,
    /// Full (both triangles) coordinate list, one entry per nonzero.
    entries: Vec<(usize, usize, f64)>,
    null_basis: Vec<Vec<f64>>,
    scaling: f64,
    scaled: bool,
    components: Vec<Vec<usize>>,
    /// Regions of an ICAR with no neighbours; modelled as unit-variance IID.
    singletons: Vec<usize>,
}

impl StructureMatrix {
    pub fn kind(&self) -> StructureKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn rank(&self) -> usize {
        self.dim - self.null_basis.len()
    }

    pub fn rank_deficiency(&self) -> usize {
        self.null_basis.len()
    }

    /// Orthonormal rows spanning the null space.
    pub fn constraints(&self) -> &[Vec<f64>] {
        &self.null_basis
    }

    pub fn scaling_factor(&self) -> f64 {
        self.scaling
    }

    pub fn is_scaled(&self) -> bool {
        self.scaled
    }

    pub fn components(&self) -> &[Vec<usize>] {
        &self.components
    }

    pub fn singletons(&self) -> &[usize] {
        &self.singletons
    }

    pub fn is_structured(&self) -> bool {
        self.kind != StructureKind::Iid
    }

    pub fn to_dense(&self) -> Dense {
        let mut m = linalg::zeros(self.dim, self.dim);
        for &(i, j, v) in &self.entries {
            m[(i, j)] += v;
        }
        m
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, j, v)| x[i] * v * x[j]).sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.dim];
        for &(i, _, v) in &self.entries {
            sums[i] += v;
        }
        sums
    }

    /// Diagonal of the generalized inverse (the constrained prior marginal
    /// variances at unit precision).
    ///
    /// With `A` an orthonormal basis of the null space, `(R + A'A)^{-1} = R^+ + A'A`.
    pub fn generalized_variance_diag(&self) -> Result<Vec<f64>, GmrfError> {
        let mut m = self.to_dense();
        for a in &self.null_basis {
            for i in 0..self.dim {
                if a[i] == 0.0 {
                    continue;
                }
                for j in 0..self.dim {
                    m[(i, j)] += a[i] * a[j];
                }
            }
        }
        let chol = Cholesky::factor(&m)?;
        let mut inv = Dense::identity(self.dim, self.dim);
        chol.solve_mat_in_place(&mut inv);
        Ok((0..self.dim)
            .map(|i| {
                let null_part: f64 = self.null_basis.iter().map(|a| a[i] * a[i]).sum();
                inv[(i, i)] - null_part
            })
            .collect())
    }

    /// Geometric mean of the generalized-inverse diagonal.
    pub fn geometric_mean_variance(&self) -> Result<f64, GmrfError> {
        let diag = self.generalized_variance_diag()?;
        let mean_log = diag.iter().map(|v| v.ln()).sum::<f64>() / diag.len() as f64;
        Ok(mean_log.exp())
    }

    /// Eigenvalues of the generalized inverse, one per dimension (zero on the null
    /// space).
    pub fn generalized_inverse_eigenvalues(&self) -> Result<Vec<f64>, GmrfError> {
        let (values, _) = linalg::symmetric_eigen(&self.to_dense())?;
        let max = values.iter().cloned().fold(0.0_f64, f64::max);
        let n_null = self.null_basis.len();
        let mut out = Vec::with_capacity(values.len());
        for (k, &v) in values.iter().enumerate() {
            if k < n_null || v <= 1e-10 * max {
                out.push(0.0);
            } else {
                out.push(1.0 / v);
            }
        }
        Ok(out)
    }

    fn from_dense_entries(m: &Dense) -> Vec<(usize, usize, f64)> {
        let n = m.nrows();
        let mut entries = Vec::new();
        for j in 0..n {
            for i in 0..n {
                let v = m[(i, j)];
                if v != 0.0 {
                    entries.push((i, j, v));
                }
            }
        }
        entries
    }

    pub fn iid(dim: usize) -> Self {
        Self {
            kind: StructureKind::Iid,
            dim,
            entries: (0..dim).map(|i| (i, i, 1.0)).collect(),
            null_basis: Vec::new(),
            scaling: 1.0,
            scaled: true,
            components: vec![(0..dim).collect()],
            singletons: Vec::new(),
        }
    }

    pub fn rw1(dim: usize, scale: bool) -> Result<Self, GmrfError> {
        Self::random_walk(1, dim, scale)
    }

    pub fn rw2(dim: usize, scale: bool) -> Result<Self, GmrfError> {
        Self::random_walk(2, dim, scale)
    }

    fn random_walk(order: usize, dim: usize, scale: bool) -> Result<Self, GmrfError> {
        let (kind, min) = if order == 1 {
            (StructureKind::Rw1, 2)
        } else {
            (StructureKind::Rw2, 3)
        };
        if dim < min {
            return Err(GmrfError::DimensionTooSmall { kind, dim, min });
        }
        // R = D'D with D the order-th difference operator.
        let coeffs: &[f64] = if order == 1 { &[-1.0, 1.0] } else { &[1.0, -2.0, 1.0] };
        let mut m = linalg::zeros(dim, dim);
        for row in 0..dim - order {
            for (a, ca) in coeffs.iter().enumerate() {
                for (b, cb) in coeffs.iter().enumerate() {
                    m[(row + a, row + b)] += ca * cb;
                }
            }
        }
        let mut null = vec![vec![1.0; dim]];
        if order == 2 {
            null.push((0..dim).map(|t| t as f64).collect());
        }
        let null_basis = orthonormalize(null, 1e-10);
        let mut s = Self {
            kind,
            dim,
            entries: Self::from_dense_entries(&m),
            null_basis,
            scaling: 1.0,
            scaled: false,
            components: vec![(0..dim).collect()],
            singletons: Vec::new(),
        };
        if scale {
            let c = s.geometric_mean_variance()?;
            s.rescale(c);
        }
        Ok(s)
    }

    /// Besag ICAR on `graph`. Components of two or more regions get their own
    /// sum-to-zero constraint and (if `scale`) their own scaling factor; isolated
    /// regions are given unit precision and no constraint.
    pub fn icar(graph: &RegionGraph, scale: bool) -> Result<Self, GmrfError> {
        let report = graph.validate();
        if !report.is_valid() {
            return Err(GmrfError::InvalidGraph(format!(
                "{} asymmetric pairs, {} self loops",
                report.asymmetric_pairs.len(),
                report.self_loops.len()
            )));
        }
        let n = graph.len();
        if n < 2 {
            return Err(GmrfError::DimensionTooSmall {
                kind: StructureKind::Icar,
                dim: n,
                min: 2,
            });
        }
        let mut m = linalg::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = graph.degree(i) as f64;
            for &j in graph.neighbors(i) {
                m[(i, j)] = -1.0;
            }
        }
        let mut components = Vec::new();
        let mut singletons = Vec::new();
        let mut null_basis = Vec::new();
        let mut comp_scaling = Vec::new();
        for comp in report.components {
            if comp.len() == 1 {
                singletons.push(comp[0]);
                m[(comp[0], comp[0])] = 1.0;
                continue;
            }
            let norm = (comp.len() as f64).sqrt();
            let mut v = vec![0.0; n];
            for &i in &comp {
                v[i] = 1.0 / norm;
            }
            null_basis.push(v);
            components.push(comp);
        }
        if scale {
            for comp in &components {
                let k = comp.len();
                let mut sub = linalg::zeros(k, k);
                for (a, &i) in comp.iter().enumerate() {
                    for (b, &j) in comp.iter().enumerate() {
                        sub[(a, b)] = m[(i, j)];
                    }
                }
                let piece = Self {
                    kind: StructureKind::Icar,
                    dim: k,
                    entries: Self::from_dense_entries(&sub),
                    null_basis: vec![vec![1.0 / (k as f64).sqrt(); k]],
                    scaling: 1.0,
                    scaled: false,
                    components: vec![(0..k).collect()],
                    singletons: Vec::new(),
                };
                let c = piece.geometric_mean_variance()?;
                comp_scaling.push(c);
                for &i in comp {
                    for &j in comp {
                        m[(i, j)] *= c;
                    }
                }
            }
        }
        let scaling = if comp_scaling.is_empty() {
            1.0
        } else {
            let mean_log =
                comp_scaling.iter().map(|c| c.ln()).sum::<f64>() / comp_scaling.len() as f64;
            mean_log.exp()
        };
        Ok(Self {
            kind: StructureKind::Icar,
            dim: n,
            entries: Self::from_dense_entries(&m),
            null_basis,
            scaling,
            scaled: scale,
            components,
            singletons,
        })
    }

    fn with_kind(mut self, kind: StructureKind) -> Self {
        self.kind = kind;
        self
    }

    fn rescale(&mut self, c: f64) {
        for e in &mut self.entries {
            e.2 *= c;
        }
        self.scaling *= c;
        self.scaled = true;
    }
}

/// Builds a structure matrix of the given kind.
///
/// `Iid`, `Rw1` and `Rw2` need `dim`; `Icar` and `Bym2` need `graph`. `Bym2`
/// always yields the scaled ICAR regardless of `scale`.
pub fn build_structure(
    kind: StructureKind,
    dim: Option<usize>,
    graph: Option<&RegionGraph>,
    scale: bool,
) -> Result<StructureMatrix, GmrfError> {
    let need_dim = || dim.ok_or_else(|| GmrfError::InvalidModel(format!("{kind:?} needs a dimension")));
    let need_graph = || graph.ok_or_else(|| GmrfError::InvalidModel(format!("{kind:?} needs a graph")));
    match kind {
        StructureKind::Iid => Ok(StructureMatrix::iid(need_dim()?)),
        StructureKind::Rw1 => StructureMatrix::rw1(need_dim()?, scale),
        StructureKind::Rw2 => StructureMatrix::rw2(need_dim()?, scale),
        StructureKind::Icar => StructureMatrix::icar(need_graph()?, scale),
        StructureKind::Bym2 => {
            Ok(StructureMatrix::icar(need_graph()?, true)?.with_kind(StructureKind::Bym2))
        }
        StructureKind::Kronecker => Err(GmrfError::InvalidModel(
            "use build_interaction for Kronecker structures".into(),
        )),
    }
}

/// Type-IV interaction: `A ⊗ B`, indexed `i * dim(B) + j` for `i` in `A` and `j`
/// in `B`. The constraint set is the null space of the product, which for
/// sum-to-zero factors is the set of all row and column sums of the grid.
pub fn build_interaction(
    a: &StructureMatrix,
    b: &StructureMatrix,
) -> Result<StructureMatrix, GmrfError> {
    for s in [a, b] {
        if !s.is_structured() {
            return Err(GmrfError::UnstructuredInteraction(s.kind));
        }
    }
    let (na, nb) = (a.dim, b.dim);
    let dim = na
        .checked_mul(nb)
        .filter(|&d| d <= MAX_BLOCK_DIM)
        .ok_or(GmrfError::DimensionOverflow(na.saturating_mul(nb)))?;

    let mut entries = Vec::with_capacity(a.entries.len() * b.entries.len());
    for &(ia, ja, va) in &a.entries {
        for &(ib, jb, vb) in &b.entries {
            entries.push((ia * nb + ib, ja * nb + jb, va * vb));
        }
    }

    // Null space of A ⊗ B is null(A) ⊗ R^nb + R^na ⊗ null(B); when a factor has
    // unconstrained singletons, those directions are not null and are skipped.
    let mut candidates = Vec::new();
    for u in &a.null_basis {
        for j in 0..nb {
            let mut v = vec![0.0; dim];
            for i in 0..na {
                v[i * nb + j] = u[i];
            }
            candidates.push(v);
        }
    }
    for w in &b.null_basis {
        for i in 0..na {
            let mut v = vec![0.0; dim];
            for j in 0..nb {
                v[i * nb + j] = w[j];
            }
            candidates.push(v);
        }
    }
    let null_basis = orthonormalize(candidates, 1e-9);

    Ok(StructureMatrix {
        kind: StructureKind::Kronecker,
        dim,
        entries,
        null_basis,
        scaling: a.scaling * b.scaling,
        scaled: a.scaled && b.scaled,
        components: vec![(0..dim).collect()],
        singletons: Vec::new(),
    })
}

/// Modified Gram-Schmidt with re-orthogonalisation; drops vectors whose residual
/// norm falls below `tol` relative to their original norm.
pub(crate) fn orthonormalize(vectors: Vec<Vec<f64>>, tol: f64) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for mut v in vectors {
        let norm0 = linalg::dot(&v, &v).sqrt();
        if norm0 == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for q in &basis {
                let proj = linalg::dot(&v, q);
                if proj != 0.0 {
                    for (vi, qi) in v.iter_mut().zip(q) {
                        *vi -= proj * qi;
                    }
                }
            }
        }
        let norm = linalg::dot(&v, &v).sqrt();
        if norm > tol * norm0 {
            for vi in &mut v {
                *vi /= norm;
            }
            basis.push(v);
        }
    }
    basis
}
