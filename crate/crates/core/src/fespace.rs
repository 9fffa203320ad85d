//! Conforming P1 and Crouzeix–Raviart spaces on the criss-cross mesh.
//!
//! Both families are affine on every triangle and carry three local degrees of
//! freedom, so they share one assembly path. P1 dofs live at vertices, CR dofs
//! at edge midpoints; the CR basis function attached to the edge opposite
//! local vertex `k` is `1 - 2 λ_k`. Homogeneous Dirichlet data is imposed by
//! identity-row substitution on the boundary dofs.

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::FeError;
use crate::linalg::{pcg, AssemblyPattern, CgOptions, SparseOperator};
use crate::mesh::{Mesh, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    P1,
    Cr,
}

impl ElementKind {
    pub fn code(self) -> u8 {
        match self {
            ElementKind::P1 => 0,
            ElementKind::Cr => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ElementKind::P1),
            1 => Some(ElementKind::Cr),
            _ => None,
        }
    }
}

impl std::fmt::Display for ElementKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ElementKind::P1 => write!(f, "p1"),
            ElementKind::Cr => write!(f, "cr"),
        }
    }
}

/// Identifies the space a [`State`] lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SpaceTag {
    pub kind: ElementKind,
    pub level: u32,
}

/// How boundary dofs are treated during assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Identity rows/columns on constrained dofs (homogeneous Dirichlet).
    Constrained,
    /// Plain assembly over all dofs.
    Natural,
}

/// Quadrature rules for integrating external fields against the basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureRule {
    /// Symmetric 3-point rule, exact for quadratics.
    ThreePoint,
    /// Symmetric 7-point rule, exact for quintics.
    SevenPoint,
}

impl QuadratureRule {
    /// Barycentric points and weights (weights sum to one).
    pub fn points(self) -> Vec<([f64; 3], f64)> {
        match self {
            QuadratureRule::ThreePoint => {
                let (a, b) = (2.0 / 3.0, 1.0 / 6.0);
                vec![([a, b, b], 1.0 / 3.0), ([b, a, b], 1.0 / 3.0), ([b, b, a], 1.0 / 3.0)]
            }
            QuadratureRule::SevenPoint => {
                let (a1, b1, w1) = (0.059_715_871_789_770, 0.470_142_064_105_115, 0.132_394_152_788_506);
                let (a2, b2, w2) = (0.797_426_985_353_087, 0.101_286_507_323_456, 0.125_939_180_544_827);
                vec![
                    ([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 0.225),
                    ([a1, b1, b1], w1),
                    ([b1, a1, b1], w1),
                    ([b1, b1, a1], w1),
                    ([a2, b2, b2], w2),
                    ([b2, a2, b2], w2),
                    ([b2, b2, a2], w2),
                ]
            }
        }
    }
}

/// Coefficient vector of a discrete function, tagged with its space.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    tag: SpaceTag,
    coeffs: DVector<f64>,
}

impl State {
    pub fn zeros(space: &FeSpace) -> Self {
        Self { tag: space.tag(), coeffs: DVector::zeros(space.dof_count()) }
    }

    pub fn from_coeffs(space: &FeSpace, coeffs: DVector<f64>) -> Result<Self, FeError> {
        if coeffs.len() != space.dof_count() {
            return Err(FeError::DimensionMismatch { expected: space.dof_count(), got: coeffs.len() });
        }
        Ok(Self { tag: space.tag(), coeffs })
    }

    pub fn tag(&self) -> SpaceTag {
        self.tag
    }

    pub fn coeffs(&self) -> &DVector<f64> {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut DVector<f64> {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> DVector<f64> {
        self.coeffs
    }
}

#[derive(Debug)]
pub struct FeSpace {
    kind: ElementKind,
    mesh: Arc<Mesh>,
    dof_points: Vec<Point>,
    constrained: Vec<bool>,
    free_dofs: Vec<usize>,
    local_dofs: Vec<[usize; 3]>,
    local_gradients: Vec<[[f64; 2]; 3]>,
    pattern: AssemblyPattern,
}

impl FeSpace {
    pub fn new(mesh: Arc<Mesh>, kind: ElementKind) -> Self {
        let (dof_points, constrained, local_dofs) = match kind {
            ElementKind::P1 => (
                mesh.vertices().to_vec(),
                mesh.vertex_on_boundary().to_vec(),
                mesh.triangles().to_vec(),
            ),
            ElementKind::Cr => (
                mesh.edge_barycenters().to_vec(),
                mesh.edge_on_boundary().to_vec(),
                mesh.triangle_edges().to_vec(),
            ),
        };
        let scale = match kind {
            ElementKind::P1 => 1.0,
            ElementKind::Cr => -2.0,
        };
        let local_gradients = (0..mesh.triangle_count())
            .map(|t| {
                let [a, b, c] = mesh.triangle_vertices(t);
                let area2 = mesh.signed_area2(t);
                let pts = [a, b, c];
                let mut g = [[0.0; 2]; 3];
                for (k, gk) in g.iter_mut().enumerate() {
                    let pj = pts[(k + 1) % 3];
                    let pk = pts[(k + 2) % 3];
                    *gk = [scale * (pj[1] - pk[1]) / area2, scale * (pk[0] - pj[0]) / area2];
                }
                g
            })
            .collect();
        let free_dofs = constrained
            .iter()
            .enumerate()
            .filter(|(_, &c)| !c)
            .map(|(d, _)| d)
            .collect();
        let pattern = AssemblyPattern::new(dof_points.len(), &local_dofs, &constrained);
        Self { kind, mesh, dof_points, constrained, free_dofs, local_dofs, local_gradients, pattern }
    }

    pub fn kind(&self) -> ElementKind {
        self.kind
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn tag(&self) -> SpaceTag {
        SpaceTag { kind: self.kind, level: self.mesh.level() }
    }

    pub fn dof_count(&self) -> usize {
        self.dof_points.len()
    }

    pub fn free_dof_count(&self) -> usize {
        self.free_dofs.len()
    }

    /// Unconstrained dofs in increasing order; position `j` in this list is
    /// the noise index `j` in experiment mode.
    pub fn free_dofs(&self) -> &[usize] {
        &self.free_dofs
    }

    pub fn constrained(&self) -> &[bool] {
        &self.constrained
    }

    pub fn dof_points(&self) -> &[Point] {
        &self.dof_points
    }

    pub fn local_dofs(&self, t: usize) -> [usize; 3] {
        self.local_dofs[t]
    }

    pub fn local_gradients(&self, t: usize) -> [[f64; 2]; 3] {
        self.local_gradients[t]
    }

    pub fn pattern(&self) -> &AssemblyPattern {
        &self.pattern
    }

    pub fn check(&self, state: &State) -> Result<(), FeError> {
        if state.tag() != self.tag() {
            return Err(FeError::SpaceMismatch);
        }
        Ok(())
    }

    /// Values of the local basis functions at barycentric coordinates `l`.
    pub fn local_basis(&self, l: [f64; 3]) -> [f64; 3] {
        match self.kind {
            ElementKind::P1 => l,
            ElementKind::Cr => [1.0 - 2.0 * l[0], 1.0 - 2.0 * l[1], 1.0 - 2.0 * l[2]],
        }
    }

    /// Constant gradient of the restriction of `coeffs` to triangle `t`.
    pub fn gradient_of(&self, coeffs: &DVector<f64>, t: usize) -> [f64; 2] {
        let dofs = self.local_dofs[t];
        let grads = &self.local_gradients[t];
        let mut g = [0.0; 2];
        for k in 0..3 {
            g[0] += coeffs[dofs[k]] * grads[k][0];
            g[1] += coeffs[dofs[k]] * grads[k][1];
        }
        g
    }

    pub fn element_gradient(&self, state: &State, t: usize) -> [f64; 2] {
        self.gradient_of(state.coeffs(), t)
    }

    /// Value of the restriction to triangle `t` at `p`.
    pub fn evaluate_in(&self, coeffs: &DVector<f64>, t: usize, p: Point) -> f64 {
        let basis = self.local_basis(self.mesh.barycentric(t, p));
        let dofs = self.local_dofs[t];
        (0..3).map(|k| coeffs[dofs[k]] * basis[k]).sum()
    }

    pub fn evaluate(&self, state: &State, p: Point) -> f64 {
        self.evaluate_in(state.coeffs(), self.mesh.locate(p), p)
    }

    /// Pointwise view of a state, usable wherever a scalar field is expected.
    pub fn field<'a>(&'a self, state: &'a State) -> impl Fn(Point) -> f64 + 'a {
        move |p| self.evaluate(state, p)
    }

    /// Coefficients `f(dof point)`. With `constrain`, boundary dofs are zeroed.
    pub fn nodal_interpolate<F: Fn(Point) -> f64>(&self, f: F, constrain: bool) -> State {
        let coeffs = DVector::from_iterator(
            self.dof_count(),
            self.dof_points
                .iter()
                .zip(&self.constrained)
                .map(|(&p, &c)| if constrain && c { 0.0 } else { f(p) }),
        );
        State { tag: self.tag(), coeffs }
    }

    /// Elementwise means (the projection onto piecewise constants).
    pub fn project_p0(&self, state: &State) -> Vec<f64> {
        self.local_dofs
            .iter()
            .map(|dofs| dofs.iter().map(|&d| state.coeffs()[d]).sum::<f64>() / 3.0)
            .collect()
    }

    pub fn element_mass(&self) -> [[f64; 3]; 3] {
        let area = self.mesh.triangle_area();
        let mut m = [[0.0; 3]; 3];
        for (a, row) in m.iter_mut().enumerate() {
            for (b, v) in row.iter_mut().enumerate() {
                *v = match self.kind {
                    ElementKind::P1 => area / 12.0 * if a == b { 2.0 } else { 1.0 },
                    ElementKind::Cr => if a == b { area / 3.0 } else { 0.0 },
                };
            }
        }
        m
    }

    pub fn element_stiffness(&self, t: usize, weight: f64) -> [[f64; 3]; 3] {
        let g = &self.local_gradients[t];
        let scale = weight * self.mesh.triangle_area();
        let mut k = [[0.0; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                k[a][b] = scale * (g[a][0] * g[b][0] + g[a][1] * g[b][1]);
            }
        }
        k
    }

    pub fn assemble_mass(&self, boundary: Boundary) -> SparseOperator {
        let m = self.element_mass();
        self.pattern.assemble(|_| m, boundary == Boundary::Constrained)
    }

    /// `sum_T w_T |T| ∇φ_a·∇φ_b` with one positive weight per triangle.
    pub fn assemble_weighted_stiffness(&self, weights: &[f64], boundary: Boundary) -> Result<SparseOperator, FeError> {
        if weights.len() != self.mesh.triangle_count() {
            return Err(FeError::DimensionMismatch { expected: self.mesh.triangle_count(), got: weights.len() });
        }
        if let Some((triangle, &value)) = weights.iter().enumerate().find(|(_, w)| !(**w > 0.0) || !w.is_finite()) {
            return Err(FeError::InvalidWeight { triangle, value });
        }
        Ok(self.pattern.assemble(|t| self.element_stiffness(t, weights[t]), boundary == Boundary::Constrained))
    }

    /// Load vector `(f, φ_a)` by per-element quadrature; constrained entries
    /// are left at zero.
    pub fn load_vector<F: Fn(Point) -> f64>(&self, f: F, rule: QuadratureRule) -> DVector<f64> {
        let rule = rule.points();
        let area = self.mesh.triangle_area();
        let mut load = DVector::zeros(self.dof_count());
        for t in 0..self.mesh.triangle_count() {
            let [a, b, c] = self.mesh.triangle_vertices(t);
            let dofs = self.local_dofs[t];
            for &(l, w) in &rule {
                let p = [
                    l[0] * a[0] + l[1] * b[0] + l[2] * c[0],
                    l[0] * a[1] + l[1] * b[1] + l[2] * c[1],
                ];
                let fv = f(p) * w * area;
                let basis = self.local_basis(l);
                for k in 0..3 {
                    load[dofs[k]] += fv * basis[k];
                }
            }
        }
        for (d, &c) in self.constrained.iter().enumerate() {
            if c {
                load[d] = 0.0;
            }
        }
        load
    }

    /// L²-orthogonal projection onto the constrained space.
    pub fn l2_project<F: Fn(Point) -> f64>(&self, f: F, rule: QuadratureRule) -> Result<State, FeError> {
        let mass = self.assemble_mass(Boundary::Constrained);
        self.l2_project_with(&mass, f, rule)
    }

    /// As [`l2_project`](Self::l2_project) with a pre-assembled constrained mass.
    pub fn l2_project_with<F: Fn(Point) -> f64>(
        &self,
        mass: &SparseOperator,
        f: F,
        rule: QuadratureRule,
    ) -> Result<State, FeError> {
        let load = self.load_vector(f, rule);
        let mut coeffs = DVector::zeros(self.dof_count());
        pcg(mass, &load, &mut coeffs, CgOptions { rel_tol: 1e-14, max_iter: 10_000 })?;
        Ok(State { tag: self.tag(), coeffs })
    }
}

/// A space together with the fixed operators every solver and diagnostic
/// needs. Immutable once built.
#[derive(Debug)]
pub struct Operators {
    space: Arc<FeSpace>,
    mass: SparseOperator,
    mass_natural: SparseOperator,
    laplace: SparseOperator,
}

impl Operators {
    pub fn new(space: Arc<FeSpace>) -> Self {
        let mass = space.assemble_mass(Boundary::Constrained);
        let mass_natural = space.assemble_mass(Boundary::Natural);
        let ones = vec![1.0; space.mesh().triangle_count()];
        let laplace = space
            .assemble_weighted_stiffness(&ones, Boundary::Constrained)
            .expect("unit weights are valid");
        Self { space, mass, mass_natural, laplace }
    }

    pub fn build(level: u32, kind: ElementKind) -> Result<Self, crate::error::MeshError> {
        let mesh = Arc::new(Mesh::build_crisscross(level)?);
        Ok(Self::new(Arc::new(FeSpace::new(mesh, kind))))
    }

    pub fn space(&self) -> &Arc<FeSpace> {
        &self.space
    }

    /// Mass matrix with identity rows on constrained dofs.
    pub fn mass(&self) -> &SparseOperator {
        &self.mass
    }

    /// Mass matrix over all dofs (for functions that do not vanish on ∂O).
    pub fn mass_natural(&self) -> &SparseOperator {
        &self.mass_natural
    }

    /// Unit-weight stiffness with identity rows on constrained dofs.
    pub fn laplace(&self) -> &SparseOperator {
        &self.laplace
    }

    /// `‖u‖²_{L²}` for any coefficient vector of the space.
    pub fn l2_norm_sq(&self, coeffs: &DVector<f64>) -> f64 {
        self.mass_natural.quadratic_form(coeffs)
    }

    pub fn l2_inner(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.mass_natural.bilinear_form(a, b)
    }

    /// Exact L² projection of a (possibly unconstrained) function of this
    /// space onto the constrained space.
    pub fn project_own(&self, coeffs: &DVector<f64>) -> Result<State, FeError> {
        if coeffs.len() != self.space.dof_count() {
            return Err(FeError::DimensionMismatch { expected: self.space.dof_count(), got: coeffs.len() });
        }
        let mut load = self.mass_natural.apply(coeffs);
        for (d, &c) in self.space.constrained().iter().enumerate() {
            if c {
                load[d] = 0.0;
            }
        }
        let mut out = coeffs.clone();
        for (d, &c) in self.space.constrained().iter().enumerate() {
            if c {
                out[d] = 0.0;
            }
        }
        pcg(&self.mass, &load, &mut out, CgOptions { rel_tol: 1e-14, max_iter: 10_000 })?;
        State::from_coeffs(&self.space, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn space(level: u32, kind: ElementKind) -> FeSpace {
        FeSpace::new(Arc::new(Mesh::build_crisscross(level).unwrap()), kind)
    }

    #[test]
    fn free_dof_counts_on_level_one() {
        assert_eq!(space(1, ElementKind::P1).free_dof_count(), 5);
        assert_eq!(space(1, ElementKind::Cr).free_dof_count(), 20);
    }

    #[test]
    fn partition_of_unity_per_element() {
        for kind in [ElementKind::P1, ElementKind::Cr] {
            let s = space(2, kind);
            let one = s.nodal_interpolate(|_| 1.0, false);
            for t in 0..s.mesh().triangle_count() {
                let g = s.element_gradient(&one, t);
                assert!(g[0].abs() < 1e-12 && g[1].abs() < 1e-12);
                let p = s.mesh().barycenter(t);
                assert!((s.evaluate_in(one.coeffs(), t, p) - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn affine_gradients_are_reproduced() {
        for kind in [ElementKind::P1, ElementKind::Cr] {
            let s = space(3, kind);
            let fx = s.nodal_interpolate(|p| p[0], false);
            let f23 = s.nodal_interpolate(|p| 2.0 * p[0] + 3.0 * p[1], false);
            for t in 0..s.mesh().triangle_count() {
                let g = s.element_gradient(&fx, t);
                assert!((g[0] - 1.0).abs() < 1e-12 && g[1].abs() < 1e-12);
                let g = s.element_gradient(&f23, t);
                assert!((g[0] - 2.0).abs() < 1e-11 && (g[1] - 3.0).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn mass_of_constant_on_single_element_is_area() {
        let s = space(2, ElementKind::P1);
        let m = s.element_mass();
        let total: f64 = m.iter().flatten().sum();
        assert!((total - s.mesh().triangle_area()).abs() < 1e-16);
        let s = space(2, ElementKind::Cr);
        let total: f64 = s.element_mass().iter().flatten().sum();
        assert!((total - s.mesh().triangle_area()).abs() < 1e-16);
    }

    #[test]
    fn unconstrained_mass_sums_to_domain_area() {
        for kind in [ElementKind::P1, ElementKind::Cr] {
            let m = space(3, kind).assemble_mass(Boundary::Natural);
            assert!((m.total_sum() - 1.0).abs() < 1e-13);
        }
    }

    /// Independent oracle: exact integral of the square of an affine function
    /// through the edge-midpoint rule (exact for quadratics).
    fn midpoint_rule_l2_sq(s: &FeSpace, u: &State) -> f64 {
        let mesh = s.mesh();
        let mut total = 0.0;
        for t in 0..mesh.triangle_count() {
            let [a, b, c] = mesh.triangle_vertices(t);
            let mids = [
                [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0],
                [(b[0] + c[0]) / 2.0, (b[1] + c[1]) / 2.0],
                [(c[0] + a[0]) / 2.0, (c[1] + a[1]) / 2.0],
            ];
            for m in mids {
                let v = s.evaluate_in(u.coeffs(), t, m);
                total += mesh.triangle_area() / 3.0 * v * v;
            }
        }
        total
    }

    #[test]
    fn mass_quadratic_form_matches_exact_integration() {
        let s = space(2, ElementKind::P1);
        let u = s.nodal_interpolate(|p| p[0] * (1.0 - p[0]) * p[1] * (1.0 - p[1]), false);
        let m = s.assemble_mass(Boundary::Constrained);
        let q = m.quadratic_form(u.coeffs());
        let oracle = midpoint_rule_l2_sq(&s, &u);
        assert!((q - oracle).abs() / oracle < 1e-12);
    }

    #[test]
    fn stiffness_of_affine_function() {
        for kind in [ElementKind::P1, ElementKind::Cr] {
            let s = space(3, kind);
            let u = s.nodal_interpolate(|p| 2.0 * p[0] - 0.5 * p[1] + 1.0, false);
            let w = vec![1.0; s.mesh().triangle_count()];
            let a = s.assemble_weighted_stiffness(&w, Boundary::Natural).unwrap();
            assert!((a.quadratic_form(u.coeffs()) - 4.25).abs() < 1e-11);
        }
    }

    #[test]
    fn stiffness_rejects_bad_weights() {
        let s = space(1, ElementKind::P1);
        let mut w = vec![1.0; 16];
        w[3] = 0.0;
        assert!(matches!(
            s.assemble_weighted_stiffness(&w, Boundary::Constrained),
            Err(FeError::InvalidWeight { triangle: 3, .. })
        ));
        w[3] = f64::NAN;
        assert!(s.assemble_weighted_stiffness(&w, Boundary::Constrained).is_err());
        assert!(s.assemble_weighted_stiffness(&w[..3], Boundary::Constrained).is_err());
    }

    #[test]
    fn center_hat_on_level_one_by_hand() {
        // The hat at (1/2, 1/2) touches two triangles in each of the four
        // cells. Its height over the opposite edge is h/√2 = 1/(2√2), so
        // |∇φ|² = 8 on each of the eight triangles of area 1/16: total 4.
        let s = space(1, ElementKind::P1);
        let center = s.dof_points().iter().position(|&p| p == [0.5, 0.5]).unwrap();
        let mut e = DVector::zeros(s.dof_count());
        e[center] = 1.0;
        let w = vec![1.0; 16];
        let a = s.assemble_weighted_stiffness(&w, Boundary::Constrained).unwrap();
        let mut by_hand = 0.0;
        for t in 0..16 {
            let dofs = s.local_dofs(t);
            if let Some(k) = dofs.iter().position(|&d| d == center) {
                let g = s.local_gradients(t)[k];
                by_hand += s.mesh().triangle_area() * (g[0] * g[0] + g[1] * g[1]);
            }
        }
        assert!((a.quadratic_form(&e) - by_hand).abs() < 1e-14);
        assert!((by_hand - 4.0).abs() < 1e-12);
    }

    #[test]
    fn unit_stiffness_matches_textbook_cotangent_formula() {
        // Classical P1 Laplacian: K_ab = -½ (cot α + cot β) for the angles
        // opposite edge ab, diagonal from row sums.
        let s = space(1, ElementKind::P1);
        let mesh = s.mesh();
        let n = s.dof_count();
        let mut dense = vec![vec![0.0; n]; n];
        for t in 0..mesh.triangle_count() {
            let tri = mesh.triangles()[t];
            let pts = mesh.triangle_vertices(t);
            for k in 0..3 {
                let (i, j) = (tri[(k + 1) % 3], tri[(k + 2) % 3]);
                let (p, q, r) = (pts[k], pts[(k + 1) % 3], pts[(k + 2) % 3]);
                let u = [q[0] - p[0], q[1] - p[1]];
                let v = [r[0] - p[0], r[1] - p[1]];
                let cot = (u[0] * v[0] + u[1] * v[1]) / (u[0] * v[1] - u[1] * v[0]).abs();
                dense[i][j] -= 0.5 * cot;
                dense[j][i] -= 0.5 * cot;
                dense[i][i] += 0.5 * cot;
                dense[j][j] += 0.5 * cot;
            }
        }
        let a = s.assemble_weighted_stiffness(&vec![1.0; 16], Boundary::Natural).unwrap();
        for i in 0..n {
            for j in 0..n {
                assert!((a.get(i, j) - dense[i][j]).abs() < 1e-13, "({i},{j})");
            }
        }
    }

    #[test]
    fn projection_is_idempotent_and_linear() {
        for kind in [ElementKind::P1, ElementKind::Cr] {
            let s = space(3, kind);
            let u = s.nodal_interpolate(|p| (3.0 * p[0]).sin() * p[1] + 0.2, true);
            let pu = s.l2_project(s.field(&u), QuadratureRule::ThreePoint).unwrap();
            assert!((pu.coeffs() - u.coeffs()).amax() < 1e-10);
            let zero = s.l2_project(|_| 0.0, QuadratureRule::ThreePoint).unwrap();
            assert_eq!(zero.coeffs().amax(), 0.0);
        }
    }

    #[test]
    fn projection_h1_stability_for_sine() {
        let f = |p: Point| (PI * p[0]).sin() * (PI * p[1]).sin();
        let grad_norm = (PI * PI / 2.0).sqrt();
        for level in 2..=5 {
            let s = space(level, ElementKind::P1);
            let pf = s.l2_project(f, QuadratureRule::SevenPoint).unwrap();
            let w = vec![1.0; s.mesh().triangle_count()];
            let a = s.assemble_weighted_stiffness(&w, Boundary::Constrained).unwrap();
            let kappa = a.quadratic_form(pf.coeffs()).sqrt() / grad_norm;
            assert!(kappa <= 2.0, "level {level}: {kappa}");
        }
    }

    #[test]
    fn p0_projection_properties() {
        let s = space(3, ElementKind::P1);
        let c = s.nodal_interpolate(|_| 0.7, false);
        assert!(s.project_p0(&c).iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let x = s.nodal_interpolate(|p| p[0], false);
        for (t, v) in s.project_p0(&x).iter().enumerate() {
            assert!((v - s.mesh().barycenter(t)[0]).abs() < 1e-15);
        }
        let u = s.nodal_interpolate(|p| (p[0] * 5.0).cos() + p[1] * p[1], false);
        let mean: f64 = s.project_p0(&u).iter().map(|v| v * s.mesh().triangle_area()).sum();
        let m = s.assemble_mass(Boundary::Natural);
        let integral = m.bilinear_form(u.coeffs(), &DVector::from_element(s.dof_count(), 1.0));
        assert!((mean - integral).abs() < 1e-13);
    }

    #[test]
    fn p1_is_nested_across_levels() {
        let coarse = space(2, ElementKind::P1);
        let fine = space(3, ElementKind::P1);
        let u = coarse.nodal_interpolate(|p| (7.0 * p[0]).sin() * (3.0 * p[1]).cos(), true);
        let v = fine.nodal_interpolate(coarse.field(&u), true);
        for t in 0..fine.mesh().triangle_count() {
            let p = fine.mesh().barycenter(t);
            assert!((fine.evaluate_in(v.coeffs(), t, p) - coarse.evaluate(&u, p)).abs() < 1e-13);
        }
    }

    #[test]
    fn cr_functions_are_continuous_at_midpoints() {
        let s = space(3, ElementKind::Cr);
        let u = s.nodal_interpolate(|p| (4.0 * p[0]).sin() + p[1].powi(3), true);
        let mesh = s.mesh();
        for (e, &(t1, t2)) in mesh.edge_triangles().iter().enumerate() {
            if let Some(t2) = t2 {
                let b = mesh.edge_barycenters()[e];
                let jump = s.evaluate_in(u.coeffs(), t1, b) - s.evaluate_in(u.coeffs(), t2, b);
                assert!(jump.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn operators_are_symmetric() {
        for kind in [ElementKind::P1, ElementKind::Cr] {
            let s = space(2, kind);
            let w: Vec<f64> = (0..s.mesh().triangle_count()).map(|t| 1.0 + t as f64 * 0.1).collect();
            assert_eq!(s.assemble_mass(Boundary::Constrained).max_asymmetry(), 0.0);
            assert!(s.assemble_weighted_stiffness(&w, Boundary::Constrained).unwrap().max_asymmetry() < 1e-14);
        }
    }
}
