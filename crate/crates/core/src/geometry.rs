//! Coordinate-free 3D geometry: signed volumes, barycentric coordinates and
//! the congruent-framework reconstruction used to get barycentric weights from
//! ranges alone.

use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use nalgebra::{Matrix5, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative guard on the reference tetrahedron volume, scaled by L³.
pub const DEGENERACY_THRESHOLD: f64 = 1e-12;
/// λ₄ above this fraction of λ₁ means the distances do not embed in 3D.
pub const EMBEDDABILITY_TOLERANCE: f64 = 1e-6;
/// λ₃ at or below this fraction of λ₁ means the five points are coplanar.
pub const PLANARITY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("reference tetrahedron is degenerate: |V| = {volume:e} <= {threshold:e}")]
    DegenerateTetrahedron { volume: f64, threshold: f64 },
    #[error("clique is degenerate: the five points are (nearly) coplanar")]
    DegenerateClique,
    #[error("distance matrix is not embeddable in 3D: |lambda4|/lambda1 = {ratio:e}")]
    NotEmbeddable3D { ratio: f64 },
    #[error("invalid squared-distance matrix: {0}")]
    InvalidDistanceMatrix(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ZERO: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn dot(self, o: Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Point3) -> Point3 {
        Point3::new(self.y * o.z - self.z * o.y, self.z * o.x - self.x * o.z, self.x * o.y - self.y * o.x)
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn distance(self, o: Point3) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Point3::new(a[0], a[1], a[2])
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    fn neg(self) -> Point3 {
        Point3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Point3> for f64 {
    type Output = Point3;
    fn mul(self, p: Point3) -> Point3 {
        p * self
    }
}

impl AddAssign for Point3 {
    fn add_assign(&mut self, o: Point3) {
        *self = *self + o;
    }
}

impl SubAssign for Point3 {
    fn sub_assign(&mut self, o: Point3) {
        *self = *self - o;
    }
}

/// Squared distances among five clique members, center first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SquaredDistanceMatrix5 {
    d2: [[f64; 5]; 5],
}

impl SquaredDistanceMatrix5 {
    pub fn new(d2: [[f64; 5]; 5]) -> Result<Self, GeometryError> {
        for (x, row) in d2.iter().enumerate() {
            if row[x] != 0.0 {
                return Err(GeometryError::InvalidDistanceMatrix(format!("diagonal entry {x} is {}", row[x])));
            }
            for (y, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(GeometryError::InvalidDistanceMatrix(format!("entry ({x},{y}) is not finite")));
                }
                if x != y && v <= 0.0 {
                    return Err(GeometryError::InvalidDistanceMatrix(format!("entry ({x},{y}) = {v} is not positive")));
                }
                if v != d2[y][x] {
                    return Err(GeometryError::InvalidDistanceMatrix(format!(
                        "entries ({x},{y}) and ({y},{x}) differ"
                    )));
                }
            }
        }
        Ok(SquaredDistanceMatrix5 { d2 })
    }

    pub fn from_points(p: &[Point3; 5]) -> Result<Self, GeometryError> {
        let mut d2 = [[0.0; 5]; 5];
        for x in 0..5 {
            for y in (x + 1)..5 {
                let v = (p[x] - p[y]).norm_squared();
                d2[x][y] = v;
                d2[y][x] = v;
            }
        }
        Self::new(d2)
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.d2[x][y]
    }

    pub fn as_array(&self) -> &[[f64; 5]; 5] {
        &self.d2
    }

    pub fn max_entry(&self) -> f64 {
        self.d2.iter().flatten().copied().fold(0.0, f64::max)
    }
}

/// Barycentric weights of a point against four references, in reference order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarycentricQuad {
    pub weights: [f64; 4],
}

impl BarycentricQuad {
    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Σ a·ref
    pub fn combine(&self, refs: &[Point3; 4]) -> Point3 {
        let mut acc = Point3::ZERO;
        for (a, r) in self.weights.iter().zip(refs) {
            acc += *a * *r;
        }
        acc
    }
}

/// Positions of the five clique members in an arbitrary frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CongruentFrame5 {
    pub q: [Point3; 5],
    /// eigenvalues of the centered Gram matrix, descending
    pub spectrum: [f64; 5],
}

impl CongruentFrame5 {
    /// |V(q1,q2,q3,q4)| / L³ with L the largest pairwise distance of the five.
    pub fn reference_shape_ratio(&self) -> f64 {
        let l = max_pairwise_distance(&self.q);
        let v = signed_volume(self.q[1], self.q[2], self.q[3], self.q[4]);
        v.abs() / (l * l * l)
    }
}

/// (1/6)·det[[1,1,1,1],[a,b,c,d]].
pub fn signed_volume(a: Point3, b: Point3, c: Point3, d: Point3) -> f64 {
    (b - a).dot((c - a).cross(d - a)) / 6.0
}

pub fn max_pairwise_distance(pts: &[Point3]) -> f64 {
    let mut best = 0.0f64;
    for (x, p) in pts.iter().enumerate() {
        for q in &pts[x + 1..] {
            best = best.max(p.distance(*q));
        }
    }
    best
}

pub fn barycentric_from_positions(p: Point3, refs: [Point3; 4]) -> Result<BarycentricQuad, GeometryError> {
    let [j, k, l, h] = refs;
    let denom = signed_volume(j, k, l, h);
    let len = max_pairwise_distance(&[p, j, k, l, h]);
    let threshold = DEGENERACY_THRESHOLD * len * len * len;
    if !(denom.abs() > threshold) {
        return Err(GeometryError::DegenerateTetrahedron { volume: denom.abs(), threshold });
    }
    Ok(BarycentricQuad {
        weights: [
            signed_volume(p, k, l, h) / denom,
            signed_volume(j, p, l, h) / denom,
            signed_volume(j, k, p, h) / denom,
            signed_volume(j, k, l, p) / denom,
        ],
    })
}

/// Classical-MDS reconstruction: X = −½JDJ, Q = Λ^{1/2}Vᵀ on the top three
/// eigenpairs.
pub fn cfc(d: &SquaredDistanceMatrix5) -> Result<CongruentFrame5, GeometryError> {
    let x = centered_gram(d);
    let eig = SymmetricEigen::new(x);
    let mut order: [usize; 5] = [0, 1, 2, 3, 4];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let spectrum = order.map(|i| eig.eigenvalues[i]);

    let l1 = spectrum[0];
    if !(l1 > 0.0) {
        return Err(GeometryError::DegenerateClique);
    }
    let residual = spectrum[3].abs().max(spectrum[4].abs());
    if residual > EMBEDDABILITY_TOLERANCE * l1 {
        return Err(GeometryError::NotEmbeddable3D { ratio: residual / l1 });
    }
    if spectrum[2] <= PLANARITY_TOLERANCE * l1 {
        return Err(GeometryError::DegenerateClique);
    }

    let scale = [spectrum[0].max(0.0).sqrt(), spectrum[1].max(0.0).sqrt(), spectrum[2].max(0.0).sqrt()];
    let mut q = [Point3::ZERO; 5];
    for (row, qp) in q.iter_mut().enumerate() {
        *qp = Point3::new(
            scale[0] * eig.eigenvectors[(row, order[0])],
            scale[1] * eig.eigenvectors[(row, order[1])],
            scale[2] * eig.eigenvectors[(row, order[2])],
        );
    }
    Ok(CongruentFrame5 { q, spectrum })
}

/// −½JDJ with J = I − 11ᵀ/5.
pub fn centered_gram(d: &SquaredDistanceMatrix5) -> Matrix5<f64> {
    let dm = Matrix5::from_fn(|r, c| d.get(r, c));
    let j = Matrix5::<f64>::identity() - Matrix5::from_element(0.2);
    let mut x = -0.5 * (j * dm * j);
    // symmetrize away rounding before the eigensolver
    for r in 0..5 {
        for c in (r + 1)..5 {
            let m = 0.5 * (x[(r, c)] + x[(c, r)]);
            x[(r, c)] = m;
            x[(c, r)] = m;
        }
    }
    x
}

pub fn barycentric_from_frame(frame: &CongruentFrame5) -> Result<BarycentricQuad, GeometryError> {
    let q = frame.q;
    barycentric_from_positions(q[0], [q[1], q[2], q[3], q[4]])
}

pub fn barycentric_from_distances(d: &SquaredDistanceMatrix5) -> Result<BarycentricQuad, GeometryError> {
    barycentric_from_frame(&cfc(d)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // LU with partial pivoting; independent of the cross-product formula.
    fn det_oracle(mut m: Vec<Vec<f64>>) -> f64 {
        let n = m.len();
        let mut det = 1.0;
        for c in 0..n {
            let piv = (c..n).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs())).unwrap();
            if m[piv][c] == 0.0 {
                return 0.0;
            }
            if piv != c {
                m.swap(piv, c);
                det = -det;
            }
            det *= m[c][c];
            for r in (c + 1)..n {
                let f = m[r][c] / m[c][c];
                for k in c..n {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
        det
    }

    fn volume_oracle(p: [Point3; 4]) -> f64 {
        let mut m = vec![vec![1.0; 4]];
        for axis in 0..3 {
            m.push(p.iter().map(|q| q.to_array()[axis]).collect());
        }
        det_oracle(m) / 6.0
    }

    // Gaussian elimination on [1 1 1 1; refs] a = [1; p].
    fn quad_oracle(p: Point3, refs: [Point3; 4]) -> [f64; 4] {
        let mut m = vec![vec![1.0, 1.0, 1.0, 1.0, 1.0]];
        for axis in 0..3 {
            let mut row: Vec<f64> = refs.iter().map(|q| q.to_array()[axis]).collect();
            row.push(p.to_array()[axis]);
            m.push(row);
        }
        for c in 0..4 {
            let piv = (c..4).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs())).unwrap();
            m.swap(piv, c);
            for r in 0..4 {
                if r != c {
                    let f = m[r][c] / m[c][c];
                    for k in c..5 {
                        m[r][k] -= f * m[c][k];
                    }
                }
            }
        }
        [0, 1, 2, 3].map(|i| m[i][4] / m[i][i])
    }

    fn regular_tetra() -> [Point3; 4] {
        [
            Point3::new(1.0, 1.0, 1.0),
            Point3::new(1.0, -1.0, -1.0),
            Point3::new(-1.0, 1.0, -1.0),
            Point3::new(-1.0, -1.0, 1.0),
        ]
    }

    fn pt() -> impl Strategy<Value = Point3> {
        (-50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64).prop_map(|(x, y, z)| Point3::new(x, y, z))
    }

    fn generic_refs() -> impl Strategy<Value = [Point3; 4]> {
        [pt(), pt(), pt(), pt()].prop_filter("well-shaped reference tetrahedron", |r| {
            let l = max_pairwise_distance(r);
            signed_volume(r[0], r[1], r[2], r[3]).abs() > 1e-3 * l * l * l
        })
    }

    fn rotation(a: f64, b: f64, c: f64) -> [[f64; 3]; 3] {
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sc, cc) = c.sin_cos();
        let rz = [[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]];
        let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
        let rx = [[1.0, 0.0, 0.0], [0.0, cc, -sc], [0.0, sc, cc]];
        let mul = |p: [[f64; 3]; 3], q: [[f64; 3]; 3]| {
            let mut out = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    out[i][j] = (0..3).map(|k| p[i][k] * q[k][j]).sum();
                }
            }
            out
        };
        mul(mul(rz, ry), rx)
    }

    fn apply(r: &[[f64; 3]; 3], t: Point3, p: Point3) -> Point3 {
        let a = p.to_array();
        let v: [f64; 3] = [0, 1, 2].map(|i| (0..3).map(|k| r[i][k] * a[k]).sum());
        Point3::from_array(v) + t
    }

    #[test]
    fn unit_simplex_volume() {
        let v = signed_volume(
            Point3::ZERO,
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, 0.0, 1.0),
        );
        assert_eq!(v, 1.0 / 6.0);
    }

    #[test]
    fn coplanar_volume_is_zero() {
        let v = signed_volume(
            Point3::new(0.0, 0.0, 2.0),
            Point3::new(1.0, 0.0, 2.0),
            Point3::new(0.0, 3.0, 2.0),
            Point3::new(5.0, 7.0, 2.0),
        );
        assert_eq!(v, 0.0);
    }

    #[test]
    fn centroid_of_regular_tetrahedron() {
        let q = barycentric_from_positions(Point3::ZERO, regular_tetra()).unwrap();
        for w in q.weights {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn vertex_gets_unit_weight() {
        let refs = regular_tetra();
        for (v, r) in refs.iter().enumerate() {
            let q = barycentric_from_positions(*r, refs).unwrap();
            for (i, w) in q.weights.iter().enumerate() {
                let want = if i == v { 1.0 } else { 0.0 };
                assert!((w - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn flat_references_rejected() {
        let refs = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(1.0, 1.0, 0.0),
        ];
        let err = barycentric_from_positions(Point3::new(0.3, 0.3, 1.0), refs).unwrap_err();
        assert!(matches!(err, GeometryError::DegenerateTetrahedron { .. }));
    }

    #[test]
    fn distances_of_centroid_and_regular_tetrahedron() {
        let r = regular_tetra();
        let d = SquaredDistanceMatrix5::from_points(&[Point3::ZERO, r[0], r[1], r[2], r[3]]).unwrap();
        let q = barycentric_from_distances(&d).unwrap();
        for w in q.weights {
            assert!((w - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn coplanar_clique_is_degenerate() {
        let pts = [
            Point3::new(0.0, 0.0, 1.0),
            Point3::new(4.0, 0.0, 1.0),
            Point3::new(0.0, 3.0, 1.0),
            Point3::new(2.0, 7.0, 1.0),
            Point3::new(-3.0, 1.0, 1.0),
        ];
        let d = SquaredDistanceMatrix5::from_points(&pts).unwrap();
        assert_eq!(cfc(&d).unwrap_err(), GeometryError::DegenerateClique);
    }

    #[test]
    fn non_euclidean_distances_rejected() {
        let mut d2 = [[1.0; 5]; 5];
        for (i, row) in d2.iter_mut().enumerate() {
            row[i] = 0.0;
        }
        d2[0][1] = 40.0;
        d2[1][0] = 40.0;
        let d = SquaredDistanceMatrix5::new(d2).unwrap();
        assert!(matches!(cfc(&d), Err(GeometryError::NotEmbeddable3D { .. })));
    }

    #[test]
    fn invalid_matrices_rejected() {
        let mut d2 = [[1.0; 5]; 5];
        for (i, row) in d2.iter_mut().enumerate() {
            row[i] = 0.0;
        }
        d2[2][3] = 2.0;
        assert!(SquaredDistanceMatrix5::new(d2).is_err());
        d2[3][2] = 2.0;
        assert!(SquaredDistanceMatrix5::new(d2).is_ok());
        d2[1][1] = 0.5;
        assert!(SquaredDistanceMatrix5::new(d2).is_err());
    }

    #[test]
    fn centered_points_recover_gram() {
        let mut pts = [
            Point3::new(3.0, -1.0, 2.0),
            Point3::new(-4.0, 2.5, 0.5),
            Point3::new(1.0, 5.0, -3.0),
            Point3::new(0.5, -6.0, 1.0),
            Point3::new(2.0, 1.0, 4.0),
        ];
        let mean = pts.iter().fold(Point3::ZERO, |a, p| a + *p) * 0.2;
        for p in pts.iter_mut() {
            *p -= mean;
        }
        let d = SquaredDistanceMatrix5::from_points(&pts).unwrap();
        let x = centered_gram(&d);
        for r in 0..5 {
            for c in 0..5 {
                let want = pts[r].dot(pts[c]);
                assert!((x[(r, c)] - want).abs() < 1e-12 * 50.0, "({r},{c})");
            }
        }
    }

    proptest! {
        #[test]
        fn volume_matches_dense_determinant(a in pt(), b in pt(), c in pt(), d in pt()) {
            let v = signed_volume(a, b, c, d);
            let o = volume_oracle([a, b, c, d]);
            prop_assert!((v - o).abs() <= 1e-9 * (1.0 + o.abs()));
        }

        #[test]
        fn volume_is_alternating(a in pt(), b in pt(), c in pt(), d in pt()) {
            let v = signed_volume(a, b, c, d);
            let tol = 1e-9 * (1.0 + v.abs());
            prop_assert!((signed_volume(b, a, c, d) + v).abs() <= tol);
            prop_assert!((signed_volume(a, c, b, d) + v).abs() <= tol);
            prop_assert!((signed_volume(a, b, d, c) + v).abs() <= tol);
            prop_assert!((signed_volume(d, b, c, a) + v).abs() <= tol);
        }

        #[test]
        fn quad_matches_linear_solve(p in pt(), refs in generic_refs()) {
            let q = barycentric_from_positions(p, refs).unwrap();
            let o = quad_oracle(p, refs);
            for i in 0..4 {
                prop_assert!((q.weights[i] - o[i]).abs() < 1e-9 * (1.0 + o[i].abs()));
            }
            prop_assert!((q.sum() - 1.0).abs() < 1e-9);
            let back = q.combine(&refs);
            prop_assert!((back - p).norm() < 1e-9 * (1.0 + p.norm()));
        }

        #[test]
        fn quad_is_congruence_invariant(
            p in pt(), refs in generic_refs(), t in pt(),
            a in 0.0..6.3f64, b in 0.0..6.3f64, c in 0.0..6.3f64,
        ) {
            let r = rotation(a, b, c);
            let q0 = barycentric_from_positions(p, refs).unwrap();
            let q1 = barycentric_from_positions(apply(&r, t, p), refs.map(|x| apply(&r, t, x))).unwrap();
            for i in 0..4 {
                prop_assert!((q0.weights[i] - q1.weights[i]).abs() < 1e-8 * (1.0 + q0.weights[i].abs()));
            }
        }

        #[test]
        fn cfc_round_trip(p in pt(), refs in generic_refs()) {
            let pts = [p, refs[0], refs[1], refs[2], refs[3]];
            let d = SquaredDistanceMatrix5::from_points(&pts).unwrap();
            let f = cfc(&d).unwrap();
            for x in 0..5 {
                for y in (x + 1)..5 {
                    let got = (f.q[x] - f.q[y]).norm_squared();
                    prop_assert!((got - d.get(x, y)).abs() <= 1e-8 * d.get(x, y));
                }
            }
        }

        #[test]
        fn distance_quad_matches_position_quad(p in pt(), refs in generic_refs()) {
            let pts = [p, refs[0], refs[1], refs[2], refs[3]];
            let d = SquaredDistanceMatrix5::from_points(&pts).unwrap();
            let from_d = barycentric_from_distances(&d).unwrap();
            let from_p = barycentric_from_positions(p, refs).unwrap();
            for i in 0..4 {
                prop_assert!((from_d.weights[i] - from_p.weights[i]).abs() < 1e-7 * (1.0 + from_p.weights[i].abs()));
            }
            prop_assert_eq!(barycentric_from_distances(&d).unwrap(), from_d);
        }
    }
}
