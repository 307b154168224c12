//! Homography algebra, the projective warp, the congealing Jacobian and the
//! regularized per-frame update solve.

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = (f64, f64);

const DET_EPS: f64 = 1e-12;
const DENOM_EPS: f64 = 1e-9;

/// 3x3 projective transform from frame-local pixels to the global
/// motion-compensated coordinate frame. Always stored with `h[2][2] == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 9]", into = "[f64; 9]")]
pub struct Homography {
    m: Matrix3<f64>,
}

impl TryFrom<[f64; 9]> for Homography {
    type Error = Error;

    fn try_from(h: [f64; 9]) -> Result<Self> {
        Homography::from_row_major(h)
    }
}

impl From<Homography> for [f64; 9] {
    fn from(h: Homography) -> Self {
        h.to_row_major()
    }
}

impl Default for Homography {
    fn default() -> Self {
        Self::identity()
    }
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0),
        }
    }

    /// Rotation by `theta` and isotropic scale about the origin, followed by a translation.
    pub fn similarity(scale: f64, theta: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self {
            m: Matrix3::new(
                scale * c,
                -scale * s,
                tx,
                scale * s,
                scale * c,
                ty,
                0.0,
                0.0,
                1.0,
            ),
        }
    }

    /// Builds from a matrix, renormalizing so that `h[2][2] == 1`.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("non-finite homography entries".into()));
        }
        let h22 = m[(2, 2)];
        if h22.abs() < DET_EPS {
            return Err(Error::Singular(format!(
                "h[2][2] = {h22:e} cannot be normalized to 1"
            )));
        }
        let mut m = m / h22;
        m[(2, 2)] = 1.0;
        let det = m.determinant();
        if !(det.abs() > DET_EPS) {
            return Err(Error::Singular(format!("|det| = {:e}", det.abs())));
        }
        Ok(Self { m })
    }

    pub fn from_row_major(h: [f64; 9]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_row_slice(&h))
    }

    /// The eight free parameters `p1..p8` (row-major, `h[2][2]` omitted).
    pub fn from_params(p: [f64; 8]) -> Result<Self> {
        Self::from_row_major([p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], 1.0])
    }

    pub fn params(&self) -> [f64; 8] {
        let h = self.to_row_major();
        [h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7]]
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.m;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn determinant(&self) -> f64 {
        self.m.determinant()
    }

    /// Projective warp with division by `p7 x + p8 y + 1`.
    #[inline]
    pub fn warp_point(&self, pt: Point) -> Result<Point> {
        let m = &self.m;
        let (x, y) = pt;
        let d = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
        if !(d.abs() > DENOM_EPS) {
            return Err(Error::DegenerateDenominator { x, y });
        }
        Ok((
            (m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) / d,
            (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) / d,
        ))
    }

    /// `self * other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Homography) -> Result<Homography> {
        Homography::from_matrix(self.m * other.m)
    }

    pub fn invert(&self) -> Result<Homography> {
        let inv = self
            .m
            .try_inverse()
            .ok_or_else(|| Error::Singular("homography is not invertible".into()))?;
        Homography::from_matrix(inv)
    }

    /// Elementwise mean of two homographies, renormalized.
    pub fn elementwise_mean(&self, other: &Homography) -> Result<Homography> {
        Homography::from_matrix((self.m + other.m) * 0.5)
    }
}

/// `warp_point` as a free function.
pub fn warp_point(h: &Homography, pt: Point) -> Result<Point> {
    h.warp_point(pt)
}

pub fn compose(a: &Homography, b: &Homography) -> Result<Homography> {
    a.compose(b)
}

pub fn invert(h: &Homography) -> Result<Homography> {
    h.invert()
}

/// Increment `(dp1..dp8)` to the eight free homography parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamDelta(pub [f64; 8]);

impl ParamDelta {
    pub fn zero() -> Self {
        Self([0.0; 8])
    }

    pub fn norm_squared(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn scaled(&self, f: f64) -> Self {
        let mut out = self.0;
        out.iter_mut().for_each(|v| *v *= f);
        Self(out)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// The increment homography `I + dp`.
    pub fn as_homography(&self) -> Result<Homography> {
        let d = &self.0;
        Homography::from_row_major([
            1.0 + d[0],
            d[1],
            d[2],
            d[3],
            1.0 + d[4],
            d[5],
            d[6],
            d[7],
            1.0,
        ])
    }
}

/// Regularizer indicator: which increment components are damped.
pub type RegularizerMask = [bool; 8];

/// Translation parameters (p3, p6) are left unconstrained.
pub const DEFAULT_MASK: RegularizerMask = [true, true, false, true, true, false, true, true];

/// Two Jacobian rows (x and y) of one link's residual with respect to the
/// eight increment parameters, expressed in warped coordinates. The
/// projective columns use the link endpoint `(u, v)`.
#[inline]
pub fn jacobian_rows(warped_start: Point, endpoint: Point) -> ([f64; 8], [f64; 8]) {
    let (wx, wy) = warped_start;
    let (u, v) = endpoint;
    (
        [wx, wy, 1.0, 0.0, 0.0, 0.0, -u * wx, -u * wy],
        [0.0, 0.0, 0.0, wx, wy, 1.0, -v * wx, -v * wy],
    )
}

/// Stacked residual system for one frame: `e` holds N x-errors then N
/// y-errors, `jac` the matching Jacobian rows and `w` the diagonal weights.
#[derive(Debug, Clone, Default)]
pub struct WeightedResiduals {
    pub e: Vec<f64>,
    pub jac: Vec<[f64; 8]>,
    pub w: Vec<f64>,
}

impl WeightedResiduals {
    /// Assembles from `(warped start, endpoint, weight)` triples.
    pub fn assemble<I>(terms: I) -> Self
    where
        I: IntoIterator<Item = (Point, Point, f64)>,
    {
        let terms: Vec<_> = terms.into_iter().collect();
        let n = terms.len();
        let mut e = vec![0.0; 2 * n];
        let mut jac = vec![[0.0; 8]; 2 * n];
        let mut w = vec![0.0; 2 * n];
        for (k, &(ws, end, weight)) in terms.iter().enumerate() {
            let (jx, jy) = jacobian_rows(ws, end);
            e[k] = ws.0 - end.0;
            e[k + n] = ws.1 - end.1;
            jac[k] = jx;
            jac[k + n] = jy;
            w[k] = weight;
            w[k + n] = weight;
        }
        Self { e, jac, w }
    }

    pub fn link_count(&self) -> usize {
        self.e.len() / 2
    }

    /// `E^T W E`.
    pub fn weighted_sse(&self) -> f64 {
        self.e
            .iter()
            .zip(&self.w)
            .map(|(e, w)| w * e * e)
            .sum()
    }

    /// Value of the regularized quadratic model at increment `dp`.
    pub fn quadratic_model(&self, dp: &ParamDelta, gamma: f64, mask: &RegularizerMask) -> f64 {
        let mut total = 0.0;
        for ((e, row), w) in self.e.iter().zip(&self.jac).zip(&self.w) {
            let lin: f64 = e + row.iter().zip(&dp.0).map(|(j, d)| j * d).sum::<f64>();
            total += w * lin * lin;
        }
        for (d, &m) in dp.0.iter().zip(mask) {
            if m {
                total += gamma * d * d;
            }
        }
        total
    }
}

/// Solves `(J^T W J + gamma diag(mask)) dp = -J^T W E`.
pub fn solve_update(
    r: &WeightedResiduals,
    gamma: f64,
    mask: &RegularizerMask,
) -> Result<ParamDelta> {
    let n = r.link_count();
    let effective = (0..n).filter(|&k| r.w[k] > 0.0).count();
    if effective < 4 {
        return Err(Error::Underconstrained { links: effective });
    }
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for ((row, &e), &w) in r.jac.iter().zip(&r.e).zip(&r.w) {
        if w == 0.0 {
            continue;
        }
        for i in 0..8 {
            let wi = w * row[i];
            if wi == 0.0 {
                continue;
            }
            b[i] -= wi * e;
            for j in i..8 {
                a[(i, j)] += wi * row[j];
            }
        }
    }
    for i in 0..8 {
        if mask[i] {
            a[(i, i)] += gamma;
        }
        for j in 0..i {
            a[(i, j)] = a[(j, i)];
        }
    }
    let x = match a.cholesky() {
        Some(ch) => ch.solve(&b),
        None => a
            .full_piv_lu()
            .solve(&b)
            .ok_or_else(|| Error::Singular("normal matrix is rank deficient".into()))?,
    };
    let dp = ParamDelta(x.into());
    if !dp.is_finite() {
        return Err(Error::Singular("non-finite update".into()));
    }
    Ok(dp)
}

/// Pre-composes the increment: the update acts on already-warped coordinates.
pub fn apply_increment(h: &Homography, dp: &ParamDelta) -> Result<Homography> {
    dp.as_homography()?.compose(h)
}

/// Similarity normalization (centroid to origin, mean distance sqrt(2)).
fn normalizing_transform(pts: &[Point]) -> Result<Matrix3<f64>> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mean_dist = pts
        .iter()
        .map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if !(mean_dist > 1e-12) {
        return Err(Error::DegenerateConfiguration(
            "all points coincide".into(),
        ));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn has_collinear_triple(pts: &[Point], scale: f64) -> bool {
    let tol = 1e-9 * scale * scale;
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            for k in (j + 1)..pts.len() {
                let (a, b, c) = (pts[i], pts[j], pts[k]);
                let area = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
                if area.abs() <= tol {
                    return true;
                }
            }
        }
    }
    false
}

/// Least-squares homography mapping `pairs[k].0` onto `pairs[k].1` via the
/// normalized direct linear transform.
pub fn dlt_homography(pairs: &[(Point, Point)]) -> Result<Homography> {
    if pairs.len() < 4 {
        return Err(Error::DegenerateConfiguration(format!(
            "{} correspondences, need at least 4",
            pairs.len()
        )));
    }
    let src: Vec<Point> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<Point> = pairs.iter().map(|p| p.1).collect();
    let ts = normalizing_transform(&src)?;
    let td = normalizing_transform(&dst)?;
    let apply = |t: &Matrix3<f64>, p: Point| (t[(0, 0)] * p.0 + t[(0, 2)], t[(1, 1)] * p.1 + t[(1, 2)]);
    let ns: Vec<Point> = src.iter().map(|&p| apply(&ts, p)).collect();
    let nd: Vec<Point> = dst.iter().map(|&p| apply(&td, p)).collect();
    if pairs.len() == 4 && (has_collinear_triple(&ns, 1.0) || has_collinear_triple(&nd, 1.0)) {
        return Err(Error::DegenerateConfiguration(
            "three of four points are collinear".into(),
        ));
    }

    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, (s, d)) in ns.iter().zip(&nd).enumerate() {
        let (x, y) = *s;
        let (u, v) = *d;
        let r0 = 2 * k;
        a[(r0, 0)] = -x;
        a[(r0, 1)] = -y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = u * x;
        a[(r0, 7)] = u * y;
        a[(r0, 8)] = u;
        let r1 = r0 + 1;
        a[(r1, 3)] = -x;
        a[(r1, 4)] = -y;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = v * x;
        a[(r1, 7)] = v * y;
        a[(r1, 8)] = v;
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::DegenerateConfiguration("SVD failed".into()))?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nine singular values");
    let h = v_t.row(min_idx);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| Error::DegenerateConfiguration("normalization".into()))?;
    let m = td_inv * hn * ts;
    Homography::from_matrix(m).map_err(|e| Error::DegenerateConfiguration(e.to_string()))
}

/// Homogeneous multiply helper used by callers that need the raw 3-vector.
pub fn homogeneous(h: &Homography, pt: Point) -> Vector3<f64> {
    h.matrix() * Vector3::new(pt.0, pt.1, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_homography(rng: &mut ChaCha8Rng) -> Homography {
        Homography::from_row_major([
            1.0 + rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(-20.0..20.0),
            rng.random_range(-0.2..0.2),
            1.0 + rng.random_range(-0.2..0.2),
            rng.random_range(-20.0..20.0),
            rng.random_range(-5e-4..5e-4),
            rng.random_range(-5e-4..5e-4),
            1.0,
        ])
        .unwrap()
    }

    /// Independent oracle: multiply the 3-vector by hand and divide.
    fn oracle_warp(h: [f64; 9], x: f64, y: f64) -> Point {
        let hx = h[0] * x + h[1] * y + h[2];
        let hy = h[3] * x + h[4] * y + h[5];
        let hw = h[6] * x + h[7] * y + h[8];
        (hx / hw, hy / hw)
    }

    fn close(a: Point, b: Point, tol: f64) -> bool {
        (a.0 - b.0).abs() <= tol && (a.1 - b.1).abs() <= tol
    }

    #[test]
    fn warp_examples() {
        let id = Homography::identity();
        assert_eq!(id.warp_point((3.0, 4.0)).unwrap(), (3.0, 4.0));
        let t = Homography::translation(2.0, -1.0);
        assert_eq!(t.warp_point((3.0, 4.0)).unwrap(), (5.0, 3.0));
        let raw = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.001, 0.0, 1.0];
        let h = Homography::from_row_major(raw).unwrap();
        let got = h.warp_point((100.0, 50.0)).unwrap();
        assert!(close(got, oracle_warp(raw, 100.0, 50.0), 1e-12));
    }

    #[test]
    fn warp_at_infinity_is_an_error() {
        let h = Homography::from_row_major([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.01, 0.0, 1.0]).unwrap();
        assert!(matches!(
            h.warp_point((-100.0, 3.0)),
            Err(Error::DegenerateDenominator { .. })
        ));
    }

    #[test]
    fn normalization_is_exact() {
        let m = Matrix3::new(2.0, 0.0, 4.0, 0.0, 2.0, 6.0, 0.0, 0.0, 2.0);
        let h = Homography::from_matrix(m).unwrap();
        assert_eq!(h.to_row_major()[8], 1.0);
        assert_eq!(h.to_row_major()[2], 2.0);
        assert!(Homography::from_matrix(Matrix3::zeros()).is_err());
        assert!(Homography::from_row_major([1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn compose_and_invert_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = random_homography(&mut rng);
        assert_eq!(Homography::identity().compose(&h).unwrap(), h);
        let round = h.compose(&h.invert().unwrap()).unwrap();
        for (a, b) in round.to_row_major().iter().zip(Homography::identity().to_row_major()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(
            Homography::translation(3.0, -7.0).invert().unwrap(),
            Homography::translation(-3.0, 7.0)
        );
        assert_eq!(Homography::identity().invert().unwrap(), Homography::identity());
    }

    #[test]
    fn compose_matches_two_step_warp() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_homography(&mut rng);
        let b = random_homography(&mut rng);
        let ab = a.compose(&b).unwrap();
        for _ in 0..20 {
            let p = (rng.random_range(0.0..320.0), rng.random_range(0.0..240.0));
            let mid = oracle_warp(b.to_row_major(), p.0, p.1);
            let expected = oracle_warp(a.to_row_major(), mid.0, mid.1);
            assert!(close(ab.warp_point(p).unwrap(), expected, 1e-9));
        }
    }

    #[test]
    fn jacobian_examples() {
        let (jx, jy) = jacobian_rows((0.0, 0.0), (0.0, 0.0));
        assert_eq!(jx, [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(jy, [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let (jx, jy) = jacobian_rows((2.0, 3.0), (5.0, 7.0));
        assert_eq!(jx, [2.0, 3.0, 1.0, 0.0, 0.0, 0.0, -10.0, -15.0]);
        assert_eq!(jy, [0.0, 0.0, 0.0, 2.0, 3.0, 1.0, -14.0, -21.0]);
    }

    /// Central finite differences of the true incremental warp about dp = 0.
    fn fd_jacobian(p: Point) -> ([f64; 8], [f64; 8]) {
        let step = 1e-6;
        let mut jx = [0.0; 8];
        let mut jy = [0.0; 8];
        for i in 0..8 {
            let mut plus = [0.0; 8];
            let mut minus = [0.0; 8];
            plus[i] = step;
            minus[i] = -step;
            let hp = apply_increment(&Homography::identity(), &ParamDelta(plus)).unwrap();
            let hm = apply_increment(&Homography::identity(), &ParamDelta(minus)).unwrap();
            let a = hp.warp_point(p).unwrap();
            let b = hm.warp_point(p).unwrap();
            jx[i] = (a.0 - b.0) / (2.0 * step);
            jy[i] = (a.1 - b.1) / (2.0 * step);
        }
        (jx, jy)
    }

    #[test]
    fn jacobian_matches_finite_differences_at_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = (rng.random_range(1.0..320.0), rng.random_range(1.0..240.0));
            let (ax, ay) = jacobian_rows(p, p);
            let (fx, fy) = fd_jacobian(p);
            for i in 0..8 {
                for (a, f) in [(ax[i], fx[i]), (ay[i], fy[i])] {
                    let rel = (a - f).abs() / a.abs().max(1.0);
                    assert!(rel < 1e-4, "col {i}: analytic {a} vs fd {f}");
                }
            }
        }
    }

    #[test]
    fn zero_residual_gives_zero_update() {
        let terms = (0..6).map(|k| {
            let p = (10.0 * k as f64, 5.0 + 3.0 * k as f64 * k as f64);
            (p, p, 1.0)
        });
        let r = WeightedResiduals::assemble(terms);
        let dp = solve_update(&r, 1.0, &DEFAULT_MASK).unwrap();
        assert!(dp.0.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn translation_residual_is_removed_in_one_step() {
        let pts: Vec<Point> = (0..10)
            .map(|k| (20.0 + 13.0 * k as f64, 15.0 + 7.0 * (k % 4) as f64))
            .collect();
        // every start sits 2 px right of its endpoint
        let r = WeightedResiduals::assemble(pts.iter().map(|&p| ((p.0 + 2.0, p.1), p, 1.0)));
        let dp = solve_update(&r, 1e-9, &DEFAULT_MASK).unwrap();
        assert!((dp.0[2] + 2.0).abs() < 1e-6);
        let h = apply_increment(&Homography::translation(2.0, 0.0), &dp).unwrap();
        for p in &pts {
            let w = h.warp_point(*p).unwrap();
            assert!(close(w, *p, 1e-6));
        }
    }

    #[test]
    fn underconstrained_is_reported() {
        let r = WeightedResiduals::assemble((0..3).map(|k| {
            let p = (k as f64, 2.0 * k as f64);
            (p, (p.0 + 1.0, p.1), 1.0)
        }));
        assert!(matches!(
            solve_update(&r, 1.0, &DEFAULT_MASK),
            Err(Error::Underconstrained { links: 3 })
        ));
    }

    /// Dense Gaussian elimination on the explicitly formed 8x8 system.
    fn oracle_solve(r: &WeightedResiduals, gamma: f64, mask: &RegularizerMask) -> [f64; 8] {
        let mut a = [[0.0f64; 9]; 8];
        for i in 0..8 {
            for j in 0..8 {
                let mut s = 0.0;
                for k in 0..r.e.len() {
                    s += r.jac[k][i] * r.w[k] * r.jac[k][j];
                }
                a[i][j] = s + if i == j && mask[i] { gamma } else { 0.0 };
            }
            let mut s = 0.0;
            for k in 0..r.e.len() {
                s += r.jac[k][i] * r.w[k] * r.e[k];
            }
            a[i][8] = -s;
        }
        for col in 0..8 {
            let piv = (col..8)
                .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
                .unwrap();
            a.swap(col, piv);
            for row in 0..8 {
                if row != col {
                    let f = a[row][col] / a[col][col];
                    for c in col..9 {
                        a[row][c] -= f * a[col][c];
                    }
                }
            }
        }
        let mut x = [0.0; 8];
        for i in 0..8 {
            x[i] = a[i][8] / a[i][i];
        }
        x
    }

    #[test]
    fn solve_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let n = 12;
            let mut r = WeightedResiduals::default();
            for _ in 0..2 * n {
                r.e.push(rng.random_range(-1.0..1.0));
                let mut row = [0.0; 8];
                row.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
                r.jac.push(row);
            }
            for _ in 0..n {
                r.w.push(rng.random_range(0.1..1.0));
            }
            let half = r.w.clone();
            r.w.extend(half);
            let dp = solve_update(&r, 1.0, &DEFAULT_MASK).unwrap();
            let oracle = oracle_solve(&r, 1.0, &DEFAULT_MASK);
            for (a, b) in dp.0.iter().zip(oracle) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn increment_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_homography(&mut rng);
        assert_eq!(apply_increment(&h, &ParamDelta::zero()).unwrap(), h);
        let mut d = [0.0; 8];
        d[2] = 1.0;
        assert_eq!(
            apply_increment(&Homography::identity(), &ParamDelta(d)).unwrap(),
            Homography::translation(1.0, 0.0)
        );
        let dp = ParamDelta([1e-3, -2e-3, 0.5, 3e-3, 1e-3, -0.25, 1e-6, -2e-6]);
        let updated = apply_increment(&h, &dp).unwrap();
        let inc = dp.as_homography().unwrap().to_row_major();
        for _ in 0..20 {
            let p = (rng.random_range(0.0..320.0), rng.random_range(0.0..240.0));
            let mid = oracle_warp(h.to_row_major(), p.0, p.1);
            let expected = oracle_warp(inc, mid.0, mid.1);
            assert!(close(updated.warp_point(p).unwrap(), expected, 1e-9));
        }
    }

    #[test]
    fn dlt_examples() {
        let sq = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        let h = dlt_homography(&sq.map(|p| (p, p))).unwrap();
        for (a, b) in h.to_row_major().iter().zip(Homography::identity().to_row_major()) {
            assert!((a - b).abs() < 1e-9);
        }
        let pts = [(3.0, 4.0), (50.0, 7.0), (45.0, 60.0), (2.0, 40.0)];
        let h = dlt_homography(&pts.map(|p| (p, (p.0 + 5.0, p.1 - 2.0)))).unwrap();
        for (a, b) in h.to_row_major().iter().zip(Homography::translation(5.0, -2.0).to_row_major()) {
            assert!((a - b).abs() < 1e-9);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let truth = random_homography(&mut rng);
        let pairs: Vec<_> = (0..8)
            .map(|_| {
                let p = (rng.random_range(0.0..320.0), rng.random_range(0.0..240.0));
                (p, oracle_warp(truth.to_row_major(), p.0, p.1))
            })
            .collect();
        let h = dlt_homography(&pairs).unwrap();
        for (s, d) in &pairs {
            assert!(close(h.warp_point(*s).unwrap(), *d, 1e-6));
        }
    }

    #[test]
    fn dlt_rejects_degenerate() {
        let line = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (0.0, 5.0)];
        assert!(dlt_homography(&line.map(|p| (p, p))).is_err());
        assert!(dlt_homography(&[((0.0, 0.0), (0.0, 0.0)); 3]).is_err());
    }

    #[test]
    fn serde_round_trip_uses_nine_numbers() {
        let h = Homography::translation(1.5, -2.0);
        let s = serde_json::to_string(&h).unwrap();
        assert_eq!(s, "[1.0,0.0,1.5,0.0,1.0,-2.0,0.0,0.0,1.0]");
        let back: Homography = serde_json::from_str(&s).unwrap();
        assert_eq!(back, h);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn arb_h() -> impl Strategy<Value = Homography> {
            (
                -0.2..0.2f64,
                -0.2..0.2f64,
                -30.0..30.0f64,
                -0.2..0.2f64,
                -0.2..0.2f64,
                -30.0..30.0f64,
                -4e-4..4e-4f64,
                -4e-4..4e-4f64,
            )
                .prop_map(|(a, b, c, d, e, f, g, h)| {
                    Homography::from_row_major([1.0 + a, b, c, d, 1.0 + e, f, g, h, 1.0]).unwrap()
                })
        }

        proptest! {
            #[test]
            fn composition_is_associative_on_points(
                a in arb_h(), b in arb_h(), c in arb_h(),
                x in 0.0..320.0f64, y in 0.0..240.0f64,
            ) {
                let left = a.compose(&b.compose(&c).unwrap()).unwrap();
                let right = a.compose(&b).unwrap().compose(&c).unwrap();
                let p = left.warp_point((x, y)).unwrap();
                let q = right.warp_point((x, y)).unwrap();
                prop_assert!((p.0 - q.0).abs() < 1e-8 && (p.1 - q.1).abs() < 1e-8);
                prop_assert_eq!(left.to_row_major()[8], 1.0);
            }

            #[test]
            fn solve_update_descends(
                seed in 0u64..1000,
                offset in (-3.0..3.0f64, -3.0..3.0f64),
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let terms: Vec<_> = (0..12).map(|_| {
                    let end = (rng.random_range(0.0..320.0), rng.random_range(0.0..240.0));
                    let start = (end.0 + offset.0 + rng.random_range(-0.5..0.5),
                                 end.1 + offset.1 + rng.random_range(-0.5..0.5));
                    (start, end, rng.random_range(0.1..1.0))
                }).collect();
                let r = WeightedResiduals::assemble(terms);
                prop_assume!(r.weighted_sse() > 1e-12);
                let dp = solve_update(&r, 7680.0, &DEFAULT_MASK).unwrap();
                let at_zero = r.quadratic_model(&ParamDelta::zero(), 7680.0, &DEFAULT_MASK);
                let at_dp = r.quadratic_model(&dp, 7680.0, &DEFAULT_MASK);
                prop_assert!(at_dp < at_zero);
            }
        }
    }
}
