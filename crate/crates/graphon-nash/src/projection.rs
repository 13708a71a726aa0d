//! Closed convex constraint sets, Euclidean projections, and projections onto
//! linear images `ΣᵀA` of a set.
//!
//! Only images with an exact projection are supported; every other
//! combination is rejected with [`ProjectionError::Unsupported`].

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used for set membership tests.
pub const MEMBERSHIP_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error("invalid constraint set: {0}")]
    Invalid(String),
    #[error("unsupported transformed projection: {0}")]
    Unsupported(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Admissible strategy set `A ⊂ ℝ^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintSet {
    FullSpace,
    NonNegativeOrthant,
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    /// `{a : normal·a ≤ offset}`
    HalfSpace { normal: Vec<f64>, offset: f64 },
}

impl Default for ConstraintSet {
    fn default() -> Self {
        ConstraintSet::FullSpace
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl ConstraintSet {
    /// Dimension fixed by the variant's data, if any.
    pub fn dim(&self) -> Option<usize> {
        match self {
            ConstraintSet::FullSpace | ConstraintSet::NonNegativeOrthant => None,
            ConstraintSet::Box { lower, .. } => Some(lower.len()),
            ConstraintSet::Ball { center, .. } => Some(center.len()),
            ConstraintSet::HalfSpace { normal, .. } => Some(normal.len()),
        }
    }

    /// Checks nonemptiness and well-formedness for ambient dimension `d`.
    pub fn validate(&self, d: usize) -> Result<(), ProjectionError> {
        if let Some(k) = self.dim() {
            if k != d {
                return Err(ProjectionError::Dimension { expected: d, got: k });
            }
        }
        match self {
            ConstraintSet::Box { lower, upper } => {
                if upper.len() != lower.len() {
                    return Err(ProjectionError::Dimension { expected: lower.len(), got: upper.len() });
                }
                for (c, (l, u)) in lower.iter().zip(upper).enumerate() {
                    if l.is_nan() || u.is_nan() || l > u {
                        return Err(ProjectionError::Invalid(format!(
                            "box bounds out of order in component {c}: [{l}, {u}]"
                        )));
                    }
                }
            }
            ConstraintSet::Ball { center, radius } => {
                if !(radius.is_finite() && *radius >= 0.0) || center.iter().any(|c| !c.is_finite()) {
                    return Err(ProjectionError::Invalid(format!("ball radius {radius} must be finite and >= 0")));
                }
            }
            ConstraintSet::HalfSpace { normal, offset } => {
                if norm(normal) == 0.0 || !offset.is_finite() {
                    return Err(ProjectionError::Invalid("half-space normal must be nonzero".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        match self {
            ConstraintSet::FullSpace => true,
            ConstraintSet::NonNegativeOrthant => x.iter().all(|v| *v >= -tol),
            ConstraintSet::Box { lower, upper } => x
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol),
            ConstraintSet::Ball { center, radius } => {
                let diff: Vec<f64> = x.iter().zip(center).map(|(a, b)| a - b).collect();
                norm(&diff) <= radius + tol
            }
            ConstraintSet::HalfSpace { normal, offset } => dot(normal, x) <= offset + tol,
        }
    }

    /// Interval `[lo, hi]` of a one-dimensional set.
    pub fn interval(&self) -> (f64, f64) {
        match self {
            ConstraintSet::FullSpace => (f64::NEG_INFINITY, f64::INFINITY),
            ConstraintSet::NonNegativeOrthant => (0.0, f64::INFINITY),
            ConstraintSet::Box { lower, upper } => (lower[0], upper[0]),
            ConstraintSet::Ball { center, radius } => (center[0] - radius, center[0] + radius),
            ConstraintSet::HalfSpace { normal, offset } => {
                if normal[0] > 0.0 {
                    (f64::NEG_INFINITY, offset / normal[0])
                } else {
                    (offset / normal[0], f64::INFINITY)
                }
            }
        }
    }

    /// Componentwise bounding box (possibly infinite) of the set.
    pub fn bounding_box(&self, d: usize) -> (Vec<f64>, Vec<f64>) {
        match self {
            ConstraintSet::FullSpace | ConstraintSet::HalfSpace { .. } if d > 1 => {
                (vec![f64::NEG_INFINITY; d], vec![f64::INFINITY; d])
            }
            ConstraintSet::NonNegativeOrthant => (vec![0.0; d], vec![f64::INFINITY; d]),
            ConstraintSet::Box { lower, upper } => (lower.clone(), upper.clone()),
            ConstraintSet::Ball { center, radius } => (
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            ),
            _ => {
                let (lo, hi) = self.interval();
                (vec![lo; d], vec![hi; d])
            }
        }
    }
}

/// Euclidean projection of `x` onto `set`.
pub fn project(set: &ConstraintSet, x: &[f64]) -> Vec<f64> {
    match set {
        ConstraintSet::FullSpace => x.to_vec(),
        ConstraintSet::NonNegativeOrthant => x.iter().map(|v| v.max(0.0)).collect(),
        ConstraintSet::Box { lower, upper } => x
            .iter()
            .zip(lower.iter().zip(upper))
            .map(|(v, (l, u))| v.clamp(*l, *u))
            .collect(),
        ConstraintSet::Ball { center, radius } => {
            let diff: Vec<f64> = x.iter().zip(center).map(|(a, b)| a - b).collect();
            let r = norm(&diff);
            if r <= *radius {
                x.to_vec()
            } else {
                let s = radius / r;
                center.iter().zip(&diff).map(|(c, v)| c + s * v).collect()
            }
        }
        ConstraintSet::HalfSpace { normal, offset } => {
            let excess = dot(normal, x) - offset;
            if excess <= 0.0 {
                x.to_vec()
            } else {
                let nn = dot(normal, normal);
                x.iter().zip(normal).map(|(v, n)| v - excess / nn * n).collect()
            }
        }
    }
}

#[derive(Clone, Debug)]
enum ImageKind {
    /// d = 1: the image is `{s·a : a ∈ [lo, hi]}`.
    Segment { s: Vec<f64>, s2: f64, lo: f64, hi: f64 },
    /// Column space of Σᵀ with orthonormal basis `q`.
    Subspace { q: DMatrix<f64> },
    /// Half-space inside the column space.
    HalfSpace { q: DMatrix<f64>, w: Vec<f64>, offset: f64 },
    /// Image of a ball: an ellipsoid inside the column space.
    Ellipsoid {
        s: DMatrix<f64>,
        shift: Vec<f64>,
        vecs: DMatrix<f64>,
        vals: Vec<f64>,
        radius: f64,
    },
    /// Axis-aligned box in the first `d` coordinates, zero elsewhere.
    AxisBox { lo: Vec<f64>, hi: Vec<f64> },
}

/// Precomputed projector onto `ΣᵀA` for a fixed `Σᵀ` (k×d) and set `A`.
#[derive(Clone, Debug)]
pub struct TransformedProjector {
    k: usize,
    d: usize,
    kind: ImageKind,
}

impl TransformedProjector {
    pub fn new(sigma_t: &DMatrix<f64>, set: &ConstraintSet) -> Result<Self, ProjectionError> {
        let (k, d) = sigma_t.shape();
        set.validate(d)?;
        if d == 0 || k < d {
            return Err(ProjectionError::Dimension { expected: d, got: k });
        }
        let q = || sigma_t.clone().qr().q();
        let kind = if d == 1 {
            let s: Vec<f64> = sigma_t.column(0).iter().copied().collect();
            let s2 = dot(&s, &s);
            if s2 == 0.0 {
                return Err(ProjectionError::Invalid("zero loading column".into()));
            }
            let (lo, hi) = set.interval();
            ImageKind::Segment { s, s2, lo, hi }
        } else {
            match set {
                ConstraintSet::FullSpace => ImageKind::Subspace { q: q() },
                ConstraintSet::HalfSpace { normal, offset } => {
                    let gram = sigma_t.transpose() * sigma_t;
                    let inv = gram
                        .try_inverse()
                        .ok_or_else(|| ProjectionError::Invalid("singular Σᵀ".into()))?;
                    let w = sigma_t * (inv * DVector::from_column_slice(normal));
                    ImageKind::HalfSpace { q: q(), w: w.iter().copied().collect(), offset: *offset }
                }
                ConstraintSet::Ball { center, radius } => {
                    let gram = sigma_t.transpose() * sigma_t;
                    let eig = gram.symmetric_eigen();
                    let shift = sigma_t * DVector::from_column_slice(center);
                    ImageKind::Ellipsoid {
                        s: sigma_t.clone(),
                        shift: shift.iter().copied().collect(),
                        vecs: eig.eigenvectors,
                        vals: eig.eigenvalues.iter().copied().collect(),
                        radius: *radius,
                    }
                }
                ConstraintSet::Box { .. } | ConstraintSet::NonNegativeOrthant => {
                    let diagonal = (0..k).all(|r| {
                        (0..d).all(|c| r == c || sigma_t[(r, c)] == 0.0)
                    }) && (0..d).all(|c| sigma_t[(c, c)] != 0.0);
                    if !diagonal {
                        return Err(ProjectionError::Unsupported(format!(
                            "box-type set with d = {d} needs diagonal σ and zero common loading"
                        )));
                    }
                    let (l, u) = set.bounding_box(d);
                    let mut lo = Vec::with_capacity(d);
                    let mut hi = Vec::with_capacity(d);
                    for c in 0..d {
                        let s = sigma_t[(c, c)];
                        let (a, b) = if s > 0.0 { (s * l[c], s * u[c]) } else { (s * u[c], s * l[c]) };
                        lo.push(a);
                        hi.push(b);
                    }
                    ImageKind::AxisBox { lo, hi }
                }
            }
        };
        Ok(TransformedProjector { k, d, kind })
    }

    pub fn image_dim(&self) -> usize {
        self.k
    }

    pub fn domain_dim(&self) -> usize {
        self.d
    }

    /// Projection of `z ∈ ℝ^k` onto the image set.
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        debug_assert_eq!(z.len(), self.k);
        match &self.kind {
            ImageKind::Segment { s, s2, lo, hi } => {
                let a = (dot(s, z) / s2).clamp(*lo, *hi);
                s.iter().map(|v| v * a).collect()
            }
            ImageKind::Subspace { q } => subspace(q, z),
            ImageKind::HalfSpace { q, w, offset } => {
                let mut y = subspace(q, z);
                let excess = dot(w, &y) - offset;
                if excess > 0.0 {
                    let ww = dot(w, w);
                    for (yi, wi) in y.iter_mut().zip(w) {
                        *yi -= excess / ww * wi;
                    }
                }
                y
            }
            ImageKind::Ellipsoid { s, shift, vecs, vals, radius } => {
                let zc: Vec<f64> = z.iter().zip(shift).map(|(a, b)| a - b).collect();
                let h = s.transpose() * DVector::from_column_slice(&zc);
                let coef: Vec<f64> = (0..self.d).map(|i| vecs.column(i).dot(&h)).collect();
                let solve = |mu: f64| -> DVector<f64> {
                    let mut b = DVector::zeros(self.d);
                    for i in 0..self.d {
                        b += vecs.column(i) * (coef[i] / (vals[i] + mu));
                    }
                    b
                };
                let mut b = solve(0.0);
                if b.norm() > *radius {
                    let phi = |mu: f64| -> f64 {
                        coef.iter().zip(vals).map(|(c, l)| (c / (l + mu)).powi(2)).sum::<f64>()
                    };
                    let r2 = radius * radius;
                    let mut lo = 0.0;
                    let mut hi = h.norm() / radius.max(f64::MIN_POSITIVE);
                    while phi(hi) > r2 {
                        hi *= 2.0;
                    }
                    for _ in 0..200 {
                        let mid = 0.5 * (lo + hi);
                        if mid <= lo || mid >= hi {
                            break;
                        }
                        if phi(mid) > r2 {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    b = solve(hi);
                    let nb = b.norm();
                    if nb > 0.0 {
                        b *= radius / nb;
                    }
                }
                let y = s * b;
                y.iter().zip(shift).map(|(a, c)| a + c).collect()
            }
            ImageKind::AxisBox { lo, hi } => {
                let mut y = vec![0.0; self.k];
                for c in 0..self.d {
                    y[c] = z[c].clamp(lo[c], hi[c]);
                }
                y
            }
        }
    }
}

fn subspace(q: &DMatrix<f64>, z: &[f64]) -> Vec<f64> {
    let zv = DVector::from_column_slice(z);
    let y = q * (q.transpose() * zv);
    y.iter().copied().collect()
}

/// Projection of `z` onto `ΣᵀA`; see [`TransformedProjector`].
pub fn project_transformed(
    sigma_t: &DMatrix<f64>,
    set: &ConstraintSet,
    z: &[f64],
) -> Result<Vec<f64>, ProjectionError> {
    let p = TransformedProjector::new(sigma_t, set)?;
    if z.len() != p.k {
        return Err(ProjectionError::Dimension { expected: p.k, got: z.len() });
    }
    Ok(p.apply(z))
}

/// Linear-growth constant `C₀` with `|P(x)| ≤ |x| + C₀`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthCertificate {
    pub c0: f64,
    pub zero_in_set: bool,
}

pub fn growth_certificate(
    set: &ConstraintSet,
    sigma_t: &DMatrix<f64>,
    samples: usize,
) -> Result<GrowthCertificate, ProjectionError> {
    let p = TransformedProjector::new(sigma_t, set)?;
    let zero_in_set = set.contains(&vec![0.0; p.d], MEMBERSHIP_TOL);
    if zero_in_set {
        return Ok(GrowthCertificate { c0: 0.0, zero_in_set });
    }
    let mut c0 = norm(&p.apply(&vec![0.0; p.k]));
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6f77);
    for _ in 0..samples {
        let x: Vec<f64> = (0..p.k).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let excess = norm(&p.apply(&x)) - norm(&x);
        if excess > c0 {
            c0 = excess;
        }
    }
    Ok(GrowthCertificate { c0, zero_in_set })
}
