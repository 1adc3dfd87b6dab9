//! Safety set 𝕏, envelope Ω, action set 𝔸 and action ellipsoid Φ.
//!
//! Both 𝕏 and 𝔸 are affine boxes `lo ≤ M·x − offset ≤ hi`; the containment
//! tests are the row conditions on `M̄ Q M̄ᵀ` / `M̲ Q M̲ᵀ` with `Q` the inverse
//! of the ellipsoid matrix.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, quad_form, spd_inverse};
use crate::lmi::Sense;

/// Slack allowed on the row tests so that exactly inscribed ellipsoids pass.
const ROW_TOL: f64 = 1e-12;
/// Boundary points used by the sampling cross-check.
pub const VALIDATION_SAMPLES: usize = 200;
const VALIDATION_SEED: u64 = 0x5afe;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct AffineBox {
    pub map: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub hi: DVector<f64>,
    pub lo: DVector<f64>,
}

/// `v̲ ≤ D·s − v ≤ v̄`
pub type SafetySpec = AffineBox;
/// `z̲ ≤ C·a − z ≤ z̄`
pub type ActionSpec = AffineBox;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox {
    matrix: Vec<Vec<f64>>,
    offset: Vec<f64>,
    upper: Vec<f64>,
    lower: Vec<f64>,
}

impl TryFrom<RawBox> for AffineBox {
    type Error = Error;

    fn try_from(r: RawBox) -> Result<Self> {
        let h = r.matrix.len();
        let n = r.matrix.first().map(|row| row.len()).unwrap_or(0);
        if r.matrix.iter().any(|row| row.len() != n) {
            return Err(Error::Config("constraint matrix rows have different lengths".into()));
        }
        let flat: Vec<f64> = r.matrix.concat();
        AffineBox::new(
            DMatrix::from_row_slice(h, n, &flat),
            DVector::from_vec(r.offset),
            DVector::from_vec(r.upper),
            DVector::from_vec(r.lower),
        )
    }
}

impl From<AffineBox> for RawBox {
    fn from(b: AffineBox) -> Self {
        RawBox {
            matrix: b.map.row_iter().map(|r| r.iter().cloned().collect()).collect(),
            offset: b.offset.iter().cloned().collect(),
            upper: b.hi.iter().cloned().collect(),
            lower: b.lo.iter().cloned().collect(),
        }
    }
}

impl AffineBox {
    pub fn new(map: DMatrix<f64>, offset: DVector<f64>, hi: DVector<f64>, lo: DVector<f64>) -> Result<Self> {
        let h = map.nrows();
        if h == 0 || map.ncols() == 0 {
            return Err(Error::Config("constraint matrix is empty".into()));
        }
        if offset.len() != h || hi.len() != h || lo.len() != h {
            return Err(Error::Config(format!(
                "box has {h} rows but offset/upper/lower have {}/{}/{} entries",
                offset.len(),
                hi.len(),
                lo.len()
            )));
        }
        if map.iter().chain(offset.iter()).chain(hi.iter()).chain(lo.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("box data must be finite".into()));
        }
        if let Some(i) = (0..h).find(|&i| lo[i] > hi[i]) {
            return Err(Error::Config(format!("row {i}: lower bound {} exceeds upper bound {}", lo[i], hi[i])));
        }
        Ok(AffineBox { map, offset, hi, lo })
    }

    /// Symmetric box on selected coordinates: `|x_k| ≤ bound_k`.
    pub fn symmetric(map: DMatrix<f64>, bounds: &[f64]) -> Result<Self> {
        let hi = DVector::from_column_slice(bounds);
        AffineBox::new(map, DVector::zeros(bounds.len()), hi.clone(), -hi)
    }

    pub fn rows(&self) -> usize {
        self.map.nrows()
    }

    pub fn dim(&self) -> usize {
        self.map.ncols()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        let y = &self.map * x - &self.offset;
        (0..self.rows()).all(|i| y[i] <= self.hi[i] + tol && y[i] >= self.lo[i] - tol)
    }

    /// Scale row `i` of the matrix and the matching offset and bounds by `c`.
    pub fn scale_row(&self, i: usize, c: f64) -> Self {
        let mut out = self.clone();
        out.map.row_mut(i).scale_mut(c);
        out.offset[i] *= c;
        out.hi[i] *= c;
        out.lo[i] *= c;
        out
    }
}

/// Scaled constraint matrices `M̄ = Λ̄⁻¹M`, `M̲ = Λ̲⁻¹M` and sign vector `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledConstraints {
    pub upper: DMatrix<f64>,
    pub lower: DMatrix<f64>,
    pub signs: Vec<i8>,
}

pub fn scaled_constraint_data(spec: &AffineBox) -> Result<ScaledConstraints> {
    let h = spec.rows();
    let mut upper = spec.map.clone();
    let mut lower = spec.map.clone();
    let mut signs = Vec::with_capacity(h);
    for i in 0..h {
        let lo = spec.lo[i] + spec.offset[i];
        let hi = spec.hi[i] + spec.offset[i];
        // "=" cases fall through to the last branch.
        let (d, lam_hi, lam_lo) = if lo > 0.0 {
            (1, hi, lo)
        } else if hi < 0.0 {
            (1, lo, hi)
        } else {
            (-1, hi, -lo)
        };
        for (which, lam) in [("upper", lam_hi), ("lower", lam_lo)] {
            if lam == 0.0 {
                return Err(Error::DegenerateConstraint {
                    row: i,
                    reason: format!("{which} scaling denominator is zero"),
                });
            }
        }
        upper.row_mut(i).unscale_mut(lam_hi);
        lower.row_mut(i).unscale_mut(lam_lo);
        signs.push(d);
    }
    Ok(ScaledConstraints { upper, lower, signs })
}

/// One row test `row · Q · rowᵀ (≤|≥) 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct RowCondition {
    pub row: usize,
    pub upper_side: bool,
    pub value: f64,
    pub sense: Sense,
}

impl RowCondition {
    /// Positive when satisfied.
    pub fn margin(&self) -> f64 {
        match self.sense {
            Sense::Le => 1.0 - self.value,
            Sense::Ge => self.value - 1.0,
        }
    }

    pub fn holds(&self) -> bool {
        self.margin() >= -ROW_TOL
    }
}

/// Row conditions of the containment test for an ellipsoid `{x : xᵀ Q⁻¹ x ≤ 1}`.
pub fn row_conditions(q: &DMatrix<f64>, spec: &AffineBox) -> Result<Vec<RowCondition>> {
    if q.shape() != (spec.dim(), spec.dim()) {
        return Err(Error::Structural(format!(
            "ellipsoid is {}x{}, constraint dimension is {}",
            q.nrows(),
            q.ncols(),
            spec.dim()
        )));
    }
    let s = scaled_constraint_data(spec)?;
    let mut out = Vec::with_capacity(2 * spec.rows());
    for i in 0..spec.rows() {
        let u = s.upper.row(i);
        let l = s.lower.row(i);
        out.push(RowCondition { row: i, upper_side: true, value: (u * q * u.transpose())[(0, 0)], sense: Sense::Le });
        let sense = if s.signs[i] == 1 { Sense::Ge } else { Sense::Le };
        out.push(RowCondition { row: i, upper_side: false, value: (l * q * l.transpose())[(0, 0)], sense });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    p: DMatrix<f64>,
}

impl Envelope {
    pub fn new(p: DMatrix<f64>) -> Result<Self> {
        if !p.is_square() {
            return Err(Error::Structural("envelope matrix must be square".into()));
        }
        if min_eigenvalue(&p)? <= 0.0 {
            return Err(Error::Numerical("envelope matrix is not positive definite".into()));
        }
        Ok(Envelope { p })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionEllipsoid {
    v: DMatrix<f64>,
}

impl ActionEllipsoid {
    pub fn new(v: DMatrix<f64>) -> Result<Self> {
        if !v.is_square() {
            return Err(Error::Structural("action ellipsoid matrix must be square".into()));
        }
        if min_eigenvalue(&v)? <= 0.0 {
            return Err(Error::Numerical("action ellipsoid matrix is not positive definite".into()));
        }
        Ok(ActionEllipsoid { v })
    }

    pub fn scaled_identity(beta: f64, m: usize) -> Result<Self> {
        Self::new(DMatrix::identity(m, m) * beta)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.v
    }
}

pub fn envelope_value(env: &Envelope, s: &DVector<f64>) -> f64 {
    quad_form(&env.p, s)
}

/// Seeded points on `{x : xᵀ M x = 1}`: Gaussian draws normalized by the M-norm.
pub fn ellipsoid_boundary_samples(m: &DMatrix<f64>, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = m.nrows();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let g = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let norm = quad_form(m, &g).sqrt();
        if norm > 1e-12 {
            out.push(g / norm);
        }
    }
    out
}

fn contained(m: &DMatrix<f64>, spec: &AffineBox) -> Result<bool> {
    let q = spd_inverse(m, "ellipsoid matrix")?;
    if !row_conditions(&q, spec)?.iter().all(RowCondition::holds) {
        return Ok(false);
    }
    let samples = ellipsoid_boundary_samples(m, VALIDATION_SAMPLES, VALIDATION_SEED);
    Ok(samples.iter().all(|x| spec.contains(x, 1e-9)))
}

/// Ω ⊆ 𝕏 by the row conditions, cross-checked on sampled boundary points.
pub fn envelope_within_safety_set(env: &Envelope, spec: &SafetySpec) -> Result<bool> {
    contained(&env.p, spec)
}

/// Φ ⊆ 𝔸 by the row conditions, cross-checked on sampled boundary points.
pub fn ellipsoid_within_action_set(ell: &ActionEllipsoid, spec: &ActionSpec) -> Result<bool> {
    contained(&ell.v, spec)
}

/// The cart-pole safety set: |x| ≤ 0.9 m, |θ| ≤ 0.8 rad.
pub fn cartpole_safety_spec() -> SafetySpec {
    let d = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    AffineBox::symmetric(d, &[0.9, 0.8]).expect("static spec")
}

/// The cart-pole model-based action set: |F·s| ≤ 25 N.
pub fn cartpole_action_spec() -> ActionSpec {
    AffineBox::symmetric(DMatrix::identity(1, 1), &[25.0]).expect("static spec")
}
