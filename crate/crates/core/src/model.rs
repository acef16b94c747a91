//! Tile metadata, transformation models and coefficient packing.
//!
//! Every model is linear in its coefficients: a point `(x, y)` in tile-local
//! pixel coordinates is mapped to world coordinates `(u, v)` by evaluating a
//! monomial basis and taking two dot products, one with the `u` coefficients
//! and one with the `v` coefficients. Coefficients are packed `u` block first,
//! then `v` block, each ordered like the basis:
//!
//! | model         | basis                                   | coefficients |
//! |---------------|-----------------------------------------|--------------|
//! | `Translation` | `[1]` (plus an implicit identity)       | 2            |
//! | `RigidApprox` | `[x, y]`                                | 4            |
//! | `Affine`      | `[x, y, 1]`                             | 6            |
//! | `Poly2`       | `[x, y, 1, x², xy, y²]`                 | 12           |
//! | `Poly3`       | Poly2 followed by `[x³, x²y, xy², y³]`  | 20           |
//!
//! For the affine model this gives the packing `(a1, a2, a0, a4, a5, a3)` with
//! `u = a1·x + a2·y + a0` and `v = a4·x + a5·y + a3`.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for Point2 {
    fn from(v: [f64; 2]) -> Self {
        Point2::new(v[0], v[1])
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

/// One acquired image tile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileSpec {
    pub tile_id: String,
    pub z: i64,
    pub width: f64,
    pub height: f64,
}

impl TileSpec {
    pub fn new(tile_id: impl Into<String>, z: i64, width: f64, height: f64) -> Result<Self> {
        let tile = Self {
            tile_id: tile_id.into(),
            z,
            width,
            height,
        };
        tile.validate()?;
        Ok(tile)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_id.is_empty() {
            return Err(Error::InvalidInput("empty tile_id".into()));
        }
        if !(self.width > 0.0 && self.width.is_finite() && self.height > 0.0 && self.height.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "tile `{}` has non-positive size {}x{}",
                self.tile_id, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Corners in tile-local coordinates, counter-clockwise from the origin.
    pub fn corners(&self) -> [Point2; 4] {
        [
            Point2::new(0.0, 0.0),
            Point2::new(self.width, 0.0),
            Point2::new(self.width, self.height),
            Point2::new(0.0, self.height),
        ]
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Translation,
    RigidApprox,
    Affine,
    Poly2,
    Poly3,
}

/// Regularization class of a single coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    Translation,
    Linear,
    Quadratic,
    Cubic,
}

const TRANSLATION_DEGREES: [u8; 1] = [0];
const RIGID_DEGREES: [u8; 2] = [1, 1];
const AFFINE_DEGREES: [u8; 3] = [1, 1, 0];
const POLY2_DEGREES: [u8; 6] = [1, 1, 0, 2, 2, 2];
const POLY3_DEGREES: [u8; 10] = [1, 1, 0, 2, 2, 2, 3, 3, 3, 3];

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Translation,
        ModelKind::RigidApprox,
        ModelKind::Affine,
        ModelKind::Poly2,
        ModelKind::Poly3,
    ];

    /// Number of basis monomials per output coordinate.
    pub const fn basis_len(self) -> usize {
        match self {
            ModelKind::Translation => 1,
            ModelKind::RigidApprox => 2,
            ModelKind::Affine => 3,
            ModelKind::Poly2 => 6,
            ModelKind::Poly3 => 10,
        }
    }

    /// `n_c`, the number of coefficients per tile.
    pub const fn coeffs_per_tile(self) -> usize {
        2 * self.basis_len()
    }

    /// Total degree of each basis term, in basis order.
    pub fn term_degrees(self) -> &'static [u8] {
        match self {
            ModelKind::Translation => &TRANSLATION_DEGREES,
            ModelKind::RigidApprox => &RIGID_DEGREES,
            ModelKind::Affine => &AFFINE_DEGREES,
            ModelKind::Poly2 => &POLY2_DEGREES,
            ModelKind::Poly3 => &POLY3_DEGREES,
        }
    }

    /// Regularization class of each basis term, in basis order.
    pub fn term_classes(self) -> impl Iterator<Item = ParamClass> {
        self.term_degrees().iter().map(|d| match d {
            0 => ParamClass::Translation,
            1 => ParamClass::Linear,
            2 => ParamClass::Quadratic,
            _ => ParamClass::Cubic,
        })
    }

    /// Index of the constant term within the basis, if the model has one.
    pub fn constant_term(self) -> Option<usize> {
        match self {
            ModelKind::Translation => Some(0),
            ModelKind::RigidApprox => None,
            _ => Some(2),
        }
    }

    /// The translation model maps `p` to `p + t`; its identity part is not a
    /// coefficient and moves to the right-hand side during assembly.
    pub const fn has_implicit_identity(self) -> bool {
        matches!(self, ModelKind::Translation)
    }

    pub const fn name(self) -> &'static str {
        match self {
            ModelKind::Translation => "translation",
            ModelKind::RigidApprox => "rigid_approx",
            ModelKind::Affine => "affine",
            ModelKind::Poly2 => "poly2",
            ModelKind::Poly3 => "poly3",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "translation" => Ok(ModelKind::Translation),
            "rigid_approx" | "rigid" => Ok(ModelKind::RigidApprox),
            "affine" => Ok(ModelKind::Affine),
            "poly2" | "polynomial2" => Ok(ModelKind::Poly2),
            "poly3" | "polynomial3" => Ok(ModelKind::Poly3),
            other => Err(Error::InvalidInput(format!("unknown model `{other}`"))),
        }
    }
}

/// Writes the monomial basis of `kind` evaluated at `p` into `out`.
///
/// `out` must hold at least `kind.basis_len()` values.
#[inline]
pub fn fill_basis(kind: ModelKind, p: Point2, out: &mut [f64]) {
    let (x, y) = (p.x, p.y);
    match kind {
        ModelKind::Translation => out[0] = 1.0,
        ModelKind::RigidApprox => {
            out[0] = x;
            out[1] = y;
        }
        ModelKind::Affine => {
            out[0] = x;
            out[1] = y;
            out[2] = 1.0;
        }
        ModelKind::Poly2 | ModelKind::Poly3 => {
            out[0] = x;
            out[1] = y;
            out[2] = 1.0;
            out[3] = x * x;
            out[4] = x * y;
            out[5] = y * y;
            if kind == ModelKind::Poly3 {
                out[6] = x * x * x;
                out[7] = x * x * y;
                out[8] = x * y * y;
                out[9] = y * y * y;
            }
        }
    }
}

pub fn basis_row(kind: ModelKind, p: Point2) -> Vec<f64> {
    let mut out = vec![0.0; kind.basis_len()];
    fill_basis(kind, p, &mut out);
    out
}

/// Columns owned by the tile at `tile_index` in the packed parameter vector.
pub fn param_offset(tile_index: usize, kind: ModelKind) -> Range<usize> {
    let nc = kind.coeffs_per_tile();
    tile_index * nc..(tile_index + 1) * nc
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    #[serde(rename = "model")]
    pub kind: ModelKind,
    pub coeffs: Vec<f64>,
}

impl TransformParams {
    pub fn new(kind: ModelKind, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != kind.coeffs_per_tile() {
            return Err(Error::InvalidInput(format!(
                "{kind} expects {} coefficients, got {}",
                kind.coeffs_per_tile(),
                coeffs.len()
            )));
        }
        Ok(Self { kind, coeffs })
    }

    pub fn identity(kind: ModelKind) -> Self {
        let mut coeffs = vec![0.0; kind.coeffs_per_tile()];
        if !kind.has_implicit_identity() {
            let nb = kind.basis_len();
            // x feeds u, y feeds v; both are the first two basis terms.
            coeffs[0] = 1.0;
            coeffs[nb + 1] = 1.0;
        }
        Self { kind, coeffs }
    }

    /// Affine transform from its 2x2 linear part `[[m1, m2], [m3, m4]]` and
    /// translation `t`.
    pub fn affine(linear: [f64; 4], t: [f64; 2]) -> Self {
        let [m1, m2, m3, m4] = linear;
        Self {
            kind: ModelKind::Affine,
            coeffs: vec![m1, m2, t[0], m3, m4, t[1]],
        }
    }

    pub fn u_coeffs(&self) -> &[f64] {
        &self.coeffs[..self.kind.basis_len()]
    }

    pub fn v_coeffs(&self) -> &[f64] {
        &self.coeffs[self.kind.basis_len()..]
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let nb = self.kind.basis_len();
        let mut basis = [0.0; 10];
        fill_basis(self.kind, p, &mut basis);
        let (cu, cv) = self.coeffs.split_at(nb);
        let mut u = 0.0;
        let mut v = 0.0;
        for k in 0..nb {
            u += basis[k] * cu[k];
            v += basis[k] * cv[k];
        }
        if self.kind.has_implicit_identity() {
            u += p.x;
            v += p.y;
        }
        Point2::new(u, v)
    }

    /// Linear part `[m1, m2, m3, m4]` (the x/y coefficients of u and v).
    ///
    /// For polynomial models this is the Jacobian at the tile origin.
    pub fn linear_part(&self) -> [f64; 4] {
        match self.kind {
            ModelKind::Translation => [1.0, 0.0, 0.0, 1.0],
            _ => {
                let nb = self.kind.basis_len();
                [self.coeffs[0], self.coeffs[1], self.coeffs[nb], self.coeffs[nb + 1]]
            }
        }
    }

    /// Translation part `(t1, t2)`, zero for models without a constant term.
    pub fn translation_part(&self) -> [f64; 2] {
        match self.kind.constant_term() {
            Some(k) => [self.coeffs[k], self.coeffs[self.kind.basis_len() + k]],
            None => [0.0, 0.0],
        }
    }

    /// Jacobian `[du/dx, du/dy, dv/dx, dv/dy]` at `p`.
    pub fn jacobian(&self, p: Point2) -> [f64; 4] {
        let (x, y) = (p.x, p.y);
        let nb = self.kind.basis_len();
        let grad = |c: &[f64]| -> (f64, f64) {
            match self.kind {
                ModelKind::Translation => (0.0, 0.0),
                ModelKind::RigidApprox | ModelKind::Affine => (c[0], c[1]),
                ModelKind::Poly2 | ModelKind::Poly3 => {
                    let mut dx = c[0] + 2.0 * c[3] * x + c[4] * y;
                    let mut dy = c[1] + c[4] * x + 2.0 * c[5] * y;
                    if self.kind == ModelKind::Poly3 {
                        dx += 3.0 * c[6] * x * x + 2.0 * c[7] * x * y + c[8] * y * y;
                        dy += c[7] * x * x + 2.0 * c[8] * x * y + 3.0 * c[9] * y * y;
                    }
                    (dx, dy)
                }
            }
        };
        let (ux, uy) = grad(&self.coeffs[..nb]);
        let (vx, vy) = grad(&self.coeffs[nb..]);
        if self.kind.has_implicit_identity() {
            [1.0, 0.0, 0.0, 1.0]
        } else {
            [ux, uy, vx, vy]
        }
    }

    /// Finds the tile-local point mapping to `world`, by Newton iteration
    /// started from the inverse of the affine part.
    pub fn inverse_apply(&self, world: Point2) -> Option<Point2> {
        let [m1, m2, m3, m4] = self.linear_part();
        let [t1, t2] = self.translation_part();
        let det = m1 * m4 - m2 * m3;
        if det.abs() < 1e-300 {
            return None;
        }
        let (dx, dy) = (world.x - t1, world.y - t2);
        let mut p = Point2::new((m4 * dx - m2 * dy) / det, (m1 * dy - m3 * dx) / det);
        if matches!(self.kind, ModelKind::Translation | ModelKind::RigidApprox | ModelKind::Affine) {
            return Some(p);
        }
        for _ in 0..50 {
            let f = self.apply(p);
            let (ru, rv) = (f.x - world.x, f.y - world.y);
            let [a, b, c, d] = self.jacobian(p);
            let det = a * d - b * c;
            if det.abs() < 1e-300 {
                return None;
            }
            let step = Point2::new((d * ru - b * rv) / det, (a * rv - c * ru) / det);
            p = Point2::new(p.x - step.x, p.y - step.y);
            if step.x.abs() + step.y.abs() <= 1e-14 * (1.0 + p.x.abs() + p.y.abs()) {
                return Some(p);
            }
        }
        let f = self.apply(p);
        (f.distance(&world) <= 1e-9 * (1.0 + world.x.abs() + world.y.abs())).then_some(p)
    }

    /// Re-expresses the transform under another model.
    ///
    /// Lifting to a richer model is exact; projecting to a poorer one keeps the
    /// shared terms and drops the rest (a translation keeps `t + L·0`).
    pub fn convert_to(&self, kind: ModelKind) -> TransformParams {
        if kind == self.kind {
            return self.clone();
        }
        let [m1, m2, m3, m4] = self.linear_part();
        let [t1, t2] = self.translation_part();
        let mut out = TransformParams::identity(kind);
        match kind {
            ModelKind::Translation => out.coeffs = vec![t1, t2],
            ModelKind::RigidApprox => out.coeffs = vec![m1, m2, m3, m4],
            _ => {
                let nb = kind.basis_len();
                out.coeffs.iter_mut().for_each(|c| *c = 0.0);
                out.coeffs[0] = m1;
                out.coeffs[1] = m2;
                out.coeffs[2] = t1;
                out.coeffs[nb] = m3;
                out.coeffs[nb + 1] = m4;
                out.coeffs[nb + 2] = t2;
                // carry over shared higher-order terms
                if matches!(self.kind, ModelKind::Poly2 | ModelKind::Poly3) {
                    let src_nb = self.kind.basis_len();
                    let shared = src_nb.min(nb);
                    for k in 3..shared {
                        out.coeffs[k] = self.coeffs[k];
                        out.coeffs[nb + k] = self.coeffs[src_nb + k];
                    }
                }
            }
        }
        out
    }
}

pub fn apply_transform(t: &TransformParams, p: Point2) -> Point2 {
    t.apply(p)
}

/// Absolute determinant of the 2x2 linear part of an affine or rigid-approx
/// transform.
pub fn linear_area_scale(t: &TransformParams) -> Result<f64> {
    match t.kind {
        ModelKind::Affine | ModelKind::RigidApprox => {
            let [m1, m2, m3, m4] = t.linear_part();
            Ok((m1 * m4 - m2 * m3).abs())
        }
        kind => Err(Error::UnsupportedModel {
            kind,
            op: "linear_area_scale",
        }),
    }
}
