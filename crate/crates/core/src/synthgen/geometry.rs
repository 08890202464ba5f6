//! Surface samplers for the part primitives. Every sampler draws points
//! uniformly by area in the primitive's canonical frame (y up).

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A parameterized surface. Canonical frames:
/// - `Disk`: radius in the y = 0 plane, centred on the origin.
/// - `CylinderShell`: open side wall, axis y, from y = 0 to y = height.
/// - `BoxPanel`: all six faces of a box of the given size, centred.
/// - `TorusArc`: tube of radius `minor` around a circle of radius `major` in
///   the xy plane, spanning `arc` radians centred on +x.
/// - `Rod`: thin open cylinder along y, centred.
/// - `Cap`: spherical dome with base radius `radius` on y = 0, rising to
///   y = height.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Disk { radius: f64 },
    CylinderShell { radius: f64, height: f64 },
    BoxPanel { size: [f64; 3] },
    TorusArc { major: f64, minor: f64, arc: f64 },
    Rod { radius: f64, length: f64 },
    Cap { radius: f64, height: f64 },
}

impl Primitive {
    fn params(&self) -> Vec<f64> {
        match *self {
            Primitive::Disk { radius } => vec![radius],
            Primitive::CylinderShell { radius, height } => vec![radius, height],
            Primitive::BoxPanel { size } => size.to_vec(),
            Primitive::TorusArc { major, minor, arc } => vec![major, minor, arc],
            Primitive::Rod { radius, length } => vec![radius, length],
            Primitive::Cap { radius, height } => vec![radius, height],
        }
    }

    fn with_params(&self, p: &[f64]) -> Self {
        match self {
            Primitive::Disk { .. } => Primitive::Disk { radius: p[0] },
            Primitive::CylinderShell { .. } => Primitive::CylinderShell { radius: p[0], height: p[1] },
            Primitive::BoxPanel { .. } => Primitive::BoxPanel { size: [p[0], p[1], p[2]] },
            Primitive::TorusArc { .. } => Primitive::TorusArc { major: p[0], minor: p[1], arc: p[2] },
            Primitive::Rod { .. } => Primitive::Rod { radius: p[0], length: p[1] },
            Primitive::Cap { .. } => Primitive::Cap { radius: p[0], height: p[1] },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Primitive::Disk { .. } => "disk",
            Primitive::CylinderShell { .. } => "cylinder_shell",
            Primitive::BoxPanel { .. } => "box_panel",
            Primitive::TorusArc { .. } => "torus_arc",
            Primitive::Rod { .. } => "rod",
            Primitive::Cap { .. } => "cap",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.params();
        if p.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Generator(format!("{} needs positive parameters, got {p:?}", self.kind())));
        }
        if let Primitive::TorusArc { major, minor, arc } = *self {
            if minor >= major || arc > TAU {
                return Err(Error::Generator(format!(
                    "torus arc needs minor < major and arc ≤ 2π, got {major}, {minor}, {arc}"
                )));
            }
        }
        Ok(())
    }

    /// Independent uniform draw of every parameter between two bounds of the
    /// same kind.
    pub fn draw_between<R: Rng + ?Sized>(low: &Self, high: &Self, rng: &mut R) -> Result<Self> {
        let (a, b) = Self::bounds(low, high)?;
        let p: Vec<f64> = a
            .iter()
            .zip(&b)
            .map(|(&lo, &hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo })
            .collect();
        Ok(low.with_params(&p))
    }

    pub fn midpoint(low: &Self, high: &Self) -> Result<Self> {
        let (a, b) = Self::bounds(low, high)?;
        let p: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
        Ok(low.with_params(&p))
    }

    fn bounds(low: &Self, high: &Self) -> Result<(Vec<f64>, Vec<f64>)> {
        if low.kind() != high.kind() {
            return Err(Error::Generator(format!(
                "parameter range mixes {} and {}",
                low.kind(),
                high.kind()
            )));
        }
        low.validate()?;
        high.validate()?;
        let (a, b) = (low.params(), high.params());
        if a.iter().zip(&b).any(|(x, y)| x > y) {
            return Err(Error::Generator(format!("{} range has low > high", low.kind())));
        }
        Ok((a, b))
    }

    /// One point uniformly by area.
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 3] {
        match *self {
            Primitive::Disk { radius } => {
                let r = radius * rng.random::<f64>().sqrt();
                let t = rng.random_range(0.0..TAU);
                [r * t.cos(), 0.0, r * t.sin()]
            }
            Primitive::CylinderShell { radius, height } => {
                let t = rng.random_range(0.0..TAU);
                [radius * t.cos(), rng.random_range(0.0..=height), radius * t.sin()]
            }
            Primitive::Rod { radius, length } => {
                let t = rng.random_range(0.0..TAU);
                let y = rng.random_range(-0.5 * length..=0.5 * length);
                [radius * t.cos(), y, radius * t.sin()]
            }
            Primitive::BoxPanel { size } => sample_box(size, rng),
            Primitive::TorusArc { major, minor, arc } => loop {
                // Area element is proportional to major + minor·cos v.
                let u = rng.random_range(-0.5 * arc..=0.5 * arc);
                let v = rng.random_range(-PI..PI);
                let w = major + minor * v.cos();
                if rng.random::<f64>() * (major + minor) <= w {
                    break [w * u.cos(), w * u.sin(), minor * v.sin()];
                }
            },
            Primitive::Cap { radius, height } => {
                // A spherical zone's area is linear in its height.
                let sphere = (radius * radius + height * height) / (2.0 * height);
                let y = rng.random_range(sphere - height..=sphere);
                let ring = (sphere * sphere - y * y).max(0.0).sqrt();
                let t = rng.random_range(0.0..TAU);
                [ring * t.cos(), y - (sphere - height), ring * t.sin()]
            }
        }
    }
}

fn sample_box<R: Rng + ?Sized>(size: [f64; 3], rng: &mut R) -> [f64; 3] {
    let [x, y, z] = size;
    let areas = [y * z, x * z, x * y];
    let total = 2.0 * (areas[0] + areas[1] + areas[2]);
    let mut pick = rng.random::<f64>() * total;
    let mut axis = 2;
    for (i, a) in areas.iter().enumerate() {
        if pick < 2.0 * a {
            axis = i;
            break;
        }
        pick -= 2.0 * a;
    }
    let mut p = [0.0; 3];
    for (i, v) in p.iter_mut().enumerate() {
        let half = 0.5 * size[i];
        *v = if i == axis {
            if rng.random::<bool>() { half } else { -half }
        } else {
            rng.random_range(-half..=half)
        };
    }
    p
}

/// Scale, then rotate (x, then y, then z, in degrees), then translate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    #[serde(default = "unit_scale")]
    pub scale: [f64; 3],
    #[serde(default)]
    pub rotate: [f64; 3],
    #[serde(default)]
    pub translate: [f64; 3],
}

fn unit_scale() -> [f64; 3] {
    [1.0; 3]
}

impl Default for Transform {
    fn default() -> Self {
        Self {
            scale: unit_scale(),
            rotate: [0.0; 3],
            translate: [0.0; 3],
        }
    }
}

impl Transform {
    pub fn at(translate: [f64; 3]) -> Self {
        Self {
            translate,
            ..Self::default()
        }
    }

    pub fn rotated(mut self, rotate: [f64; 3]) -> Self {
        self.rotate = rotate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale.iter().any(|s| !s.is_finite() || s.abs() < 1e-12) {
            return Err(Error::Generator(format!("degenerate transform scale {:?}", self.scale)));
        }
        if self.rotate.iter().chain(&self.translate).any(|v| !v.is_finite()) {
            return Err(Error::Generator("non-finite transform".into()));
        }
        Ok(())
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let [ax, ay, az] = self.rotate.map(f64::to_radians);
        let rx = [[1.0, 0.0, 0.0], [0.0, ax.cos(), -ax.sin()], [0.0, ax.sin(), ax.cos()]];
        let ry = [[ay.cos(), 0.0, ay.sin()], [0.0, 1.0, 0.0], [-ay.sin(), 0.0, ay.cos()]];
        let rz = [[az.cos(), -az.sin(), 0.0], [az.sin(), az.cos(), 0.0], [0.0, 0.0, 1.0]];
        let r = mat_mul(&rz, &mat_mul(&ry, &rx));
        let mut m = r;
        for row in &mut m {
            for (j, v) in row.iter_mut().enumerate() {
                *v *= self.scale[j];
            }
        }
        m
    }

    pub fn apply(&self, m: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
        let mut out = self.translate;
        for (i, o) in out.iter_mut().enumerate() {
            *o += m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2];
        }
        out
    }
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// `n` area-uniform points on `shape`, placed by `transform`, with isotropic
/// Gaussian jitter of standard deviation `jitter`.
pub fn sample_surface<R: Rng + ?Sized>(
    shape: &Primitive,
    transform: &Transform,
    n: usize,
    jitter: f64,
    rng: &mut R,
) -> Result<Vec<[f64; 3]>> {
    if n == 0 {
        return Err(Error::Generator("a part needs at least one point".into()));
    }
    shape.validate()?;
    transform.validate()?;
    let noise = Normal::new(0.0, jitter).map_err(|e| Error::Generator(format!("jitter {jitter}: {e}")))?;
    let m = transform.matrix();
    Ok((0..n)
        .map(|_| {
            let p = transform.apply(&m, shape.sample_point(rng));
            if jitter > 0.0 {
                [p[0] + noise.sample(rng), p[1] + noise.sample(rng), p[2] + noise.sample(rng)]
            } else {
                p
            }
        })
        .collect())
}
