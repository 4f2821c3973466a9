//! Scenario geometry: positions, the RIS element grid, delays and the
//! near-field validity window.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cartesian point in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position3 {
    pub const ORIGIN: Position3 = Position3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn distance(&self, other: &Position3) -> f64 {
        (*self - *other).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_polar(&self) -> Result<PolarPosition> {
        cartesian_to_polar(self)
    }
}

impl Sub for Position3 {
    type Output = Position3;
    fn sub(self, o: Position3) -> Position3 {
        Position3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Add for Position3 {
    type Output = Position3;
    fn add(self, o: Position3) -> Position3 {
        Position3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Mul<f64> for Position3 {
    type Output = Position3;
    fn mul(self, k: f64) -> Position3 {
        Position3::new(self.x * k, self.y * k, self.z * k)
    }
}

/// Spherical coordinates about the RIS reference element.
///
/// `azimuth` lies in (-pi, pi], `elevation` in [0, pi] and is measured
/// from the +z axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarPosition {
    pub distance: f64,
    pub azimuth: f64,
    pub elevation: f64,
}

impl PolarPosition {
    /// Validating constructor.
    pub fn new(distance: f64, azimuth: f64, elevation: f64) -> Result<Self> {
        if !(distance > 0.0) || !distance.is_finite() {
            return Err(Error::DegenerateGeometry(format!(
                "polar distance must be positive, got {distance}"
            )));
        }
        if !(azimuth > -PI && azimuth <= PI) {
            return Err(Error::InvalidParameter(format!(
                "azimuth {azimuth} outside (-pi, pi]"
            )));
        }
        if !(0.0..=PI).contains(&elevation) {
            return Err(Error::InvalidParameter(format!(
                "elevation {elevation} outside [0, pi]"
            )));
        }
        Ok(Self { distance, azimuth, elevation })
    }

    pub fn to_cartesian(&self) -> Position3 {
        polar_to_cartesian(self)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.distance, self.azimuth, self.elevation]
    }

    /// Maps arbitrary raw coordinates (for example after a gradient step)
    /// back into the canonical ranges by a cartesian round trip.
    pub fn canonical(distance: f64, azimuth: f64, elevation: f64) -> Result<Self> {
        let raw = PolarPosition { distance, azimuth, elevation };
        cartesian_to_polar(&polar_to_cartesian(&raw))
    }

    /// Guards against the poles, where azimuth is unidentifiable.
    pub fn ensure_off_axis(&self) -> Result<()> {
        if self.elevation.sin().abs() < 1e-12 {
            return Err(Error::DegenerateGeometry(
                "elevation at a pole; azimuth is unidentifiable".into(),
            ));
        }
        Ok(())
    }
}

pub fn cartesian_to_polar(p: &Position3) -> Result<PolarPosition> {
    let d = p.norm();
    if d == 0.0 || !p.is_finite() {
        return Err(Error::DegenerateGeometry(
            "cannot convert the origin (or a non-finite point) to polar form".into(),
        ));
    }
    // atan2 keeps the quadrant; map -pi to +pi to stay in (-pi, pi].
    let mut az = p.y.atan2(p.x);
    if az <= -PI {
        az += 2.0 * PI;
    }
    let el = (p.z / d).clamp(-1.0, 1.0).acos();
    Ok(PolarPosition { distance: d, azimuth: az, elevation: el })
}

pub fn polar_to_cartesian(p: &PolarPosition) -> Position3 {
    let (se, ce) = p.elevation.sin_cos();
    let (sa, ca) = p.azimuth.sin_cos();
    Position3::new(p.distance * se * ca, p.distance * se * sa, p.distance * ce)
}

/// Jacobian of `polar_to_cartesian`; columns are d/d(distance, azimuth, elevation).
pub fn polar_jacobian(p: &PolarPosition) -> Matrix3<f64> {
    let d = p.distance;
    let (se, ce) = p.elevation.sin_cos();
    let (sa, ca) = p.azimuth.sin_cos();
    Matrix3::new(
        se * ca, -d * se * sa, d * ca * ce,
        se * sa, d * se * ca, d * sa * ce,
        ce, 0.0, -d * se,
    )
}

fn grid_side(n_elements: usize) -> Result<usize> {
    let side = (n_elements as f64).sqrt().round() as usize;
    if n_elements == 0 || side * side != n_elements {
        return Err(Error::InvalidParameter(format!(
            "RIS element count {n_elements} is not a positive perfect square"
        )));
    }
    Ok(side)
}

/// Position of element `index` (1-based) on the row-major yz-plane grid.
pub fn ris_element_position(index: usize, n_elements: usize, spacing: f64) -> Result<Position3> {
    let side = grid_side(n_elements)?;
    if index == 0 || index > n_elements {
        return Err(Error::IndexOutOfRange { index, max: n_elements });
    }
    let r = index - 1;
    Ok(Position3::new(0.0, spacing * (r % side) as f64, spacing * (r / side) as f64))
}

/// Uniform planar RIS on the yz plane with its first element at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct RisGeometry {
    n_elements: usize,
    spacing: f64,
    element_positions: Vec<Position3>,
}

impl RisGeometry {
    pub fn new(n_elements: usize, spacing: f64) -> Result<Self> {
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(Error::InvalidParameter(format!("RIS spacing must be positive, got {spacing}")));
        }
        let element_positions = (1..=n_elements)
            .map(|r| ris_element_position(r, n_elements, spacing))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { n_elements, spacing, element_positions })
    }

    pub fn n_elements(&self) -> usize {
        self.n_elements
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn side(&self) -> usize {
        grid_side(self.n_elements).expect("validated at construction")
    }

    pub fn element_positions(&self) -> &[Position3] {
        &self.element_positions
    }

    /// Diagonal aperture of the array.
    pub fn aperture(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.spacing * (self.side() as f64 - 1.0)
    }
}

pub fn propagation_delay(a: &Position3, b: &Position3, c_light: f64) -> Result<f64> {
    let d = a.distance(b);
    if d == 0.0 {
        return Err(Error::DegenerateGeometry("propagation delay between coincident points".into()));
    }
    Ok(d / c_light)
}

/// Closed interval `[0.62 sqrt(D^3/lambda), 2 D^2/lambda]`.
pub fn fresnel_interval(geometry: &RisGeometry, wavelength: f64) -> (f64, f64) {
    let d = geometry.aperture();
    (0.62 * (d.powi(3) / wavelength).sqrt(), 2.0 * d * d / wavelength)
}

pub fn fresnel_region_check(distance: f64, geometry: &RisGeometry, wavelength: f64) -> bool {
    let (lo, hi) = fresnel_interval(geometry, wavelength);
    distance >= lo && distance <= hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn polar_examples() {
        let p = cartesian_to_polar(&Position3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(p.as_array(), [1.0, 0.0, 0.0]);
        let p = cartesian_to_polar(&Position3::new(2.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(p.distance, 2.0);
        assert_relative_eq!(p.elevation, PI / 2.0);
        let p = cartesian_to_polar(&Position3::new(1.0, 1.0, 2f64.sqrt())).unwrap();
        assert_relative_eq!(p.distance, 2.0, epsilon = 1e-15);
        assert_relative_eq!(p.azimuth, PI / 4.0, epsilon = 1e-15);
        assert_relative_eq!(p.elevation, PI / 4.0, epsilon = 1e-15);
    }

    #[test]
    fn origin_is_rejected() {
        assert!(matches!(
            cartesian_to_polar(&Position3::ORIGIN),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn quadrant_is_preserved() {
        let p = cartesian_to_polar(&Position3::new(-1.0, -1.0, 0.0)).unwrap();
        assert_relative_eq!(p.azimuth, -3.0 * PI / 4.0, epsilon = 1e-15);
        let p = cartesian_to_polar(&Position3::new(-1.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(p.azimuth, PI);
    }

    #[test]
    fn cartesian_examples() {
        let c = polar_to_cartesian(&PolarPosition::new(1.0, 0.0, 0.0).unwrap());
        assert_eq!((c.x, c.y, c.z), (0.0, 0.0, 1.0));
        let c = polar_to_cartesian(&PolarPosition::new(2.0, PI / 2.0, PI / 2.0).unwrap());
        assert!(c.x.abs() < 1e-15 && (c.y - 2.0).abs() < 1e-15 && c.z.abs() < 1e-15);
        let c = polar_to_cartesian(&PolarPosition::new(3.0, PI / 4.0, PI / 3.0).unwrap());
        let e = 3.0 * (3f64.sqrt() / 2.0) * (2f64.sqrt() / 2.0);
        assert_relative_eq!(c.x, e, epsilon = 1e-14);
        assert_relative_eq!(c.y, e, epsilon = 1e-14);
        assert_relative_eq!(c.z, 1.5, epsilon = 1e-14);
    }

    #[test]
    fn element_positions() {
        let p = ris_element_position(1, 81, 0.05).unwrap();
        assert_eq!((p.x, p.y, p.z), (0.0, 0.0, 0.0));
        let p = ris_element_position(2, 81, 0.05).unwrap();
        assert_eq!((p.x, p.y, p.z), (0.0, 0.05, 0.0));
        let p = ris_element_position(10, 81, 0.05).unwrap();
        assert_eq!((p.x, p.y, p.z), (0.0, 0.0, 0.05));
        assert!(matches!(
            ris_element_position(82, 81, 0.05),
            Err(Error::IndexOutOfRange { index: 82, max: 81 })
        ));
        assert!(ris_element_position(0, 81, 0.05).is_err());
        assert!(ris_element_position(1, 80, 0.05).is_err());
    }

    #[test]
    fn delays() {
        let a = Position3::new(2.0, -2.0, 1.0);
        assert_relative_eq!(propagation_delay(&a, &Position3::ORIGIN, 3e8).unwrap(), 1e-8, epsilon = 1e-22);
        let c = 3e8;
        let b = Position3::new(0.3, 0.1, -0.2);
        assert_relative_eq!(propagation_delay(&(b + Position3::new(c, 0.0, 0.0)), &b, c).unwrap(), 1.0);
        assert_eq!(
            propagation_delay(&a, &b, c).unwrap(),
            propagation_delay(&b, &a, c).unwrap()
        );
        assert!(propagation_delay(&a, &a, c).is_err());
    }

    #[test]
    fn fresnel_window() {
        // The quoted D = 1.2117 m and [2.53, 27.4] m correspond to a
        // full-wavelength pitch; a half-wavelength pitch halves D.
        let lambda = 3e8 / 2.8e9;
        let g = RisGeometry::new(81, lambda).unwrap();
        assert_relative_eq!(g.aperture(), 1.2117, epsilon = 1e-3);
        let (lo, hi) = fresnel_interval(&g, lambda);
        assert_relative_eq!(lo, 2.53, epsilon = 5e-3);
        assert_relative_eq!(hi, 27.4, epsilon = 5e-2);
        assert!(fresnel_region_check(3.0, &g, lambda));
        assert!(!fresnel_region_check(lo * 0.999, &g, lambda));
        assert!(fresnel_region_check(hi, &g, lambda));

        let half = RisGeometry::new(81, lambda / 2.0).unwrap();
        assert_relative_eq!(half.aperture(), 1.2117 / 2.0, epsilon = 1e-3);
        let (lo, hi) = fresnel_interval(&half, lambda);
        assert!(lo < 1.0 && hi > 6.8);
        assert!(fresnel_region_check(3.0, &half, lambda));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let p = PolarPosition::new(2.7, 0.6, 1.2).unwrap();
        let j = polar_jacobian(&p);
        let h = 1e-6;
        for k in 0..3 {
            let mut a = p.as_array();
            let mut b = p.as_array();
            a[k] += h;
            b[k] -= h;
            let pa = polar_to_cartesian(&PolarPosition { distance: a[0], azimuth: a[1], elevation: a[2] });
            let pb = polar_to_cartesian(&PolarPosition { distance: b[0], azimuth: b[1], elevation: b[2] });
            let fd = (pa - pb) * (0.5 / h);
            assert_relative_eq!(fd.x, j[(0, k)], epsilon = 1e-8);
            assert_relative_eq!(fd.y, j[(1, k)], epsilon = 1e-8);
            assert_relative_eq!(fd.z, j[(2, k)], epsilon = 1e-8);
        }
        let axis = polar_jacobian(&PolarPosition::new(1.0, 0.0, PI / 2.0).unwrap());
        let expect = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!((axis - expect).norm() < 1e-15);
    }
}
