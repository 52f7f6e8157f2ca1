//! Cartesian point clouds, region-of-interest filtering and the CSV point format.

use std::io::{BufRead, Write};

use crate::error::{Result, VelodyneError};
use crate::packet::PolarPoint;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartesianPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub reflectivity: Option<u8>,
}

/// Sensor frame: x right, y forward, z up.
pub fn to_cartesian(p: &PolarPoint) -> (f64, f64, f64) {
    let (w, a) = (p.elevation.to_radians(), p.azimuth.to_radians());
    (p.r * w.cos() * a.sin(), p.r * w.cos() * a.cos(), p.r * w.sin())
}

/// One revolution of returns in polar form.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolarFrame {
    pub index: u64,
    pub start_timestamp_us: u64,
    pub points: Vec<PolarPoint>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloudFrame {
    pub index: u64,
    pub start_timestamp_us: u64,
    pub points: Vec<CartesianPoint>,
}

impl PointCloudFrame {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Same frame header with a different point list.
    pub fn with_points(&self, points: Vec<CartesianPoint>) -> Self {
        PointCloudFrame { index: self.index, start_timestamp_us: self.start_timestamp_us, points }
    }
}

impl From<&PolarFrame> for PointCloudFrame {
    fn from(f: &PolarFrame) -> Self {
        let points = f
            .points
            .iter()
            .map(|p| {
                let (x, y, z) = to_cartesian(p);
                CartesianPoint { x, y, z, reflectivity: Some(p.reflectivity) }
            })
            .collect();
        PointCloudFrame { index: f.index, start_timestamp_us: f.start_timestamp_us, points }
    }
}

/// Axis-aligned box in the horizontal plane, bounds inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl RoiBox {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        if !(x_min < x_max && y_min < y_max) {
            return Err(VelodyneError::Roi(format!("need min < max, got x {x_min}..{x_max}, y {y_min}..{y_max}")));
        }
        Ok(RoiBox { x_min, x_max, y_min, y_max })
    }

    pub fn contains(&self, p: &CartesianPoint) -> bool {
        (self.x_min..=self.x_max).contains(&p.x) && (self.y_min..=self.y_max).contains(&p.y)
    }
}

impl Default for RoiBox {
    /// 20 m wide, 60 m ahead of the sensor.
    fn default() -> Self {
        RoiBox { x_min: -10.0, x_max: 10.0, y_min: 0.0, y_max: 60.0 }
    }
}

impl std::str::FromStr for RoiBox {
    type Err = VelodyneError;

    /// `x0,x1,y0,y1`
    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| VelodyneError::Roi(format!("`{s}`: {e}")))?;
        match v.as_slice() {
            [x0, x1, y0, y1] => RoiBox::new(*x0, *x1, *y0, *y1),
            _ => Err(VelodyneError::Roi(format!("`{s}`: expected x0,x1,y0,y1"))),
        }
    }
}

pub fn roi_filter(frame: &PointCloudFrame, roi: &RoiBox) -> PointCloudFrame {
    frame.with_points(frame.points.iter().copied().filter(|p| roi.contains(p)).collect())
}

/// Write `x,y,z[,reflectivity]` lines under a header.
pub fn write_points_csv<W: Write>(mut w: W, points: &[CartesianPoint], with_reflectivity: bool) -> Result<()> {
    if with_reflectivity {
        writeln!(w, "x,y,z,reflectivity")?;
    } else {
        writeln!(w, "x,y,z")?;
    }
    for p in points {
        match (with_reflectivity, p.reflectivity) {
            (true, Some(r)) => writeln!(w, "{},{},{},{}", p.x, p.y, p.z, r)?,
            (true, None) => writeln!(w, "{},{},{},0", p.x, p.y, p.z)?,
            (false, _) => writeln!(w, "{},{},{}", p.x, p.y, p.z)?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a CSV point file. A header line is optional; blank lines are skipped.
pub fn read_points_csv<R: BufRead>(r: R) -> Result<Vec<CartesianPoint>> {
    let mut points = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with('x')) {
            continue;
        }
        let bad = |what: &str| VelodyneError::PointFile(format!("line {}: {what}", lineno + 1));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(bad("expected 3 or 4 fields"));
        }
        let coord = |i: usize| -> Result<f64> {
            let v: f64 = fields[i].parse().map_err(|_| bad("not a number"))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(bad("non-finite coordinate"))
            }
        };
        let reflectivity = match fields.get(3) {
            Some(f) => Some(f.parse::<u8>().map_err(|_| bad("reflectivity must be 0..255"))?),
            None => None,
        };
        points.push(CartesianPoint { x: coord(0)?, y: coord(1)?, z: coord(2)?, reflectivity });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn polar(r: f64, azimuth: f64, elevation: f64) -> PolarPoint {
        PolarPoint { r, azimuth, elevation, reflectivity: 0, laser_id: 0, t_offset: 0.0 }
    }

    #[test]
    fn axis_convention() {
        assert_eq!(to_cartesian(&polar(0.0, 123.0, 7.0)), (0.0, 0.0, 0.0));
        assert_eq!(to_cartesian(&polar(5.0, 0.0, 0.0)), (0.0, 5.0, 0.0));
        let (x, y, _) = to_cartesian(&polar(5.0, 90.0, 0.0));
        assert!((x - 5.0).abs() < 1e-12 && y.abs() < 1e-12);
    }

    #[test]
    fn roi_is_closed_and_drops_far_points() {
        let roi = RoiBox::default();
        let pt = |x, y| CartesianPoint { x, y, z: 0.0, reflectivity: None };
        let f = PointCloudFrame { points: vec![pt(10.0, 5.0), pt(0.0, 100.0), pt(-10.0, 0.0)], ..Default::default() };
        assert_eq!(roi_filter(&f, &roi).points, vec![pt(10.0, 5.0), pt(-10.0, 0.0)]);
        assert!(RoiBox::new(1.0, 1.0, 0.0, 1.0).is_err());
        assert_eq!("-10,10,0,60".parse::<RoiBox>().unwrap(), roi);
    }

    #[test]
    fn csv_round_trip() {
        let pts = vec![
            CartesianPoint { x: 0.1, y: -2.5e-7, z: 3.0, reflectivity: Some(7) },
            CartesianPoint { x: 1e-300, y: 12345.678, z: -0.0, reflectivity: Some(255) },
        ];
        let mut buf = Vec::new();
        write_points_csv(&mut buf, &pts, true).unwrap();
        assert_eq!(read_points_csv(&buf[..]).unwrap(), pts);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().skip(1).all(|l| !l.contains('e')));
    }

    #[test]
    fn csv_errors() {
        assert!(read_points_csv(&b"x,y,z\n1,2\n"[..]).is_err());
        assert!(read_points_csv(&b"1,2,abc\n"[..]).is_err());
    }
}
