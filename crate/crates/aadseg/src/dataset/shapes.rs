//! Parametric shape families and their rasterization.
//!
//! A shape is a membership predicate over local coordinates (u, v), both
//! roughly in [-1, 1]. Rasterization evaluates pixel centers. Two jitter
//! knobs per family plus axis swap/mirror give intra-class variation.

use super::raster::Mask;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeFamily {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Star,
    Bar,
    LShape,
    Ellipse,
    Diamond,
    Crescent,
    TShape,
}

pub const ALL_FAMILIES: [ShapeFamily; 12] = [
    ShapeFamily::Disk,
    ShapeFamily::Square,
    ShapeFamily::Triangle,
    ShapeFamily::Cross,
    ShapeFamily::Ring,
    ShapeFamily::Star,
    ShapeFamily::Bar,
    ShapeFamily::LShape,
    ShapeFamily::Ellipse,
    ShapeFamily::Diamond,
    ShapeFamily::Crescent,
    ShapeFamily::TShape,
];

impl ShapeFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ShapeFamily::Disk => "disk",
            ShapeFamily::Square => "square",
            ShapeFamily::Triangle => "triangle",
            ShapeFamily::Cross => "cross",
            ShapeFamily::Ring => "ring",
            ShapeFamily::Star => "star",
            ShapeFamily::Bar => "bar",
            ShapeFamily::LShape => "l_shape",
            ShapeFamily::Ellipse => "ellipse",
            ShapeFamily::Diamond => "diamond",
            ShapeFamily::Crescent => "crescent",
            ShapeFamily::TShape => "t_shape",
        }
    }

    pub fn parse(s: &str) -> Option<ShapeFamily> {
        ALL_FAMILIES.into_iter().find(|f| f.name() == s)
    }
}

/// Per-sample shape variation drawn from the sample rng.
#[derive(Clone, Copy, Debug)]
pub struct ShapeJitter {
    pub a: f64,
    pub b: f64,
    pub swap_axes: bool,
    pub mirror: bool,
}

impl ShapeJitter {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        ShapeJitter {
            a: rng.random::<f64>(),
            b: rng.random::<f64>(),
            swap_axes: rng.random::<f64>() < 0.5,
            mirror: rng.random::<f64>() < 0.5,
        }
    }

    pub const NEUTRAL: ShapeJitter = ShapeJitter { a: 0.5, b: 0.5, swap_axes: false, mirror: false };
}

fn contains(family: ShapeFamily, mut u: f64, mut v: f64, j: &ShapeJitter) -> bool {
    if j.swap_axes {
        std::mem::swap(&mut u, &mut v);
    }
    if j.mirror {
        u = -u;
    }
    let a = j.a;
    match family {
        ShapeFamily::Disk => u * u + v * v <= 1.0,
        ShapeFamily::Square => u.abs().max(v.abs()) <= 1.0,
        ShapeFamily::Triangle => (-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) / 2.0,
        ShapeFamily::Cross => {
            let t = 0.28 + 0.14 * a;
            (u.abs() <= t && v.abs() <= 1.0) || (v.abs() <= t && u.abs() <= 1.0)
        }
        ShapeFamily::Ring => {
            let r2 = u * u + v * v;
            let inner = 0.5 + 0.15 * a;
            r2 <= 1.0 && r2 >= inner * inner
        }
        ShapeFamily::Star => {
            let r = (u * u + v * v).sqrt();
            let theta = v.atan2(u);
            let phase = std::f64::consts::TAU * a;
            let limit = 0.45 + 0.55 * (0.5 + 0.5 * (5.0 * theta + phase).cos());
            r <= limit
        }
        ShapeFamily::Bar => {
            let t = 0.2 + 0.12 * a;
            u.abs() <= 1.0 && v.abs() <= t
        }
        ShapeFamily::LShape => {
            let t = -0.15 - 0.15 * a;
            (u <= t && u >= -1.0 && v.abs() <= 1.0)
                || (v >= -t && v <= 1.0 && u.abs() <= 1.0)
        }
        ShapeFamily::Ellipse => {
            let e = 0.36 + 0.14 * a;
            u * u + (v / e) * (v / e) <= 1.0
        }
        ShapeFamily::Diamond => u.abs() + v.abs() <= 1.0,
        ShapeFamily::Crescent => {
            let d = 0.42 + 0.12 * a;
            u * u + v * v <= 1.0 && (u - d) * (u - d) + v * v >= 0.78 * 0.78
        }
        ShapeFamily::TShape => {
            let tw = 0.22 + 0.12 * a;
            (v >= -1.0 && v <= -0.4 && u.abs() <= 1.0) || (u.abs() <= tw && v.abs() <= 1.0)
        }
    }
}

/// Rasterize a family instance centered at (cx, cy) with half-extents
/// (sx, sy) in pixels, evaluating membership at pixel centers.
pub fn render_mask(
    family: ShapeFamily,
    cx: f64,
    cy: f64,
    sx: f64,
    sy: f64,
    width: usize,
    height: usize,
    jitter: &ShapeJitter,
) -> Mask {
    let mut mask = Mask::empty(width, height);
    let x_lo = ((cx - sx - 1.0).floor().max(0.0)) as usize;
    let x_hi = ((cx + sx + 1.0).ceil().min(width as f64)) as usize;
    let y_lo = ((cy - sy - 1.0).floor().max(0.0)) as usize;
    let y_hi = ((cy + sy + 1.0).ceil().min(height as f64)) as usize;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let u = (x as f64 + 0.5 - cx) / sx;
            let v = (y as f64 + 0.5 - cy) / sy;
            if contains(family, u, v, jitter) {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for f in ALL_FAMILIES {
            assert_eq!(ShapeFamily::parse(f.name()), Some(f));
        }
        assert_eq!(ShapeFamily::parse("hexagon"), None);
    }

    #[test]
    fn every_family_renders_nonempty_within_bounds() {
        for f in ALL_FAMILIES {
            let m = render_mask(f, 32.0, 32.0, 12.0, 12.0, 64, 64, &ShapeJitter::NEUTRAL);
            assert!(m.fg_count() > 0, "{} rendered empty", f.name());
            let (x0, y0, x1, y1) = m.bbox().unwrap();
            assert!(x0 >= 18 && y0 >= 18 && x1 <= 45 && y1 <= 45, "{} out of extent", f.name());
        }
    }

    #[test]
    fn disk_area_close_to_analytic() {
        let m = render_mask(ShapeFamily::Disk, 32.0, 32.0, 14.0, 14.0, 64, 64, &ShapeJitter::NEUTRAL);
        let area = m.fg_count() as f64;
        let expected = std::f64::consts::PI * 14.0 * 14.0;
        assert!((area - expected).abs() / expected < 0.05);
    }
}
