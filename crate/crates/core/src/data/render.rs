//! Procedural rasterizer for the synthetic concept domain.

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Circle,
    Square,
    Triangle,
    Star,
    Cross,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 5] = [
        ShapeFamily::Circle,
        ShapeFamily::Square,
        ShapeFamily::Triangle,
        ShapeFamily::Star,
        ShapeFamily::Cross,
    ];

    /// Shape family standing in for a class noun.
    pub fn for_noun(noun: &str) -> Option<Self> {
        Some(match noun {
            "dog" => ShapeFamily::Circle,
            "duck" => ShapeFamily::Square,
            "cat" => ShapeFamily::Triangle,
            "backpack" => ShapeFamily::Star,
            "teddybear" => ShapeFamily::Cross,
            _ => return None,
        })
    }

    fn rotates(self) -> bool {
        !matches!(self, ShapeFamily::Circle)
    }

    /// Whether the point `(x, y)` (already rotated into the shape frame and
    /// divided by the radius) lies inside the unit shape.
    fn contains(self, x: f64, y: f64) -> bool {
        match self {
            ShapeFamily::Circle => x * x + y * y <= 1.0,
            ShapeFamily::Square => x.abs() <= 0.82 && y.abs() <= 0.82,
            ShapeFamily::Triangle => {
                // Equilateral, apex up, circumradius 1.
                let (ax, ay) = (0.0, -1.0);
                let (bx, by) = (-0.866, 0.5);
                let (cx, cy) = (0.866, 0.5);
                let s1 = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let s2 = (cx - bx) * (y - by) - (cy - by) * (x - bx);
                let s3 = (ax - cx) * (y - cy) - (ay - cy) * (x - cx);
                (s1 >= 0.0 && s2 >= 0.0 && s3 >= 0.0) || (s1 <= 0.0 && s2 <= 0.0 && s3 <= 0.0)
            }
            ShapeFamily::Star => {
                let r = (x * x + y * y).sqrt();
                if r > 1.0 {
                    return false;
                }
                let angle = y.atan2(x) + std::f64::consts::FRAC_PI_2;
                let sector = std::f64::consts::TAU / 5.0;
                let a = angle.rem_euclid(sector) / sector;
                // Tips at a = 0 and 1, inner vertices at a = 0.5.
                r <= 0.45 + 0.55 * (2.0 * a - 1.0).abs()
            }
            ShapeFamily::Cross => {
                (x.abs() <= 0.34 && y.abs() <= 1.0) || (y.abs() <= 0.34 && x.abs() <= 1.0)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Plain,
    HorizontalStripes,
    VerticalStripes,
    Checker,
}

impl Texture {
    pub fn from_seed(seed: u64) -> Self {
        match seed % 3 {
            0 => Texture::HorizontalStripes,
            1 => Texture::VerticalStripes,
            _ => Texture::Checker,
        }
    }

    /// 1.0 where the pattern darkens the fill.
    fn mask(self, px: usize, py: usize) -> f64 {
        let on = match self {
            Texture::Plain => false,
            Texture::HorizontalStripes => py.is_multiple_of(2),
            Texture::VerticalStripes => px.is_multiple_of(2),
            Texture::Checker => (px / 2 + py / 2).is_multiple_of(2),
        };
        if on {
            1.0
        } else {
            0.0
        }
    }
}

/// HSV with fixed saturation and value, returned in `[-1, 1]`.
pub fn hue_to_rgb(hue_deg: f64) -> [f64; 3] {
    let (s, v) = (0.9, 0.95);
    let h = hue_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [2.0 * (r + m) - 1.0, 2.0 * (g + m) - 1.0, 2.0 * (b + m) - 1.0]
}

/// Hue (degrees) of each palette color word.
pub fn palette_hue(color: &str) -> Option<f64> {
    Some(match color {
        "red" => 0.0,
        "orange" => 30.0,
        "yellow" => 60.0,
        "green" => 120.0,
        "cyan" => 180.0,
        "blue" => 230.0,
        "purple" => 275.0,
        "pink" => 320.0,
        _ => return None,
    })
}

pub const BACKGROUND: f64 = -0.8;

/// One object placed in the frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub family: ShapeFamily,
    pub hue: f64,
    pub texture: Texture,
    /// Centre in pixel coordinates.
    pub cx: f64,
    pub cy: f64,
    /// Circumradius in pixels.
    pub radius: f64,
    /// Rotation in radians.
    pub rotation: f64,
}

/// Rasterizes objects over a flat background with 4× supersampling.
pub fn render(size: usize, objects: &[Placement]) -> Tensor {
    let mut img = vec![BACKGROUND; 3 * size * size];
    let sub = [0.25, 0.75];
    for obj in objects {
        let rgb = hue_to_rgb(obj.hue);
        let (sin, cos) = if obj.family.rotates() {
            obj.rotation.sin_cos()
        } else {
            (0.0, 1.0)
        };
        for py in 0..size {
            for px in 0..size {
                let mut cover = 0.0;
                for sy in sub {
                    for sx in sub {
                        let dx = (px as f64 + sx - obj.cx) / obj.radius;
                        let dy = (py as f64 + sy - obj.cy) / obj.radius;
                        let rx = cos * dx + sin * dy;
                        let ry = -sin * dx + cos * dy;
                        if obj.family.contains(rx, ry) {
                            cover += 0.25;
                        }
                    }
                }
                if cover == 0.0 {
                    continue;
                }
                let shade = 1.0 - 0.45 * obj.texture.mask(px, py);
                for ch in 0..3 {
                    let fill = (rgb[ch] + 1.0) * shade - 1.0;
                    let i = ch * size * size + py * size + px;
                    img[i] = (1.0 - cover) * img[i] + cover * fill;
                }
            }
        }
    }
    Tensor::new(vec![3, size, size], img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centered(family: ShapeFamily) -> Placement {
        Placement {
            family,
            hue: 0.0,
            texture: Texture::Plain,
            cx: 8.0,
            cy: 8.0,
            radius: 5.5,
            rotation: 0.0,
        }
    }

    #[test]
    fn families_have_distinct_footprints() {
        let imgs: Vec<Tensor> = ShapeFamily::ALL
            .iter()
            .map(|&f| render(16, &[centered(f)]))
            .collect();
        for i in 0..imgs.len() {
            let covered = imgs[i].data()[..256]
                .iter()
                .filter(|&&v| v > BACKGROUND + 0.1)
                .count();
            assert!(covered > 20, "family {i} covers only {covered} pixels");
            for j in 0..i {
                assert!(imgs[i].mse(&imgs[j]) > 1e-3);
            }
        }
    }

    #[test]
    fn palette_colors_in_range() {
        for h in [0.0, 30.0, 60.0, 120.0, 180.0, 230.0, 275.0, 320.0] {
            for c in hue_to_rgb(h) {
                assert!((-1.0..=1.0).contains(&c));
            }
        }
        let red = hue_to_rgb(0.0);
        assert!(red[0] > red[1] && red[0] > red[2]);
    }
}
