//! Procedural scenes of coloured, textured shapes with exact per-class masks.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{BinaryMask, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeFamily {
    Circle,
    Square,
    Triangle,
    Ring,
    Cross,
    Bar,
    Ellipse,
    LShape,
    TShape,
    UShape,
    Star,
    Diamond,
    Plus,
    Hexagon,
    Crescent,
    Frame,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 16] = [
        ShapeFamily::Circle,
        ShapeFamily::Square,
        ShapeFamily::Triangle,
        ShapeFamily::Ring,
        ShapeFamily::Cross,
        ShapeFamily::Bar,
        ShapeFamily::Ellipse,
        ShapeFamily::LShape,
        ShapeFamily::TShape,
        ShapeFamily::UShape,
        ShapeFamily::Star,
        ShapeFamily::Diamond,
        ShapeFamily::Plus,
        ShapeFamily::Hexagon,
        ShapeFamily::Crescent,
        ShapeFamily::Frame,
    ];

    /// Membership test in the shape's local frame, where the shape fits in `[-1,1]^2`.
    pub fn contains(self, u: f64, v: f64) -> bool {
        let (au, av) = (u.abs(), v.abs());
        match self {
            ShapeFamily::Circle => u * u + v * v <= 1.0,
            ShapeFamily::Square => au <= 0.8 && av <= 0.8,
            ShapeFamily::Triangle => (-0.85..=0.85).contains(&v) && au <= (v + 0.85) * 0.6,
            ShapeFamily::Ring => {
                let r2 = u * u + v * v;
                (0.36..=1.0).contains(&r2)
            }
            ShapeFamily::Cross => {
                let (p, q) = ((u + v) * 0.5f64.sqrt(), (u - v) * 0.5f64.sqrt());
                au <= 0.9 && av <= 0.9 && (p.abs() <= 0.3 || q.abs() <= 0.3)
            }
            ShapeFamily::Bar => au <= 1.0 && av <= 0.35,
            ShapeFamily::Ellipse => u * u + (v / 0.55) * (v / 0.55) <= 1.0,
            ShapeFamily::LShape => {
                (u >= -0.85 && u <= -0.25 && av <= 0.9) || (v >= 0.3 && v <= 0.9 && au <= 0.85)
            }
            ShapeFamily::TShape => (v >= -0.9 && v <= -0.3 && au <= 0.9) || (au <= 0.3 && av <= 0.9),
            ShapeFamily::UShape => {
                (au >= 0.3 && au <= 0.9 && av <= 0.9) || (v >= 0.3 && v <= 0.9 && au <= 0.9)
            }
            ShapeFamily::Star => {
                let r = (u * u + v * v).sqrt();
                let t = v.atan2(u);
                let lobe = (5.0 * t).cos() * 0.5 + 0.5;
                r <= 0.45 + 0.55 * lobe
            }
            ShapeFamily::Diamond => au + av <= 1.0,
            ShapeFamily::Plus => (au <= 0.3 && av <= 0.95) || (av <= 0.3 && au <= 0.95),
            ShapeFamily::Hexagon => av <= 0.85 && au * 0.85 + av * 0.5 <= 0.85,
            ShapeFamily::Crescent => {
                u * u + v * v <= 1.0 && (u - 0.45) * (u - 0.45) + v * v > 0.6
            }
            ShapeFamily::Frame => au <= 0.9 && av <= 0.9 && (au >= 0.5 || av >= 0.5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Texture {
    Solid,
    Stripes,
    Checker,
}

/// One object category: a shape family with its own colour and texture law.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeClass {
    pub id: usize,
    pub family: ShapeFamily,
    /// Base hue in `[0,1)`.
    pub hue: f64,
    pub texture: Texture,
}

/// The catalogue of `n` classes. Hues are spread so neighbouring ids differ.
pub fn class_catalogue(n: usize) -> Vec<ShapeClass> {
    (0..n)
        .map(|id| ShapeClass {
            id,
            family: ShapeFamily::ALL[id % ShapeFamily::ALL.len()],
            hue: ((id * 5) % n.max(1)) as f64 / n.max(1) as f64,
            texture: match id % 3 {
                0 => Texture::Solid,
                1 => Texture::Stripes,
                _ => Texture::Checker,
            },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Minimum visible pixels per class.
    pub min_area: usize,
    /// Maximum visible fraction of the frame per class.
    pub max_area_frac: f64,
    /// Radius range of an object as a fraction of the shorter side.
    pub radius_range: (f64, f64),
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            min_area: 16,
            max_area_frac: 0.6,
            radius_range: (0.14, 0.32),
            max_retries: 50,
        }
    }
}

/// A rendered scene: `[3,H,W]` image in `[0,1]` and one visible mask per class present.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    pub masks: Vec<(usize, BinaryMask)>,
}

impl Scene {
    pub fn mask_of(&self, class_id: usize) -> Option<&BinaryMask> {
        self.masks.iter().find(|(c, _)| *c == class_id).map(|(_, m)| m)
    }
}

struct Placement {
    class: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    cos: f64,
    sin: f64,
    rgb: [f64; 3],
    phase: f64,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn render(
    cfg: &SceneConfig,
    classes: &[&ShapeClass],
    placements: &[Placement],
    rng: &mut impl Rng,
) -> (Tensor, Vec<u16>) {
    let (h, w) = (cfg.height, cfg.width);
    let bg_hue: f64 = rng.random();
    let bg_sat = rng.random_range(0.0..0.25);
    let bg_val = rng.random_range(0.3..0.7);
    let base = hsv_to_rgb(bg_hue, bg_sat, bg_val);
    let (gx, gy) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let mut img = vec![0.0; 3 * h * w];
    let mut label = vec![u16::MAX; h * w];
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 / h as f64 - 0.5, x as f64 / w as f64 - 0.5);
            let shade = gx * fx + gy * fy;
            let mut px = [base[0] + shade, base[1] + shade, base[2] + shade];
            for (pl, class) in placements.iter().zip(classes) {
                let (dx, dy) = (x as f64 + 0.5 - pl.cx, y as f64 + 0.5 - pl.cy);
                let u = (dx * pl.cos + dy * pl.sin) / pl.radius;
                let v = (-dx * pl.sin + dy * pl.cos) / pl.radius;
                if class.family.contains(u, v) {
                    let m = match class.texture {
                        Texture::Solid => 1.0,
                        Texture::Stripes => {
                            if ((u * 3.0 + pl.phase).floor() as i64).rem_euclid(2) == 0 {
                                1.0
                            } else {
                                0.65
                            }
                        }
                        Texture::Checker => {
                            let a = (u * 2.5 + pl.phase).floor() as i64;
                            let b = (v * 2.5 + pl.phase).floor() as i64;
                            if (a + b).rem_euclid(2) == 0 {
                                1.0
                            } else {
                                0.7
                            }
                        }
                    };
                    px = [pl.rgb[0] * m, pl.rgb[1] * m, pl.rgb[2] * m];
                    label[y * w + x] = pl.class as u16;
                }
            }
            for (c, v) in px.iter().enumerate() {
                let noise = rng.random_range(-0.04..0.04);
                img[(c * h + y) * w + x] = (v + noise).clamp(0.0, 1.0);
            }
        }
    }
    (
        Tensor::new(&[3, h, w], img).expect("scene dims positive"),
        label,
    )
}

/// Render one scene containing every class in `classes` (drawn in order; later
/// shapes occlude earlier ones). `instances[i]` copies of class `i` are drawn.
/// Retries until each class is visible with an admissible area.
pub fn generate_scene_with_instances(
    classes: &[&ShapeClass],
    instances: &[usize],
    cfg: &SceneConfig,
    rng: &mut impl Rng,
) -> Result<Scene> {
    if classes.is_empty() {
        return Err(Error::Generation("a scene needs at least one class".into()));
    }
    let (h, w) = (cfg.height, cfg.width);
    let side = h.min(w) as f64;
    let max_area = (cfg.max_area_frac * (h * w) as f64).floor() as usize;
    for _ in 0..cfg.max_retries {
        let mut order: Vec<&ShapeClass> = Vec::new();
        let mut placements = Vec::new();
        for (class, &n) in classes.iter().zip(instances) {
            for _ in 0..n.max(1) {
                let radius = side * rng.random_range(cfg.radius_range.0..cfg.radius_range.1);
                let margin = radius * 0.5;
                let theta = rng.random_range(0.0..2.0 * PI);
                let hue = class.hue + rng.random_range(-0.015..0.015);
                let rgb = hsv_to_rgb(hue, rng.random_range(0.75..1.0), rng.random_range(0.7..1.0));
                placements.push(Placement {
                    class: class.id,
                    cx: rng.random_range(margin..(w as f64 - margin)),
                    cy: rng.random_range(margin..(h as f64 - margin)),
                    radius,
                    cos: theta.cos(),
                    sin: theta.sin(),
                    rgb,
                    phase: rng.random(),
                });
                order.push(class);
            }
        }
        // interleave instances of different classes so any class can be occluded
        let mut idx: Vec<usize> = (0..placements.len()).collect();
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let mut placements: Vec<Option<Placement>> = placements.into_iter().map(Some).collect();
        let placements: Vec<Placement> = idx.iter().map(|&i| placements[i].take().expect("unique")).collect();
        let order: Vec<&ShapeClass> = idx.iter().map(|&i| order[i]).collect();

        let (image, label) = render(cfg, &order, &placements, rng);
        let masks: Vec<(usize, BinaryMask)> = classes
            .iter()
            .map(|c| {
                let data = label.iter().map(|&l| u8::from(l as usize == c.id)).collect();
                (c.id, BinaryMask::new(h, w, data).expect("dims positive"))
            })
            .collect();
        if masks
            .iter()
            .all(|(_, m)| (cfg.min_area..=max_area).contains(&m.count()))
        {
            return Ok(Scene { image, masks });
        }
    }
    Err(Error::Generation(format!(
        "could not place {} classes with visible areas in [{}, {max_area}] after {} tries",
        classes.len(),
        cfg.min_area,
        cfg.max_retries
    )))
}

pub fn generate_scene(classes: &[&ShapeClass], cfg: &SceneConfig, rng: &mut impl Rng) -> Result<Scene> {
    let ones = vec![1; classes.len()];
    generate_scene_with_instances(classes, &ones, cfg, rng)
}
