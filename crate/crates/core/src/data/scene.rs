use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, Image, LabelMap, Result};

pub const CLASS_NAMES: [&str; 5] = ["background", "road", "pole", "wall", "blob"];

pub const BACKGROUND: u8 = 0;
pub const ROAD: u8 = 1;
pub const POLE: u8 = 2;
pub const WALL: u8 = 3;
pub const BLOB: u8 = 4;

pub fn class_name(class: usize) -> &'static str {
    CLASS_NAMES.get(class).copied().unwrap_or("unknown")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Classes in use, taken in order from background, road, pole, wall,
    /// blob.
    pub n_classes: usize,
    /// Expected pixel fraction of classes `1..n_classes`; background takes
    /// the rest.
    pub densities: Vec<f64>,
    pub seed: u64,
    /// Base RGB color per class.
    pub palette: Vec<[f64; 3]>,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 128,
            height: 64,
            n_classes: 5,
            densities: vec![0.22, 0.05, 0.18, 0.08],
            seed: 0,
            palette: vec![
                [0.55, 0.62, 0.72],
                [0.32, 0.32, 0.35],
                [0.45, 0.50, 0.58],
                [0.62, 0.50, 0.42],
                [0.30, 0.55, 0.32],
            ],
            noise: 0.08,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Spec(m));
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(32) || !self.height.is_multiple_of(32) {
            return bad(format!("size {}x{} is not a multiple of 32", self.height, self.width));
        }
        if !(1..=CLASS_NAMES.len()).contains(&self.n_classes) {
            return bad(format!("n_classes {} outside 1..=5", self.n_classes));
        }
        if self.densities.len() != self.n_classes - 1 {
            return bad(format!(
                "{} densities for {} foreground classes",
                self.densities.len(),
                self.n_classes - 1
            ));
        }
        if self.densities.iter().any(|d| !(0.0..=1.0).contains(d)) || self.densities.iter().sum::<f64>() > 0.9 {
            return bad(format!("densities {:?} must be in [0, 1] and sum to at most 0.9", self.densities));
        }
        if self.palette.len() < self.n_classes {
            return bad(format!("{} palette entries for {} classes", self.palette.len(), self.n_classes));
        }
        if !(self.noise >= 0.0) {
            return bad(format!("noise {} must be non-negative", self.noise));
        }
        Ok(())
    }

    pub fn density(&self, class: u8) -> f64 {
        match class {
            BACKGROUND => 1.0 - self.densities.iter().sum::<f64>(),
            c => self.densities.get(c as usize - 1).copied().unwrap_or(0.0),
        }
    }
}

/// Painter's algorithm run front to back: each shape only claims pixels no
/// nearer shape owns, which is equivalent to drawing back to front with
/// later shapes occluding earlier ones.
struct Canvas {
    w: usize,
    owner: Vec<Option<u8>>,
    shade: Vec<[f64; 3]>,
}

impl Canvas {
    fn claim(&mut self, y: usize, x: usize, class: u8, color: [f64; 3]) -> bool {
        let i = y * self.w + x;
        if self.owner[i].is_some() {
            return false;
        }
        self.owner[i] = Some(class);
        self.shade[i] = color;
        true
    }

    fn free_in(&self, pixels: &[(usize, usize)]) -> usize {
        pixels.iter().filter(|&&(y, x)| self.owner[y * self.w + x].is_none()).count()
    }
}

/// Adds shapes while the class is below its pixel budget. A shape that
/// would overshoot is kept with probability `remaining / area`, so the
/// expected coverage equals the budget.
fn fill<R: Rng>(
    canvas: &mut Canvas,
    rng: &mut R,
    class: u8,
    budget: f64,
    color: [f64; 3],
    mut propose: impl FnMut(&mut R) -> Option<Vec<(usize, usize)>>,
) {
    let mut covered = 0.0;
    for _ in 0..1000 {
        if covered >= budget {
            break;
        }
        let Some(pixels) = propose(rng) else {
            continue;
        };
        let area = canvas.free_in(&pixels) as f64;
        if area == 0.0 {
            continue;
        }
        if covered + area > budget && !rng.random_bool(((budget - covered) / area).clamp(0.0, 1.0)) {
            break;
        }
        let tint: f64 = rng.random_range(-0.05..0.05);
        let c = color.map(|v| v + tint);
        for (y, x) in pixels {
            canvas.claim(y, x, class, c);
        }
        covered += area;
    }
}

fn rect(y0: usize, y1: usize, x0: usize, x1: usize) -> Vec<(usize, usize)> {
    (y0..y1).flat_map(|y| (x0..x1).map(move |x| (y, x))).collect()
}

/// Renders scene `index` of the family described by `spec`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<(Image, LabelMap)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let mut canvas = Canvas {
        w,
        owner: vec![None; h * w],
        shade: vec![[0.0; 3]; h * w],
    };
    let area = (h * w) as f64;
    let budget = |rng: &mut ChaCha8Rng, class: u8| spec.density(class) * area * rng.random_range(0.5..1.5);
    let uses = |class: u8| (class as usize) < spec.n_classes;

    if uses(POLE) {
        let b = budget(&mut rng, POLE);
        // Column spans taken by poles, each padded by one free column.
        let mut taken: Vec<(usize, usize)> = Vec::new();
        fill(&mut canvas, &mut rng, POLE, b, spec.palette[POLE as usize], |rng| {
            let pw = rng.random_range(1..=3usize);
            let min_h = h.div_ceil(3).max(5 * pw);
            let max_h = (h * 4 / 5).max(min_h);
            let ph = rng.random_range(min_h..=max_h);
            let base = rng.random_range((h / 2).max(ph)..=h);
            let x0 = rng.random_range(0..=w - pw);
            if taken.iter().any(|&(a, b)| x0 <= b && a <= x0 + pw) {
                return None;
            }
            taken.push((x0, x0 + pw));
            Some(rect(base - ph, base, x0, x0 + pw))
        });
    }
    if uses(BLOB) {
        let b = budget(&mut rng, BLOB);
        fill(&mut canvas, &mut rng, BLOB, b, spec.palette[BLOB as usize], |rng| {
            let ry = rng.random_range(3.0..(h as f64 / 8.0).max(4.0));
            let rx = rng.random_range(3.0..(w as f64 / 10.0).max(4.0));
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let mut px = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    if dy * dy + dx * dx <= 1.0 {
                        px.push((y, x));
                    }
                }
            }
            Some(px)
        });
    }
    if uses(WALL) {
        let b = budget(&mut rng, WALL);
        fill(&mut canvas, &mut rng, WALL, b, spec.palette[WALL as usize], |rng| {
            let ww = rng.random_range(w / 8..=w / 3);
            let wh = rng.random_range(h / 5..=h / 2);
            let y0 = rng.random_range(0..=(h * 2 / 3).min(h - wh));
            let x0 = rng.random_range(0..=w - ww);
            Some(rect(y0, y0 + wh, x0, x0 + ww))
        });
    }
    if uses(ROAD) {
        let b = budget(&mut rng, ROAD);
        // The band grows upward from the bottom edge one row at a time.
        let mut row = h;
        fill(&mut canvas, &mut rng, ROAD, b, spec.palette[ROAD as usize], |_| {
            row = row.checked_sub(1)?;
            Some(rect(row, row + 1, 0, w))
        });
    }

    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let sky = spec.palette[BACKGROUND as usize];
    let mut image = Image::filled(h, w, 0.0);
    let mut labels = vec![BACKGROUND; h * w];
    for y in 0..h {
        // Background brightens toward the top.
        let lift = 0.1 * (1.0 - y as f64 / h as f64) - 0.05;
        for x in 0..w {
            let i = y * w + x;
            let color = match canvas.owner[i] {
                Some(class) => {
                    labels[i] = class;
                    canvas.shade[i]
                }
                None => sky.map(|v| v + lift),
            };
            for (c, base) in color.iter().enumerate() {
                let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                image.data[(c * h + y) * w + x] = (base + n).clamp(0.0, 1.0);
            }
        }
    }
    Ok((image, LabelMap::new(h, w, labels)?))
}
