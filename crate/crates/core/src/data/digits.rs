//! Procedurally rasterized digit glyphs, 28×28 grayscale in `[0, 1]`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::{CounterRng, Purpose};

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

type Stroke = Vec<(f64, f64)>;

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64, n: usize) -> Stroke {
    (0..=n)
        .map(|i| {
            let a = (from + (to - from) * i as f64 / n as f64).to_radians();
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

/// Strokes of each digit in a unit box, x to the right and y downwards.
fn strokes(digit: usize) -> Vec<Stroke> {
    match digit {
        0 => vec![ellipse(0.5, 0.5, 0.33, 0.48, 0.0, 360.0, 16)],
        1 => vec![vec![(0.3, 0.2), (0.55, 0.0), (0.55, 1.0)]],
        2 => vec![
            ellipse(0.5, 0.28, 0.33, 0.26, 190.0, 360.0, 8),
            vec![(0.83, 0.28), (0.78, 0.5), (0.15, 1.0), (0.9, 1.0)],
        ],
        3 => vec![ellipse(0.5, 0.27, 0.3, 0.25, 200.0, 450.0, 10), ellipse(0.5, 0.74, 0.33, 0.26, 270.0, 520.0, 10)],
        4 => vec![vec![(0.7, 1.0), (0.7, 0.0), (0.1, 0.68), (0.92, 0.68)]],
        5 => vec![vec![(0.85, 0.0), (0.25, 0.0), (0.2, 0.45)], ellipse(0.5, 0.68, 0.34, 0.31, 225.0, 490.0, 10)],
        6 => vec![vec![(0.75, 0.02), (0.4, 0.25), (0.2, 0.62)], ellipse(0.5, 0.72, 0.31, 0.27, 0.0, 360.0, 12)],
        7 => vec![vec![(0.1, 0.0), (0.9, 0.0), (0.4, 1.0)]],
        8 => vec![ellipse(0.5, 0.25, 0.25, 0.24, 0.0, 360.0, 12), ellipse(0.5, 0.73, 0.31, 0.26, 0.0, 360.0, 12)],
        9 => vec![ellipse(0.5, 0.3, 0.3, 0.28, 0.0, 360.0, 12), vec![(0.8, 0.3), (0.75, 0.65), (0.55, 1.0)]],
        _ => panic!("digit {digit} out of range"),
    }
}

/// Random variation applied to each rendered glyph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlyphStyle {
    /// Per-vertex displacement std, in glyph units.
    pub vertex_jitter: f64,
    /// Rotation range in degrees (uniform ±).
    pub rotation: f64,
    /// Shear range (uniform ±).
    pub shear: f64,
    /// Scale range (uniform `1 ± scale`).
    pub scale: f64,
    /// Translation range in pixels (uniform ±).
    pub shift: f64,
    /// Stroke width range in pixels.
    pub width: (f64, f64),
    /// Stroke intensity range.
    pub intensity: (f64, f64),
}

impl Default for GlyphStyle {
    fn default() -> Self {
        Self {
            vertex_jitter: 0.04,
            rotation: 15.0,
            shear: 0.25,
            scale: 0.15,
            shift: 3.0,
            width: (1.4, 3.2),
            intensity: (0.7, 1.0),
        }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Renders one randomized glyph of `digit`.
pub fn render_glyph(digit: usize, style: &GlyphStyle, rng: &mut impl Rng) -> Vec<f64> {
    let mut sym = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let angle = sym(style.rotation).to_radians();
    let shear = sym(style.shear);
    let sx = 1.0 + sym(style.scale);
    let sy = 1.0 + sym(style.scale);
    let (tx, ty) = (sym(style.shift), sym(style.shift));
    let (cos, sin) = (angle.cos(), angle.sin());
    let width = rng.random_range(style.width.0..=style.width.1);
    let intensity = rng.random_range(style.intensity.0..=style.intensity.1);
    // The glyph box spans 20 pixels centred in the image.
    let box_px = 20.0;
    let centre = IMAGE_SIDE as f64 / 2.0;
    let segments: Vec<((f64, f64), (f64, f64))> = strokes(digit)
        .into_iter()
        .flat_map(|stroke| {
            let pts: Vec<(f64, f64)> = stroke
                .into_iter()
                .map(|(x, y)| {
                    let jx: f64 = StandardNormal.sample(rng);
                    let jy: f64 = StandardNormal.sample(rng);
                    let (x, y) = (x - 0.5 + style.vertex_jitter * jx, y - 0.5 + style.vertex_jitter * jy);
                    let (x, y) = (sx * (x + shear * y), sy * y);
                    let (x, y) = (cos * x - sin * y, sin * x + cos * y);
                    (centre + box_px * x + tx, centre + box_px * y + ty)
                })
                .collect();
            pts.windows(2).map(|w| (w[0], w[1])).collect::<Vec<_>>()
        })
        .collect();
    let half = width / 2.0;
    let mut img = vec![0.0; IMAGE_PIXELS];
    for row in 0..IMAGE_SIDE {
        for col in 0..IMAGE_SIDE {
            let p = (col as f64 + 0.5, row as f64 + 0.5);
            let d = segments.iter().map(|&(a, b)| segment_distance(p, a, b)).fold(f64::INFINITY, f64::min);
            // One pixel of linear anti-aliasing at the stroke edge.
            let cover = (half + 0.5 - d).clamp(0.0, 1.0);
            img[row * IMAGE_SIDE + col] = intensity * cover;
        }
    }
    img
}

#[derive(Debug, Clone, PartialEq)]
pub struct DigitSample {
    pub label: usize,
    pub clean: Vec<f64>,
    /// `clamp(clean + σ·N(0, I), 0, 1)`.
    pub noisy: Vec<f64>,
}

/// `n` labelled glyphs with additive Gaussian pixel noise of std `noise_sigma`.
pub fn generate_digits(n: usize, noise_sigma: f64, seed: u64, style: &GlyphStyle) -> Vec<DigitSample> {
    assert!(noise_sigma >= 0.0 && noise_sigma.is_finite(), "noise sigma {noise_sigma}");
    let rng = CounterRng::new(seed);
    let mut shapes = rng.stream(Purpose::Data, 0);
    let mut noise = rng.stream(Purpose::DataNoise, 0);
    (0..n)
        .map(|_| {
            let label = shapes.random_range(0..10);
            let clean = render_glyph(label, style, &mut shapes);
            let noisy = clean
                .iter()
                .map(|&v| {
                    if noise_sigma == 0.0 {
                        return v;
                    }
                    let z: f64 = StandardNormal.sample(&mut noise);
                    (v + noise_sigma * z).clamp(0.0, 1.0)
                })
                .collect();
            DigitSample { label, clean, noisy }
        })
        .collect()
}
