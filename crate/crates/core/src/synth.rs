//! Built-in synthetic training set: textured half-plane objects on textured
//! grounds, with exact binary masks.
//!
//! Every object edge lies on an image midline. That is the only place the
//! stride-32 side outputs of a 64×64 input can put a sharp boundary, so the
//! set can be fitted by every level at once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub const SYNTH_SIZE: usize = 64;
pub const SYNTH_COUNT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HalfPlane {
    Left,
    Right,
    Top,
    Bottom,
}

impl HalfPlane {
    pub const ALL: [HalfPlane; SYNTH_COUNT] = [HalfPlane::Left, HalfPlane::Right, HalfPlane::Top, HalfPlane::Bottom];

    fn contains(self, y: usize, x: usize, size: usize) -> bool {
        let mid = size / 2;
        match self {
            HalfPlane::Left => x < mid,
            HalfPlane::Right => x >= mid,
            HalfPlane::Top => y < mid,
            HalfPlane::Bottom => y >= mid,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HalfPlane::Left => "left",
            HalfPlane::Right => "right",
            HalfPlane::Top => "top",
            HalfPlane::Bottom => "bottom",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[1, H, W]`, exactly 0 or 1.
    pub mask: Tensor,
}

/// Object: warm diagonal stripes. Ground: cool speckle.
fn texel(fg: bool, y: usize, x: usize, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let noise: f64 = rng.gen_range(-1.0..1.0);
    let (yf, xf) = (y as f64, x as f64);
    if fg {
        let stripe = (0.9 * (xf + yf)).sin();
        [
            0.75 + 0.15 * stripe,
            0.55 + 0.1 * stripe + 0.05 * noise,
            0.3 + 0.05 * noise,
        ]
    } else {
        let ripple = (0.5 * xf).cos() * (0.5 * yf).cos();
        [0.3 + 0.1 * noise, 0.4 + 0.1 * ripple, 0.6 + 0.1 * ripple + 0.05 * noise]
    }
}

pub fn half_plane_sample(plane: HalfPlane, size: usize, rng: &mut ChaCha8Rng) -> Sample {
    let n = size * size;
    let mut image = vec![0.0; 3 * n];
    let mut mask = vec![0.0; n];
    for y in 0..size {
        for x in 0..size {
            let fg = plane.contains(y, x, size);
            let rgb = texel(fg, y, x, rng);
            for (c, v) in rgb.into_iter().enumerate() {
                image[c * n + y * size + x] = v.clamp(0.0, 1.0);
            }
            mask[y * size + x] = if fg { 1.0 } else { 0.0 };
        }
    }
    Sample {
        name: plane.name().to_string(),
        image: Tensor::new([3, size, size], image).expect("sized"),
        mask: Tensor::new([1, size, size], mask).expect("sized"),
    }
}

/// The four-image set, one per half-plane orientation.
pub fn synthetic_set(seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    HalfPlane::ALL
        .iter()
        .map(|&p| half_plane_sample(p, SYNTH_SIZE, &mut rng))
        .collect()
}
