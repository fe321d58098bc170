//! Procedural "face" sprites with exact landmarks.
//!
//! A sprite is an elliptical head with two eyes, a mouth arc and a cheek mark
//! on one side (so in-plane rotations are unambiguous), drawn over a flat
//! background. Each video interpolates smoothly between random poses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Fixed part colours; the colour landmarker keys on them.
pub const LEFT_EYE_COLOR: [f32; 3] = [0.10, 0.15, 0.85];
pub const RIGHT_EYE_COLOR: [f32; 3] = [0.10, 0.75, 0.20];
pub const MOUTH_COLOR: [f32; 3] = [0.85, 0.10, 0.15];
pub const MARK_COLOR: [f32; 3] = [0.95, 0.85, 0.10];

/// Landmark order: head centre, left eye, right eye, mouth, cheek mark.
pub const N_LANDMARKS: usize = 5;
pub const LANDMARK_NAMES: [&str; N_LANDMARKS] = ["head", "left_eye", "right_eye", "mouth", "mark"];

/// Appearance parameters that stay fixed within a video.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpriteIdentity {
    pub background: [f32; 3],
    pub skin: [f32; 3],
    /// Head semi-axes as a fraction of the canvas side.
    pub head_rx: f64,
    pub head_ry: f64,
    pub eye_radius: f64,
}

/// Per-frame pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpritePose {
    /// Head centre offset from the canvas centre, pixels.
    pub tx: f64,
    pub ty: f64,
    /// In-plane rotation, degrees.
    pub rotation: f64,
    pub scale: f64,
    /// 0 = closed, 1 = fully open.
    pub mouth_open: f64,
    /// 0 = open eyes, 1 = closed.
    pub eye_blink: f64,
}

impl SpritePose {
    pub fn neutral() -> Self {
        Self {
            tx: 0.0,
            ty: 0.0,
            rotation: 0.0,
            scale: 1.0,
            mouth_open: 0.3,
            eye_blink: 0.0,
        }
    }

    fn lerp(&self, other: &Self, t: f64) -> Self {
        let l = |a: f64, b: f64| a + (b - a) * t;
        Self {
            tx: l(self.tx, other.tx),
            ty: l(self.ty, other.ty),
            rotation: l(self.rotation, other.rotation),
            scale: l(self.scale, other.scale),
            mouth_open: l(self.mouth_open, other.mouth_open),
            eye_blink: l(self.eye_blink, other.eye_blink),
        }
    }
}

/// Face-local positions (before pose), in units of the canvas side.
struct Layout {
    left_eye: (f64, f64),
    right_eye: (f64, f64),
    mouth: (f64, f64),
    mark: (f64, f64),
}

fn layout(id: &SpriteIdentity) -> Layout {
    Layout {
        left_eye: (-0.38 * id.head_rx, -0.25 * id.head_ry),
        right_eye: (0.38 * id.head_rx, -0.25 * id.head_ry),
        mouth: (0.0, 0.42 * id.head_ry),
        mark: (0.55 * id.head_rx, 0.15 * id.head_ry),
    }
}

/// A rendered scene: identity plus pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpriteScene {
    pub size: usize,
    pub identity: SpriteIdentity,
    pub pose: SpritePose,
}

impl SpriteScene {
    /// Maps a face-local point (canvas-side units) to pixel coordinates.
    fn to_pixels(&self, p: (f64, f64)) -> (f64, f64) {
        let s = self.size as f64;
        let (sin, cos) = self.pose.rotation.to_radians().sin_cos();
        let (x, y) = (p.0 * s * self.pose.scale, p.1 * s * self.pose.scale);
        let cx = s / 2.0 + self.pose.tx;
        let cy = s / 2.0 + self.pose.ty;
        (cx + cos * x - sin * y, cy + sin * x + cos * y)
    }

    /// Inverse of [`Self::to_pixels`].
    fn to_local(&self, px: f64, py: f64) -> (f64, f64) {
        let s = self.size as f64;
        let (sin, cos) = self.pose.rotation.to_radians().sin_cos();
        let dx = px - (s / 2.0 + self.pose.tx);
        let dy = py - (s / 2.0 + self.pose.ty);
        let x = cos * dx + sin * dy;
        let y = -sin * dx + cos * dy;
        let k = s * self.pose.scale;
        (x / k, y / k)
    }

    /// Ground-truth landmarks in pixel coordinates (pixel centres at +0.5).
    pub fn landmarks(&self) -> [[f64; 2]; N_LANDMARKS] {
        let l = layout(&self.identity);
        let p = |q| {
            let (x, y) = self.to_pixels(q);
            [x, y]
        };
        [p((0.0, 0.0)), p(l.left_eye), p(l.right_eye), p(l.mouth), p(l.mark)]
    }

    fn color_at(&self, px: f64, py: f64) -> [f32; 3] {
        let id = &self.identity;
        let (x, y) = self.to_local(px, py);
        if (x / id.head_rx).powi(2) + (y / id.head_ry).powi(2) > 1.0 {
            return id.background;
        }
        let l = layout(id);
        let open = 1.0 - self.pose.eye_blink.clamp(0.0, 0.9);
        let in_eye = |c: (f64, f64)| {
            let r = id.eye_radius;
            ((x - c.0) / r).powi(2) + ((y - c.1) / (r * open)).powi(2) <= 1.0
        };
        if in_eye(l.left_eye) {
            return LEFT_EYE_COLOR;
        }
        if in_eye(l.right_eye) {
            return RIGHT_EYE_COLOR;
        }
        // Mouth: an ellipse whose height follows mouth_open.
        let mw = 0.45 * id.head_rx;
        let mh = 0.04 + 0.12 * id.head_ry * self.pose.mouth_open.clamp(0.0, 1.0);
        if ((x - l.mouth.0) / mw).powi(2) + ((y - l.mouth.1) / mh).powi(2) <= 1.0 {
            return MOUTH_COLOR;
        }
        let mr = 0.6 * id.eye_radius;
        if (x - l.mark.0).powi(2) + (y - l.mark.1).powi(2) <= mr * mr {
            return MARK_COLOR;
        }
        id.skin
    }

    /// Renders to interleaved RGB `f32` in `[0, 1]`, 4x supersampled.
    pub fn render(&self) -> Vec<f32> {
        let n = self.size;
        let offsets = [0.25, 0.75];
        let mut out = vec![0f32; n * n * 3];
        for py in 0..n {
            for px in 0..n {
                let mut acc = [0f32; 3];
                for oy in offsets {
                    for ox in offsets {
                        let c = self.color_at(px as f64 + ox, py as f64 + oy);
                        for k in 0..3 {
                            acc[k] += c[k] * 0.25;
                        }
                    }
                }
                out[(py * n + px) * 3..(py * n + px) * 3 + 3].copy_from_slice(&acc);
            }
        }
        out
    }

    /// Renders to 8-bit RGB.
    pub fn render_u8(&self) -> Vec<u8> {
        self.render()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

fn random_color<R: Rng>(rng: &mut R, lo: f32, hi: f32) -> [f32; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

pub fn random_identity<R: Rng>(rng: &mut R) -> SpriteIdentity {
    // Background dark-ish, skin light-ish: they never get confused with each
    // other or with the saturated part colours.
    SpriteIdentity {
        background: random_color(rng, 0.05, 0.35),
        skin: [
            rng.random_range(0.75..0.95),
            rng.random_range(0.6..0.8),
            rng.random_range(0.5..0.7),
        ],
        head_rx: rng.random_range(0.24..0.3),
        head_ry: rng.random_range(0.28..0.34),
        eye_radius: rng.random_range(0.035..0.05),
    }
}

/// Pose with rotation in [-30, 30] degrees and translation within
/// `max_shift` pixels.
pub fn random_pose<R: Rng>(rng: &mut R, max_shift: f64) -> SpritePose {
    SpritePose {
        tx: rng.random_range(-max_shift..=max_shift),
        ty: rng.random_range(-max_shift..=max_shift),
        rotation: rng.random_range(-30.0..=30.0),
        scale: rng.random_range(0.85..=1.1),
        mouth_open: rng.random_range(0.0..=1.0),
        eye_blink: if rng.random_bool(0.2) { rng.random_range(0.5..=0.9) } else { 0.0 },
    }
}

/// One synthetic video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpriteVideo {
    pub identity: SpriteIdentity,
    pub poses: Vec<SpritePose>,
    pub size: usize,
}

impl SpriteVideo {
    /// Random identity moving smoothly through a few key poses.
    pub fn generate(seed: u64, n_frames: usize, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let identity = random_identity(&mut rng);
        let max_shift = size as f64 * 0.12;
        let keys: Vec<SpritePose> = (0..3).map(|_| random_pose(&mut rng, max_shift)).collect();
        let poses = (0..n_frames)
            .map(|f| {
                let t = if n_frames > 1 { f as f64 / (n_frames - 1) as f64 } else { 0.0 };
                let seg = (t * 2.0).min(1.999);
                let k = seg.floor() as usize;
                let u = seg - k as f64;
                // Smoothstep between key poses.
                keys[k].lerp(&keys[k + 1], u * u * (3.0 - 2.0 * u))
            })
            .collect();
        Self { identity, poses, size }
    }

    pub fn scene(&self, frame: usize) -> SpriteScene {
        SpriteScene {
            size: self.size,
            identity: self.identity,
            pose: self.poses[frame],
        }
    }

    pub fn n_frames(&self) -> usize {
        self.poses.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn landmarks_follow_translation_exactly() {
        let video = SpriteVideo::generate(3, 2, 64);
        let mut scene = video.scene(0);
        let before = scene.landmarks();
        scene.pose.tx += 3.0;
        scene.pose.ty -= 2.0;
        let after = scene.landmarks();
        for (a, b) in before.iter().zip(&after) {
            assert!((b[0] - a[0] - 3.0).abs() < 1e-12);
            assert!((b[1] - a[1] + 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rendering_is_reproducible() {
        let a = SpriteVideo::generate(9, 4, 32);
        let b = SpriteVideo::generate(9, 4, 32);
        assert_eq!(a, b);
        assert_eq!(a.scene(2).render_u8(), b.scene(2).render_u8());
    }

    #[test]
    fn eye_pixels_use_the_part_colour() {
        let scene = SpriteVideo::generate(1, 1, 64).scene(0);
        let lm = scene.landmarks();
        let img = scene.render();
        let (x, y) = (lm[1][0] as usize, lm[1][1] as usize);
        let px = &img[(y * 64 + x) * 3..(y * 64 + x) * 3 + 3];
        let d: f32 = px.iter().zip(LEFT_EYE_COLOR).map(|(a, b)| (a - b).abs()).sum();
        assert!(d < 0.3, "{px:?}");
    }
}
