//! Seeded synthetic datasets.
//!
//! `synth_events` draws ON/OFF event frames of a bar sweeping across half the field.
//! The class fixes the motion direction (right, left, down, up) and, from the fifth
//! class on, which half of the orthogonal axis the bar occupies. `synth_shapes` draws
//! static three-channel images of simple shapes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAX_EVENT_CLASSES: usize = 8;
pub const MAX_SHAPE_CLASSES: usize = 6;
const NOISE_P: f64 = 0.01;

fn check_classes(classes: usize, max: usize) -> Result<()> {
    if classes < 2 || classes > max {
        return Err(Error::ConfigKey {
            key: "data".into(),
            reason: format!("synthetic task supports 2..={max} classes, got {classes}"),
        });
    }
    Ok(())
}

/// Bar occupancy of one frame for `class` at sweep progress `pos`.
fn bar_mask(class: usize, pos: usize, width: usize, extent: (usize, usize), h: usize, w: usize) -> Vec<bool> {
    let mut m = vec![false; h * w];
    let dir = class % 4;
    let horizontal_motion = dir < 2;
    let along = if horizontal_motion { w } else { h };
    let lead = if dir % 2 == 0 { pos } else { along - 1 - pos.min(along - 1) };
    for y in 0..h {
        for x in 0..w {
            let (a, o) = if horizontal_motion { (x, y) } else { (y, x) };
            let in_bar = if dir % 2 == 0 {
                a <= lead && a + width > lead
            } else {
                a >= lead && a < lead + width
            };
            if in_bar && o >= extent.0 && o < extent.1 {
                m[y * w + x] = true;
            }
        }
    }
    m
}

/// `size` samples of `(t, 2, h, w)` binary event frames.
pub fn synth_events(classes: usize, size: usize, t: usize, h: usize, w: usize, seed: u64) -> Result<Vec<Sample>> {
    check_classes(classes, MAX_EVENT_CLASSES)?;
    if t == 0 || h < 4 || w < 4 {
        return Err(Error::Config(format!("event frames need t >= 1 and h, w >= 4, got t={t} h={h} w={w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(size);
    for i in 0..size {
        let label = i % classes;
        let dir = label % 4;
        let (along, across) = if dir < 2 { (w, h) } else { (h, w) };
        let span = along / 2;
        let start = rng.gen_range(0..=along / 8);
        let width = rng.gen_range(1..=2);
        let extent = if label >= 4 {
            let half = across / 2;
            if label % 2 == 0 {
                (0, half)
            } else {
                (half, across)
            }
        } else {
            let lo = rng.gen_range(0..=across / 4);
            let hi = across - rng.gen_range(0..=across / 4);
            (lo, hi)
        };
        let pos_at = |step: isize| -> usize {
            let s = step.max(0) as usize;
            (start + s * span / t).min(along - 1)
        };
        let mut data = vec![0f32; t * 2 * h * w];
        let mut prev = bar_mask(label, pos_at(-1), width, extent, h, w);
        let mut first = true;
        for step in 0..t {
            let cur = bar_mask(label, pos_at(step as isize), width, extent, h, w);
            for p in 0..h * w {
                // the first frame sees the bar appear
                let was = !first && prev[p];
                let on = cur[p] && !was;
                let off = !cur[p] && was;
                let on = on ^ rng.gen_bool(NOISE_P);
                let off = off ^ rng.gen_bool(NOISE_P);
                data[(step * 2) * h * w + p] = on as u8 as f32;
                data[(step * 2 + 1) * h * w + p] = off as u8 as f32;
            }
            prev = cur;
            first = false;
        }
        out.push(Sample {
            image: Tensor::new(&[t, 2, h, w], data)?,
            label,
        });
    }
    Ok(out)
}

/// `size` samples of `(3, h, w)` shape images in `[0, 1]`.
pub fn synth_shapes(classes: usize, size: usize, h: usize, w: usize, seed: u64) -> Result<Vec<Sample>> {
    check_classes(classes, MAX_SHAPE_CLASSES)?;
    if h < 8 || w < 8 {
        return Err(Error::Config(format!("shape images need h, w >= 8, got {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(size);
    for i in 0..size {
        let label = i % classes;
        let r = rng.gen_range(h.min(w) as f32 * 0.2..h.min(w) as f32 * 0.35);
        let cy = rng.gen_range(r..h as f32 - r);
        let cx = rng.gen_range(r..w as f32 - r);
        let color: [f32; 3] = [rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0)];
        let mut data = vec![0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let dy = y as f32 + 0.5 - cy;
                let dx = x as f32 + 0.5 - cx;
                let inside = match label {
                    0 => dx.abs() <= r && dy.abs() <= r,
                    1 => dx * dx + dy * dy <= r * r,
                    2 => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r),
                    3 => dy.abs() <= r && dx.abs() <= r && dy >= -r + (dx.abs() * 2.0),
                    4 => dx.abs() <= r && dy.abs() <= r && (dx - dy).abs() <= r * 0.35,
                    _ => {
                        let d = (dx * dx + dy * dy).sqrt();
                        d <= r && d >= r * 0.6
                    }
                };
                for (c, col) in color.iter().enumerate() {
                    let noise: f32 = rng.gen_range(0.0..0.15);
                    let v = if inside { *col - noise } else { noise };
                    data[c * h * w + y * w + x] = v.clamp(0.0, 1.0);
                }
            }
        }
        out.push(Sample {
            image: Tensor::new(&[3, h, w], data)?,
            label,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn events_are_binary_and_deterministic() {
        let a = synth_events(4, 12, 6, 8, 8, 1).unwrap();
        let b = synth_events(4, 12, 6, 8, 8, 1).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.image.is_binary() && s.image.shape() == [6, 2, 8, 8]));
        assert_ne!(a, synth_events(4, 12, 6, 8, 8, 2).unwrap());
    }

    #[test]
    fn events_carry_motion() {
        let s = synth_events(2, 2, 8, 16, 16, 0).unwrap();
        let on: f32 = s[0].image.sum();
        assert!(on > 8.0);
    }

    #[test]
    fn shapes_in_unit_range() {
        let s = synth_shapes(6, 12, 16, 16, 4).unwrap();
        assert!(s.iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(synth_shapes(7, 1, 16, 16, 0).is_err());
    }
}
