//! Synthetic anatomy-like volumes with voxel labels, for tests, smoke
//! training and segmentation experiments.
//!
//! Each phantom is a bright elliptical "body" on a dark background holding a
//! few ellipsoidal "organs" whose cross-sections vary slowly along depth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analytics::LabelVolume;
use crate::volume::Volume;

/// Organ classes (labels `1..=ORGANS`); label 0 is everything else.
pub const ORGANS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub labels: LabelVolume,
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    intensity: f64,
}

impl Ellipsoid {
    fn inside(&self, p: [f64; 3]) -> bool {
        let q: f64 = (0..3).map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2)).sum();
        q <= 1.0
    }
}

/// An 8-bit phantom of `width × height × depth`, reproducible from `seed`.
pub fn phantom(width: usize, height: usize, depth: usize, seed: u64) -> Phantom {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h, d) = (width as f64, height as f64, depth as f64);
    let body = Ellipsoid {
        center: [w / 2.0, h / 2.0, d / 2.0],
        radii: [w * rng.gen_range(0.40..0.46), h * rng.gen_range(0.36..0.44), d * 4.0],
        intensity: rng.gen_range(0.30..0.40),
    };
    let organs: Vec<Ellipsoid> = (0..ORGANS)
        .map(|k| {
            // One organ per horizontal band keeps them mostly disjoint.
            let cx = w * (0.28 + 0.22 * k as f64) + rng.gen_range(-0.03..0.03) * w;
            let cy = h * rng.gen_range(0.38..0.62);
            Ellipsoid {
                center: [cx, cy, d * rng.gen_range(0.3..0.7)],
                radii: [w * rng.gen_range(0.08..0.12), h * rng.gen_range(0.10..0.16), d.max(4.0) * rng.gen_range(0.7..1.2)],
                intensity: [0.75, 0.55, 0.95][k] + rng.gen_range(-0.04..0.04),
            }
        })
        .collect();
    let texture = [rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28)];
    let mut samples = Vec::with_capacity(width * height * depth);
    let mut labels = Vec::with_capacity(width * height * depth);
    for z in 0..depth {
        for y in 0..height {
            for x in 0..width {
                let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                let mut v = 0.04;
                let mut label = 0u8;
                if body.inside(p) {
                    let shade = 0.04 * ((p[0] / w * 5.0 + texture[0]).sin() + (p[1] / h * 4.0 + texture[1]).cos());
                    v = body.intensity + shade;
                    for (k, o) in organs.iter().enumerate() {
                        if o.inside(p) {
                            v = o.intensity;
                            label = k as u8 + 1;
                        }
                    }
                }
                samples.push((v.clamp(0.0, 1.0) * 255.0).round() as u32);
                labels.push(label);
            }
        }
    }
    Phantom {
        volume: Volume::new(width, height, depth, 8, samples).expect("phantom dimensions are valid"),
        labels: LabelVolume::new(width, height, depth, ORGANS + 1, labels).expect("labels are in range"),
    }
}

/// A volume whose `depth` slices all equal slice `z` of `src`.
pub fn repeat_slice(src: &Volume, z: usize, depth: usize) -> Volume {
    let s = src.slice(z).to_vec();
    Volume::from_slices(src.width(), src.height(), src.bit_depth(), &vec![s; depth]).expect("same shape as source")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantoms_are_seeded_and_labelled() {
        let a = phantom(48, 40, 6, 3);
        assert_eq!(a, phantom(48, 40, 6, 3));
        assert_ne!(a.volume, phantom(48, 40, 6, 4).volume);
        for c in 1..=ORGANS {
            assert!(a.labels.count(c) > 0, "organ {c} is present");
        }
        // Neighbouring slices are close: the depth axis varies slowly.
        let diff = a.volume.slice(2).iter().zip(a.volume.slice(3)).filter(|(p, q)| p != q).count();
        assert!(diff < 48 * 40 / 5);
    }

    #[test]
    fn repeated_slices_are_identical() {
        let v = repeat_slice(&phantom(32, 32, 4, 1).volume, 2, 5);
        assert_eq!(v.depth(), 5);
        assert!((1..5).all(|z| v.slice(z) == v.slice(0)));
    }
}
