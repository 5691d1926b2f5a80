//! Pixel-fidelity and mask-overlap metrics.

use crate::error::{Error, Result};
use crate::par;

/// Per-voxel class labels for a volume, slice-major then row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    width: usize,
    height: usize,
    depth: usize,
    classes: usize,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(width: usize, height: usize, depth: usize, classes: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height * depth {
            return Err(Error::shape(format!("{} labels for {width}x{height}x{depth}", labels.len())));
        }
        if classes == 0 || classes > 256 {
            return Err(Error::config(format!("class count {classes} out of range")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| usize::from(l) >= classes) {
            return Err(Error::config(format!("label {bad} with {classes} classes")));
        }
        Ok(LabelVolume { width, height, depth, classes, labels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let n = self.width * self.height;
        &self.labels[z * n..(z + 1) * n]
    }

    /// Number of voxels labelled `class`.
    pub fn count(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&l| usize::from(l) == class).count()
    }

    pub fn mask(&self, class: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| usize::from(l) == class).collect()
    }

    fn dims(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    fn same_dims(&self, other: &LabelVolume) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!("label volumes {:?} vs {:?}", self.dims(), other.dims())));
        }
        Ok(())
    }
}

/// `10·log10(max² / MSE)`; identical inputs give `+∞`.
pub fn psnr(a: &[u16], b: &[u16], max_val: u32) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("{} vs {} samples", a.len(), b.len())));
    }
    let se: f64 = a.iter().zip(b).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum();
    Ok(psnr_from_mse(se / a.len() as f64, max_val))
}

pub fn psnr_from_mse(mse: f64, max_val: u32) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    let m = f64::from(max_val);
    10.0 * (m * m / mse).log10()
}

fn dice_counts(pred: &[u8], gt: &[u8], class: usize) -> f64 {
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (usize::from(p) == class, usize::from(g) == class);
        inter += usize::from(p && g);
        a += usize::from(p);
        b += usize::from(g);
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

/// Volumetric `2|A∩B| / (|A|+|B|)` for one class; two empty masks score 1.
pub fn dice(pred: &LabelVolume, gt: &LabelVolume, class: usize) -> Result<f64> {
    pred.same_dims(gt)?;
    Ok(dice_counts(&pred.labels, &gt.labels, class))
}

/// Mean of per-slice DICE scores.
pub fn dice_per_slice(pred: &LabelVolume, gt: &LabelVolume, class: usize) -> Result<f64> {
    pred.same_dims(gt)?;
    let s: f64 = (0..pred.depth).map(|z| dice_counts(pred.slice(z), gt.slice(z), class)).sum();
    Ok(s / pred.depth as f64)
}

/// Voxel spacing as `[depth, row, column]` physical step sizes.
pub type Spacing = [f64; 3];

/// Foreground voxels with at least one background face neighbour. Voxels
/// on the volume border count as boundary.
pub fn boundary(mask: &[bool], dims: [usize; 3]) -> Vec<[usize; 3]> {
    let [d, h, w] = dims;
    let at = |z: usize, y: usize, x: usize| mask[(z * h + y) * w + x];
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                if edge
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1)
                {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Exact 1-D squared distance transform over sample positions `i·step`
/// (lower envelope of parabolas).
fn edt_1d(f: &mut [f64], step: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    out.clear();
    let pos = |i: usize| i as f64 * step;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => return,
    };
    v.push(first);
    z.push(f64::NEG_INFINITY);
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = *v.last().expect("envelope is non-empty");
            let s = ((f[q] + pos(q).powi(2)) - (f[p] + pos(p).powi(2))) / (2.0 * (pos(q) - pos(p)));
            if s <= *z.last().expect("breakpoints track the envelope") {
                v.pop();
                z.pop();
                if v.is_empty() {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    let mut k = 0;
    for i in 0..n {
        while k + 1 < v.len() && z[k + 1] < pos(i) {
            k += 1;
        }
        out.push(f[v[k]] + (pos(i) - pos(v[k])).powi(2));
    }
    f.copy_from_slice(out);
}

/// Squared Euclidean distance from every voxel to the nearest seed.
fn squared_distance_map(seeds: &[[usize; 3]], dims: [usize; 3], spacing: Spacing) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut g = vec![f64::INFINITY; d * h * w];
    for &[z, y, x] in seeds {
        g[(z * h + y) * w + x] = 0.0;
    }
    let (mut v, mut zb, mut out) = (Vec::new(), Vec::new(), Vec::new());
    let mut line = Vec::new();
    // Along x (contiguous).
    for row in g.chunks_mut(w) {
        edt_1d(row, spacing[2], &mut v, &mut zb, &mut out);
    }
    // Along y, then z, through a gathered line.
    for z in 0..d {
        for x in 0..w {
            line.clear();
            line.extend((0..h).map(|y| g[(z * h + y) * w + x]));
            edt_1d(&mut line, spacing[1], &mut v, &mut zb, &mut out);
            for y in 0..h {
                g[(z * h + y) * w + x] = line[y];
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            line.clear();
            line.extend((0..d).map(|z| g[(z * h + y) * w + x]));
            edt_1d(&mut line, spacing[0], &mut v, &mut zb, &mut out);
            for z in 0..d {
                g[(z * h + y) * w + x] = line[z];
            }
        }
    }
    g
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (rank - lo as f64)
}

/// Distance reported when exactly one of the two masks is empty: the volume
/// diagonal in spacing units.
pub fn hd95_empty_sentinel(dims: [usize; 3], spacing: Spacing) -> f64 {
    (0..3).map(|i| (dims[i] as f64 * spacing[i]).powi(2)).sum::<f64>().sqrt()
}

/// Symmetric 95th-percentile boundary distance for one class: the larger
/// of the two directed 95th percentiles of nearest boundary distances.
///
/// Both masks empty gives 0; exactly one empty gives
/// [`hd95_empty_sentinel`].
pub fn hd95(pred: &LabelVolume, gt: &LabelVolume, class: usize, spacing: Spacing) -> Result<f64> {
    pred.same_dims(gt)?;
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::config("voxel spacing must be positive"));
    }
    let dims = pred.dims();
    let ba = boundary(&pred.mask(class), dims);
    let bb = boundary(&gt.mask(class), dims);
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(hd95_empty_sentinel(dims, spacing)),
        _ => {}
    }
    let [_, h, w] = dims;
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        let map = squared_distance_map(to, dims, spacing);
        let mut ds: Vec<f64> = from.iter().map(|&[z, y, x]| map[(z * h + y) * w + x].sqrt()).collect();
        percentile(&mut ds, 95.0)
    };
    let both = par::map(&[(&ba, &bb), (&bb, &ba)], |(from, to)| directed(from, to));
    Ok(both[0].max(both[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cube(n: usize, lo: [usize; 3], side: usize) -> LabelVolume {
        let mut l = vec![0u8; n * n * n];
        for z in lo[0]..lo[0] + side {
            for y in lo[1]..lo[1] + side {
                for x in lo[2]..lo[2] + side {
                    l[(z * n + y) * n + x] = 1;
                }
            }
        }
        LabelVolume::new(n, n, n, 2, l).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = vec![10u16; 16];
        assert_eq!(psnr(&a, &a, 255).unwrap(), f64::INFINITY);
        let b = vec![265u16; 16];
        assert!((psnr(&a, &b, 255).unwrap() - 0.0).abs() < 1e-12);
        assert!((psnr_from_mse(6.5025, 255) - 40.0).abs() < 1e-12);
        assert!(psnr(&a, &a[..3], 255).is_err());
    }

    #[test]
    fn psnr_falls_as_noise_grows() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a: Vec<u16> = (0..4096).map(|_| rng.gen_range(64..192)).collect();
        let mut last = f64::INFINITY;
        for amp in [1i32, 3, 9, 27] {
            let b: Vec<u16> = a.iter().map(|&v| (i32::from(v) + rng.gen_range(-amp..=amp)) as u16).collect();
            let p = psnr(&a, &b, 255).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn dice_examples() {
        let a = cube(8, [0, 0, 0], 4);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice(&a, &cube(8, [4, 4, 4], 4), 1).unwrap(), 0.0);
        // |A| = |B| = 100 with 50 shared voxels.
        let mut pa = vec![0u8; 1000];
        let mut pb = vec![0u8; 1000];
        pa[..100].fill(1);
        pb[50..150].fill(1);
        let (pa, pb) = (LabelVolume::new(10, 10, 10, 2, pa).unwrap(), LabelVolume::new(10, 10, 10, 2, pb).unwrap());
        assert_eq!(dice(&pa, &pb, 1).unwrap(), 0.5);
        let empty = LabelVolume::new(10, 10, 10, 2, vec![0; 1000]).unwrap();
        assert_eq!(dice(&empty, &empty, 1).unwrap(), 1.0);
        assert!(dice(&a, &empty, 1).is_err());
        assert_eq!(dice_per_slice(&a, &a, 1).unwrap(), 1.0);
    }

    #[test]
    fn hd95_examples() {
        let a = cube(10, [2, 2, 2], 4);
        assert_eq!(hd95(&a, &a, 1, [1.0; 3]).unwrap(), 0.0);
        assert_eq!(hd95(&a, &cube(10, [3, 2, 2], 4), 1, [1.0; 3]).unwrap(), 1.0);
        let one = |x: usize| {
            let mut l = vec![0u8; 27];
            l[x] = 1;
            LabelVolume::new(3, 3, 3, 2, l).unwrap()
        };
        assert_eq!(hd95(&one(13), &one(14), 1, [1.0; 3]).unwrap(), 1.0);
        assert_eq!(hd95(&one(13), &one(14), 1, [1.0, 1.0, 2.5]).unwrap(), 2.5);
        let empty = LabelVolume::new(3, 3, 3, 2, vec![0; 27]).unwrap();
        assert_eq!(hd95(&empty, &empty, 1, [1.0; 3]).unwrap(), 0.0);
        assert_eq!(hd95(&one(0), &empty, 1, [1.0; 3]).unwrap(), 27f64.sqrt());
        assert!(hd95(&one(0), &one(1), 1, [0.0, 1.0, 1.0]).is_err());
    }

    /// Brute force over all boundary pairs.
    fn hd95_oracle(a: &LabelVolume, b: &LabelVolume, spacing: Spacing) -> f64 {
        let dims = [a.depth(), a.height(), a.width()];
        let ba = boundary(&a.mask(1), dims);
        let bb = boundary(&b.mask(1), dims);
        if ba.is_empty() || bb.is_empty() {
            return if ba.is_empty() && bb.is_empty() { 0.0 } else { hd95_empty_sentinel(dims, spacing) };
        }
        let dist = |p: &[usize; 3], q: &[usize; 3]| {
            (0..3).map(|i| ((p[i] as f64 - q[i] as f64) * spacing[i]).powi(2)).sum::<f64>().sqrt()
        };
        let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
            let mut ds: Vec<f64> =
                from.iter().map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min)).collect();
            percentile(&mut ds, 95.0)
        };
        directed(&ba, &bb).max(directed(&bb, &ba))
    }

    fn masks() -> impl Strategy<Value = (usize, usize, usize, Vec<u8>, Vec<u8>)> {
        (1usize..=16, 1usize..=16, 1usize..=16).prop_flat_map(|(d, h, w)| {
            let n = d * h * w;
            (Just(d), Just(h), Just(w), prop::collection::vec(0u8..2, n), prop::collection::vec(0u8..2, n))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn hd95_matches_exhaustive_oracle(
            (d, h, w, a, b) in masks(),
            sz in 0.5f64..3.0,
        ) {
            let a = LabelVolume::new(w, h, d, 2, a).unwrap();
            let b = LabelVolume::new(w, h, d, 2, b).unwrap();
            let spacing = [sz, 1.0, 0.75];
            let fast = hd95(&a, &b, 1, spacing).unwrap();
            let slow = hd95_oracle(&a, &b, spacing);
            prop_assert!((fast - slow).abs() <= 1e-9 * slow.max(1.0), "{} vs {}", fast, slow);
            prop_assert_eq!(fast, hd95(&b, &a, 1, spacing).unwrap());
            prop_assert_eq!(dice(&a, &b, 1).unwrap(), dice(&b, &a, 1).unwrap());
        }
    }
}
