use crate::mask::LabelMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Class and boundary decomposition of a label map.
///
/// `semantic` is the `[K, H, W]` one-hot mask `E`, `band` the `[H, W]` binary
/// boundary band `B`, and `boundary`/`interior` are `E_k·B` and `E_k·(1−B)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryMasks<T> {
    pub semantic: Tensor<T>,
    pub band: Tensor<T>,
    pub boundary: Tensor<T>,
    pub interior: Tensor<T>,
}

impl<T: Scalar> BoundaryMasks<T> {
    pub fn num_classes(&self) -> usize {
        self.semantic.shape()[0]
    }
}

/// Dilation radius for a band of (approximately) `edge_size` pixels.
///
/// A label change produces seed pixels on both sides, so a radius `r`
/// dilation covers `2·(r + 1)` pixels across a straight edge.
pub fn band_radius(edge_size: usize) -> usize {
    edge_size.saturating_sub(1) / 2
}

/// Pixels with a 4-neighbour carrying a different label; ignored pixels never seed
/// and never count as a differing neighbour.
pub fn boundary_seeds(mg: &LabelMask, ignore: u32) -> Vec<bool> {
    let (h, w) = (mg.height(), mg.width());
    let mut seeds = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let l = mg.get(y, x);
            if l == ignore {
                continue;
            }
            let differs = |yy: usize, xx: usize| {
                let n = mg.get(yy, xx);
                n != ignore && n != l
            };
            seeds[y * w + x] = (y > 0 && differs(y - 1, x))
                || (y + 1 < h && differs(y + 1, x))
                || (x > 0 && differs(y, x - 1))
                || (x + 1 < w && differs(y, x + 1));
        }
    }
    seeds
}

/// Builds `E`, `B`, `B_k` and `B̄_k` for `mg`. `edge_size` must be at least 1.
pub fn boundary_band<T: Scalar>(mg: &LabelMask, classes: usize, ignore: u32, edge_size: usize) -> BoundaryMasks<T> {
    assert!(edge_size >= 1, "edge_size must be >= 1");
    let (h, w) = (mg.height(), mg.width());
    let seeds = boundary_seeds(mg, ignore);
    let r = band_radius(edge_size) as isize;

    let mut band = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            if !seeds[y * w + x] {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        band.data_mut()[yy as usize * w + xx as usize] = T::one();
                    }
                }
            }
        }
    }

    let hw = h * w;
    let mut semantic = Tensor::zeros(&[classes, h, w]);
    for (i, &l) in mg.labels().iter().enumerate() {
        if l != ignore && (l as usize) < classes {
            semantic.data_mut()[l as usize * hw + i] = T::one();
        }
    }
    let boundary = Tensor::from_fn(semantic.shape(), |i| semantic.data()[i] * band.data()[i % hw]);
    let interior = Tensor::from_fn(semantic.shape(), |i| {
        semantic.data()[i] * (T::one() - band.data()[i % hw])
    });
    BoundaryMasks {
        semantic,
        band,
        boundary,
        interior,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_split(n: usize) -> LabelMask {
        LabelMask::from_fn(n, n, |_, x| u32::from(x >= n / 2))
    }

    #[test]
    fn constant_map_has_no_band() {
        let m = LabelMask::filled(6, 5, 2);
        let b: BoundaryMasks<f64> = boundary_band(&m, 3, 255, 4);
        assert!(b.band.data().iter().all(|&v| v == 0.0));
        assert_eq!(b.interior, b.semantic);
    }

    #[test]
    fn half_split_edge4_is_four_columns() {
        let b: BoundaryMasks<f64> = boundary_band(&half_split(8), 2, 255, 4);
        for y in 0..8 {
            for x in 0..8 {
                let expect = if (2..6).contains(&x) { 1.0 } else { 0.0 };
                assert_eq!(b.band.at(&[y, x]), expect, "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn edge1_is_seed_set() {
        let m = LabelMask::from_fn(5, 5, |y, x| u32::from(x + y >= 5));
        let seeds = boundary_seeds(&m, 255);
        let b: BoundaryMasks<f64> = boundary_band(&m, 2, 255, 1);
        for (i, &s) in seeds.iter().enumerate() {
            assert_eq!(b.band.data()[i] == 1.0, s);
        }
    }

    #[test]
    fn ignored_pixels_have_no_class() {
        let m = LabelMask::new(1, 3, vec![0, 255, 1]).unwrap();
        let b: BoundaryMasks<f64> = boundary_band(&m, 2, 255, 2);
        assert_eq!(b.semantic.at(&[0, 0, 1]), 0.0);
        assert_eq!(b.semantic.at(&[1, 0, 1]), 0.0);
        // 0 and 1 are separated by an ignored pixel, so nothing seeds.
        assert!(b.band.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn radius_table() {
        assert_eq!(
            (1..=6).map(band_radius).collect::<Vec<_>>(),
            vec![0, 0, 1, 1, 2, 2]
        );
    }
}
