//! RGB + NIR-R-G orthophotos to a five-band `[R, G, B, NIR, NDVI]` stack,
//! and resampling of that stack onto a CHM lattice.

use crate::error::{Error, Result};
use crate::raster::{ByteRaster, GridSpec, MultiSpectralImage};

/// Two co-registered orthophotos from one acquisition.
#[derive(Debug, Clone)]
pub struct OpticalPair {
    /// Bands `[R, G, B]`.
    pub rgb: ByteRaster,
    /// Bands `[NIR, R, G]`; only NIR is kept.
    pub nirrg: ByteRaster,
    pub acquisition_year: f64,
}

/// `(nir - red) / (nir + red)`, or 0 when both are zero.
pub fn ndvi_value(nir: u8, red: u8) -> f64 {
    let (n, r) = (nir as f64, red as f64);
    if n + r == 0.0 {
        0.0
    } else {
        (n - r) / (n + r)
    }
}

/// Maps NDVI in [-1, 1] to a byte, rounding half away from zero.
pub fn ndvi_encode(ndvi: f64) -> u8 {
    ((ndvi.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8
}

pub fn ndvi_decode(code: u8) -> f64 {
    code as f64 / 255.0 * 2.0 - 1.0
}

pub fn compute_ndvi_u8(nir: &[u8], red: &[u8]) -> Result<Vec<u8>> {
    if nir.len() != red.len() {
        return Err(Error::ShapeMismatch(format!(
            "nir has {} values, red has {}",
            nir.len(),
            red.len()
        )));
    }
    // 64 KiB lookup beats per-pixel division on large orthophotos.
    let table: Vec<u8> = (0..=u16::MAX)
        .map(|k| ndvi_encode(ndvi_value((k >> 8) as u8, k as u8)))
        .collect();
    Ok(nir
        .iter()
        .zip(red)
        .map(|(&n, &r)| table[((n as usize) << 8) | r as usize])
        .collect())
}

pub fn stack_bands(pair: &OpticalPair) -> Result<MultiSpectralImage> {
    let (rgb, nirrg) = (&pair.rgb, &pair.nirrg);
    if rgb.bands.len() != 3 || nirrg.bands.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected 3-band rasters, got {} and {}",
            rgb.bands.len(),
            nirrg.bands.len()
        )));
    }
    if rgb.width != nirrg.width || rgb.height != nirrg.height {
        return Err(Error::AlignmentMismatch(format!(
            "rgb is {}x{}, nirrg is {}x{}",
            rgb.width, rgb.height, nirrg.width, nirrg.height
        )));
    }
    let half_pixel = 0.5 * rgb.transform.cell_width().min(rgb.transform.cell_height());
    if !rgb.transform.approx_eq(&nirrg.transform, half_pixel) {
        return Err(Error::AlignmentMismatch(format!(
            "transforms differ: {:?} vs {:?}",
            rgb.transform, nirrg.transform
        )));
    }
    let nir = nirrg.bands[0].clone();
    let ndvi = compute_ndvi_u8(&nir, &rgb.bands[0])?;
    MultiSpectralImage::new(
        rgb.transform,
        rgb.width,
        rgb.height,
        rgb.crs_code,
        vec![
            rgb.bands[0].clone(),
            rgb.bands[1].clone(),
            rgb.bands[2].clone(),
            nir,
            ndvi,
        ],
        pair.acquisition_year,
    )
}

/// Contributions of source pixels along one axis: `(index, overlap length)`.
fn area_weights(t0: f64, cell: f64, n_target: usize, s0: f64, s_cell: f64, n_src: usize) -> Vec<Vec<(usize, f64)>> {
    (0..n_target)
        .map(|i| {
            let a = (t0 + i as f64 * cell - s0) / s_cell;
            let b = a + cell / s_cell;
            let lo = (a.floor().max(0.0)) as usize;
            let hi = (b.ceil() as usize).min(n_src);
            (lo..hi)
                .filter_map(|k| {
                    let w = (b.min(k as f64 + 1.0) - a.max(k as f64)) * s_cell;
                    (w > 1e-12 * s_cell).then_some((k, w))
                })
                .collect()
        })
        .collect()
}

/// Bilinear taps along one axis for target cell centers.
fn bilinear_taps(t0: f64, cell: f64, n_target: usize, s0: f64, s_cell: f64, n_src: usize) -> Vec<(usize, usize, f64)> {
    (0..n_target)
        .map(|i| {
            let f = ((t0 + (i as f64 + 0.5) * cell - s0) / s_cell - 0.5).clamp(0.0, (n_src - 1) as f64);
            let k = (f.floor() as usize).min(n_src.saturating_sub(2));
            let frac = f - k as f64;
            (k, (k + 1).min(n_src - 1), frac)
        })
        .collect()
}

/// Resamples R, G, B and NIR onto `target`: area averaging when the target
/// cells are at least as large as the source, bilinear otherwise. NDVI is
/// recomputed from the resampled NIR and R.
pub fn resample_to(image: &MultiSpectralImage, target: GridSpec) -> Result<MultiSpectralImage> {
    let src = image.transform;
    let tgt = target.transform;
    let tol = 1e-6 * src.cell_width().max(src.cell_height());
    let (sb, tb) = (image.bbox(), target.bbox());
    if tb.min_x < sb.min_x - tol
        || tb.max_x > sb.max_x + tol
        || tb.min_y < sb.min_y - tol
        || tb.max_y > sb.max_y + tol
    {
        return Err(Error::CoverageGap(format!("target {tb:?} exceeds source {sb:?}")));
    }
    let (sw, sh) = (src.cell_width(), src.cell_height());
    let (tw, th) = (tgt.cell_width(), tgt.cell_height());
    let (w, h) = (target.width, target.height);
    // Row distances are measured downward from the top edge.
    let (s_top, t_top) = (sb.max_y, tb.max_y);

    let mut bands: Vec<Vec<u8>> = Vec::with_capacity(5);
    if tw >= sw - tol && th >= sh - tol {
        let wx = area_weights(tb.min_x, tw, w, sb.min_x, sw, image.width);
        let wy = area_weights(-t_top, th, h, -s_top, sh, image.height);
        for b in 0..4 {
            let band = image.band(b);
            let mut out = vec![0u8; w * h];
            for (r, ys) in wy.iter().enumerate() {
                for (c, xs) in wx.iter().enumerate() {
                    let (mut num, mut den) = (0.0f64, 0.0f64);
                    for &(sr, wyv) in ys {
                        let row = &band[sr * image.width..];
                        for &(sc, wxv) in xs {
                            let wgt = wxv * wyv;
                            num += wgt * row[sc] as f64;
                            den += wgt;
                        }
                    }
                    out[r * w + c] = if den > 0.0 { (num / den).round() as u8 } else { 0 };
                }
            }
            bands.push(out);
        }
    } else {
        let tx = bilinear_taps(tb.min_x, tw, w, sb.min_x, sw, image.width);
        let ty = bilinear_taps(-t_top, th, h, -s_top, sh, image.height);
        for b in 0..4 {
            let band = image.band(b);
            let at = |c: usize, r: usize| band[r * image.width + c] as f64;
            let mut out = vec![0u8; w * h];
            for (r, &(r0, r1, fy)) in ty.iter().enumerate() {
                for (c, &(c0, c1, fx)) in tx.iter().enumerate() {
                    let top = at(c0, r0) * (1.0 - fx) + at(c1, r0) * fx;
                    let bot = at(c0, r1) * (1.0 - fx) + at(c1, r1) * fx;
                    out[r * w + c] = (top * (1.0 - fy) + bot * fy).round() as u8;
                }
            }
            bands.push(out);
        }
    }
    let ndvi = compute_ndvi_u8(&bands[MultiSpectralImage::NIR], &bands[MultiSpectralImage::RED])?;
    bands.push(ndvi);
    MultiSpectralImage::new(tgt, w, h, image.crs_code, bands, image.acquisition_year)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::AffineTransform;
    use proptest::prelude::*;

    fn raster(ox: f64, oy: f64, cell: f64, w: usize, h: usize, bands: Vec<Vec<u8>>) -> ByteRaster {
        ByteRaster::new(AffineTransform::north_up(ox, oy, cell).unwrap(), w, h, 2154, bands).unwrap()
    }

    fn image(cell: f64, w: usize, h: usize, bands: Vec<Vec<u8>>) -> MultiSpectralImage {
        let t = AffineTransform::north_up(0.0, h as f64 * cell, cell).unwrap();
        MultiSpectralImage::new(t, w, h, 2154, bands, 2020.0).unwrap()
    }

    #[test]
    fn ndvi_examples() {
        assert_eq!(compute_ndvi_u8(&[200], &[100]).unwrap(), vec![170]);
        assert_eq!(compute_ndvi_u8(&[50], &[50]).unwrap(), vec![128]);
        assert_eq!(compute_ndvi_u8(&[0], &[0]).unwrap(), vec![128]);
        assert_eq!(compute_ndvi_u8(&[255], &[0]).unwrap(), vec![255]);
        assert_eq!(compute_ndvi_u8(&[0], &[255]).unwrap(), vec![0]);
        assert!(compute_ndvi_u8(&[1, 2], &[1]).is_err());
    }

    #[test]
    fn stack_example() {
        let pair = OpticalPair {
            rgb: raster(0.0, 1.0, 1.0, 1, 1, vec![vec![10], vec![20], vec![30]]),
            nirrg: raster(0.0, 1.0, 1.0, 1, 1, vec![vec![40], vec![10], vec![20]]),
            acquisition_year: 2021.0,
        };
        let s = stack_bands(&pair).unwrap();
        let px: Vec<u8> = s.bands().iter().map(|b| b[0]).collect();
        assert_eq!(px, vec![10, 20, 30, 40, 204]);
        assert_eq!(s.acquisition_year, 2021.0);
    }

    #[test]
    fn stack_alignment() {
        let b = || vec![vec![0u8; 4], vec![0; 4], vec![0; 4]];
        let base = raster(0.0, 2.0, 1.0, 2, 2, b());
        let near = OpticalPair {
            rgb: base.clone(),
            nirrg: raster(0.4, 2.0, 1.0, 2, 2, b()),
            acquisition_year: 2020.0,
        };
        assert!(stack_bands(&near).is_ok());
        let far = OpticalPair {
            nirrg: raster(0.6, 2.0, 1.0, 2, 2, b()),
            ..near.clone()
        };
        assert!(matches!(stack_bands(&far), Err(Error::AlignmentMismatch(_))));
        let shape = OpticalPair {
            nirrg: raster(0.0, 2.0, 1.0, 1, 4, b()),
            ..near
        };
        assert!(matches!(stack_bands(&shape), Err(Error::AlignmentMismatch(_))));
    }

    #[test]
    fn downsample_averages_area() {
        let band = vec![0, 100, 50, 50, 10, 10, 20, 20, 0, 0, 4, 4, 0, 0, 4, 4];
        let img = image(0.25, 4, 4, vec![band.clone(), band.clone(), band.clone(), band, vec![0; 16]]);
        let target = GridSpec::new(AffineTransform::north_up(0.0, 1.0, 0.5).unwrap(), 2, 2);
        let out = resample_to(&img, target).unwrap();
        assert_eq!(out.band(0), &[30, 35, 0, 4]);
    }

    #[test]
    fn ndvi_is_recomputed_after_resampling() {
        // One bright-NIR pixel among three neutral ones.
        let red = vec![0, 10, 10, 10];
        let nir = vec![200, 10, 10, 10];
        let ndvi = compute_ndvi_u8(&nir, &red).unwrap();
        let img = image(0.25, 2, 2, vec![red.clone(), red.clone(), red, nir, ndvi.clone()]);
        let target = GridSpec::new(AffineTransform::north_up(0.0, 0.5, 0.5).unwrap(), 1, 1);
        let out = resample_to(&img, target).unwrap();
        let averaged = (ndvi.iter().map(|&v| v as f64).sum::<f64>() / 4.0).round() as i32;
        let got = out.band(MultiSpectralImage::NDVI)[0] as i32;
        assert_eq!(got, compute_ndvi_u8(&[58], &[8]).unwrap()[0] as i32);
        assert!((got - averaged).abs() > 2);
    }

    #[test]
    fn coverage_gap() {
        let img = image(0.25, 4, 4, vec![vec![1; 16]; 5]);
        let target = GridSpec::new(AffineTransform::north_up(0.5, 1.0, 0.5).unwrap(), 2, 2);
        assert!(matches!(resample_to(&img, target), Err(Error::CoverageGap(_))));
    }

    #[test]
    fn upsample_bilinear() {
        let img = image(1.0, 2, 1, vec![vec![0, 100]; 5]);
        let target = GridSpec::new(AffineTransform::north_up(0.0, 1.0, 0.5).unwrap(), 4, 2);
        let out = resample_to(&img, target).unwrap();
        assert_eq!(&out.band(0)[..4], &[0, 25, 75, 100]);
    }

    #[test]
    fn identity_resample() {
        let band: Vec<u8> = (0..36).map(|v| (v * 7) as u8).collect();
        let ndvi = compute_ndvi_u8(&band, &band).unwrap();
        let img = image(0.5, 6, 6, vec![band.clone(), band.clone(), band.clone(), band, ndvi]);
        let out = resample_to(&img, img.spec()).unwrap();
        assert_eq!(out.bands(), img.bands());
    }

    proptest! {
        #[test]
        fn ndvi_quantization_bound(nir in any::<u8>(), red in any::<u8>()) {
            let code = compute_ndvi_u8(&[nir], &[red]).unwrap()[0];
            prop_assert!((ndvi_decode(code) - ndvi_value(nir, red)).abs() <= 1.0 / 255.0 + 1e-12);
        }

        #[test]
        fn constant_image_is_invariant(
            v in any::<u8>(),
            factor in 1usize..4,
            up in any::<bool>(),
        ) {
            let n = 6usize * factor;
            let img = image(0.25, n, n, vec![vec![v; n * n]; 5]);
            let (cell, m) = if up { (0.25 / factor as f64, n * factor) } else { (0.25 * factor as f64, 6) };
            let target = GridSpec::new(AffineTransform::north_up(0.0, n as f64 * 0.25, cell).unwrap(), m, m);
            let out = resample_to(&img, target).unwrap();
            for b in 0..4 {
                prop_assert!(out.band(b).iter().all(|&x| x == v));
            }
        }

        #[test]
        fn integer_downsampling_conserves_mean(
            band in proptest::collection::vec(any::<u8>(), 64),
            factor in prop::sample::select(vec![2usize, 4, 8]),
        ) {
            let img = image(0.25, 8, 8, vec![band.clone(), band.clone(), band.clone(), band.clone(), vec![0; 64]]);
            let m = 8 / factor;
            let target = GridSpec::new(AffineTransform::north_up(0.0, 2.0, 0.25 * factor as f64).unwrap(), m, m);
            let out = resample_to(&img, target).unwrap();
            let src_mean = band.iter().map(|&v| v as f64).sum::<f64>() / 64.0;
            let dst_mean = out.band(0).iter().map(|&v| v as f64).sum::<f64>() / (m * m) as f64;
            prop_assert!((src_mean - dst_mean).abs() <= 0.5);
        }
    }
}
