//! Scalar comparisons between fields.

pub fn rmse(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let s: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    (s / a.len() as f64).sqrt()
}

pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    rmse(a, b).powi(2)
}

/// `‖a − b‖² / ‖b‖²`.
pub fn relative_mse(pred: &[f32], label: &[f32]) -> f64 {
    let num: f64 = pred.iter().zip(label).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    let den: f64 = label.iter().map(|&y| (y as f64).powi(2)).sum();
    num / den.max(f64::MIN_POSITIVE)
}

/// Anisotropic total variation of a row-major `nz×nx` grid.
pub fn total_variation(v: &[f32], nz: usize, nx: usize) -> f64 {
    assert_eq!(v.len(), nz * nx);
    let mut tv = 0.0;
    for i in 0..nz {
        for j in 0..nx {
            let c = v[i * nx + j] as f64;
            if i + 1 < nz {
                tv += (v[(i + 1) * nx + j] as f64 - c).abs();
            }
            if j + 1 < nx {
                tv += (v[i * nx + j + 1] as f64 - c).abs();
            }
        }
    }
    tv
}

/// Pearson correlation; 0 when either input is constant.
pub fn correlation(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().map(|&x| x as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&x| x as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}
