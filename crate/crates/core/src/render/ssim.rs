//! Structural similarity with an 11×11 Gaussian window (σ = 1.5) over valid
//! window positions, and its exact gradient.

use crate::{Error, Image, Result};

/// Window edge length.
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Valid-mode separable filter of a `w×h` plane; output is
/// `(w-10)×(h-10)`.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for r in 0..h {
        let row = &src[r * w..(r + 1) * w];
        for c in 0..ow {
            tmp[r * ow + c] = k.iter().zip(&row[c..c + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a window map back to `w×h`.
fn filter_adjoint(map: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for r in 0..oh {
        for c in 0..ow {
            let v = map[r * ow + c];
            for i in 0..SSIM_WINDOW {
                tmp[(r + i) * ow + c] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..ow {
            let v = tmp[r * ow + c];
            for i in 0..SSIM_WINDOW {
                out[r * w + c + i] += k[i] * v;
            }
        }
    }
    out
}

fn check(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::invalid(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::UndefinedMetric(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )));
    }
    Ok(())
}

/// Mean SSIM over all valid windows and channels.
pub fn ssim(img: &Image, reference: &Image) -> Result<f64> {
    Ok(compute(img, reference, false)?.0)
}

/// Mean SSIM and its gradient with respect to `img` (interleaved like the
/// image data).
pub fn ssim_with_gradient(img: &Image, reference: &Image) -> Result<(f64, Vec<f64>)> {
    compute(img, reference, true)
}

fn compute(img: &Image, reference: &Image, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    check(img, reference)?;
    let (w, h, ch) = (img.width, img.height, img.channels);
    let k = kernel();
    let windows = (w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW);
    let norm = 1.0 / (windows * ch) as f64;
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; img.data.len()] } else { Vec::new() };
    for c in 0..ch {
        let x = img.plane(c);
        let y = reference.plane(c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mx = filter_valid(&x, w, h, &k);
        let my = filter_valid(&y, w, h, &k);
        let exx = filter_valid(&xx, w, h, &k);
        let eyy = filter_valid(&yy, w, h, &k);
        let exy = filter_valid(&xy, w, h, &k);
        let mut a_map = vec![0.0; windows];
        let mut b_map = vec![0.0; windows];
        let mut d_map = vec![0.0; windows];
        for i in 0..windows {
            let (ux, uy) = (mx[i], my[i]);
            let vx = exx[i] - ux * ux;
            let vy = eyy[i] - uy * uy;
            let cxy = exy[i] - ux * uy;
            let n1 = 2.0 * ux * uy + C1;
            let n2 = 2.0 * cxy + C2;
            let d1 = ux * ux + uy * uy + C1;
            let d2 = vx + vy + C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            if want_grad {
                a_map[i] = s * (2.0 * uy / n1 - 2.0 * uy / n2 - 2.0 * ux / d1 + 2.0 * ux / d2) * norm;
                b_map[i] = -2.0 * s / d2 * norm;
                d_map[i] = 2.0 * s / n2 * norm;
            }
        }
        if want_grad {
            let ga = filter_adjoint(&a_map, w, h, &k);
            let gb = filter_adjoint(&b_map, w, h, &k);
            let gd = filter_adjoint(&d_map, w, h, &k);
            for p in 0..w * h {
                grad[p * ch + c] = ga[p] + gb[p] * x[p] + gd[p] * y[p];
            }
        }
    }
    Ok((total * norm, grad))
}
