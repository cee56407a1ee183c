//! Photometric losses with their image-space gradients.

use super::image::Image;
use crate::error::Result;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 99.0;

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute error over every channel of every pixel.
pub fn loss_l1(img: &Image, gt: &Image) -> Result<f64> {
    img.same_shape(gt)?;
    Ok(img.data.iter().zip(&gt.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / img.len() as f64)
}

pub fn loss_l1_grad(img: &Image, gt: &Image) -> Result<Image> {
    img.same_shape(gt)?;
    let n = img.len() as f64;
    Ok(Image { data: img.data.iter().zip(&gt.data).map(|(a, b)| sign(a - b) / n).collect(), ..img.clone() })
}

/// Mean `|alpha − mask|`.
pub fn loss_mask(alpha: &Image, mask: &Image) -> Result<f64> {
    loss_l1(alpha, mask)
}

pub fn loss_mask_grad(alpha: &Image, mask: &Image) -> Result<Image> {
    loss_l1_grad(alpha, mask)
}

pub fn mse(img: &Image, gt: &Image) -> Result<f64> {
    img.same_shape(gt)?;
    Ok(img.data.iter().zip(&gt.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / img.len() as f64)
}

/// `10·log10(1/MSE)`, capped at [`PSNR_CAP`] for (near-)identical images.
pub fn psnr(img: &Image, gt: &Image) -> Result<f64> {
    let m = mse(img, gt)?;
    if m <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Zero-padded, same-size separable Gaussian filter of a single plane.
/// The kernel is symmetric, so this operator is its own adjoint.
fn blur(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

struct SsimPlane {
    map: Vec<f64>,
    /// Partials of the map with respect to the local moments.
    d_mu_x: Vec<f64>,
    d_exx: Vec<f64>,
    d_exy: Vec<f64>,
}

fn ssim_plane(x: &[f64], y: &[f64], w: usize, h: usize, with_grad: bool) -> SsimPlane {
    let k = gaussian_kernel();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = blur(x, w, h, &k);
    let my = blur(y, w, h, &k);
    let exx = blur(&xx, w, h, &k);
    let eyy = blur(&yy, w, h, &k);
    let exy = blur(&xy, w, h, &k);
    let n = w * h;
    let mut out = SsimPlane {
        map: vec![0.0; n],
        d_mu_x: if with_grad { vec![0.0; n] } else { Vec::new() },
        d_exx: if with_grad { vec![0.0; n] } else { Vec::new() },
        d_exy: if with_grad { vec![0.0; n] } else { Vec::new() },
    };
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let sxx = exx[i] - ux * ux;
        let syy = eyy[i] - uy * uy;
        let sxy = exy[i] - ux * uy;
        let a1 = 2.0 * ux * uy + SSIM_C1;
        let a2 = 2.0 * sxy + SSIM_C2;
        let b1 = ux * ux + uy * uy + SSIM_C1;
        let b2 = sxx + syy + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        out.map[i] = s;
        if with_grad {
            let bb = b1 * b2;
            out.d_mu_x[i] = (2.0 * uy * a2 - 2.0 * uy * a1) / bb - s * (2.0 * ux / b1 - 2.0 * ux / b2);
            out.d_exx[i] = -s / b2;
            out.d_exy[i] = 2.0 * a1 / bb;
        }
    }
    out
}

fn planes(img: &Image) -> Vec<Vec<f64>> {
    (0..img.channels).map(|c| img.channel(c).data).collect()
}

/// Mean SSIM over all pixels and channels.
pub fn ssim(img: &Image, gt: &Image) -> Result<f64> {
    img.same_shape(gt)?;
    let (pi, pg) = (planes(img), planes(gt));
    let total: f64 = pi
        .iter()
        .zip(&pg)
        .map(|(a, b)| ssim_plane(a, b, img.width, img.height, false).map.iter().sum::<f64>())
        .sum();
    Ok(total / img.len() as f64)
}

/// `1 − SSIM`.
pub fn loss_ssim(img: &Image, gt: &Image) -> Result<f64> {
    Ok(1.0 - ssim(img, gt)?)
}

/// Gradient of [`loss_ssim`] with respect to `img`.
pub fn loss_ssim_grad(img: &Image, gt: &Image) -> Result<Image> {
    Ok(loss_ssim_with_grad(img, gt)?.1)
}

/// [`loss_ssim`] and its gradient from one pass over the local moments.
pub fn loss_ssim_with_grad(img: &Image, gt: &Image) -> Result<(f64, Image)> {
    img.same_shape(gt)?;
    let (w, h) = (img.width, img.height);
    let k = gaussian_kernel();
    let scale = -1.0 / img.len() as f64;
    let mut out = Image::new(w, h, img.channels);
    let mut total = 0.0;
    for (c, (x, y)) in planes(img).iter().zip(planes(gt).iter()).enumerate() {
        let p = ssim_plane(x, y, w, h, true);
        total += p.map.iter().sum::<f64>();
        let g_mu: Vec<f64> = p.d_mu_x.iter().map(|v| v * scale).collect();
        let g_exx: Vec<f64> = p.d_exx.iter().map(|v| v * scale).collect();
        let g_exy: Vec<f64> = p.d_exy.iter().map(|v| v * scale).collect();
        let b_mu = blur(&g_mu, w, h, &k);
        let b_exx = blur(&g_exx, w, h, &k);
        let b_exy = blur(&g_exy, w, h, &k);
        for i in 0..w * h {
            out.data[i * img.channels + c] = b_mu[i] + 2.0 * x[i] * b_exx[i] + y[i] * b_exy[i];
        }
    }
    Ok((1.0 - total / img.len() as f64, out))
}
