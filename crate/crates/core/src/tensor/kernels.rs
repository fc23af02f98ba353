//! Raw compute kernels working on flat row-major slices. The tape wraps
//! these into recorded ops; keeping them as plain functions makes the math
//! testable in isolation and keeps the hot loops monomorphic.

/// Border handling for fixed-kernel depthwise convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Border {
    Zero,
    Replicate,
}

pub fn conv2d_out_dim(n: usize, k: usize, stride: usize, padding: usize) -> usize {
    (n + 2 * padding - k) / stride + 1
}

/// input: [ci, h, w], kernel: [co, ci, k, k] -> output [co, oh, ow].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    input: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    co: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let oh = conv2d_out_dim(h, k, stride, padding);
    let ow = conv2d_out_dim(w, k, stride, padding);
    let mut out = vec![0.0; co * oh * ow];
    for oc in 0..co {
        let out_plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..ci {
            let in_plane = &input[ic * h * w..(ic + 1) * h * w];
            let kern = &kernel[(oc * ci + ic) * k * k..(oc * ci + ic + 1) * k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let kv = kern[ky * k + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    // Input row index iy = oy*stride + ky - padding must be in [0, h).
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &in_plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out_row[ox] += kv * in_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of conv2d w.r.t. the input.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_input(
    grad_out: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    co: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let oh = conv2d_out_dim(h, k, stride, padding);
    let ow = conv2d_out_dim(w, k, stride, padding);
    let mut grad_in = vec![0.0; ci * h * w];
    for oc in 0..co {
        let g_plane = &grad_out[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..ci {
            let gi_plane = &mut grad_in[ic * h * w..(ic + 1) * h * w];
            let kern = &kernel[(oc * ci + ic) * k * k..(oc * ci + ic + 1) * k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let kv = kern[ky * k + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let gi_row = &mut gi_plane[iy as usize * w..(iy as usize + 1) * w];
                        let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gi_row[ix as usize] += kv * g_row[ox];
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Gradient of conv2d w.r.t. the kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_kernel(
    grad_out: &[f64],
    input: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let oh = conv2d_out_dim(h, k, stride, padding);
    let ow = conv2d_out_dim(w, k, stride, padding);
    let mut grad_k = vec![0.0; co * ci * k * k];
    for oc in 0..co {
        let g_plane = &grad_out[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..ci {
            let in_plane = &input[ic * h * w..(ic + 1) * h * w];
            let gk = &mut grad_k[(oc * ci + ic) * k * k..(oc * ci + ic + 1) * k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &in_plane[iy as usize * w..(iy as usize + 1) * w];
                        let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += g_row[ox] * in_row[ix as usize];
                        }
                    }
                    gk[ky * k + kx] += acc;
                }
            }
        }
    }
    grad_k
}

/// Depthwise convolution with a single fixed [kh, kw] kernel applied to
/// every channel, same-size output. Used for Laplacian responses and
/// Gaussian blur, where the kernel is a constant.
pub fn depthwise_fixed_forward(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    kh: usize,
    kw: usize,
    border: Border,
) -> Vec<f64> {
    let ph = (kh / 2) as isize;
    let pw = (kw / 2) as isize;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let in_plane = &input[ch * h * w..(ch + 1) * h * w];
        let out_plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for ky in 0..kh as isize {
                    for kx in 0..kw as isize {
                        let iy = y + ky - ph;
                        let ix = x + kx - pw;
                        let v = match border {
                            Border::Zero => {
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    0.0
                                } else {
                                    in_plane[iy as usize * w + ix as usize]
                                }
                            }
                            Border::Replicate => {
                                let cy = iy.clamp(0, h as isize - 1) as usize;
                                let cx = ix.clamp(0, w as isize - 1) as usize;
                                in_plane[cy * w + cx]
                            }
                        };
                        acc += kernel[(ky * kw as isize + kx) as usize] * v;
                    }
                }
                out_plane[(y * w as isize + x) as usize] = acc;
            }
        }
    }
    out
}

/// Backward of `depthwise_fixed_forward` w.r.t. the input: scatter each
/// output gradient through the taps it read.
pub fn depthwise_fixed_backward(
    grad_out: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    kh: usize,
    kw: usize,
    border: Border,
) -> Vec<f64> {
    let ph = (kh / 2) as isize;
    let pw = (kw / 2) as isize;
    let mut grad_in = vec![0.0; c * h * w];
    for ch in 0..c {
        let g_plane = &grad_out[ch * h * w..(ch + 1) * h * w];
        let gi_plane = &mut grad_in[ch * h * w..(ch + 1) * h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let g = g_plane[(y * w as isize + x) as usize];
                if g == 0.0 {
                    continue;
                }
                for ky in 0..kh as isize {
                    for kx in 0..kw as isize {
                        let iy = y + ky - ph;
                        let ix = x + kx - pw;
                        let kv = kernel[(ky * kw as isize + kx) as usize];
                        match border {
                            Border::Zero => {
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    gi_plane[iy as usize * w + ix as usize] += kv * g;
                                }
                            }
                            Border::Replicate => {
                                let cy = iy.clamp(0, h as isize - 1) as usize;
                                let cx = ix.clamp(0, w as isize - 1) as usize;
                                gi_plane[cy * w + cx] += kv * g;
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// 2x2 average pooling, h and w must be even.
pub fn avgpool2_forward(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let oh = h / 2;
    let ow = w / 2;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let in_plane = &input[ch * h * w..(ch + 1) * h * w];
        let out_plane = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let y = oy * 2;
                let x = ox * 2;
                out_plane[oy * ow + ox] = 0.25
                    * (in_plane[y * w + x]
                        + in_plane[y * w + x + 1]
                        + in_plane[(y + 1) * w + x]
                        + in_plane[(y + 1) * w + x + 1]);
            }
        }
    }
    out
}

pub fn avgpool2_backward(grad_out: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let oh = h / 2;
    let ow = w / 2;
    let mut grad_in = vec![0.0; c * h * w];
    for ch in 0..c {
        let g_plane = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        let gi_plane = &mut grad_in[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = 0.25 * g_plane[oy * ow + ox];
                let y = oy * 2;
                let x = ox * 2;
                gi_plane[y * w + x] += g;
                gi_plane[y * w + x + 1] += g;
                gi_plane[(y + 1) * w + x] += g;
                gi_plane[(y + 1) * w + x + 1] += g;
            }
        }
    }
    grad_in
}

/// Inverse-mapped affine warp parameters, in pixel units.
#[derive(Clone, Copy, Debug)]
pub struct WarpParams {
    pub cos_t: f64,
    pub sin_t: f64,
    pub tx: f64,
    pub ty: f64,
}

impl WarpParams {
    pub fn identity() -> Self {
        WarpParams { cos_t: 1.0, sin_t: 0.0, tx: 0.0, ty: 0.0 }
    }

    /// Source coordinates for an output pixel: translate by (-tx, -ty),
    /// rotate by -theta about the image center.
    fn source(&self, h: usize, w: usize, oy: usize, ox: usize) -> (f64, f64) {
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let dx = ox as f64 - cx - self.tx;
        let dy = oy as f64 - cy - self.ty;
        let sx = self.cos_t * dx + self.sin_t * dy + cx;
        let sy = -self.sin_t * dx + self.cos_t * dy + cy;
        (sy, sx)
    }
}

/// Bilinear affine warp with zero border. Differentiable w.r.t. the input
/// for a fixed set of warp parameters.
pub fn affine_warp_forward(input: &[f64], c: usize, h: usize, w: usize, p: &WarpParams) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for oy in 0..h {
        for ox in 0..w {
            let (sy, sx) = p.source(h, w, oy, ox);
            let y0 = sy.floor();
            let x0 = sx.floor();
            let fy = sy - y0;
            let fx = sx - x0;
            let taps = [
                (y0 as isize, x0 as isize, (1.0 - fy) * (1.0 - fx)),
                (y0 as isize, x0 as isize + 1, (1.0 - fy) * fx),
                (y0 as isize + 1, x0 as isize, fy * (1.0 - fx)),
                (y0 as isize + 1, x0 as isize + 1, fy * fx),
            ];
            for ch in 0..c {
                let in_plane = &input[ch * h * w..(ch + 1) * h * w];
                let mut acc = 0.0;
                for &(ty, tx, wt) in &taps {
                    if wt != 0.0 && ty >= 0 && ty < h as isize && tx >= 0 && tx < w as isize {
                        acc += wt * in_plane[ty as usize * w + tx as usize];
                    }
                }
                out[ch * h * w + oy * w + ox] = acc;
            }
        }
    }
    out
}

pub fn affine_warp_backward(
    grad_out: &[f64],
    c: usize,
    h: usize,
    w: usize,
    p: &WarpParams,
) -> Vec<f64> {
    let mut grad_in = vec![0.0; c * h * w];
    for oy in 0..h {
        for ox in 0..w {
            let (sy, sx) = p.source(h, w, oy, ox);
            let y0 = sy.floor();
            let x0 = sx.floor();
            let fy = sy - y0;
            let fx = sx - x0;
            let taps = [
                (y0 as isize, x0 as isize, (1.0 - fy) * (1.0 - fx)),
                (y0 as isize, x0 as isize + 1, (1.0 - fy) * fx),
                (y0 as isize + 1, x0 as isize, fy * (1.0 - fx)),
                (y0 as isize + 1, x0 as isize + 1, fy * fx),
            ];
            for ch in 0..c {
                let g = grad_out[ch * h * w + oy * w + ox];
                if g == 0.0 {
                    continue;
                }
                let gi_plane = &mut grad_in[ch * h * w..(ch + 1) * h * w];
                for &(ty, tx, wt) in &taps {
                    if wt != 0.0 && ty >= 0 && ty < h as isize && tx >= 0 && tx < w as isize {
                        gi_plane[ty as usize * w + tx as usize] += wt * g;
                    }
                }
            }
        }
    }
    grad_in
}

/// y = W x  with W: [rows, cols], x: [cols].
pub fn matvec(wm: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows];
    for r in 0..rows {
        let row = &wm[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x.iter()) {
            acc += a * b;
        }
        y[r] = acc;
    }
    y
}

/// C = A B^T with A: [ra, k], B: [rb, k] -> C: [ra, rb].
pub fn matmul_nt(a: &[f64], b: &[f64], ra: usize, rb: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; ra * rb];
    for i in 0..ra {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..rb {
            let bj = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in ai.iter().zip(bj.iter()) {
                acc += x * y;
            }
            c[i * rb + j] = acc;
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel of value 2 scales the image.
        let input = vec![1.0; 9];
        let out = conv2d_forward(&input, 1, 3, 3, &[2.0], 1, 1, 1, 0);
        assert_eq!(out, vec![2.0; 9]);
    }

    #[test]
    fn conv_output_dims() {
        assert_eq!(conv2d_out_dim(5, 3, 1, 0), 3);
        assert_eq!(conv2d_out_dim(5, 3, 1, 1), 5);
        assert_eq!(conv2d_out_dim(6, 3, 2, 1), 3);
    }

    #[test]
    fn avgpool_roundtrip_constant() {
        let input = vec![3.0; 16];
        let out = avgpool2_forward(&input, 1, 4, 4);
        assert_eq!(out, vec![3.0; 4]);
    }

    #[test]
    fn warp_identity_is_exact() {
        let input: Vec<f64> = (0..25).map(|i| i as f64 * 0.1).collect();
        let out = affine_warp_forward(&input, 1, 5, 5, &WarpParams::identity());
        assert_eq!(out, input);
    }

    #[test]
    fn matvec_basic() {
        // [[1,2],[3,4]] * [1,1] = [3,7]
        let y = matvec(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0], 2, 2);
        assert_eq!(y, vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_nt_gram() {
        // rows [1,0] and [0,1]: gram = I
        let g = matmul_nt(&[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0], 2, 2, 2);
        assert_eq!(g, vec![1.0, 0.0, 0.0, 1.0]);
    }
}
