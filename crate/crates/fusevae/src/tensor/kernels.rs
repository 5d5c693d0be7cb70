//! Raw compute kernels over flat `f64` slices. Shape checking happens in the
//! graph layer; these functions assume consistent dimensions.
//!
//! All reductions run in a fixed row-major order so results are bit-stable
//! across runs.

/// Output spatial dims of a 3x3 convolution with zero padding 1.
/// Stride 1 preserves dims; stride 2 halves them rounding up.
pub fn conv_out_dims(h: usize, w: usize, stride: usize) -> (usize, usize) {
    ((h - 1) / stride + 1, (w - 1) / stride + 1)
}

/// 3x3 convolution. `x`: `[cin, h, w]`, `k`: `[cout, cin, 3, 3]`,
/// output `[cout, oh, ow]`.
///
/// Stride 1 builds each output row in a scratch buffer with all three
/// horizontal taps fused per pass; this is the hot path of every training
/// step.
pub fn conv3x3(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: &[f64],
    cout: usize,
    stride: usize,
) -> Vec<f64> {
    let (oh, ow) = conv_out_dims(h, w, stride);
    let mut out = vec![0.0; cout * oh * ow];
    if stride == 1 && w >= 2 {
        let mut acc = vec![0.0; w];
        for co in 0..cout {
            let out_c = &mut out[co * h * w..(co + 1) * h * w];
            for oy in 0..h {
                acc.iter_mut().for_each(|v| *v = 0.0);
                for ci in 0..cin {
                    let x_c = &x[ci * h * w..(ci + 1) * h * w];
                    let k_base = (co * cin + ci) * 9;
                    for ky in 0..3usize {
                        let iy = oy + ky;
                        if iy == 0 || iy > h {
                            continue;
                        }
                        let iy = iy - 1;
                        let xrow = &x_c[iy * w..(iy + 1) * w];
                        let c0 = k[k_base + ky * 3];
                        let c1 = k[k_base + ky * 3 + 1];
                        let c2 = k[k_base + ky * 3 + 2];
                        acc[0] += c1 * xrow[0] + c2 * xrow[1];
                        for (o, t) in acc[1..w - 1].iter_mut().zip(xrow.windows(3)) {
                            *o += c0 * t[0] + c1 * t[1] + c2 * t[2];
                        }
                        acc[w - 1] += c0 * xrow[w - 2] + c1 * xrow[w - 1];
                    }
                }
                out_c[oy * w..(oy + 1) * w].copy_from_slice(&acc);
            }
        }
        return out;
    }
    for co in 0..cout {
        let out_c = &mut out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let x_c = &x[ci * h * w..(ci + 1) * h * w];
            let k_base = (co * cin + ci) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let coef = k[k_base + ky * 3 + kx];
                    if stride == 1 {
                        // iy = oy + ky - 1, valid rows give contiguous spans.
                        let oy_lo = if ky == 0 { 1 } else { 0 };
                        let oy_hi = if ky == 2 { h - 1 } else { h };
                        let ox_lo = if kx == 0 { 1 } else { 0 };
                        let ox_hi = if kx == 2 { w - 1 } else { w };
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - 1;
                            let orow = &mut out_c[oy * w + ox_lo..oy * w + ox_hi];
                            let xrow = &x_c[iy * w + ox_lo + kx - 1..iy * w + ox_hi + kx - 1];
                            for (o, &v) in orow.iter_mut().zip(xrow) {
                                *o += coef * v;
                            }
                        }
                    } else {
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &x_c[iy as usize * w..(iy as usize + 1) * w];
                            let orow = &mut out_c[oy * ow..(oy + 1) * ow];
                            for (ox, o) in orow.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - 1;
                                if ix >= 0 && ix < w as isize {
                                    *o += coef * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv3x3`] in its input argument: scatters `g` (`[cout, oh,
/// ow]`) through `k` back onto the input grid `[cin, h, w]`.
///
/// For stride 1 the scatter is rewritten as a gather, a correlation of `g`
/// with the 180-degree-flipped kernel, so rows can be accumulated in one
/// fused pass like the forward kernel.
pub fn conv3x3_bwd_input(
    g: &[f64],
    cout: usize,
    k: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    stride: usize,
) -> Vec<f64> {
    let (oh, ow) = conv_out_dims(h, w, stride);
    let mut dx = vec![0.0; cin * h * w];
    if stride == 1 && w >= 2 {
        let mut acc = vec![0.0; w];
        for ci in 0..cin {
            let dx_c = &mut dx[ci * h * w..(ci + 1) * h * w];
            for iy in 0..h {
                acc.iter_mut().for_each(|v| *v = 0.0);
                for co in 0..cout {
                    let g_c = &g[co * h * w..(co + 1) * h * w];
                    let k_base = (co * cin + ci) * 9;
                    for ky in 0..3usize {
                        // gy = iy + 1 - ky, kept in valid range.
                        if iy + 1 < ky || iy + 1 - ky >= h {
                            continue;
                        }
                        let gy = iy + 1 - ky;
                        let grow = &g_c[gy * w..(gy + 1) * w];
                        let c0 = k[k_base + ky * 3];
                        let c1 = k[k_base + ky * 3 + 1];
                        let c2 = k[k_base + ky * 3 + 2];
                        acc[0] += c0 * grow[1] + c1 * grow[0];
                        for (o, t) in acc[1..w - 1].iter_mut().zip(grow.windows(3)) {
                            *o += c0 * t[2] + c1 * t[1] + c2 * t[0];
                        }
                        acc[w - 1] += c1 * grow[w - 1] + c2 * grow[w - 2];
                    }
                }
                dx_c[iy * w..(iy + 1) * w].copy_from_slice(&acc);
            }
        }
        return dx;
    }
    for co in 0..cout {
        let g_c = &g[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let dx_c = &mut dx[ci * h * w..(ci + 1) * h * w];
            let k_base = (co * cin + ci) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let coef = k[k_base + ky * 3 + kx];
                    if stride == 1 {
                        let oy_lo = if ky == 0 { 1 } else { 0 };
                        let oy_hi = if ky == 2 { h - 1 } else { h };
                        let ox_lo = if kx == 0 { 1 } else { 0 };
                        let ox_hi = if kx == 2 { w - 1 } else { w };
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - 1;
                            let grow = &g_c[oy * w + ox_lo..oy * w + ox_hi];
                            let xrow = &mut dx_c[iy * w + ox_lo + kx - 1..iy * w + ox_hi + kx - 1];
                            for (o, &v) in xrow.iter_mut().zip(grow) {
                                *o += coef * v;
                            }
                        }
                    } else {
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &mut dx_c[iy as usize * w..(iy as usize + 1) * w];
                            let grow = &g_c[oy * ow..(oy + 1) * ow];
                            for (ox, &gv) in grow.iter().enumerate() {
                                let ix = (ox * stride + kx) as isize - 1;
                                if ix >= 0 && ix < w as isize {
                                    xrow[ix as usize] += coef * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Adjoint of [`conv3x3`] in its kernel argument: correlates `g` with `x`
/// into `[cout, cin, 3, 3]`.
pub fn conv3x3_bwd_kernel(
    g: &[f64],
    cout: usize,
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    stride: usize,
) -> Vec<f64> {
    let (oh, ow) = conv_out_dims(h, w, stride);
    let mut dk = vec![0.0; cout * cin * 9];
    if stride == 1 && w >= 2 {
        for co in 0..cout {
            let g_c = &g[co * h * w..(co + 1) * h * w];
            for ci in 0..cin {
                let x_c = &x[ci * h * w..(ci + 1) * h * w];
                let dk_base = (co * cin + ci) * 9;
                for ky in 0..3usize {
                    let mut a0 = 0.0;
                    let mut a1 = 0.0;
                    let mut a2 = 0.0;
                    for oy in 0..h {
                        let iy = oy + ky;
                        if iy == 0 || iy > h {
                            continue;
                        }
                        let iy = iy - 1;
                        let grow = &g_c[oy * w..(oy + 1) * w];
                        let xrow = &x_c[iy * w..(iy + 1) * w];
                        a1 += grow[0] * xrow[0];
                        a2 += grow[0] * xrow[1];
                        for (gv, t) in grow[1..w - 1].iter().zip(xrow.windows(3)) {
                            a0 += gv * t[0];
                            a1 += gv * t[1];
                            a2 += gv * t[2];
                        }
                        a0 += grow[w - 1] * xrow[w - 2];
                        a1 += grow[w - 1] * xrow[w - 1];
                    }
                    dk[dk_base + ky * 3] = a0;
                    dk[dk_base + ky * 3 + 1] = a1;
                    dk[dk_base + ky * 3 + 2] = a2;
                }
            }
        }
        return dk;
    }
    for co in 0..cout {
        let g_c = &g[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let x_c = &x[ci * h * w..(ci + 1) * h * w];
            let dk_base = (co * cin + ci) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let mut acc = 0.0;
                    if stride == 1 {
                        let oy_lo = if ky == 0 { 1 } else { 0 };
                        let oy_hi = if ky == 2 { h - 1 } else { h };
                        let ox_lo = if kx == 0 { 1 } else { 0 };
                        let ox_hi = if kx == 2 { w - 1 } else { w };
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - 1;
                            let grow = &g_c[oy * w + ox_lo..oy * w + ox_hi];
                            let xrow = &x_c[iy * w + ox_lo + kx - 1..iy * w + ox_hi + kx - 1];
                            acc += grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<f64>();
                        }
                    } else {
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &x_c[iy as usize * w..(iy as usize + 1) * w];
                            let grow = &g_c[oy * ow..(oy + 1) * ow];
                            for (ox, &gv) in grow.iter().enumerate() {
                                let ix = (ox * stride + kx) as isize - 1;
                                if ix >= 0 && ix < w as isize {
                                    acc += gv * xrow[ix as usize];
                                }
                            }
                        }
                    }
                    dk[dk_base + ky * 3 + kx] = acc;
                }
            }
        }
    }
    dk
}

/// `c[m, n] = a[m, p] * b[p, n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, p: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for l in 0..p {
            let av = a[i * p + l];
            let b_row = &b[l * n..(l + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// Nearest-neighbour 2x upsampling of `[c, h, w]` to `[c, 2h, 2w]`.
pub fn upsample2x(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * 4 * h * w];
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        let x_c = &x[ch * h * w..(ch + 1) * h * w];
        let out_c = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..h {
            for x_i in 0..w {
                let v = x_c[y * w + x_i];
                let base = 2 * y * ow + 2 * x_i;
                out_c[base] = v;
                out_c[base + 1] = v;
                out_c[base + ow] = v;
                out_c[base + ow + 1] = v;
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`]: sums each 2x2 block. Requires even dims.
pub fn sum_pool2x(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let x_c = &x[ch * h * w..(ch + 1) * h * w];
        let out_c = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            for x_i in 0..ow {
                let base = 2 * y * w + 2 * x_i;
                out_c[y * ow + x_i] = x_c[base] + x_c[base + 1] + x_c[base + w] + x_c[base + w + 1];
            }
        }
    }
    out
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
