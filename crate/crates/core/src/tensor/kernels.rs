// Raw slice kernels shared by forward and backward passes.

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Dot product with eight independent partial sums so the loop vectorises.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub(crate) fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Row/column ranges of the output plane touched by kernel offset (dy, dx).
#[inline]
fn tap_range(len: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { len - d as usize } else { len };
    (lo, hi.max(lo))
}

/// Unfolds the 3×3 neighbourhoods of `x` into a `[cin·9, h·w]` matrix with
/// zero padding, so a convolution becomes a single matrix product.
fn im2col(x: &[f64], cin: usize, h: usize, wd: usize) -> Vec<f64> {
    let hw = h * wd;
    let mut cols = vec![0.0; cin * 9 * hw];
    for ci in 0..cin {
        let src = &x[ci * hw..(ci + 1) * hw];
        for k in 0..9 {
            let (dy, dx) = ((k / 3) as isize - 1, (k % 3) as isize - 1);
            let (y0, y1) = tap_range(h, dy);
            let (x0, x1) = tap_range(wd, dx);
            let sx0 = (x0 as isize + dx) as usize;
            let row = &mut cols[(ci * 9 + k) * hw..(ci * 9 + k + 1) * hw];
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                row[y * wd + x0..y * wd + x1].copy_from_slice(&src[sy * wd + sx0..sy * wd + sx0 + (x1 - x0)]);
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im_acc(cols: &[f64], gx: &mut [f64], cin: usize, h: usize, wd: usize) {
    let hw = h * wd;
    for ci in 0..cin {
        let dst = &mut gx[ci * hw..(ci + 1) * hw];
        for k in 0..9 {
            let (dy, dx) = ((k / 3) as isize - 1, (k % 3) as isize - 1);
            let (y0, y1) = tap_range(h, dy);
            let (x0, x1) = tap_range(wd, dx);
            let sx0 = (x0 as isize + dx) as usize;
            let row = &cols[(ci * 9 + k) * hw..(ci * 9 + k + 1) * hw];
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let d = &mut dst[sy * wd + sx0..sy * wd + sx0 + (x1 - x0)];
                for (dv, &gv) in d.iter_mut().zip(&row[y * wd + x0..y * wd + x1]) {
                    *dv += gv;
                }
            }
        }
    }
}

/// 3×3 stride-1 zero-padded convolution; `out` is overwritten.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
) {
    let hw = h * wd;
    for co in 0..cout {
        out[co * hw..(co + 1) * hw].fill(bias.map_or(0.0, |b| b[co]));
    }
    let cols = im2col(x, cin, h, wd);
    matmul_acc(w, &cols, out, cout, cin * 9, hw);
}

/// Accumulates input, weight and bias gradients of [`conv3_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
) {
    let hw = h * wd;
    if let Some(gb) = gb {
        for co in 0..cout {
            gb[co] += g[co * hw..(co + 1) * hw].iter().sum::<f64>();
        }
    }
    if let Some(gw) = gw {
        let cols = im2col(x, cin, h, wd);
        matmul_bt_acc(g, &cols, gw, cout, hw, cin * 9);
    }
    if let Some(gx) = gx {
        let mut cols = vec![0.0; cin * 9 * hw];
        matmul_at_acc(w, g, &mut cols, cout, cin * 9, hw);
        col2im_acc(&cols, gx, cin, h, wd);
    }
}

pub(crate) fn upsample2_forward(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h * 2, w * 2);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            let src = &x[ch * h * w + (y / 2) * w..ch * h * w + (y / 2) * w + w];
            let dst = &mut out[ch * h2 * w2 + y * w2..ch * h2 * w2 + (y + 1) * w2];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / 2];
            }
        }
    }
    out
}

/// Gradient of nearest 2× upsampling: sum over each 2×2 block.
pub(crate) fn upsample2_backward(g: &[f64], gx: &mut [f64], c: usize, h: usize, w: usize) {
    let w2 = w * 2;
    let h2 = h * 2;
    for ch in 0..c {
        for y in 0..h2 {
            let row = &g[ch * h2 * w2 + y * w2..ch * h2 * w2 + (y + 1) * w2];
            let dst = &mut gx[ch * h * w + (y / 2) * w..ch * h * w + (y / 2) * w + w];
            for (xx, &gv) in row.iter().enumerate() {
                dst[xx / 2] += gv;
            }
        }
    }
}

pub(crate) fn pool2_forward(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let i = 2 * y * w + 2 * xx;
                out[ch * ho * wo + y * wo + xx] =
                    0.25 * (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]);
            }
        }
    }
    out
}

pub(crate) fn pool2_backward(g: &[f64], gx: &mut [f64], c: usize, h: usize, w: usize) {
    let (ho, wo) = (h / 2, w / 2);
    for ch in 0..c {
        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let gv = 0.25 * g[ch * ho * wo + y * wo + xx];
                let i = 2 * y * w + 2 * xx;
                plane[i] += gv;
                plane[i + 1] += gv;
                plane[i + w] += gv;
                plane[i + w + 1] += gv;
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_naive(x: &[f64], w: &[f64], cin: usize, cout: usize, h: usize, wd: usize) -> Vec<f64> {
        let mut out = vec![0.0; cout * h * wd];
        for co in 0..cout {
            for y in 0..h as isize {
                for xx in 0..wd as isize {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let sy = y + ky - 1;
                                let sx = xx + kx - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += w[((co * cin + ci) * 9) + (ky * 3 + kx) as usize]
                                    * x[ci * h * wd + sy as usize * wd + sx as usize];
                            }
                        }
                    }
                    out[co * h * wd + y as usize * wd + xx as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loop() {
        let (cin, cout, h, w) = (2, 3, 5, 4);
        let x: Vec<f64> = (0..cin * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let k: Vec<f64> = (0..cout * cin * 9).map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3).collect();
        let mut out = vec![0.0; cout * h * w];
        conv3_forward(&x, &k, None, &mut out, cin, cout, h, w);
        let want = conv_naive(&x, &k, cin, cout, h, w);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut ab = vec![0.0; 8];
        matmul_acc(&a, &b, &mut ab, 2, 3, 4);
        // b transposed as 4x3
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let mut ab2 = vec![0.0; 8];
        matmul_bt_acc(&a, &bt, &mut ab2, 2, 3, 4);
        assert_eq!(ab, ab2);
    }
}
