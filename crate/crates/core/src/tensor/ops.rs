//! Raw forward/backward kernels over flat row-major buffers.
//!
//! Convolution goes through im2col + matmul so the inner loops stay over
//! contiguous slices (which the compiler vectorizes well). The im2col buffer
//! is rebuilt in backward instead of cached — memory stays proportional to
//! activations, at the cost of one extra unpack per conv.

use super::Scalar;

/// `C[m,n] += A[m,k] * B[k,n]`.
pub fn matmul_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + a_ip * bv;
            }
        }
    }
}

/// `C[m,n] += A[m,k] * B[n,k]^T` (dot products of rows).
pub fn matmul_abt_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            *cv = *cv + acc;
        }
    }
}

/// `C[m,n] += A[k,m]^T * B[k,n]`.
pub fn matmul_atb_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + a_pi * bv;
            }
        }
    }
}

/// Output spatial dims of a convolution; `None` when the kernel does not fit.
pub fn conv2d_output_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Option<(usize, usize)> {
    let h_p = h + 2 * padding;
    let w_p = w + 2 * padding;
    if stride == 0 || kh == 0 || kw == 0 || h_p < kh || w_p < kw {
        return None;
    }
    Some(((h_p - kh) / stride + 1, (w_p - kw) / stride + 1))
}

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    fn cols_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unpacks one sample into `cols[(c*kh*kw + ky*kw + kx) * P + position]`,
/// with zeros where the window reads padding.
fn im2col<T: Scalar>(sample: &[T], d: &ConvDims, cols: &mut [T]) {
    let positions = d.positions();
    debug_assert_eq!(cols.len(), d.cols_rows() * positions);
    for v in cols.iter_mut() {
        *v = T::zero();
    }
    for c in 0..d.c_in {
        let plane = &sample[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &mut cols[(c * d.kh * d.kw + ky * d.kw + kx) * positions..][..positions];
                for oy in 0..d.h_out {
                    let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let out_row = &mut row[oy * d.w_out..(oy + 1) * d.w_out];
                    for (ox, out) in out_row.iter_mut().enumerate() {
                        let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                        if ix >= 0 && ix < d.w as isize {
                            *out = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a cols buffer back onto one sample's gradient.
fn col2im_acc<T: Scalar>(cols: &[T], d: &ConvDims, grad_sample: &mut [T]) {
    let positions = d.positions();
    for c in 0..d.c_in {
        let plane = &mut grad_sample[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &cols[(c * d.kh * d.kw + ky * d.kw + kx) * positions..][..positions];
                for oy in 0..d.h_out {
                    let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let src_row = &row[oy * d.w_out..(oy + 1) * d.w_out];
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward: input `[N,C,H,W]`, kernel `[K,C,kh,kw]` -> `[N,K,H',W']`.
pub fn conv2d_forward<T: Scalar>(input: &[T], kernel: &[T], d: &ConvDims) -> Vec<T> {
    let positions = d.positions();
    let ckk = d.cols_rows();
    let mut out = vec![T::zero(); d.n * d.c_out * positions];
    let mut cols = vec![T::zero(); ckk * positions];
    let sample_len = d.c_in * d.h * d.w;
    for n in 0..d.n {
        im2col(&input[n * sample_len..(n + 1) * sample_len], d, &mut cols);
        matmul_acc(
            &mut out[n * d.c_out * positions..(n + 1) * d.c_out * positions],
            kernel,
            &cols,
            d.c_out,
            ckk,
            positions,
        );
    }
    out
}

/// Convolution backward. Either output may be skipped when the corresponding
/// operand does not need a gradient.
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    d: &ConvDims,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let positions = d.positions();
    let ckk = d.cols_rows();
    let sample_len = d.c_in * d.h * d.w;
    let mut grad_input = need_input.then(|| vec![T::zero(); d.n * sample_len]);
    let mut grad_kernel = need_kernel.then(|| vec![T::zero(); d.c_out * ckk]);
    let mut cols = vec![T::zero(); ckk * positions];
    for n in 0..d.n {
        let g_out = &grad_out[n * d.c_out * positions..(n + 1) * d.c_out * positions];
        if let Some(gk) = grad_kernel.as_deref_mut() {
            im2col(&input[n * sample_len..(n + 1) * sample_len], d, &mut cols);
            // dW[k, ck] += sum_p gOut[k, p] * cols[ck, p]
            matmul_abt_acc(gk, g_out, &cols, d.c_out, positions, ckk);
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            // gCols[ck, p] = sum_k W[k, ck] * gOut[k, p]
            for v in cols.iter_mut() {
                *v = T::zero();
            }
            matmul_atb_acc(&mut cols, kernel, g_out, d.c_out, ckk, positions);
            col2im_acc(&cols, d, &mut gi[n * sample_len..(n + 1) * sample_len]);
        }
    }
    (grad_input, grad_kernel)
}

/// 2x2 max pooling with stride 2 over `[N,C,H,W]` (H, W even). Returns the
/// pooled buffer and the flat input index of each selected maximum; ties go
/// to the earliest index in scan order so routing is deterministic.
pub fn maxpool2x2_forward<T: Scalar>(
    input: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![T::zero(); n * c * ho * wo];
    let mut argmax = vec![0u32; n * c * ho * wo];
    for img in 0..n * c {
        let plane = &input[img * h * w..(img + 1) * h * w];
        let base = img * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let i00 = (2 * oy) * w + 2 * ox;
                let candidates = [i00, i00 + 1, i00 + w, i00 + w + 1];
                let mut best = candidates[0];
                for &idx in &candidates[1..] {
                    if plane[idx] > plane[best] {
                        best = idx;
                    }
                }
                out[img * ho * wo + oy * wo + ox] = plane[best];
                argmax[img * ho * wo + oy * wo + ox] = (base + best) as u32;
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2x2_backward<T: Scalar>(grad_out: &[T], argmax: &[u32], input_len: usize) -> Vec<T> {
    let mut grad_input = vec![T::zero(); input_len];
    for (&g, &idx) in grad_out.iter().zip(argmax) {
        let i = idx as usize;
        grad_input[i] = grad_input[i] + g;
    }
    grad_input
}

/// `[N,C,H,W] -> [N,C]`, mean over the spatial plane.
pub fn global_avg_pool_forward<T: Scalar>(input: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let inv = T::from_f64(1.0 / hw as f64);
    (0..n * c)
        .map(|img| {
            let plane = &input[img * hw..(img + 1) * hw];
            let mut acc = T::zero();
            for &v in plane {
                acc = acc + v;
            }
            acc * inv
        })
        .collect()
}

pub fn global_avg_pool_backward<T: Scalar>(grad_out: &[T], hw: usize) -> Vec<T> {
    let inv = T::from_f64(1.0 / hw as f64);
    let mut grad_input = vec![T::zero(); grad_out.len() * hw];
    for (img, &g) in grad_out.iter().enumerate() {
        let gv = g * inv;
        for v in &mut grad_input[img * hw..(img + 1) * hw] {
            *v = gv;
        }
    }
    grad_input
}

/// Row-wise softmax of `[N, C]` logits, numerically stabilized.
pub fn softmax_rows<T: Scalar>(logits: &[T], n: usize, c: usize) -> Vec<T> {
    debug_assert_eq!(logits.len(), n * c);
    let mut out = vec![T::zero(); n * c];
    for i in 0..n {
        let row = &logits[i * c..(i + 1) * c];
        let out_row = &mut out[i * c..(i + 1) * c];
        let mut max = row[0];
        for &v in &row[1..] {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum = sum + e;
        }
        let inv = T::one() / sum;
        for o in out_row.iter_mut() {
            *o = *o * inv;
        }
    }
    out
}
