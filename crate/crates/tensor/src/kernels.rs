//! Raw slice kernels behind the tape ops. No shape checking happens here;
//! callers validate extents first.

/// `out[m,n] += a[m,k] * b[k,n]`
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += a[m,n] * b[k,n]^T`
pub fn gemm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (p, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            *o += dot(a_row, b_row);
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators; fixed order keeps results reproducible.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Output positions `o` in `[lo, hi)` for which `o*stride + k - padding`
    /// lands inside `[0, extent)`.
    #[inline]
    fn valid_range(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.padding as isize;
        // o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // o*s + off <= extent-1
        let last = extent as isize - 1 - off;
        let hi = if last < 0 { 0 } else { last / s + 1 };
        let lo = lo.max(0) as usize;
        let hi = (hi as usize).min(out_extent);
        (lo, hi.max(lo))
    }
}

/// Unfold one `(C, H, W)` image into `(C*kh*kw, out_h*out_w)` columns;
/// padded positions are zero.
fn im2col(g: &ConvGeom, src: &[f64], cols: &mut [f64]) {
    let out_plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    cols.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..g.in_ch {
        let plane = &src[c * in_plane..(c + 1) * in_plane];
        for ky in 0..g.k_h {
            let (oy0, oy1) = g.valid_range(ky, g.in_h, g.out_h);
            for kx in 0..g.k_w {
                let (ox0, ox1) = g.valid_range(kx, g.in_w, g.out_w);
                let row = &mut cols[((c * g.k_h + ky) * g.k_w + kx) * out_plane..][..out_plane];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let in_row = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in ox0..ox1 {
                        dst[ox] = in_row[ox * g.stride + kx - g.padding];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `(C, H, W)`.
fn col2im(g: &ConvGeom, cols: &[f64], dst: &mut [f64]) {
    let out_plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    for c in 0..g.in_ch {
        let plane = &mut dst[c * in_plane..(c + 1) * in_plane];
        for ky in 0..g.k_h {
            let (oy0, oy1) = g.valid_range(ky, g.in_h, g.out_h);
            for kx in 0..g.k_w {
                let (ox0, ox1) = g.valid_range(kx, g.in_w, g.out_w);
                let row = &cols[((c * g.k_h + ky) * g.k_w + kx) * out_plane..][..out_plane];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let src = &row[oy * g.out_w..(oy + 1) * g.out_w];
                    let in_row = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    for ox in ox0..ox1 {
                        in_row[ox * g.stride + kx - g.padding] += src[ox];
                    }
                }
            }
        }
    }
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_ch * self.k_h * self.k_w
    }

    /// True when the unfold is the identity (1x1 kernel, stride 1, no
    /// padding), so the input can be used as the column matrix directly.
    fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Convolution as `W (O, C*kh*kw) x cols (C*kh*kw, oh*ow)` per image.
pub fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let in_size = g.in_ch * g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let rows = g.col_rows();
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * out_plane] };
    for b in 0..g.batch {
        let src = &x[b * in_size..(b + 1) * in_size];
        let dst = &mut out[b * g.out_ch * out_plane..(b + 1) * g.out_ch * out_plane];
        match bias {
            Some(bias) => {
                for (o, plane) in dst.chunks_exact_mut(out_plane).enumerate() {
                    plane.iter_mut().for_each(|v| *v = bias[o]);
                }
            }
            None => dst.iter_mut().for_each(|v| *v = 0.0),
        }
        let cols_ref: &[f64] = if g.is_pointwise() {
            src
        } else {
            im2col(g, src, &mut cols);
            &cols
        };
        gemm(g.out_ch, rows, out_plane, w, cols_ref, dst);
    }
}

/// Accumulates input, weight and bias gradients; any of the three outputs
/// may be skipped.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    mut grad_x: Option<&mut [f64]>,
    mut grad_w: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
) {
    let in_size = g.in_ch * g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let rows = g.col_rows();
    if let Some(gb) = grad_b {
        for b in 0..g.batch {
            for (o, gbo) in gb.iter_mut().enumerate() {
                let go = &grad_out[(b * g.out_ch + o) * out_plane..][..out_plane];
                *gbo += go.iter().sum::<f64>();
            }
        }
    }
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; rows * out_plane] };
    let mut gcols = vec![0.0; rows * out_plane];
    for b in 0..g.batch {
        let go = &grad_out[b * g.out_ch * out_plane..(b + 1) * g.out_ch * out_plane];
        if let Some(gw) = grad_w.as_deref_mut() {
            let src = &x[b * in_size..(b + 1) * in_size];
            let cols_ref: &[f64] = if pointwise {
                src
            } else {
                im2col(g, src, &mut cols);
                &cols
            };
            // gW (O, rows) += go (O, P) * cols (rows, P)^T
            gemm_nt(g.out_ch, out_plane, rows, go, cols_ref, gw);
        }
        if let Some(gx) = grad_x.as_deref_mut() {
            let dst = &mut gx[b * in_size..(b + 1) * in_size];
            if pointwise {
                gemm_tn(g.out_ch, rows, out_plane, w, go, dst);
            } else {
                gcols.iter_mut().for_each(|v| *v = 0.0);
                // gcols (rows, P) = W (O, rows)^T * go (O, P)
                gemm_tn(g.out_ch, rows, out_plane, w, go, &mut gcols);
                col2im(g, &gcols, dst);
            }
        }
    }
}

/// Adaptive average pooling cell bounds: `[floor(i*n/out), ceil((i+1)*n/out))`.
#[inline]
pub fn pool_bounds(i: usize, n: usize, out: usize) -> (usize, usize) {
    let start = (i * n) / out;
    let end = ((i + 1) * n).div_ceil(out);
    (start, end)
}

pub fn avgpool2d_forward(
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    x: &[f64],
    out: &mut [f64],
) {
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            let (y0, y1) = pool_bounds(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = pool_bounds(j, w, ow);
                let mut s = 0.0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        s += src[y * w + xx];
                    }
                }
                out[(p * oh + i) * ow + j] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
}

pub fn avgpool2d_backward(
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    grad_out: &[f64],
    grad_x: &mut [f64],
) {
    for p in 0..planes {
        for i in 0..oh {
            let (y0, y1) = pool_bounds(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = pool_bounds(j, w, ow);
                let g = grad_out[(p * oh + i) * ow + j] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        grad_x[p * h * w + y * w + xx] += g;
                    }
                }
            }
        }
    }
}

pub const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Row-major strides.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides of `shape` expressed in the index space of `out`, zero along
/// broadcast axes.
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let rank = out.len();
    (0..rank)
        .map(|i| {
            if i + shape.len() < rank {
                0
            } else {
                let j = i + shape.len() - rank;
                if shape[j] == 1 && out[i] != 1 {
                    0
                } else {
                    own[j]
                }
            }
        })
        .collect()
}

/// Visit every output element with the matching flat offsets into the two
/// broadcast operands.
pub fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let n: usize = out.iter().product();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut flat = 0;
    while flat < n {
        let mut oa = 0;
        let mut ob = 0;
        for d in 0..rank - 1 {
            oa += idx[d] * sa[d];
            ob += idx[d] * sb[d];
        }
        for j in 0..inner {
            f(flat + j, oa + j * ia, ob + j * ib);
        }
        flat += inner;
        // increment the outer multi-index
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small() {
        // [1 2; 3 4] * [5 6; 7 8]
        let mut out = vec![0.0; 4];
        gemm(2, 2, 2, &[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], &mut out);
        assert_eq!(out, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [0.5, -1.0, 2.0, 1.5, 0.0, 3.0]; // 2x3
        let mut nt = vec![0.0; 4];
        gemm_nt(2, 3, 2, &a, &b, &mut nt);
        assert_eq!(nt, vec![4.5, 10.5, 9.0, 24.0]);
        let mut tn = vec![0.0; 9];
        gemm_tn(2, 3, 3, &a, &b, &mut tn);
        // a^T b, first row: 1*[0.5,-1,2] + 4*[1.5,0,3]
        assert_eq!(&tn[0..3], &[6.5, -1.0, 14.0]);
    }

    #[test]
    fn pool_bounds_cover_input() {
        for n in 1..20 {
            for out in 1..=n {
                let mut covered = vec![false; n];
                for i in 0..out {
                    let (s, e) = pool_bounds(i, n, out);
                    assert!(s < e && e <= n);
                    covered[s..e].iter_mut().for_each(|c| *c = true);
                }
                assert!(covered.iter().all(|&c| c));
            }
        }
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }
}
