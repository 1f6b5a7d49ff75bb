//! Layer primitives for the segmentation backbone.
//!
//! Everything is generic over [`Real`] so the training path runs in f32 while
//! tests can instantiate f64 and verify every backward kernel against central
//! finite differences at tight tolerance.
//!
//! Activation layout is [`ChannelGrid`]: channel-major, then z, x, and a
//! contiguous y row. All hot loops walk y rows so they vectorize.

use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::grid::{ChannelGrid, GridShape};

/// Scalar abstraction over f32/f64.
pub trait Real:
    Copy
    + Default
    + PartialOrd
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
    /// `self * a + b` with a single rounding where the target has fused
    /// multiply-add hardware (the build enables `target-cpu=native`).
    fn mul_add(self, a: Self, b: Self) -> Self;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        self.is_finite()
    }
    #[inline(always)]
    fn mul_add(self, a: Self, b: Self) -> Self {
        self.mul_add(a, b)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        self.is_finite()
    }
    #[inline(always)]
    fn mul_add(self, a: Self, b: Self) -> Self {
        self.mul_add(a, b)
    }
}

/// One fused pass applying a full 3x3 in-plane stencil (three x-adjacent
/// rows, three y taps each) into an accumulator row:
/// `acc[y] += sum_kx sum_ky w[kx][ky] * rows[kx][y + ky - 1]`
/// with zero padding at the row ends. This is the vectorization workhorse of
/// every 3x3x3 path: nine fused multiply-adds per element, one pass.
#[inline]
fn stencil9<T: Real>(rows: [&[T]; 3], w: &[T], acc: &mut [T]) {
    let n = acc.len();
    // Exact-length reslices let the optimizer drop the per-element bounds
    // checks that would otherwise keep this loop scalar.
    let [r0, r1, r2] = rows.map(|r| &r[..n]);
    let w = &w[..9];
    let edge = |acc: &mut T, y: usize| {
        let mut s = *acc;
        for (r, wr) in [r0, r1, r2].into_iter().zip(w.chunks_exact(3)) {
            if y > 0 {
                s += wr[0] * r[y - 1];
            }
            s += wr[1] * r[y];
            if y + 1 < n {
                s += wr[2] * r[y + 1];
            }
        }
        *acc = s;
    };
    edge(&mut acc[0], 0);
    if n == 1 {
        return;
    }
    for y in 1..n - 1 {
        // three independent fma chains, one per input row
        let s0 = w[2].mul_add(r0[y + 1], w[0].mul_add(r0[y - 1], w[1] * r0[y]));
        let s1 = w[5].mul_add(r1[y + 1], w[3].mul_add(r1[y - 1], w[4] * r1[y]));
        let s2 = w[8].mul_add(r2[y + 1], w[6].mul_add(r2[y - 1], w[7] * r2[y]));
        acc[y] += s0 + s1 + s2;
    }
    edge(&mut acc[n - 1], n - 1);
}

/// Nine shifted dot products in one pass:
/// `s[kx][ky] += sum_y g[y] * rows[kx][y + ky - 1]` (zero-padded ends).
#[inline]
fn stencil9_dots<T: Real>(g: &[T], rows: [&[T]; 3], s: &mut [T; 9]) {
    let n = g.len();
    let [r0, r1, r2] = rows.map(|r| &r[..n]);
    let mut edge = |y: usize| {
        for (k, r) in [r0, r1, r2].into_iter().enumerate() {
            if y > 0 {
                s[k * 3] += g[y] * r[y - 1];
            }
            s[k * 3 + 1] += g[y] * r[y];
            if y + 1 < n {
                s[k * 3 + 2] += g[y] * r[y + 1];
            }
        }
    };
    edge(0);
    if n == 1 {
        return;
    }
    edge(n - 1);
    let (mut a0, mut a1, mut a2) = (T::ZERO, T::ZERO, T::ZERO);
    let (mut b0, mut b1, mut b2) = (T::ZERO, T::ZERO, T::ZERO);
    let (mut c0, mut c1, mut c2) = (T::ZERO, T::ZERO, T::ZERO);
    for y in 1..n - 1 {
        let gv = g[y];
        a0 = gv.mul_add(r0[y - 1], a0);
        a1 = gv.mul_add(r0[y], a1);
        a2 = gv.mul_add(r0[y + 1], a2);
        b0 = gv.mul_add(r1[y - 1], b0);
        b1 = gv.mul_add(r1[y], b1);
        b2 = gv.mul_add(r1[y + 1], b2);
        c0 = gv.mul_add(r2[y - 1], c0);
        c1 = gv.mul_add(r2[y], c1);
        c2 = gv.mul_add(r2[y + 1], c2);
    }
    s[0] += a0;
    s[1] += a1;
    s[2] += a2;
    s[3] += b0;
    s[4] += b1;
    s[5] += b2;
    s[6] += c0;
    s[7] += c1;
    s[8] += c2;
}

/// The three x-adjacent rows of a z plane feeding output row `x`, with
/// out-of-bounds rows replaced by a shared zero row (zero padding).
#[inline]
fn xrows<'a, T: Real>(plane: &'a [T], x: usize, h: usize, wy: usize, zero: &'a [T]) -> [&'a [T]; 3] {
    [
        if x > 0 { &plane[(x - 1) * wy..x * wy] } else { zero },
        &plane[x * wy..(x + 1) * wy],
        if x + 1 < h { &plane[(x + 1) * wy..(x + 2) * wy] } else { zero },
    ]
}

/// Applies one 3x3 in-plane stencil of `w` (9 taps) from a whole source z
/// plane into a destination z plane: `dst[x] += stencil(src rows x-1..=x+1)`.
/// Keeping the weights fixed across the full plane lets the compiler hoist
/// their broadcasts out of the row loop.
#[inline]
fn stencil9_plane<T: Real>(src: &[T], w: &[T], dst: &mut [T], h: usize, wy: usize, zero: &[T]) {
    let w = &w[..9];
    for x in 0..h {
        let rows = xrows(src, x, h, wy, zero);
        stencil9(rows, w, &mut dst[x * wy..(x + 1) * wy]);
    }
}

/// Nine shifted plane dot products: `s[kx][ky] += sum g(x) . src(x+kx-1)`
/// row by row over a pair of z planes.
#[inline]
fn stencil9_dots_plane<T: Real>(g: &[T], src: &[T], h: usize, wy: usize, zero: &[T], s: &mut [T; 9]) {
    for x in 0..h {
        let rows = xrows(src, x, h, wy, zero);
        stencil9_dots(&g[x * wy..(x + 1) * wy], rows, s);
    }
}

/// Valid `(kernel index, neighbor coordinate)` pairs for offsets -1..=1.
#[inline]
fn neighbors(i: usize, n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..3usize).filter_map(move |k| {
        let j = (i + k).checked_sub(1)?;
        (j < n).then_some((k, j))
    })
}

/// 3x3x3 convolution, stride 1, zero padding 1. Weights are laid out
/// `[cout][cin][kz][kx][ky]` with k indices 0..3 meaning offsets -1..=1.
pub fn conv3_forward<T: Real>(
    inp: &ChannelGrid<T>,
    w: &[T],
    bias: Option<&[T]>,
    cout: usize,
) -> ChannelGrid<T> {
    let cin = inp.classes;
    let GridShape { h, w: wy, d } = inp.shape;
    debug_assert_eq!(w.len(), cout * cin * 27);
    let mut out = ChannelGrid::zeros(cout, inp.shape);
    let zero = vec![T::ZERO; wy];
    let plane = h * wy;
    for co in 0..cout {
        if let Some(b) = bias {
            out.channel_mut(co).fill(b[co]);
        }
        for ci in 0..cin {
            let src = inp.channel(ci);
            let wbase = (co * cin + ci) * 27;
            for z in 0..d {
                let dst = &mut out.channel_mut(co)[z * plane..(z + 1) * plane];
                for (kz, zi) in neighbors(z, d) {
                    let wk = &w[wbase + kz * 9..wbase + kz * 9 + 9];
                    stencil9_plane(&src[zi * plane..(zi + 1) * plane], wk, dst, h, wy, &zero);
                }
            }
        }
    }
    out
}

/// Backward of [`conv3_forward`]: input gradient plus weight/bias gradient
/// accumulation (`dw`/`db` are += accumulated; callers zero them per step).
pub fn conv3_backward<T: Real>(
    inp: &ChannelGrid<T>,
    w: &[T],
    dout: &ChannelGrid<T>,
    cout: usize,
    dw: &mut [T],
    mut db: Option<&mut [T]>,
    dinp: &mut ChannelGrid<T>,
) {
    let cin = inp.classes;
    let GridShape { h, w: wy, d } = inp.shape;
    let zero = vec![T::ZERO; wy];
    let plane = h * wy;
    for co in 0..cout {
        if let Some(db) = db.as_deref_mut() {
            let mut s = T::ZERO;
            for &g in dout.channel(co) {
                s += g;
            }
            db[co] += s;
        }
    }
    // dIn(u) = sum_k w[k] * dOut(u - k): a correlation with the kernel
    // flipped along every axis
    dinp.data.fill(T::ZERO);
    let mut wflip = [T::ZERO; 9];
    for ci in 0..cin {
        for co in 0..cout {
            let g = dout.channel(co);
            let wbase = (co * cin + ci) * 27;
            for z in 0..d {
                let dst = &mut dinp.channel_mut(ci)[z * plane..(z + 1) * plane];
                // zo = z - dz: neighbors() yields the flipped z index
                for (kz, zo) in neighbors(z, d) {
                    let wk = &w[wbase + (2 - kz) * 9..wbase + (2 - kz) * 9 + 9];
                    for (i, v) in wflip.iter_mut().enumerate() {
                        *v = wk[8 - i];
                    }
                    stencil9_plane(&g[zo * plane..(zo + 1) * plane], &wflip, dst, h, wy, &zero);
                }
            }
        }
    }
    // dW[k] = sum_v dOut(v) * in(v + k)
    for co in 0..cout {
        let g = dout.channel(co);
        for ci in 0..cin {
            let src = inp.channel(ci);
            let wbase = (co * cin + ci) * 27;
            for kz in 0..3 {
                let mut s = [T::ZERO; 9];
                for z in 0..d {
                    let Some(zi) = (z + kz).checked_sub(1).filter(|&zi| zi < d) else {
                        continue;
                    };
                    let gp = &g[z * plane..(z + 1) * plane];
                    let ip = &src[zi * plane..(zi + 1) * plane];
                    stencil9_dots_plane(gp, ip, h, wy, &zero, &mut s);
                }
                let wt = wbase + kz * 9;
                for (dst, &v) in dw[wt..wt + 9].iter_mut().zip(&s) {
                    *dst += v;
                }
            }
        }
    }
}

/// 2x2x2 convolution with stride 2 (halves every spatial dimension).
/// Weights `[cout][cin][dz][dx][dy]`, d in {0,1}.
pub fn down2_forward<T: Real>(inp: &ChannelGrid<T>, w: &[T], cout: usize) -> ChannelGrid<T> {
    let cin = inp.classes;
    let GridShape { h, w: wy, d } = inp.shape;
    debug_assert!(h % 2 == 0 && wy % 2 == 0 && d % 2 == 0);
    debug_assert_eq!(w.len(), cout * cin * 8);
    let oshape = GridShape::new(h / 2, wy / 2, d / 2);
    let n_out = oshape.voxels();
    let mut out = ChannelGrid::zeros(cout, oshape);
    for co in 0..cout {
        for ci in 0..cin {
            let wbase = (co * cin + ci) * 8;
            for zo in 0..d / 2 {
                for xo in 0..h / 2 {
                    let orow = co * n_out + (zo * (h / 2) + xo) * (wy / 2);
                    for (k, (dz, dx, dy)) in OFFSETS2.iter().enumerate() {
                        let wk = w[wbase + k];
                        let irow = inp.row(ci, 2 * zo + dz, 2 * xo + dx);
                        for yo in 0..wy / 2 {
                            out.data[orow + yo] += wk * irow[2 * yo + dy];
                        }
                    }
                }
            }
        }
    }
    out
}

const OFFSETS2: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (0, 0, 1),
    (0, 1, 0),
    (0, 1, 1),
    (1, 0, 0),
    (1, 0, 1),
    (1, 1, 0),
    (1, 1, 1),
];

pub fn down2_backward<T: Real>(
    inp: &ChannelGrid<T>,
    w: &[T],
    dout: &ChannelGrid<T>,
    cout: usize,
    dw: &mut [T],
    dinp: &mut ChannelGrid<T>,
) {
    let cin = inp.classes;
    let GridShape { h, w: wy, d } = inp.shape;
    let n_out = dout.shape.voxels();
    dinp.data.fill(T::ZERO);
    for co in 0..cout {
        for ci in 0..cin {
            let wbase = (co * cin + ci) * 8;
            for zo in 0..d / 2 {
                for xo in 0..h / 2 {
                    let orow = co * n_out + (zo * (h / 2) + xo) * (wy / 2);
                    for (k, (dz, dx, dy)) in OFFSETS2.iter().enumerate() {
                        let wk = w[wbase + k];
                        let ib = ci * inp.shape.voxels()
                            + ((2 * zo + dz) * h + 2 * xo + dx) * wy;
                        let mut s = T::ZERO;
                        for yo in 0..wy / 2 {
                            let g = dout.data[orow + yo];
                            s += g * inp.data[ib + 2 * yo + dy];
                            dinp.data[ib + 2 * yo + dy] += wk * g;
                        }
                        dw[wbase + k] += s;
                    }
                }
            }
        }
    }
}

/// Transposed 2x2x2 convolution with stride 2 (doubles every spatial
/// dimension; kernel equals stride, so output positions partition cleanly).
/// Weights `[cin][cout][dz][dx][dy]`.
pub fn up2_forward<T: Real>(inp: &ChannelGrid<T>, w: &[T], cout: usize) -> ChannelGrid<T> {
    let cin = inp.classes;
    let GridShape { h, w: wy, d } = inp.shape;
    let oshape = GridShape::new(h * 2, wy * 2, d * 2);
    debug_assert_eq!(w.len(), cin * cout * 8);
    let n_out = oshape.voxels();
    let mut out = ChannelGrid::zeros(cout, oshape);
    for ci in 0..cin {
        for co in 0..cout {
            let wbase = (ci * cout + co) * 8;
            for zi in 0..d {
                for xi in 0..h {
                    let irow = ci * inp.shape.voxels() + (zi * h + xi) * wy;
                    for (k, (dz, dx, dy)) in OFFSETS2.iter().enumerate() {
                        let wk = w[wbase + k];
                        let ob = co * n_out + ((2 * zi + dz) * (2 * h) + 2 * xi + dx) * (2 * wy);
                        for yi in 0..wy {
                            out.data[ob + 2 * yi + dy] += wk * inp.data[irow + yi];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn up2_backward<T: Real>(
    inp: &ChannelGrid<T>,
    w: &[T],
    dout: &ChannelGrid<T>,
    cout: usize,
    dw: &mut [T],
    dinp: &mut ChannelGrid<T>,
) {
    let cin = inp.classes;
    let GridShape { h, w: wy, d } = inp.shape;
    let n_out = dout.shape.voxels();
    dinp.data.fill(T::ZERO);
    for ci in 0..cin {
        for co in 0..cout {
            let wbase = (ci * cout + co) * 8;
            for zi in 0..d {
                for xi in 0..h {
                    let irow = ci * inp.shape.voxels() + (zi * h + xi) * wy;
                    for (k, (dz, dx, dy)) in OFFSETS2.iter().enumerate() {
                        let wk = w[wbase + k];
                        let ob = co * n_out + ((2 * zi + dz) * (2 * h) + 2 * xi + dx) * (2 * wy);
                        let mut s = T::ZERO;
                        for yi in 0..wy {
                            let g = dout.data[ob + 2 * yi + dy];
                            s += g * inp.data[irow + yi];
                            dinp.data[irow + yi] += wk * g;
                        }
                        dw[wbase + k] += s;
                    }
                }
            }
        }
    }
}

/// 1x1x1 convolution (per-voxel channel mix) with bias.
/// Weights `[cout][cin]`.
pub fn conv1_forward<T: Real>(inp: &ChannelGrid<T>, w: &[T], bias: &[T], cout: usize) -> ChannelGrid<T> {
    let cin = inp.classes;
    let n = inp.shape.voxels();
    let mut out = ChannelGrid::zeros(cout, inp.shape);
    for co in 0..cout {
        let oc = out.channel_mut(co);
        oc.fill(bias[co]);
        for ci in 0..cin {
            let wk = w[co * cin + ci];
            let icr = &inp.data[ci * n..(ci + 1) * n];
            for (o, &i) in oc.iter_mut().zip(icr) {
                *o += wk * i;
            }
        }
    }
    out
}

pub fn conv1_backward<T: Real>(
    inp: &ChannelGrid<T>,
    w: &[T],
    dout: &ChannelGrid<T>,
    cout: usize,
    dw: &mut [T],
    db: &mut [T],
    dinp: &mut ChannelGrid<T>,
) {
    let cin = inp.classes;
    let n = inp.shape.voxels();
    dinp.data.fill(T::ZERO);
    for co in 0..cout {
        let go = dout.channel(co);
        let mut bs = T::ZERO;
        for &g in go {
            bs += g;
        }
        db[co] += bs;
        for ci in 0..cin {
            let wk = w[co * cin + ci];
            let icr = &inp.data[ci * n..(ci + 1) * n];
            let dic = &mut dinp.data[ci * n..(ci + 1) * n];
            let mut s = T::ZERO;
            for ((di, &g), &i) in dic.iter_mut().zip(go).zip(icr) {
                s += g * i;
                *di += wk * g;
            }
            dw[co * cin + ci] += s;
        }
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// Cached state from an instance-norm forward needed by its backward.
pub struct NormCache<T> {
    /// Normalized activations (pre-affine).
    pub xhat: ChannelGrid<T>,
    /// Per-channel 1/sqrt(var + eps).
    pub inv_std: Vec<T>,
}

/// Instance normalization over the spatial dims of each channel, with affine
/// parameters: `y = gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn instance_norm_forward<T: Real>(
    inp: &ChannelGrid<T>,
    gamma: &[T],
    beta: &[T],
) -> (ChannelGrid<T>, NormCache<T>) {
    let c = inp.classes;
    let n = inp.shape.voxels();
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut out = ChannelGrid::zeros(c, inp.shape);
    let mut xhat = ChannelGrid::zeros(c, inp.shape);
    let mut inv_std = vec![T::ZERO; c];
    for ch in 0..c {
        let x = inp.channel(ch);
        let mut mean = T::ZERO;
        for &v in x {
            mean += v;
        }
        mean *= inv_n;
        let mut var = T::ZERO;
        for &v in x {
            let dxm = v - mean;
            var += dxm * dxm;
        }
        var *= inv_n;
        let istd = T::ONE / (var + T::from_f64(NORM_EPS)).sqrt();
        inv_std[ch] = istd;
        let (g, b) = (gamma[ch], beta[ch]);
        let xh = xhat.channel_mut(ch);
        for (xh_v, &v) in xh.iter_mut().zip(x) {
            *xh_v = (v - mean) * istd;
        }
        let oc = out.channel_mut(ch);
        for (o, &xh_v) in oc.iter_mut().zip(xhat.channel(ch)) {
            *o = g * xh_v + b;
        }
    }
    (
        out,
        NormCache {
            xhat,
            inv_std,
        },
    )
}

/// Backward of instance norm:
/// `dx = gamma*inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))`,
/// `dgamma = sum dy*xhat`, `dbeta = sum dy`.
pub fn instance_norm_backward<T: Real>(
    cache: &NormCache<T>,
    gamma: &[T],
    dout: &ChannelGrid<T>,
    dgamma: &mut [T],
    dbeta: &mut [T],
    dinp: &mut ChannelGrid<T>,
) {
    let c = dout.classes;
    let n = dout.shape.voxels();
    let inv_n = T::from_f64(1.0 / n as f64);
    for ch in 0..c {
        let dy = dout.channel(ch);
        let xh = cache.xhat.channel(ch);
        let mut sum_dy = T::ZERO;
        let mut sum_dy_xh = T::ZERO;
        for (&g, &x) in dy.iter().zip(xh) {
            sum_dy += g;
            sum_dy_xh += g * x;
        }
        dbeta[ch] += sum_dy;
        dgamma[ch] += sum_dy_xh;
        let mean_dy = sum_dy * inv_n;
        let mean_dy_xh = sum_dy_xh * inv_n;
        let scale = gamma[ch] * cache.inv_std[ch];
        let dx = dinp.channel_mut(ch);
        for ((d, &g), &x) in dx.iter_mut().zip(dy).zip(xh) {
            *d = scale * (g - mean_dy - x * mean_dy_xh);
        }
    }
}

/// In-place ReLU; backward masks by the (cached) output.
pub fn relu_forward<T: Real>(x: &mut ChannelGrid<T>) {
    for v in x.data.iter_mut() {
        if *v < T::ZERO {
            *v = T::ZERO;
        }
    }
}

/// `dx = dy * [y > 0]`, in place on `dy`.
pub fn relu_backward<T: Real>(y: &ChannelGrid<T>, dy: &mut ChannelGrid<T>) {
    for (d, &v) in dy.data.iter_mut().zip(&y.data) {
        if !(v > T::ZERO) {
            *d = T::ZERO;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use rand::Rng;

    fn rand_grid(c: usize, shape: GridShape, seed: u64) -> ChannelGrid<f64> {
        let mut rng = SeedTree::new(seed).stream("kernel-grid", &[]);
        let mut g = ChannelGrid::zeros(c, shape);
        for v in g.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        g
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = SeedTree::new(seed).stream("kernel-w", &[]);
        (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
    }

    /// Brute-force conv3 with explicit zero padding, used as the oracle.
    fn conv3_reference(inp: &ChannelGrid<f64>, w: &[f64], bias: Option<&[f64]>, cout: usize) -> ChannelGrid<f64> {
        let cin = inp.classes;
        let GridShape { h, w: wy, d } = inp.shape;
        let mut out = ChannelGrid::zeros(cout, inp.shape);
        for co in 0..cout {
            for z in 0..d as isize {
                for x in 0..h as isize {
                    for y in 0..wy as isize {
                        let mut acc = bias.map_or(0.0, |b| b[co]);
                        for ci in 0..cin {
                            for dz in -1isize..=1 {
                                for dx in -1isize..=1 {
                                    for dy in -1isize..=1 {
                                        let (zi, xi, yi) = (z + dz, x + dx, y + dy);
                                        if zi < 0
                                            || xi < 0
                                            || yi < 0
                                            || zi >= d as isize
                                            || xi >= h as isize
                                            || yi >= wy as isize
                                        {
                                            continue;
                                        }
                                        let wk = w[((co * cin + ci) * 3 + (dz + 1) as usize) * 9
                                            + (dx + 1) as usize * 3
                                            + (dy + 1) as usize];
                                        acc += wk
                                            * inp.get(ci, xi as usize, yi as usize, zi as usize);
                                    }
                                }
                            }
                        }
                        out.set(co, x as usize, y as usize, z as usize, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3_matches_reference() {
        let shape = GridShape::new(4, 5, 3);
        let (cin, cout) = (2, 3);
        let inp = rand_grid(cin, shape, 1);
        let w = rand_vec(cout * cin * 27, 2);
        let b = rand_vec(cout, 3);
        let fast = conv3_forward(&inp, &w, Some(&b), cout);
        let slow = conv3_reference(&inp, &w, Some(&b), cout);
        for (a, e) in fast.data.iter().zip(&slow.data) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn down2_then_up2_shapes() {
        let shape = GridShape::new(4, 6, 2);
        let inp = rand_grid(3, shape, 4);
        let wd = rand_vec(5 * 3 * 8, 5);
        let down = down2_forward(&inp, &wd, 5);
        assert_eq!(down.shape, GridShape::new(2, 3, 1));
        let wu = rand_vec(5 * 3 * 8, 6);
        let up = up2_forward(&down, &wu, 3);
        assert_eq!(up.shape, shape);
    }

    #[test]
    fn up2_scatters_each_input_to_eight_outputs() {
        // single input voxel, identity-ish weights: output block = weights
        let inp_shape = GridShape::new(1, 1, 1);
        let mut inp = ChannelGrid::<f64>::zeros(1, inp_shape);
        inp.data[0] = 2.0;
        let w: Vec<f64> = (0..8).map(|k| k as f64 + 1.0).collect();
        let out = up2_forward(&inp, &w, 1);
        assert_eq!(out.shape, GridShape::new(2, 2, 2));
        for (k, &(dz, dx, dy)) in OFFSETS2.iter().enumerate() {
            assert_eq!(out.get(0, dx, dy, dz), 2.0 * (k as f64 + 1.0));
        }
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let shape = GridShape::new(4, 4, 4);
        let inp = rand_grid(2, shape, 7);
        let (out, cache) = instance_norm_forward(&inp, &[1.0, 1.0], &[0.0, 0.0]);
        let n = shape.voxels() as f64;
        for ch in 0..2 {
            let x = out.channel(ch);
            let mean: f64 = x.iter().sum::<f64>() / n;
            let var: f64 = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-12, "{mean}");
            assert!((var - 1.0).abs() < 1e-4, "{var}"); // eps shifts var slightly
            assert!(cache.inv_std[ch] > 0.0);
        }
    }

    #[test]
    fn relu_clamps_and_masks() {
        let shape = GridShape::new(2, 2, 1);
        let mut x = ChannelGrid::from_vec(1, shape, vec![-1.0, 0.0, 2.0, -0.5]);
        relu_forward(&mut x);
        assert_eq!(x.data, vec![0.0, 0.0, 2.0, 0.0]);
        let mut dy = ChannelGrid::from_vec(1, shape, vec![1.0, 1.0, 1.0, 1.0]);
        relu_backward(&x, &mut dy);
        assert_eq!(dy.data, vec![0.0, 0.0, 1.0, 0.0]);
    }

    /// Central finite differences on a scalar objective `sum(out * probe)`
    /// for every parameter and input coordinate of each kernel.
    struct FdCheck {
        shape: GridShape,
        cin: usize,
        cout: usize,
    }

    impl FdCheck {
        fn run(
            &self,
            forward: impl Fn(&ChannelGrid<f64>, &[f64]) -> ChannelGrid<f64>,
            backward: impl Fn(
                &ChannelGrid<f64>,
                &[f64],
                &ChannelGrid<f64>,
            ) -> (Vec<f64>, ChannelGrid<f64>),
            n_w: usize,
            seed: u64,
        ) {
            let inp = rand_grid(self.cin, self.shape, seed);
            let w = rand_vec(n_w, seed + 1);
            let out0 = forward(&inp, &w);
            let probe = rand_grid(self.cout, out0.shape, seed + 2);
            let objective = |inp: &ChannelGrid<f64>, w: &[f64]| -> f64 {
                forward(inp, w)
                    .data
                    .iter()
                    .zip(&probe.data)
                    .map(|(&o, &p)| o * p)
                    .sum()
            };
            let (dw, dinp) = backward(&inp, &w, &probe);
            let h = 1e-6;
            for i in 0..w.len() {
                let mut wp = w.clone();
                wp[i] += h;
                let mut wm = w.clone();
                wm[i] -= h;
                let fd = (objective(&inp, &wp) - objective(&inp, &wm)) / (2.0 * h);
                assert!(
                    (fd - dw[i]).abs() < 1e-6 * fd.abs().max(dw[i].abs()).max(1.0),
                    "dw[{i}]: fd {fd} vs analytic {}",
                    dw[i]
                );
            }
            for i in 0..inp.data.len() {
                let mut ip = inp.clone();
                ip.data[i] += h;
                let mut im = inp.clone();
                im.data[i] -= h;
                let fd = (objective(&ip, &w) - objective(&im, &w)) / (2.0 * h);
                assert!(
                    (fd - dinp.data[i]).abs() < 1e-6 * fd.abs().max(dinp.data[i].abs()).max(1.0),
                    "dinp[{i}]: fd {fd} vs analytic {}",
                    dinp.data[i]
                );
            }
        }
    }

    #[test]
    fn conv3_gradients_match_finite_differences() {
        let chk = FdCheck {
            shape: GridShape::new(3, 4, 2),
            cin: 2,
            cout: 2,
        };
        let cout = chk.cout;
        chk.run(
            |inp, w| conv3_forward(inp, w, None, cout),
            |inp, w, probe| {
                let mut dw = vec![0.0; w.len()];
                let mut dinp = ChannelGrid::zeros(inp.classes, inp.shape);
                conv3_backward(inp, w, probe, cout, &mut dw, None, &mut dinp);
                (dw, dinp)
            },
            cout * chk.cin * 27,
            11,
        );
    }

    #[test]
    fn conv3_bias_gradient_matches_finite_differences() {
        let shape = GridShape::new(2, 3, 2);
        let (cin, cout) = (2, 2);
        let inp = rand_grid(cin, shape, 21);
        let w = rand_vec(cout * cin * 27, 22);
        let b = rand_vec(cout, 23);
        let probe = rand_grid(cout, shape, 24);
        let objective = |b: &[f64]| -> f64 {
            conv3_forward(&inp, &w, Some(b), cout)
                .data
                .iter()
                .zip(&probe.data)
                .map(|(&o, &p)| o * p)
                .sum()
        };
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; cout];
        let mut dinp = ChannelGrid::zeros(cin, shape);
        conv3_backward(&inp, &w, &probe, cout, &mut dw, Some(&mut db), &mut dinp);
        let h = 1e-6;
        for i in 0..cout {
            let mut bp = b.clone();
            bp[i] += h;
            let mut bm = b.clone();
            bm[i] -= h;
            let fd = (objective(&bp) - objective(&bm)) / (2.0 * h);
            assert!((fd - db[i]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn down2_gradients_match_finite_differences() {
        let chk = FdCheck {
            shape: GridShape::new(4, 4, 2),
            cin: 2,
            cout: 3,
        };
        let cout = chk.cout;
        chk.run(
            |inp, w| down2_forward(inp, w, cout),
            |inp, w, probe| {
                let mut dw = vec![0.0; w.len()];
                let mut dinp = ChannelGrid::zeros(inp.classes, inp.shape);
                down2_backward(inp, w, probe, cout, &mut dw, &mut dinp);
                (dw, dinp)
            },
            cout * chk.cin * 8,
            31,
        );
    }

    #[test]
    fn up2_gradients_match_finite_differences() {
        let chk = FdCheck {
            shape: GridShape::new(2, 3, 2),
            cin: 3,
            cout: 2,
        };
        let cout = chk.cout;
        chk.run(
            |inp, w| up2_forward(inp, w, cout),
            |inp, w, probe| {
                let mut dw = vec![0.0; w.len()];
                let mut dinp = ChannelGrid::zeros(inp.classes, inp.shape);
                up2_backward(inp, w, probe, cout, &mut dw, &mut dinp);
                (dw, dinp)
            },
            chk.cin * cout * 8,
            41,
        );
    }

    #[test]
    fn conv1_gradients_match_finite_differences() {
        let shape = GridShape::new(3, 3, 2);
        let (cin, cout) = (3, 4);
        let inp = rand_grid(cin, shape, 51);
        let w = rand_vec(cout * cin, 52);
        let b = rand_vec(cout, 53);
        let probe = rand_grid(cout, shape, 54);
        let objective = |inp: &ChannelGrid<f64>, w: &[f64], b: &[f64]| -> f64 {
            conv1_forward(inp, w, b, cout)
                .data
                .iter()
                .zip(&probe.data)
                .map(|(&o, &p)| o * p)
                .sum()
        };
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; cout];
        let mut dinp = ChannelGrid::zeros(cin, shape);
        conv1_backward(&inp, &w, &probe, cout, &mut dw, &mut db, &mut dinp);
        let h = 1e-6;
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (objective(&inp, &wp, &b) - objective(&inp, &wm, &b)) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-6 * fd.abs().max(1.0));
        }
        for i in 0..cout {
            let mut bp = b.clone();
            bp[i] += h;
            let mut bm = b.clone();
            bm[i] -= h;
            let fd = (objective(&inp, &w, &bp) - objective(&inp, &w, &bm)) / (2.0 * h);
            assert!((fd - db[i]).abs() < 1e-6 * fd.abs().max(1.0));
        }
        for i in 0..inp.data.len() {
            let mut ip = inp.clone();
            ip.data[i] += h;
            let mut im = inp.clone();
            im.data[i] -= h;
            let fd = (objective(&ip, &w, &b) - objective(&im, &w, &b)) / (2.0 * h);
            assert!((fd - dinp.data[i]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn instance_norm_gradients_match_finite_differences() {
        let shape = GridShape::new(3, 3, 2);
        let c = 2;
        let inp = rand_grid(c, shape, 61);
        let gamma = vec![1.3, 0.7];
        let beta = vec![0.2, -0.4];
        let probe = rand_grid(c, shape, 62);
        let objective = |inp: &ChannelGrid<f64>, gamma: &[f64], beta: &[f64]| -> f64 {
            instance_norm_forward(inp, gamma, beta)
                .0
                .data
                .iter()
                .zip(&probe.data)
                .map(|(&o, &p)| o * p)
                .sum()
        };
        let (_, cache) = instance_norm_forward(&inp, &gamma, &beta);
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut dinp = ChannelGrid::zeros(c, shape);
        instance_norm_backward(&cache, &gamma, &probe, &mut dgamma, &mut dbeta, &mut dinp);
        let h = 1e-6;
        for i in 0..c {
            let mut gp = gamma.clone();
            gp[i] += h;
            let mut gm = gamma.clone();
            gm[i] -= h;
            let fd = (objective(&inp, &gp, &beta) - objective(&inp, &gm, &beta)) / (2.0 * h);
            assert!((fd - dgamma[i]).abs() < 1e-6 * fd.abs().max(1.0), "dgamma[{i}]");
            let mut bp = beta.clone();
            bp[i] += h;
            let mut bm = beta.clone();
            bm[i] -= h;
            let fd = (objective(&inp, &gamma, &bp) - objective(&inp, &gamma, &bm)) / (2.0 * h);
            assert!((fd - dbeta[i]).abs() < 1e-6 * fd.abs().max(1.0), "dbeta[{i}]");
        }
        for i in 0..inp.data.len() {
            let mut ip = inp.clone();
            ip.data[i] += h;
            let mut im = inp.clone();
            im.data[i] -= h;
            let fd = (objective(&ip, &gamma, &beta) - objective(&im, &gamma, &beta)) / (2.0 * h);
            assert!(
                (fd - dinp.data[i]).abs() < 1e-5 * fd.abs().max(dinp.data[i].abs()).max(1.0),
                "dinp[{i}]: {fd} vs {}",
                dinp.data[i]
            );
        }
    }
}
