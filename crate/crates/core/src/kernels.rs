//! Slice-level forward/backward kernels. Layouts are row-major; convolution
//! activations are `[batch, channels, length]`.

use crate::tensor::Element;

pub const KERNEL_WIDTH: usize = 3;

/// `out[rows × m] = a[rows × k] · b`, where `b` is `[k × m]`, or `[m × k]`
/// when `trans_b` is set.
pub fn matmul<T: Element>(
    a: &[T],
    b: &[T],
    rows: usize,
    k: usize,
    m: usize,
    trans_b: bool,
) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * m];
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (m as isize, 1)
    };
    T::gemm(
        rows,
        k,
        m,
        T::ONE,
        a,
        k as isize,
        1,
        b,
        rsb,
        csb,
        T::ZERO,
        &mut out,
        m as isize,
        1,
    );
    out
}

/// Gradients of [`matmul`]; accumulates into `da` / `db` when given.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward<T: Element>(
    a: &[T],
    b: &[T],
    dout: &[T],
    rows: usize,
    k: usize,
    m: usize,
    trans_b: bool,
    da: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (m as isize, 1)
    };
    if let Some(da) = da {
        // da = dout · bᵀ
        T::gemm(
            rows,
            m,
            k,
            T::ONE,
            dout,
            m as isize,
            1,
            b,
            csb,
            rsb,
            T::ONE,
            da,
            k as isize,
            1,
        );
    }
    if let Some(db) = db {
        // db (as stored) = aᵀ · dout, or its transpose
        let (rsc, csc) = if trans_b {
            (1, k as isize)
        } else {
            (m as isize, 1)
        };
        T::gemm(
            k,
            rows,
            m,
            T::ONE,
            a,
            1,
            k as isize,
            dout,
            m as isize,
            1,
            T::ONE,
            db,
            rsc,
            csc,
        );
    }
}

fn im2col<T: Element>(x: &[T], cin: usize, len: usize, cols: &mut [T]) {
    for ci in 0..cin {
        let src = &x[ci * len..(ci + 1) * len];
        for k in 0..KERNEL_WIDTH {
            let row = &mut cols[(ci * KERNEL_WIDTH + k) * len..(ci * KERNEL_WIDTH + k + 1) * len];
            for (p, slot) in row.iter_mut().enumerate() {
                let q = p as isize + k as isize - 1;
                *slot = if q >= 0 && (q as usize) < len {
                    src[q as usize]
                } else {
                    T::ZERO
                };
            }
        }
    }
}

fn col2im_add<T: Element>(cols: &[T], cin: usize, len: usize, dx: &mut [T]) {
    for ci in 0..cin {
        for k in 0..KERNEL_WIDTH {
            let row = &cols[(ci * KERNEL_WIDTH + k) * len..(ci * KERNEL_WIDTH + k + 1) * len];
            for (p, &v) in row.iter().enumerate() {
                let q = p as isize + k as isize - 1;
                if q >= 0 && (q as usize) < len {
                    dx[ci * len + q as usize] += v;
                }
            }
        }
    }
}

/// Same-padded cross-correlation with a width-3 kernel `[cout, cin, 3]`.
pub fn conv1d<T: Element>(
    x: &[T],
    kernel: &[T],
    bias: &[T],
    batch: usize,
    cin: usize,
    cout: usize,
    len: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; batch * cout * len];
    let mut cols = vec![T::ZERO; cin * KERNEL_WIDTH * len];
    let kw = cin * KERNEL_WIDTH;
    for b in 0..batch {
        im2col(&x[b * cin * len..(b + 1) * cin * len], cin, len, &mut cols);
        let o = &mut out[b * cout * len..(b + 1) * cout * len];
        for (co, row) in o.chunks_mut(len).enumerate() {
            row.fill(bias[co]);
        }
        T::gemm(
            cout,
            kw,
            len,
            T::ONE,
            kernel,
            kw as isize,
            1,
            &cols,
            len as isize,
            1,
            T::ONE,
            o,
            len as isize,
            1,
        );
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward<T: Element>(
    x: &[T],
    kernel: &[T],
    dout: &[T],
    batch: usize,
    cin: usize,
    cout: usize,
    len: usize,
    mut dx: Option<&mut [T]>,
    mut dkernel: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let kw = cin * KERNEL_WIDTH;
    let mut cols = vec![T::ZERO; kw * len];
    let mut dcols = vec![T::ZERO; kw * len];
    for b in 0..batch {
        let g = &dout[b * cout * len..(b + 1) * cout * len];
        if let Some(db) = dbias.as_deref_mut() {
            for (co, row) in g.chunks(len).enumerate() {
                db[co] += row.iter().fold(T::ZERO, |acc, &v| acc + v);
            }
        }
        if let Some(dk) = dkernel.as_deref_mut() {
            im2col(&x[b * cin * len..(b + 1) * cin * len], cin, len, &mut cols);
            T::gemm(
                cout,
                len,
                kw,
                T::ONE,
                g,
                len as isize,
                1,
                &cols,
                1,
                len as isize,
                T::ONE,
                dk,
                kw as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            T::gemm(
                kw,
                cout,
                len,
                T::ONE,
                kernel,
                1,
                kw as isize,
                g,
                len as isize,
                1,
                T::ZERO,
                &mut dcols,
                len as isize,
                1,
            );
            col2im_add(
                &dcols,
                cin,
                len,
                &mut dx[b * cin * len..(b + 1) * cin * len],
            );
        }
    }
}

/// Non-overlapping width-2 max pooling over the last axis of `[rows, len]`.
/// Returns the pooled values and, per output, the flat index of the winner
/// (first index on ties). A trailing odd element is dropped.
pub fn maxpool2<T: Element>(x: &[T], rows: usize, len: usize) -> (Vec<T>, Vec<u32>) {
    let half = len / 2;
    let mut out = Vec::with_capacity(rows * half);
    let mut arg = Vec::with_capacity(rows * half);
    for r in 0..rows {
        let base = r * len;
        for p in 0..half {
            let i = base + 2 * p;
            let (v, idx) = if x[i + 1] > x[i] {
                (x[i + 1], i + 1)
            } else {
                (x[i], i)
            };
            out.push(v);
            arg.push(idx as u32);
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Element>(dout: &[T], argmax: &[u32], dx: &mut [T]) {
    for (&g, &i) in dout.iter().zip(argmax) {
        dx[i as usize] += g;
    }
}

/// Layout of a tensor-times-vector contraction over one mode.
#[derive(Clone, Copy, Debug)]
pub struct TtvLayout {
    pub batch: usize,
    pub tensor_batched: bool,
    pub vector_batched: bool,
    pub outer: usize,
    pub n: usize,
    pub inner: usize,
}

impl TtvLayout {
    fn tensor_stride(&self) -> usize {
        if self.tensor_batched {
            self.outer * self.n * self.inner
        } else {
            0
        }
    }

    fn vector_stride(&self) -> usize {
        if self.vector_batched {
            self.n
        } else {
            0
        }
    }
}

/// `out[b, o, i] = Σ_j t[b?, o, j, i] · v[b?, j]`.
pub fn ttv<T: Element>(t: &[T], v: &[T], l: TtvLayout) -> Vec<T> {
    let oi = l.outer * l.inner;
    let mut out = vec![T::ZERO; l.batch * oi];
    if !l.tensor_batched && l.vector_batched {
        for o in 0..l.outer {
            let tb = &t[o * l.n * l.inner..];
            T::gemm(
                l.batch,
                l.n,
                l.inner,
                T::ONE,
                v,
                l.n as isize,
                1,
                tb,
                l.inner as isize,
                1,
                T::ZERO,
                &mut out[o * l.inner..],
                oi as isize,
                1,
            );
        }
        return out;
    }
    let (ts, vs) = (l.tensor_stride(), l.vector_stride());
    for b in 0..l.batch {
        let tb = &t[b * ts..];
        let vb = &v[b * vs..b * vs + l.n];
        let ob = &mut out[b * oi..(b + 1) * oi];
        for o in 0..l.outer {
            let orow = &mut ob[o * l.inner..(o + 1) * l.inner];
            for (j, &vj) in vb.iter().enumerate() {
                let trow = &tb[(o * l.n + j) * l.inner..(o * l.n + j + 1) * l.inner];
                for (acc, &tv) in orow.iter_mut().zip(trow) {
                    *acc += tv * vj;
                }
            }
        }
    }
    out
}

pub fn ttv_backward<T: Element>(
    t: &[T],
    v: &[T],
    dout: &[T],
    l: TtvLayout,
    dt: Option<&mut [T]>,
    dv: Option<&mut [T]>,
) {
    let oi = l.outer * l.inner;
    if !l.tensor_batched && l.vector_batched {
        if let Some(dt) = dt {
            for o in 0..l.outer {
                T::gemm(
                    l.n,
                    l.batch,
                    l.inner,
                    T::ONE,
                    v,
                    1,
                    l.n as isize,
                    &dout[o * l.inner..],
                    oi as isize,
                    1,
                    T::ONE,
                    &mut dt[o * l.n * l.inner..],
                    l.inner as isize,
                    1,
                );
            }
        }
        if let Some(dv) = dv {
            for o in 0..l.outer {
                T::gemm(
                    l.batch,
                    l.inner,
                    l.n,
                    T::ONE,
                    &dout[o * l.inner..],
                    oi as isize,
                    1,
                    &t[o * l.n * l.inner..],
                    1,
                    l.inner as isize,
                    T::ONE,
                    dv,
                    l.n as isize,
                    1,
                );
            }
        }
        return;
    }
    let (ts, vs) = (l.tensor_stride(), l.vector_stride());
    let mut dt = dt;
    let mut dv = dv;
    for b in 0..l.batch {
        let gb = &dout[b * oi..(b + 1) * oi];
        for o in 0..l.outer {
            let grow = &gb[o * l.inner..(o + 1) * l.inner];
            for j in 0..l.n {
                let off = b * ts + (o * l.n + j) * l.inner;
                if let Some(dt) = dt.as_deref_mut() {
                    let vj = v[b * vs + j];
                    for (d, &g) in dt[off..off + l.inner].iter_mut().zip(grow) {
                        *d += g * vj;
                    }
                }
                if let Some(dv) = dv.as_deref_mut() {
                    let s = t[off..off + l.inner]
                        .iter()
                        .zip(grow)
                        .fold(T::ZERO, |acc, (&tv, &g)| acc + tv * g);
                    dv[b * vs + j] += s;
                }
            }
        }
    }
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}
