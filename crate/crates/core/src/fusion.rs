//! Two-view fusion: shared-space projection, core-tensor bilinear fusion
//! (full or Tucker-factored core), elementwise squaring, and the plain
//! concatenation baseline.
//!
//! With projected views `f1, f2 ∈ R^{d_f}` and a core `T ∈ R^{d_f×d_f×d_f}`
//! the fused vector is `z_k = Σ_i Σ_j T[i,j,k] · f1_i · f2_j`, followed by
//! `h = z ⊙ z`. A factored core stores `G ∈ R^{r1×r2×r3}` and factor matrices
//! `A ∈ R^{d_f×r1}`, `B ∈ R^{d_f×r2}`, `C ∈ R^{d_f×r3}` with
//! `T[i,j,k] = Σ_abc G[a,b,c] A[i,a] B[j,b] C[k,c]`; fusing through the
//! factors never materialises `T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::{self, TtvLayout};
use crate::layers::Initializer;
use crate::tensor::{Element, Tensor};

pub const DEFAULT_FUSED_DIM: usize = 96;
pub const DEFAULT_RANKS: [usize; 3] = [32, 32, 32];

/// Which core parameterisation a fusion model trains.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CoreKind {
    Full,
    Factored { ranks: [usize; 3] },
}

/// Bias-free maps of both flattened views into the fused space.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedProjection<T = f32> {
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
}

impl<T: Element> SharedProjection<T> {
    pub fn new(w1: Tensor<T>, w2: Tensor<T>) -> Result<Self> {
        if w1.rank() != 2 || w2.rank() != 2 || w1.shape()[1] != w2.shape()[1] {
            return Err(Error::shape(
                "shared projection",
                format!(
                    "{:?} and {:?} must share the fused width",
                    w1.shape(),
                    w2.shape()
                ),
            ));
        }
        Ok(SharedProjection { w1, w2 })
    }

    pub fn fused_dim(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn apply(&self, x1: &Tensor<T>, x2: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        Ok((project(x1, &self.w1)?, project(x2, &self.w2)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuckerCoreFull<T = f32> {
    pub t: Tensor<T>,
}

impl<T: Element> TuckerCoreFull<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != s[1] || s[1] != s[2] {
            return Err(Error::shape(
                "full core",
                format!("expected a cube, got {s:?}"),
            ));
        }
        Ok(TuckerCoreFull { t })
    }

    pub fn fused_dim(&self) -> usize {
        self.t.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuckerCoreFactored<T = f32> {
    pub g: Tensor<T>,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Element> TuckerCoreFactored<T> {
    pub fn new(g: Tensor<T>, a: Tensor<T>, b: Tensor<T>, c: Tensor<T>) -> Result<Self> {
        let gs = g.shape();
        let ok = gs.len() == 3
            && [&a, &b, &c].iter().all(|m| m.rank() == 2)
            && a.shape()[0] == b.shape()[0]
            && b.shape()[0] == c.shape()[0]
            && [a.shape()[1], b.shape()[1], c.shape()[1]] == [gs[0], gs[1], gs[2]]
            && gs.iter().all(|&r| r <= a.shape()[0]);
        if !ok {
            return Err(Error::shape(
                "factored core",
                format!(
                    "G {:?}, A {:?}, B {:?}, C {:?}",
                    gs,
                    a.shape(),
                    b.shape(),
                    c.shape()
                ),
            ));
        }
        Ok(TuckerCoreFactored { g, a, b, c })
    }

    pub fn fused_dim(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn ranks(&self) -> [usize; 3] {
        let s = self.g.shape();
        [s[0], s[1], s[2]]
    }
}

/// Fused vector and its elementwise square.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedVector<T = f32> {
    pub z: Tensor<T>,
    pub h: Tensor<T>,
}

impl<T: Element> FusedVector<T> {
    pub fn from_z(z: Tensor<T>) -> Self {
        let h = hadamard_square(&z);
        FusedVector { z, h }
    }
}

/// `Wᵀ·x` for `W ∈ R^{d′×d_f}`.
pub fn project<T: Element>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    if w.rank() != 2 || x.shape() != [w.shape()[0]] {
        return Err(Error::shape(
            "project",
            format!("x {:?}, W {:?}", x.shape(), w.shape()),
        ));
    }
    let (k, m) = (w.shape()[0], w.shape()[1]);
    Ok(Tensor::vector(kernels::matmul(
        x.data(),
        w.data(),
        1,
        k,
        m,
        false,
    )))
}

fn check_vec<T: Element>(ctx: &str, v: &Tensor<T>, n: usize) -> Result<()> {
    if v.shape() != [n] {
        return Err(Error::shape(
            ctx,
            format!("expected [{n}], got {:?}", v.shape()),
        ));
    }
    Ok(())
}

fn ttv_unbatched<T: Element>(t: &[T], v: &[T], n: usize, inner: usize) -> Vec<T> {
    kernels::ttv(
        t,
        v,
        TtvLayout {
            batch: 1,
            tensor_batched: false,
            vector_batched: false,
            outer: 1,
            n,
            inner,
        },
    )
}

pub fn tucker_fuse_full<T: Element>(
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    core: &TuckerCoreFull<T>,
) -> Result<Tensor<T>> {
    let d = core.fused_dim();
    check_vec("tucker_fuse_full", f1, d)?;
    check_vec("tucker_fuse_full", f2, d)?;
    let m = ttv_unbatched(core.t.data(), f1.data(), d, d * d);
    Ok(Tensor::vector(ttv_unbatched(&m, f2.data(), d, d)))
}

pub fn tucker_fuse_factored<T: Element>(
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    core: &TuckerCoreFactored<T>,
) -> Result<Tensor<T>> {
    let d = core.fused_dim();
    let [r1, r2, r3] = core.ranks();
    check_vec("tucker_fuse_factored", f1, d)?;
    check_vec("tucker_fuse_factored", f2, d)?;
    let p = kernels::matmul(f1.data(), core.a.data(), 1, d, r1, false);
    let q = kernels::matmul(f2.data(), core.b.data(), 1, d, r2, false);
    let m = ttv_unbatched(core.g.data(), &p, r1, r2 * r3);
    let s = ttv_unbatched(&m, &q, r2, r3);
    Ok(Tensor::vector(kernels::matmul(
        &s,
        core.c.data(),
        1,
        r3,
        d,
        true,
    )))
}

/// Materialises `T = G ×₁ A ×₂ B ×₃ C`.
pub fn reconstruct_core<T: Element>(core: &TuckerCoreFactored<T>) -> TuckerCoreFull<T> {
    let d = core.fused_dim();
    let [r1, r2, r3] = core.ranks();
    // x[i, b, c] = Σ_a A[i, a] G[a, b, c]
    let x = kernels::matmul(core.a.data(), core.g.data(), d, r1, r2 * r3, false);
    // y[i, j, c] = Σ_b B[j, b] x[i, b, c]
    let mut y = vec![T::ZERO; d * d * r3];
    for i in 0..d {
        let xi = &x[i * r2 * r3..(i + 1) * r2 * r3];
        let yi = kernels::matmul(core.b.data(), xi, d, r2, r3, false);
        y[i * d * r3..(i + 1) * d * r3].copy_from_slice(&yi);
    }
    // t[i, j, k] = Σ_c y[i, j, c] C[k, c]
    let t = kernels::matmul(&y, core.c.data(), d * d, r3, d, true);
    TuckerCoreFull {
        t: Tensor::new(&[d, d, d], t).expect("cube shape"),
    }
}

pub fn hadamard_square<T: Element>(z: &Tensor<T>) -> Tensor<T> {
    z.map(|v| v * v)
}

/// View 1 followed by view 2.
pub fn concat_fuse<T: Element>(x1: &Tensor<T>, x2: &Tensor<T>) -> Result<Tensor<T>> {
    if x1.rank() != 1 || x2.rank() != 1 {
        return Err(Error::shape(
            "concat_fuse",
            "both views must be flat vectors",
        ));
    }
    let mut data = x1.data().to_vec();
    data.extend_from_slice(x2.data());
    Ok(Tensor::vector(data))
}

/// Glorot bounds for the core tensors treat the two contracted modes as fan-in.
pub fn init_core<T: Element>(init: &mut Initializer, d_f: usize, kind: &CoreKind) -> CoreParams<T> {
    match *kind {
        CoreKind::Full => CoreParams::Full(TuckerCoreFull {
            t: init.glorot_uniform(&[d_f, d_f, d_f], d_f * d_f, d_f),
        }),
        CoreKind::Factored {
            ranks: [r1, r2, r3],
        } => CoreParams::Factored(TuckerCoreFactored {
            g: init.glorot_uniform(&[r1, r2, r3], r1 * r2, r3),
            a: init.glorot_uniform(&[d_f, r1], d_f, r1),
            b: init.glorot_uniform(&[d_f, r2], d_f, r2),
            c: init.glorot_uniform(&[d_f, r3], r3, d_f),
        }),
    }
}

pub enum CoreParams<T> {
    Full(TuckerCoreFull<T>),
    Factored(TuckerCoreFactored<T>),
}

/// Appends `F = Wᵀx` (no bias) with a Glorot-initialised `W ∈ R^{d′×d_f}`.
pub fn add_projection<T: Element>(
    g: &mut Graph<T>,
    init: &mut Initializer,
    x: NodeId,
    name: &str,
    in_dim: usize,
    d_f: usize,
) -> Result<NodeId> {
    let w = g.param(
        &format!("{name}.weight"),
        init.glorot_uniform(&[in_dim, d_f], in_dim, d_f),
    )?;
    let f = g.matmul(x, w, false)?;
    Ok(g.label(f, name))
}

/// Appends core fusion of two batched `[d_f]` nodes; returns `z`.
pub fn add_tucker_fusion<T: Element>(
    g: &mut Graph<T>,
    f1: NodeId,
    f2: NodeId,
    core: CoreParams<T>,
) -> Result<NodeId> {
    let z = match core {
        CoreParams::Full(c) => {
            let t = g.param("core.t", c.t)?;
            let m = g.ttv(t, f1, 0)?;
            g.ttv(m, f2, 0)?
        }
        CoreParams::Factored(c) => {
            let gn = g.param("core.g", c.g)?;
            let a = g.param("core.a", c.a)?;
            let b = g.param("core.b", c.b)?;
            let cn = g.param("core.c", c.c)?;
            let p = g.matmul(f1, a, false)?;
            let q = g.matmul(f2, b, false)?;
            let m = g.ttv(gn, p, 0)?;
            let s = g.ttv(m, q, 0)?;
            g.matmul(s, cn, true)?
        }
    };
    Ok(g.label(z, "fusion.z"))
}

pub fn add_hadamard_square<T: Element>(g: &mut Graph<T>, z: NodeId) -> Result<NodeId> {
    let h = g.mul(z, z)?;
    Ok(g.label(h, "fusion.h"))
}
