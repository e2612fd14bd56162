//! Minimal reverse-mode autodiff over 2-D matrices.
//!
//! A [`Tape`] is a Wengert list: every operation appends a node holding its
//! value and the indices of its parents. [`Tape::backward`] walks the list in
//! reverse and accumulates vector-Jacobian products into per-node gradients.
//! Values are `ArcArray2` so parameter tensors enter a tape by reference
//! count bump, not by copy.
//!
//! The op set is exactly what the velocity network and its losses need:
//! dense matmuls, broadcast bias adds, softmax rows, GELU, slicing and
//! concatenation for token manipulation, reductions, and a codec-decode op
//! whose adjoint is codec-encode (the codec is orthonormal, so the transpose
//! of decode *is* encode).

use crate::codec::{self, CodecConfig, LatentChunk};
use ndarray::{Array2, ArcArray2, Axis};

pub type Mat = ArcArray2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// A[m,k] . B[k,n]
    Matmul(usize, usize),
    /// A[m,k] . B[n,k]^T
    MatmulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// A[m,n] + row[1,n] broadcast over rows.
    AddRowBroadcast(usize, usize),
    Gelu(usize),
    SoftmaxRows(usize),
    SumAll(usize),
    MeanAll(usize),
    SumAbs(usize),
    ConcatRows(usize, usize),
    SliceRows(usize, usize, usize),
    ConcatCols(usize, usize),
    SliceCols(usize, usize, usize),
    /// Interleave column blocks of size `block`: output columns are
    /// [a_0, b_0, a_1, b_1, ...] grouped per block.
    InterleaveBlocks { a: usize, b: usize, block: usize },
    /// Extract one half of an interleaved matrix: block `offset` of every
    /// 2*block-column group.
    SliceInterleaved { src: usize, block: usize, offset: usize },
    /// Multiply a matrix by a scalar-valued node `[1, 1]`.
    MulScalarVar(usize, usize),
    /// Latent matrix [L, h*w*C] -> frame matrix [T, H*W] through the codec.
    /// Orthonormality makes encode the exact adjoint of decode.
    DecodeLatent {
        src: usize,
        config: CodecConfig,
        frames: usize,
        lat_h: usize,
        lat_w: usize,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients for one backward pass, indexed by the `Var`s of the tape.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.into_shared(),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_shared(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on non-scalar node");
        m[[0, 0]]
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_shared(&mut self, value: Mat) -> Var {
        self.push_shared(value, Op::Leaf, false)
    }

    /// Differentiable leaf (a parameter or any input needing a gradient).
    pub fn param(&mut self, value: Mat) -> Var {
        self.push_shared(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Matmul(a.0, b.0), g)
    }

    /// a . b^T
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::MatmulNt(a.0, b.0), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let g = self.needs(a) || self.needs(b);
        self.push(v.into_owned(), Op::Add(a.0, b.0), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let g = self.needs(a) || self.needs(b);
        self.push(v.into_owned(), Op::Sub(a.0, b.0), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let g = self.needs(a) || self.needs(b);
        self.push(v.into_owned(), Op::Mul(a.0, b.0), g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let g = self.needs(a);
        self.push(v, Op::Scale(a.0, c), g)
    }

    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Var {
        let r = &self.nodes[row.0].value;
        assert_eq!(r.dim().0, 1, "broadcast row must be [1, n]");
        let v = &self.nodes[a.0].value + r;
        let g = self.needs(a) || self.needs(row);
        self.push(v.into_owned(), Op::AddRowBroadcast(a.0, row.0), g)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(gelu);
        let g = self.needs(a);
        self.push(v, Op::Gelu(a.0), g)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = x.to_owned();
        for mut row in v.axis_iter_mut(Axis(0)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|e| (e - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|e| e / sum);
        }
        let g = self.needs(a);
        self.push(v, Op::SoftmaxRows(a.0), g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let g = self.needs(a);
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a.0), g)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.nodes[a.0].value.mean().unwrap();
        let g = self.needs(a);
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(a.0), g)
    }

    pub fn sum_abs(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().map(|v| v.abs()).sum();
        let g = self.needs(a);
        self.push(Array2::from_elem((1, 1), s), Op::SumAbs(a.0), g)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let v = ndarray::concatenate(Axis(0), &[va.view(), vb.view()]).unwrap();
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::ConcatRows(a.0, b.0), g)
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .slice(ndarray::s![r0..r1, ..])
            .to_owned();
        let g = self.needs(a);
        self.push(v, Op::SliceRows(a.0, r0, r1), g)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let v = ndarray::concatenate(Axis(1), &[va.view(), vb.view()]).unwrap();
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::ConcatCols(a.0, b.0), g)
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .slice(ndarray::s![.., c0..c1])
            .to_owned();
        let g = self.needs(a);
        self.push(v, Op::SliceCols(a.0, c0, c1), g)
    }

    pub fn interleave_blocks(&mut self, a: Var, b: Var, block: usize) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let (rows, ca) = va.dim();
        assert_eq!(vb.dim().0, rows);
        assert_eq!(ca % block, 0);
        assert_eq!(vb.dim().1 % block, 0);
        assert_eq!(ca / block, vb.dim().1 / block);
        let groups = ca / block;
        let mut out = Array2::zeros((rows, 2 * ca));
        for r in 0..rows {
            for gidx in 0..groups {
                for k in 0..block {
                    out[[r, gidx * 2 * block + k]] = va[[r, gidx * block + k]];
                    out[[r, gidx * 2 * block + block + k]] = vb[[r, gidx * block + k]];
                }
            }
        }
        let g = self.needs(a) || self.needs(b);
        self.push(out, Op::InterleaveBlocks { a: a.0, b: b.0, block }, g)
    }

    pub fn slice_interleaved(&mut self, src: Var, block: usize, offset: usize) -> Var {
        let v = &self.nodes[src.0].value;
        let (rows, cols) = v.dim();
        assert_eq!(cols % (2 * block), 0);
        let groups = cols / (2 * block);
        let mut out = Array2::zeros((rows, groups * block));
        for r in 0..rows {
            for g in 0..groups {
                for k in 0..block {
                    out[[r, g * block + k]] = v[[r, g * 2 * block + offset + k]];
                }
            }
        }
        let needs = self.needs(src);
        self.push(
            out,
            Op::SliceInterleaved {
                src: src.0,
                block,
                offset,
            },
            needs,
        )
    }

    /// `a * s` where `s` is a `[1, 1]` node; gradients flow into both.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.nodes[a.0].value.mapv(|x| x * sv);
        let g = self.needs(a) || self.needs(s);
        self.push(v, Op::MulScalarVar(a.0, s.0), g)
    }

    /// Decode a latent matrix `[L, h*w*C]` to frames `[T, H*W]`.
    pub fn decode_latent(
        &mut self,
        src: Var,
        config: &CodecConfig,
        frames: usize,
        lat_h: usize,
        lat_w: usize,
    ) -> Var {
        let chans = config.channels();
        let lat = mat_to_latent(&self.nodes[src.0].value.to_owned(), lat_h, lat_w, chans);
        let video = codec::decode(config, &lat, frames).expect("decode_latent shape");
        let (t, h, w) = video.dim();
        let flat = video.into_shape_with_order((t, h * w)).unwrap();
        let g = self.needs(src);
        self.push(
            flat,
            Op::DecodeLatent {
                src: src.0,
                config: *config,
                frames,
                lat_h,
                lat_w,
            },
            g,
        )
    }

    /// Reverse pass from a scalar loss node. Returns one gradient slot per
    /// node; only nodes on a differentiable path are populated.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.dim(),
            (1, 1),
            "backward() needs a scalar loss"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |j: usize| &self.nodes[j].value;
        let mut add = |j: usize, delta: Array2<f64>| {
            if !self.nodes[j].needs_grad {
                return;
            }
            match &mut grads[j] {
                Some(acc) => *acc += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                add(*a, g.dot(&val(*b).t()));
                add(*b, val(*a).t().dot(g));
            }
            Op::MatmulNt(a, b) => {
                add(*a, g.dot(&val(*b).view()));
                add(*b, g.t().dot(&val(*a).view()));
            }
            Op::Add(a, b) => {
                add(*a, g.clone());
                add(*b, g.clone());
            }
            Op::Sub(a, b) => {
                add(*a, g.clone());
                add(*b, -g.clone());
            }
            Op::Mul(a, b) => {
                add(*a, g * &val(*b).view());
                add(*b, g * &val(*a).view());
            }
            Op::Scale(a, c) => add(*a, g.mapv(|x| x * c)),
            Op::AddRowBroadcast(a, row) => {
                add(*a, g.clone());
                let rowsum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                add(*row, rowsum);
            }
            Op::Gelu(a) => {
                let x = val(*a);
                let mut d = g.clone();
                d.zip_mut_with(&x.view(), |gv, &xv| *gv *= gelu_deriv(xv));
                add(*a, d);
            }
            Op::SoftmaxRows(a) => {
                // dx = y * (g - rowdot(g, y))
                let y = &self.nodes[i].value;
                let mut d = Array2::zeros(g.dim());
                for r in 0..g.dim().0 {
                    let dot: f64 = g
                        .row(r)
                        .iter()
                        .zip(y.row(r).iter())
                        .map(|(a, b)| a * b)
                        .sum();
                    for c in 0..g.dim().1 {
                        d[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                    }
                }
                add(*a, d);
            }
            Op::SumAll(a) => {
                let s = g[[0, 0]];
                add(*a, Array2::from_elem(val(*a).dim(), s));
            }
            Op::MeanAll(a) => {
                let n = val(*a).len() as f64;
                let s = g[[0, 0]] / n;
                add(*a, Array2::from_elem(val(*a).dim(), s));
            }
            Op::SumAbs(a) => {
                let s = g[[0, 0]];
                add(*a, val(*a).mapv(|x| s * sign(x)));
            }
            Op::ConcatRows(a, b) => {
                let ra = val(*a).dim().0;
                add(*a, g.slice(ndarray::s![..ra, ..]).to_owned());
                add(*b, g.slice(ndarray::s![ra.., ..]).to_owned());
            }
            Op::SliceRows(a, r0, r1) => {
                let mut d = Array2::zeros(val(*a).dim());
                d.slice_mut(ndarray::s![*r0..*r1, ..]).assign(g);
                add(*a, d);
            }
            Op::ConcatCols(a, b) => {
                let ca = val(*a).dim().1;
                add(*a, g.slice(ndarray::s![.., ..ca]).to_owned());
                add(*b, g.slice(ndarray::s![.., ca..]).to_owned());
            }
            Op::SliceCols(a, c0, c1) => {
                let mut d = Array2::zeros(val(*a).dim());
                d.slice_mut(ndarray::s![.., *c0..*c1]).assign(g);
                add(*a, d);
            }
            Op::InterleaveBlocks { a, b, block } => {
                let (rows, ca) = val(*a).dim();
                let groups = ca / block;
                let mut da = Array2::zeros((rows, ca));
                let mut db = Array2::zeros(val(*b).dim());
                for r in 0..rows {
                    for gidx in 0..groups {
                        for k in 0..*block {
                            da[[r, gidx * block + k]] = g[[r, gidx * 2 * block + k]];
                            db[[r, gidx * block + k]] = g[[r, gidx * 2 * block + block + k]];
                        }
                    }
                }
                add(*a, da);
                add(*b, db);
            }
            Op::SliceInterleaved { src, block, offset } => {
                let (rows, cols) = val(*src).dim();
                let groups = cols / (2 * block);
                let mut d = Array2::zeros((rows, cols));
                for r in 0..rows {
                    for gi in 0..groups {
                        for k in 0..*block {
                            d[[r, gi * 2 * block + offset + k]] = g[[r, gi * block + k]];
                        }
                    }
                }
                add(*src, d);
            }
            Op::MulScalarVar(a, s) => {
                let sv = val(*s)[[0, 0]];
                add(*a, g.mapv(|x| x * sv));
                let dot: f64 = g
                    .iter()
                    .zip(val(*a).iter())
                    .map(|(gv, av)| gv * av)
                    .sum();
                add(*s, Array2::from_elem((1, 1), dot));
            }
            Op::DecodeLatent {
                src,
                config,
                frames,
                lat_h,
                lat_w,
            } => {
                // Adjoint of an orthonormal decode is encode.
                let (h2, w2) = (lat_h * 2, lat_w * 2);
                let gv = g
                    .to_owned()
                    .into_shape_with_order((*frames, h2, w2))
                    .unwrap();
                let enc = codec::encode(config, &gv).expect("decode_latent adjoint shape");
                add(*src, latent_to_mat(&enc));
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Flatten a latent `[L, h, w, C]` into a matrix `[L, h*w*C]`.
pub fn latent_to_mat(latent: &LatentChunk) -> Array2<f64> {
    let (l, h, w, c) = latent.data.dim();
    latent
        .data
        .to_owned()
        .into_shape_with_order((l, h * w * c))
        .unwrap()
}

/// Flatten any latent-shaped array into `[L, h*w*C]`.
pub fn array4_to_mat(a: &ndarray::Array4<f64>) -> Array2<f64> {
    let (l, h, w, c) = a.dim();
    a.to_owned().into_shape_with_order((l, h * w * c)).unwrap()
}

/// Inverse of [`latent_to_mat`].
pub fn mat_to_latent(m: &Array2<f64>, h: usize, w: usize, c: usize) -> LatentChunk {
    let (l, cols) = m.dim();
    assert_eq!(cols, h * w * c);
    LatentChunk {
        data: m
            .to_owned()
            .into_shape_with_order((l, h, w, c))
            .unwrap(),
        head_is_spatial_only: false,
    }
}
