//! Grouped 2-D/3-D cross-correlation via im2col + GEMM.
//!
//! A 2-D convolution is run as a 3-D one with a depth-1 kernel on a depth-1
//! volume; the memory layout of `[B,C,H,W]` and `[B,C,1,H,W]` is identical.

use crate::error::{Error, Result};

use super::{Real, Tensor};

/// Stride/padding per spatial axis plus the group count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: Vec<usize>,
    pub pad: Vec<usize>,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: &[usize], pad: &[usize], groups: usize) -> Self {
        Self {
            stride: stride.to_vec(),
            pad: pad.to_vec(),
            groups,
        }
    }

    pub fn conv2d(stride: usize, pad: usize) -> Self {
        Self::new(&[stride, stride], &[pad, pad], 1)
    }

    pub fn depthwise2d(channels: usize, stride: usize, pad: usize) -> Self {
        Self::new(&[stride, stride], &[pad, pad], channels)
    }
}

/// Output extent of one axis: `floor((in + 2·pad − k) / stride) + 1`.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Debug)]
pub(crate) struct ConvGeometry {
    batch: usize,
    in_c: usize,
    out_c: usize,
    groups: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    out: [usize; 3],
    out_shape: Vec<usize>,
}

impl ConvGeometry {
    pub(crate) fn new(
        x: &[usize],
        w: &[usize],
        bias: Option<&[usize]>,
        spec: &ConvSpec,
    ) -> Result<Self> {
        let rank = x.len();
        if !(rank == 4 || rank == 5) || w.len() != rank {
            return Err(Error::shape("conv", x, w));
        }
        let spatial = rank - 2;
        if spec.stride.len() != spatial || spec.pad.len() != spatial {
            return Err(Error::config(format!(
                "conv{spatial}d needs {spatial} strides and pads, got {:?} / {:?}",
                spec.stride, spec.pad
            )));
        }
        let (in_c, out_c, groups) = (x[1], w[0], spec.groups);
        if groups == 0 || in_c % groups != 0 || out_c % groups != 0 {
            return Err(Error::config(format!(
                "groups {groups} must divide input channels {in_c} and output channels {out_c}"
            )));
        }
        if w[1] != in_c / groups {
            return Err(Error::shape("conv", x, w));
        }
        if let Some(b) = bias {
            if b != [out_c] {
                return Err(Error::shape("conv bias", b, &[out_c]));
            }
        }
        let lift = |v: &[usize], fill: usize| -> [usize; 3] {
            if v.len() == 2 {
                [fill, v[0], v[1]]
            } else {
                [v[0], v[1], v[2]]
            }
        };
        let input = lift(&x[2..], 1);
        let kernel = lift(&w[2..], 1);
        let stride = lift(&spec.stride, 1);
        let pad = lift(&spec.pad, 0);
        let mut out = [0; 3];
        for ax in 0..3 {
            out[ax] = conv_out_extent(input[ax], kernel[ax], stride[ax], pad[ax])
                .ok_or_else(|| Error::shape("conv kernel exceeds padded input", x, w))?;
        }
        let mut out_shape = vec![x[0], out_c];
        out_shape.extend_from_slice(&out[3 - spatial..]);
        Ok(Self {
            batch: x[0],
            in_c,
            out_c,
            groups,
            input,
            kernel,
            stride,
            pad,
            out,
            out_shape,
        })
    }

    fn in_size(&self) -> usize {
        self.input.iter().product()
    }

    fn out_size(&self) -> usize {
        self.out.iter().product()
    }

    fn cg(&self) -> usize {
        self.in_c / self.groups
    }

    fn og(&self) -> usize {
        self.out_c / self.groups
    }

    fn col_rows(&self) -> usize {
        self.cg() * self.kernel.iter().product::<usize>()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    /// Visits every (col row, output position, input offset) triple that
    /// reads a real (non-padding) input element.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [kd, kh, kw] = self.kernel;
        let [id_, ih_, iw_] = self.input.map(|v| v as isize);
        let [od_, oh_, ow_] = self.out;
        let [sd, sh, sw] = self.stride.map(|v| v as isize);
        let [pd, ph, pw] = self.pad.map(|v| v as isize);
        let in_size = self.in_size();
        let mut row = 0;
        for c in 0..self.cg() {
            for a in 0..kd as isize {
                for i in 0..kh as isize {
                    for j in 0..kw as isize {
                        let mut p = 0;
                        for od in 0..od_ as isize {
                            let z = od * sd + a - pd;
                            if z < 0 || z >= id_ {
                                p += oh_ * ow_;
                                continue;
                            }
                            for oh in 0..oh_ as isize {
                                let y = oh * sh + i - ph;
                                if y < 0 || y >= ih_ {
                                    p += ow_;
                                    continue;
                                }
                                let base = c * in_size + ((z * ih_ + y) * iw_) as usize;
                                for ow in 0..ow_ as isize {
                                    let x = ow * sw + j - pw;
                                    if x >= 0 && x < iw_ {
                                        f(row, p, base + x as usize);
                                    }
                                    p += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn im2col<T: Real>(&self, x_group: &[T], col: &mut [T]) {
        col.fill(T::zero());
        let n = self.out_size();
        self.for_each_tap(|row, p, src| col[row * n + p] = x_group[src]);
    }

    fn col2im<T: Real>(&self, col: &[T], dx_group: &mut [T]) {
        let n = self.out_size();
        self.for_each_tap(|row, p, dst| dx_group[dst] += col[row * n + p]);
    }
}

pub(crate) fn forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &ConvGeometry,
) -> Tensor<T> {
    let (cg, og, kg, n) = (geom.cg(), geom.og(), geom.col_rows(), geom.out_size());
    let in_size = geom.in_size();
    let mut out = vec![T::zero(); geom.batch * geom.out_c * n];
    let mut col = if geom.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kg * n]
    };
    for b in 0..geom.batch {
        for g in 0..geom.groups {
            let x_off = (b * geom.in_c + g * cg) * in_size;
            let x_group = &x.data()[x_off..x_off + cg * in_size];
            let col_ref: &[T] = if geom.is_pointwise() {
                x_group
            } else {
                geom.im2col(x_group, &mut col);
                &col
            };
            let o_off = (b * geom.out_c + g * og) * n;
            T::gemm(
                og,
                kg,
                n,
                T::one(),
                &w.data()[g * og * kg..(g + 1) * og * kg],
                (kg as isize, 1),
                col_ref,
                (n as isize, 1),
                T::zero(),
                &mut out[o_off..o_off + og * n],
                (n as isize, 1),
            );
        }
        if let Some(bias) = bias {
            for (o, &bv) in bias.data().iter().enumerate() {
                let off = (b * geom.out_c + o) * n;
                for v in &mut out[off..off + n] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(geom.out_shape.clone(), out).expect("geometry-consistent output")
}

pub(crate) struct ConvGrads<T> {
    pub x: Option<Tensor<T>>,
    pub w: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    geom: &ConvGeometry,
    need_x: bool,
    need_w: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let (cg, og, kg, n) = (geom.cg(), geom.og(), geom.col_rows(), geom.out_size());
    let in_size = geom.in_size();
    let mut dx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_w.then(|| Tensor::zeros(w.shape()));
    let mut db = need_bias.then(|| Tensor::zeros(&[geom.out_c]));
    let mut col = vec![T::zero(); kg * n];
    let mut dcol = vec![T::zero(); kg * n];
    for b in 0..geom.batch {
        for grp in 0..geom.groups {
            let x_off = (b * geom.in_c + grp * cg) * in_size;
            let o_off = (b * geom.out_c + grp * og) * n;
            let g_bg = &g.data()[o_off..o_off + og * n];
            let w_g = &w.data()[grp * og * kg..(grp + 1) * og * kg];
            if let Some(dw) = dw.as_mut() {
                let x_group = &x.data()[x_off..x_off + cg * in_size];
                let col_ref: &[T] = if geom.is_pointwise() {
                    x_group
                } else {
                    geom.im2col(x_group, &mut col);
                    &col
                };
                // dW_g += dOut · colᵀ
                T::gemm(
                    og,
                    n,
                    kg,
                    T::one(),
                    g_bg,
                    (n as isize, 1),
                    col_ref,
                    (1, n as isize),
                    T::one(),
                    &mut dw.data_mut()[grp * og * kg..(grp + 1) * og * kg],
                    (kg as isize, 1),
                );
            }
            if let Some(dx) = dx.as_mut() {
                // dcol = W_gᵀ · dOut
                T::gemm(
                    kg,
                    og,
                    n,
                    T::one(),
                    w_g,
                    (1, kg as isize),
                    g_bg,
                    (n as isize, 1),
                    T::zero(),
                    &mut dcol,
                    (n as isize, 1),
                );
                let dx_group = &mut dx.data_mut()[x_off..x_off + cg * in_size];
                if geom.is_pointwise() {
                    for (d, &c) in dx_group.iter_mut().zip(&dcol) {
                        *d += c;
                    }
                } else {
                    geom.col2im(&dcol, dx_group);
                }
            }
        }
        if let Some(db) = db.as_mut() {
            for (o, acc) in db.data_mut().iter_mut().enumerate() {
                let off = (b * geom.out_c + o) * n;
                *acc += g.data()[off..off + n].iter().copied().sum::<T>();
            }
        }
    }
    ConvGrads {
        x: dx,
        w: dw,
        bias: db,
    }
}
