//! 2-D cross-correlation over `[N, C, H, W]` maps.
//!
//! Dense and grouped convolutions are lowered to im2col + GEMM per sample and
//! group. Depthwise convolutions (one input and one output channel per group)
//! use a direct loop instead.

use super::expect_rank;
use crate::tape::{GradSink, Op};
use crate::{Element, Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Conv2dOptions {
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
        }
    }
}

impl Conv2dOptions {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv2dOptions {
            stride: (stride, stride),
            padding: (padding, padding),
            groups: 1,
        }
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// Output extent along one axis: `floor((len + 2·pad − k) / stride) + 1`.
    pub fn out_extent(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = len + 2 * pad;
        if stride == 0 || padded < kernel {
            None
        } else {
            Some((padded - kernel) / stride + 1)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    groups: usize,
}

impl Geometry {
    fn cg(&self) -> usize {
        self.c / self.groups
    }

    fn ocg(&self) -> usize {
        self.oc / self.groups
    }

    fn k(&self) -> usize {
        self.cg() * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn depthwise(&self) -> bool {
        self.cg() == 1 && self.ocg() == 1
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    fn macs(&self) -> u64 {
        (self.n * self.oc * self.cg() * self.kh * self.kw * self.oh * self.ow) as u64
    }
}

fn geometry(x: &[usize], w: &[usize], bias: Option<&[usize]>, o: Conv2dOptions) -> Result<Geometry> {
    const OP: &str = "conv2d";
    expect_rank(OP, x, 4)?;
    expect_rank(OP, w, 4)?;
    let (n, c, h, wd) = (x[0], x[1], x[2], x[3]);
    let (oc, cg, kh, kw) = (w[0], w[1], w[2], w[3]);
    let groups = o.groups;
    if groups == 0 || c % groups != 0 {
        return Err(TensorError::invalid(OP, format!("groups {groups} must divide input channels {c}")));
    }
    if oc % groups != 0 {
        return Err(TensorError::invalid(OP, format!("groups {groups} must divide output channels {oc}")));
    }
    if cg != c / groups {
        return Err(TensorError::axis(OP, "input channel axis (1)", c / groups * groups, cg * groups));
    }
    if let Some(b) = bias {
        if b != [oc] {
            return Err(TensorError::shape(OP, b, format!("bias must be [{oc}]")));
        }
    }
    let (sh, sw) = o.stride;
    let (ph, pw) = o.padding;
    let oh = Conv2dOptions::out_extent(h, kh, sh, ph).ok_or_else(|| {
        TensorError::invalid(OP, format!("height axis (2): padded extent {} smaller than kernel {kh}", h + 2 * ph))
    })?;
    let ow = Conv2dOptions::out_extent(wd, kw, sw, pw).ok_or_else(|| {
        TensorError::invalid(OP, format!("width axis (3): padded extent {} smaller than kernel {kw}", wd + 2 * pw))
    })?;
    Ok(Geometry {
        n,
        c,
        h,
        w: wd,
        oc,
        kh,
        kw,
        oh,
        ow,
        sh,
        sw,
        ph,
        pw,
        groups,
    })
}

/// Output positions `[lo, hi)` along one axis whose input tap at kernel
/// offset `k_off` lies inside the unpadded input.
#[inline]
fn valid_range(out: usize, input: usize, stride: usize, pad: usize, k_off: usize) -> (usize, usize) {
    let lo = if pad > k_off { (pad - k_off).div_ceil(stride) } else { 0 };
    let hi = if input + pad > k_off {
        out.min((input + pad - k_off - 1) / stride + 1)
    } else {
        0
    };
    (lo.min(out), hi.max(lo.min(out)))
}

/// Lowers one sample/group window set into columns `[offset, offset + p)`
/// of a `[k, ld]` column matrix.
fn im2col<T: Element>(x: &[T], g: &Geometry, cols: &mut [T], ld: usize, offset: usize) {
    let p = g.p();
    for c in 0..g.cg() {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(g.oh, g.h, g.sh, g.ph, ki);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_range(g.ow, g.w, g.sw, g.pw, kj);
                let row = ((c * g.kh + ki) * g.kw + kj) * ld + offset;
                let dst = &mut cols[row..row + p];
                dst[..ylo * g.ow].fill(T::zero());
                dst[yhi * g.ow..].fill(T::zero());
                for oy in ylo..yhi {
                    let iy = oy * g.sh + ki - g.ph;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    out_row[..xlo].fill(T::zero());
                    out_row[xhi..].fill(T::zero());
                    if xlo < xhi {
                        let first = xlo * g.sw + kj - g.pw;
                        if g.sw == 1 {
                            out_row[xlo..xhi].copy_from_slice(&src[first..first + (xhi - xlo)]);
                        } else {
                            for (o, i) in out_row[xlo..xhi].iter_mut().zip((first..).step_by(g.sw)) {
                                *o = src[i];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns `[offset, offset + p)` of a `[k, ld]` column
/// gradient back onto the input planes of one sample/group.
fn col2im<T: Element>(cols: &[T], g: &Geometry, dx: &mut [T], ld: usize, offset: usize) {
    let p = g.p();
    for c in 0..g.cg() {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(g.oh, g.h, g.sh, g.ph, ki);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_range(g.ow, g.w, g.sw, g.pw, kj);
                if xlo >= xhi {
                    continue;
                }
                let row = ((c * g.kh + ki) * g.kw + kj) * ld + offset;
                let src = &cols[row..row + p];
                for oy in ylo..yhi {
                    let iy = oy * g.sh + ki - g.ph;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let s_row = &src[oy * g.ow + xlo..oy * g.ow + xhi];
                    let first = xlo * g.sw + kj - g.pw;
                    if g.sw == 1 {
                        for (d, &v) in dst[first..first + s_row.len()].iter_mut().zip(s_row) {
                            *d = *d + v;
                        }
                    } else {
                        for (&v, i) in s_row.iter().zip((first..).step_by(g.sw)) {
                            dst[i] = dst[i] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Samples lowered into one GEMM, so that small maps still give the GEMM a
/// reasonably wide right-hand side.
fn samples_per_gemm(g: &Geometry) -> usize {
    const MIN_COLUMNS: usize = 2048;
    MIN_COLUMNS.div_ceil(g.p().max(1)).clamp(1, g.n.max(1))
}

/// Fills `cols` (`[k, m·p]`) with the lowered inputs of samples
/// `n0..n0 + m` in group `grp`.
fn lower_chunk<T: Element>(x: &[T], g: &Geometry, grp: usize, n0: usize, m: usize, cols: &mut [T]) {
    let (p, cg, hw) = (g.p(), g.cg(), g.h * g.w);
    let ld = m * p;
    for j in 0..m {
        let start = ((n0 + j) * g.c + grp * cg) * hw;
        let xs = &x[start..start + cg * hw];
        if g.pointwise() {
            for c in 0..cg {
                cols[c * ld + j * p..c * ld + (j + 1) * p].copy_from_slice(&xs[c * hw..(c + 1) * hw]);
            }
        } else {
            im2col(xs, g, cols, ld, j * p);
        }
    }
}

fn forward<T: Element>(x: &[T], w: &[T], bias: Option<&[T]>, g: &Geometry) -> Vec<T> {
    let (p, k, cg, ocg) = (g.p(), g.k(), g.cg(), g.ocg());
    let mut out = vec![T::zero(); g.n * g.oc * p];
    if g.depthwise() {
        depthwise_forward(x, w, g, &mut out);
    } else {
        let nb = samples_per_gemm(g);
        let direct = nb == 1 && g.pointwise();
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); k * nb * p] };
        let mut tmp = if nb > 1 { vec![T::zero(); ocg * nb * p] } else { Vec::new() };
        for grp in 0..g.groups {
            let ws = &w[grp * ocg * k..(grp + 1) * ocg * k];
            let mut n0 = 0;
            while n0 < g.n {
                let m = nb.min(g.n - n0);
                let ld = m * p;
                let b: &[T] = if direct {
                    let start = (n0 * g.c + grp * cg) * g.h * g.w;
                    &x[start..start + cg * g.h * g.w]
                } else {
                    lower_chunk(x, g, grp, n0, m, &mut cols);
                    &cols[..k * ld]
                };
                if m == 1 {
                    let os = &mut out[(n0 * g.oc + grp * ocg) * p..(n0 * g.oc + (grp + 1) * ocg) * p];
                    T::gemm(ocg, k, p, T::one(), ws, k, 1, b, p, 1, T::zero(), os, p, 1);
                } else {
                    let t = &mut tmp[..ocg * ld];
                    T::gemm(ocg, k, ld, T::one(), ws, k, 1, b, ld, 1, T::zero(), t, ld, 1);
                    for j in 0..m {
                        for o in 0..ocg {
                            let dst = ((n0 + j) * g.oc + grp * ocg + o) * p;
                            out[dst..dst + p].copy_from_slice(&t[o * ld + j * p..o * ld + (j + 1) * p]);
                        }
                    }
                }
                n0 += m;
            }
        }
    }
    if let Some(b) = bias {
        for n in 0..g.n {
            for o in 0..g.oc {
                for v in &mut out[(n * g.oc + o) * p..(n * g.oc + o + 1) * p] {
                    *v = *v + b[o];
                }
            }
        }
    }
    out
}

/// Channels-last scratch layout shared by the depthwise kernels: a
/// zero-bordered `[H_pad, W_pad, C]` copy of one sample.
struct ChannelsLast {
    rows: usize,
    cols: usize,
}

impl ChannelsLast {
    fn new(g: &Geometry) -> Self {
        // Extra trailing rows and columns keep every tap in bounds even when
        // the stride does not tile the padded extent exactly.
        ChannelsLast {
            rows: g.h + 2 * g.ph + g.kh,
            cols: g.w + 2 * g.pw + g.kw,
        }
    }

    fn len(&self, c: usize) -> usize {
        self.rows * self.cols * c
    }

    /// Writes sample `[C, H, W]` into the interior of `buf`.
    fn fill<T: Element>(&self, g: &Geometry, sample: &[T], buf: &mut [T]) {
        let hw = g.h * g.w;
        for y in 0..g.h {
            for x in 0..g.w {
                let dst = ((y + g.ph) * self.cols + x + g.pw) * g.c;
                for (c, d) in buf[dst..dst + g.c].iter_mut().enumerate() {
                    *d = sample[c * hw + y * g.w + x];
                }
            }
        }
    }

    /// Offset of the first channel of output pixel `(oy, ox)` at tap `(ki, kj)`.
    #[inline]
    fn at(&self, g: &Geometry, oy: usize, ox: usize, ki: usize, kj: usize) -> usize {
        ((oy * g.sh + ki) * self.cols + ox * g.sw + kj) * g.c
    }
}

/// Kernel taps transposed to `[k_h·k_w, C]`.
fn taps_by_channel<T: Element>(w: &[T], g: &Geometry) -> Vec<T> {
    let kk = g.kh * g.kw;
    let mut wt = vec![T::zero(); kk * g.c];
    for c in 0..g.c {
        for t in 0..kk {
            wt[t * g.c + c] = w[c * kk + t];
        }
    }
    wt
}

fn depthwise_forward<T: Element>(x: &[T], w: &[T], g: &Geometry, out: &mut [T]) {
    let (hw, p, c) = (g.h * g.w, g.p(), g.c);
    let layout = ChannelsLast::new(g);
    let wt = taps_by_channel(w, g);
    let mut padded = vec![T::zero(); layout.len(c)];
    let mut acc = vec![T::zero(); c];
    for n in 0..g.n {
        layout.fill(g, &x[n * c * hw..(n + 1) * c * hw], &mut padded);
        let dst = &mut out[n * c * p..(n + 1) * c * p];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                acc.fill(T::zero());
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let at = layout.at(g, oy, ox, ki, kj);
                        let wk = &wt[(ki * g.kw + kj) * c..(ki * g.kw + kj + 1) * c];
                        for ((a, &wv), &v) in acc.iter_mut().zip(wk).zip(&padded[at..at + c]) {
                            *a = *a + wv * v;
                        }
                    }
                }
                let pix = oy * g.ow + ox;
                for (ch, &a) in acc.iter().enumerate() {
                    dst[ch * p + pix] = a;
                }
            }
        }
    }
}

pub(crate) struct ConvNode {
    input: Var,
    weight: Var,
    bias: Option<Var>,
    geom: Geometry,
}

impl ConvNode {
    pub fn backward<T: Element>(&self, grad: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        let g = &self.geom;
        let p = g.p();
        if let Some(b) = self.bias.filter(|&b| sink.wants(b)) {
            let mut acc = vec![0.0f64; g.oc];
            for n in 0..g.n {
                for (o, a) in acc.iter_mut().enumerate() {
                    *a += grad[(n * g.oc + o) * p..(n * g.oc + o + 1) * p]
                        .iter()
                        .map(|v| v.widen())
                        .sum::<f64>();
                }
            }
            let db: Vec<T> = acc.into_iter().map(T::lift).collect();
            sink.add(b, &db);
        }
        let want_x = sink.wants(self.input);
        let want_w = sink.wants(self.weight);
        if !want_x && !want_w {
            return Ok(());
        }
        let x = sink.value(self.input).data();
        let w = sink.value(self.weight).data();
        if g.depthwise() {
            let mut dx = if want_x { vec![T::zero(); x.len()] } else { Vec::new() };
            let mut dw = vec![0.0f64; if want_w { w.len() } else { 0 }];
            depthwise_backward(x, w, grad, g, want_x.then_some(&mut dx[..]), want_w.then_some(&mut dw[..]));
            if want_x {
                sink.add(self.input, &dx);
            }
            if want_w {
                let dw: Vec<T> = dw.into_iter().map(T::lift).collect();
                sink.add(self.weight, &dw);
            }
            return Ok(());
        }
        let (k, cg, ocg, hw) = (g.k(), g.cg(), g.ocg(), g.h * g.w);
        let nb = samples_per_gemm(g);
        let mut cols = vec![T::zero(); k * nb * p];
        let mut gy_buf = if nb > 1 { vec![T::zero(); ocg * nb * p] } else { Vec::new() };
        let mut dw = vec![T::zero(); if want_w { w.len() } else { 0 }];
        let mut dx = vec![T::zero(); if want_x { x.len() } else { 0 }];
        for grp in 0..g.groups {
            let ws = &w[grp * ocg * k..(grp + 1) * ocg * k];
            let mut n0 = 0;
            while n0 < g.n {
                let m = nb.min(g.n - n0);
                let ld = m * p;
                let gy: &[T] = if m == 1 {
                    &grad[(n0 * g.oc + grp * ocg) * p..(n0 * g.oc + (grp + 1) * ocg) * p]
                } else {
                    for j in 0..m {
                        for o in 0..ocg {
                            let src = ((n0 + j) * g.oc + grp * ocg + o) * p;
                            gy_buf[o * ld + j * p..o * ld + (j + 1) * p].copy_from_slice(&grad[src..src + p]);
                        }
                    }
                    &gy_buf[..ocg * ld]
                };
                if want_w {
                    lower_chunk(x, g, grp, n0, m, &mut cols);
                    // dW[o, k] += Σ_col dY[o, col] · cols[k, col]
                    let dws = &mut dw[grp * ocg * k..(grp + 1) * ocg * k];
                    T::gemm(ocg, ld, k, T::one(), gy, ld, 1, &cols, 1, ld, T::one(), dws, k, 1);
                }
                if want_x {
                    let dcols = &mut cols[..k * ld];
                    T::gemm(k, ocg, ld, T::one(), ws, 1, k, gy, ld, 1, T::zero(), dcols, ld, 1);
                    for j in 0..m {
                        let start = ((n0 + j) * g.c + grp * cg) * hw;
                        let dxs = &mut dx[start..start + cg * hw];
                        if g.pointwise() {
                            for c in 0..cg {
                                let src = &dcols[c * ld + j * p..c * ld + (j + 1) * p];
                                for (d, &v) in dxs[c * hw..(c + 1) * hw].iter_mut().zip(src) {
                                    *d = *d + v;
                                }
                            }
                        } else {
                            col2im(dcols, g, dxs, ld, j * p);
                        }
                    }
                }
                n0 += m;
            }
        }
        if want_x {
            sink.add(self.input, &dx);
        }
        if want_w {
            sink.add(self.weight, &dw);
        }
        Ok(())
    }
}

fn depthwise_backward<T: Element>(
    x: &[T],
    w: &[T],
    grad: &[T],
    g: &Geometry,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [f64]>,
) {
    let (hw, p, c, kk) = (g.h * g.w, g.p(), g.c, g.kh * g.kw);
    let layout = ChannelsLast::new(g);
    let wt = taps_by_channel(w, g);
    let mut padded = vec![T::zero(); if dw.is_some() { layout.len(c) } else { 0 }];
    let mut dpadded = vec![T::zero(); if dx.is_some() { layout.len(c) } else { 0 }];
    let mut taps = vec![T::zero(); kk * c];
    let mut gy = vec![T::zero(); c];
    for n in 0..g.n {
        let gs = &grad[n * c * p..(n + 1) * c * p];
        if dw.is_some() {
            layout.fill(g, &x[n * c * hw..(n + 1) * c * hw], &mut padded);
            taps.fill(T::zero());
        }
        if dx.is_some() {
            dpadded.fill(T::zero());
        }
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let pix = oy * g.ow + ox;
                for (ch, v) in gy.iter_mut().enumerate() {
                    *v = gs[ch * p + pix];
                }
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let t = ki * g.kw + kj;
                        let at = layout.at(g, oy, ox, ki, kj);
                        if dx.is_some() {
                            let wk = &wt[t * c..(t + 1) * c];
                            for ((d, &wv), &gv) in dpadded[at..at + c].iter_mut().zip(wk).zip(&gy) {
                                *d = *d + wv * gv;
                            }
                        }
                        if dw.is_some() {
                            for ((a, &xv), &gv) in taps[t * c..(t + 1) * c].iter_mut().zip(&padded[at..at + c]).zip(&gy) {
                                *a = *a + xv * gv;
                            }
                        }
                    }
                }
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            for ch in 0..c {
                for t in 0..kk {
                    dw[ch * kk + t] += taps[t * c + ch].widen();
                }
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let plane = &mut dx[n * c * hw..(n + 1) * c * hw];
            for y in 0..g.h {
                for xx in 0..g.w {
                    let src = ((y + g.ph) * layout.cols + xx + g.pw) * c;
                    for (ch, &v) in dpadded[src..src + c].iter().enumerate() {
                        plane[ch * hw + y * g.w + xx] = v;
                    }
                }
            }
        }
    }
}

impl<T: Element> Tape<T> {
    /// Cross-correlation (no kernel flip) with zero padding.
    ///
    /// `weight` is `[C_out, C_in / groups, k_h, k_w]`, `bias` is `[C_out]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, opts: Conv2dOptions) -> Result<Var> {
        let geom = geometry(
            self.shape(input),
            self.shape(weight),
            bias.map(|b| self.shape(b)),
            opts,
        )?;
        let out = forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(vec![geom.n, geom.oc, geom.oh, geom.ow], out)?;
        self.count_macs(geom.macs());
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d(ConvNode {
                input,
                weight,
                bias,
                geom,
            }),
            &inputs,
        ))
    }
}
