//! Direct 2-D convolution kernels over `[batch, channels, height, width]`
//! buffers. Every forward kernel returns the number of multiply-accumulates
//! it performed; taps that land in the zero padding are counted, so a layer
//! with output size `D x D` costs exactly `D_K^2` MACs per output per input
//! channel it reads. Padding is "same": `(k - 1) / 2` before, the rest
//! after, so the output side is `ceil(input / stride)`.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geom {
    pub batch: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geom {
    pub fn new(
        batch: usize,
        in_c: usize,
        out_c: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
    ) -> Option<Self> {
        if stride == 0 || k == 0 || h == 0 || w == 0 {
            return None;
        }
        let pad = (k - 1) / 2;
        let oh = (h - 1) / stride + 1;
        let ow = (w - 1) / stride + 1;
        Some(Self {
            batch,
            in_c,
            out_c,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    #[inline]
    fn src(&self, o: usize, kk: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - self.pad as isize;
        if pos >= 0 && (pos as usize) < limit {
            Some(pos as usize)
        } else {
            None
        }
    }
}

/// Standard convolution; `w` is `[out_c, in_c, k, k]`.
pub(crate) fn standard_forward(x: &[f64], w: &[f64], g: &Geom, y: &mut [f64]) -> u64 {
    let mut macs = 0u64;
    let (hw, ohw, kk) = (g.h * g.w, g.oh * g.ow, g.k * g.k);
    for b in 0..g.batch {
        for n in 0..g.out_c {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0.0;
                    for m in 0..g.in_c {
                        let xb = (b * g.in_c + m) * hw;
                        let wb = (n * g.in_c + m) * kk;
                        for ky in 0..g.k {
                            let iy = g.src(oy, ky, g.h);
                            for kx in 0..g.k {
                                macs += 1;
                                if let (Some(iy), Some(ix)) = (iy, g.src(ox, kx, g.w)) {
                                    acc += w[wb + ky * g.k + kx] * x[xb + iy * g.w + ix];
                                }
                            }
                        }
                    }
                    y[(b * g.out_c + n) * ohw + oy * g.ow + ox] = acc;
                }
            }
        }
    }
    macs
}

pub(crate) fn standard_backward(
    x: &[f64],
    w: &[f64],
    g: &Geom,
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let (hw, ohw, kk) = (g.h * g.w, g.oh * g.ow, g.k * g.k);
    let mut dx = dx;
    let mut dw = dw;
    for b in 0..g.batch {
        for n in 0..g.out_c {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let gy = dy[(b * g.out_c + n) * ohw + oy * g.ow + ox];
                    if gy == 0.0 {
                        continue;
                    }
                    for m in 0..g.in_c {
                        let xb = (b * g.in_c + m) * hw;
                        let wb = (n * g.in_c + m) * kk;
                        for ky in 0..g.k {
                            let Some(iy) = g.src(oy, ky, g.h) else { continue };
                            for kx in 0..g.k {
                                let Some(ix) = g.src(ox, kx, g.w) else { continue };
                                let xi = xb + iy * g.w + ix;
                                let wi = wb + ky * g.k + kx;
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[xi] += gy * w[wi];
                                }
                                if let Some(dw) = dw.as_deref_mut() {
                                    dw[wi] += gy * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise convolution; `w` is `[c, k, k]`, `in_c == out_c`.
pub(crate) fn depthwise_forward(x: &[f64], w: &[f64], g: &Geom, y: &mut [f64]) -> u64 {
    let mut macs = 0u64;
    let (hw, ohw, kk) = (g.h * g.w, g.oh * g.ow, g.k * g.k);
    for b in 0..g.batch {
        for c in 0..g.in_c {
            let xb = (b * g.in_c + c) * hw;
            let wb = c * kk;
            let yb = (b * g.in_c + c) * ohw;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0.0;
                    for ky in 0..g.k {
                        let iy = g.src(oy, ky, g.h);
                        for kx in 0..g.k {
                            macs += 1;
                            if let (Some(iy), Some(ix)) = (iy, g.src(ox, kx, g.w)) {
                                acc += w[wb + ky * g.k + kx] * x[xb + iy * g.w + ix];
                            }
                        }
                    }
                    y[yb + oy * g.ow + ox] = acc;
                }
            }
        }
    }
    macs
}

pub(crate) fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    g: &Geom,
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let (hw, ohw, kk) = (g.h * g.w, g.oh * g.ow, g.k * g.k);
    let mut dx = dx;
    let mut dw = dw;
    for b in 0..g.batch {
        for c in 0..g.in_c {
            let xb = (b * g.in_c + c) * hw;
            let wb = c * kk;
            let yb = (b * g.in_c + c) * ohw;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let gy = dy[yb + oy * g.ow + ox];
                    if gy == 0.0 {
                        continue;
                    }
                    for ky in 0..g.k {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        for kx in 0..g.k {
                            let Some(ix) = g.src(ox, kx, g.w) else { continue };
                            let xi = xb + iy * g.w + ix;
                            let wi = wb + ky * g.k + kx;
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[xi] += gy * w[wi];
                            }
                            if let Some(dw) = dw.as_deref_mut() {
                                dw[wi] += gy * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 1x1 convolution; `w` is `[out_c, in_c]`, stride 1.
pub(crate) fn pointwise_forward(x: &[f64], w: &[f64], g: &Geom, y: &mut [f64]) -> u64 {
    let mut macs = 0u64;
    let hw = g.h * g.w;
    for b in 0..g.batch {
        for n in 0..g.out_c {
            let yb = (b * g.out_c + n) * hw;
            let out = &mut y[yb..yb + hw];
            out.iter_mut().for_each(|v| *v = 0.0);
            for m in 0..g.in_c {
                let wv = w[n * g.in_c + m];
                let xb = (b * g.in_c + m) * hw;
                for (o, &xv) in out.iter_mut().zip(&x[xb..xb + hw]) {
                    macs += 1;
                    *o += wv * xv;
                }
            }
        }
    }
    macs
}

pub(crate) fn pointwise_backward(
    x: &[f64],
    w: &[f64],
    g: &Geom,
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let hw = g.h * g.w;
    let mut dx = dx;
    let mut dw = dw;
    for b in 0..g.batch {
        for n in 0..g.out_c {
            let gy = &dy[(b * g.out_c + n) * hw..(b * g.out_c + n + 1) * hw];
            for m in 0..g.in_c {
                let xb = (b * g.in_c + m) * hw;
                let xs = &x[xb..xb + hw];
                let wi = n * g.in_c + m;
                if let Some(dw) = dw.as_deref_mut() {
                    dw[wi] += gy.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                }
                if let Some(dx) = dx.as_deref_mut() {
                    let wv = w[wi];
                    for (d, &gv) in dx[xb..xb + hw].iter_mut().zip(gy) {
                        *d += wv * gv;
                    }
                }
            }
        }
    }
}
