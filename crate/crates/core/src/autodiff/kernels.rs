//! Numeric forward kernels behind each primitive.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::{numel, Tensor};

pub(crate) type KernelResult = Result<Tensor, String>;

pub(crate) fn same_shape(name: &str, a: &Tensor, b: &Tensor) -> Result<(), String> {
    if a.shape() != b.shape() {
        return Err(format!(
            "{name}: operand shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

pub(crate) fn zip(name: &str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> KernelResult {
    same_shape(name, a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Ok(Tensor::from_vec(a.shape(), data))
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> KernelResult {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(format!(
            "matmul: expected 2-d operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(format!(
            "matmul: inner dimensions disagree ({:?}{} x {:?}{})",
            a.shape(),
            if ta { "ᵀ" } else { "" },
            b.shape(),
            if tb { "ᵀ" } else { "" }
        ));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = if ta { ad[p * ac + i] } else { ad[i * ac + p] };
            if av == 0.0 {
                continue;
            }
            if tb {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * bd[j * bc + p];
                }
            } else {
                let brow = &bd[p * bc..(p + 1) * bc];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[m, n], out))
}

pub(crate) fn log_softmax(a: &Tensor) -> KernelResult {
    if a.shape().len() != 2 {
        return Err(format!(
            "log_softmax: expected [batch, classes], got {:?}",
            a.shape()
        ));
    }
    let cols = a.shape()[1];
    let mut out = Vec::with_capacity(a.len());
    for row in a.data().chunks(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|&x| math::exp(x - m)).sum();
        let lse = m + math::ln(s);
        out.extend(row.iter().map(|&x| x - lse));
    }
    Ok(Tensor::from_vec(a.shape(), out))
}

/// `out[o, m, i] = input[m]` for an output of `outer * mid * inner` elements.
pub(crate) fn expand(a: &Tensor, outer: usize, inner: usize, shape: &[usize]) -> KernelResult {
    let mid = a.len();
    if outer * mid * inner != numel(shape) {
        return Err(format!(
            "expand: {:?} cannot broadcast to {:?} with outer={outer} inner={inner}",
            a.shape(),
            shape
        ));
    }
    let mut out = Vec::with_capacity(numel(shape));
    for _ in 0..outer {
        for &v in a.data() {
            out.extend(core::iter::repeat_n(v, inner));
        }
    }
    Ok(Tensor::from_vec(shape, out))
}

/// `out[m] = Σ_{o,i} input[o, m, i]`.
pub(crate) fn reduce(a: &Tensor, outer: usize, inner: usize) -> KernelResult {
    if outer == 0 || inner == 0 || !a.len().is_multiple_of(outer * inner) {
        return Err(format!(
            "reduce: {:?} is not divisible into outer={outer} inner={inner}",
            a.shape()
        ));
    }
    let mid = a.len() / (outer * inner);
    let mut out = vec![0.0; mid];
    for o in 0..outer {
        for (m, slot) in out.iter_mut().enumerate() {
            let start = (o * mid + m) * inner;
            *slot += a.data()[start..start + inner].iter().sum::<f64>();
        }
    }
    Ok(Tensor::from_vec(&[mid], out))
}

pub(crate) fn gather(a: &Tensor, index: &[usize], shape: &[usize]) -> KernelResult {
    if index.len() != numel(shape) {
        return Err(format!(
            "gather: {} indices for output shape {:?}",
            index.len(),
            shape
        ));
    }
    let mut out = Vec::with_capacity(index.len());
    for &i in index {
        match a.data().get(i) {
            Some(&v) => out.push(v),
            None => {
                return Err(format!(
                    "gather: index {i} out of range for {:?}",
                    a.shape()
                ))
            }
        }
    }
    Ok(Tensor::from_vec(shape, out))
}

pub(crate) fn scatter(a: &Tensor, index: &[usize], shape: &[usize]) -> KernelResult {
    if index.len() != a.len() {
        return Err(format!(
            "scatter: {} indices for input shape {:?}",
            index.len(),
            a.shape()
        ));
    }
    let mut out = vec![0.0; numel(shape)];
    for (&i, &v) in index.iter().zip(a.data()) {
        match out.get_mut(i) {
            Some(slot) => *slot += v,
            None => return Err(format!("scatter: index {i} out of range for {shape:?}")),
        }
    }
    Ok(Tensor::from_vec(shape, out))
}

/// Which slot of the trilinear form `Σ g[b,o,y,x] w[o,c,i,j] x[b,c,y+i-p,x+j-p]`
/// a convolution node computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// `conv(x, w)`, the ordinary same-padded stride-1 convolution.
    Forward,
    /// Adjoint with respect to the image: `(g, w) -> dx`.
    InputGrad,
    /// Adjoint with respect to the kernel: `(x, g) -> dw`.
    WeightGrad,
}

struct ConvDims {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
}

pub(crate) fn conv(mode: ConvMode, a: &Tensor, b: &Tensor, k: usize) -> KernelResult {
    let bad = || {
        format!(
            "conv({mode:?}): incompatible shapes {:?} and {:?} for kernel {k}",
            a.shape(),
            b.shape()
        )
    };
    if a.shape().len() != 4 || b.shape().len() != 4 || k.is_multiple_of(2) {
        return Err(bad());
    }
    let (sa, sb) = (a.shape(), b.shape());
    let dims = match mode {
        // a = x [B,C,H,W], b = w [O,C,K,K]
        ConvMode::Forward => {
            if sa[1] != sb[1] || sb[2] != k || sb[3] != k {
                return Err(bad());
            }
            ConvDims {
                batch: sa[0],
                cin: sa[1],
                cout: sb[0],
                h: sa[2],
                w: sa[3],
                k,
            }
        }
        // a = g [B,O,H,W], b = w [O,C,K,K]
        ConvMode::InputGrad => {
            if sa[1] != sb[0] || sb[2] != k || sb[3] != k {
                return Err(bad());
            }
            ConvDims {
                batch: sa[0],
                cin: sb[1],
                cout: sa[1],
                h: sa[2],
                w: sa[3],
                k,
            }
        }
        // a = x [B,C,H,W], b = g [B,O,H,W]
        ConvMode::WeightGrad => {
            if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
                return Err(bad());
            }
            ConvDims {
                batch: sa[0],
                cin: sa[1],
                cout: sb[1],
                h: sa[2],
                w: sa[3],
                k,
            }
        }
    };
    let ConvDims {
        batch,
        cin,
        cout,
        h,
        w,
        k,
    } = dims;
    let p = k / 2;
    let plane = h * w;
    let mut out = match mode {
        ConvMode::Forward => vec![0.0; batch * cout * plane],
        ConvMode::InputGrad => vec![0.0; batch * cin * plane],
        ConvMode::WeightGrad => vec![0.0; cout * cin * k * k],
    };
    let (ad, bd) = (a.data(), b.data());
    for bi in 0..batch {
        for o in 0..cout {
            for c in 0..cin {
                for i in 0..k {
                    // output rows y with 0 <= y + i - p < h
                    let y0 = p.saturating_sub(i);
                    let y1 = (h + p).saturating_sub(i).min(h);
                    for j in 0..k {
                        let x0 = p.saturating_sub(j);
                        let x1 = (w + p).saturating_sub(j).min(w);
                        if x0 >= x1 || y0 >= y1 {
                            continue;
                        }
                        let widx = ((o * cin + c) * k + i) * k + j;
                        let img = (bi * cin + c) * plane;
                        let grd = (bi * cout + o) * plane;
                        match mode {
                            ConvMode::Forward => {
                                let wv = bd[widx];
                                for y in y0..y1 {
                                    let src = img + (y + i - p) * w;
                                    let dst = grd + y * w;
                                    for x in x0..x1 {
                                        out[dst + x] += wv * ad[src + x + j - p];
                                    }
                                }
                            }
                            ConvMode::InputGrad => {
                                let wv = bd[widx];
                                for y in y0..y1 {
                                    let dst = img + (y + i - p) * w;
                                    let src = grd + y * w;
                                    for x in x0..x1 {
                                        out[dst + x + j - p] += wv * ad[src + x];
                                    }
                                }
                            }
                            ConvMode::WeightGrad => {
                                let mut acc = 0.0;
                                for y in y0..y1 {
                                    let xs = img + (y + i - p) * w;
                                    let gs = grd + y * w;
                                    for x in x0..x1 {
                                        acc += bd[gs + x] * ad[xs + x + j - p];
                                    }
                                }
                                out[widx] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    let shape = match mode {
        ConvMode::Forward => [batch, cout, h, w],
        ConvMode::InputGrad => [batch, cin, h, w],
        ConvMode::WeightGrad => [cout, cin, k, k],
    };
    Ok(Tensor::from_vec(&shape, out))
}

/// Flat indices of the maxima of each 2×2 window (ceil mode, first maximum wins).
pub(crate) fn max_pool_indices(a: &Tensor) -> Result<(Vec<usize>, [usize; 4]), String> {
    let s = a.shape();
    if s.len() != 4 {
        return Err(format!("max_pool2d: expected [B,C,H,W], got {s:?}"));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut index = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let (yy, xx) = (2 * y + dy, 2 * x + dx);
                    if yy < h && xx < w {
                        let idx = base + yy * w + xx;
                        if a.data()[idx] > a.data()[best] {
                            best = idx;
                        }
                    }
                }
                index.push(best);
            }
        }
    }
    Ok((index, [b, c, oh, ow]))
}
