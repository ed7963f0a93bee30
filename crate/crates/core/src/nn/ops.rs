//! Forward and backward kernels on plain tensors. The tape wires these
//! together; everything here is stateless and allocation-per-call.

use super::tensor::{shape_err, NnError, Tensor};

pub(crate) fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize), NnError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, format!("expected rank 2, got {s:?}"))),
    }
}

pub(crate) fn dims4(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize), NnError> {
    match t.shape() {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        s => Err(shape_err(op, format!("expected rank 4, got {s:?}"))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<(), NnError> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    let (m, ka) = dims2(a, "matmul")?;
    let (kb, n) = dims2(b, "matmul")?;
    if ka != kb {
        return Err(shape_err("matmul", format!("inner dims {ka} vs {kb}")));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let arow = &ad[i * ka..(i + 1) * ka];
        let orow = &mut out[i * n..(i + 1) * n];
        for (k, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &bd[k * n..(k + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose2(x: &Tensor) -> Result<Tensor, NnError> {
    let (r, c) = dims2(x, "transpose")?;
    let xd = x.data();
    let mut out = vec![0.0f64; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = xd[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn scale(x: &Tensor, c: f64) -> Tensor {
    let data = x.data().iter().map(|v| v * c).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same element count")
}

/// Adds a length-`c` bias to every row of an `[r, c]` matrix.
pub fn add_row(x: &Tensor, bias: &Tensor) -> Result<Tensor, NnError> {
    let (r, c) = dims2(x, "add_row")?;
    if bias.shape() != [c] {
        return Err(shape_err("add_row", format!("bias {:?} for width {c}", bias.shape())));
    }
    let bd = bias.data();
    let mut out = x.data().to_vec();
    for i in 0..r {
        for (o, &b) in out[i * c..(i + 1) * c].iter_mut().zip(bd) {
            *o += b;
        }
    }
    Tensor::new(vec![r, c], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same element count")
}

pub fn tanh(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.tanh()).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same element count")
}

pub(crate) fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor, NnError> {
    if axis >= x.rank() {
        return Err(shape_err("softmax", format!("axis {axis} for rank {}", x.rank())));
    }
    let (outer, len, inner) = lane_dims(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0.0f64; xd.len()];
    for o in 0..outer {
        for ii in 0..inner {
            let at = |j: usize| (o * len + j) * inner + ii;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..len {
                mx = mx.max(xd[at(j)]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (xd[at(j)] - mx).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] /= sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// dL/dx from the softmax output `y` and upstream gradient `dy`:
/// `dx = y * (dy - sum(dy * y))` per lane.
pub fn softmax_backward(y: &Tensor, dy: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = lane_dims(y.shape(), axis);
    let yd = y.data();
    let dyd = dy.data();
    let mut out = vec![0.0f64; yd.len()];
    for o in 0..outer {
        for ii in 0..inner {
            let at = |j: usize| (o * len + j) * inner + ii;
            let mut dot = 0.0;
            for j in 0..len {
                dot += dyd[at(j)] * yd[at(j)];
            }
            for j in 0..len {
                out[at(j)] = yd[at(j)] * (dyd[at(j)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out).expect("same element count")
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct LayerNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Normalizes each row of `[r, c]` to zero mean and unit variance, then
/// applies an elementwise affine `gain * xhat + bias`.
pub fn layer_norm_rows(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
) -> Result<(Tensor, LayerNormCache), NnError> {
    let (r, c) = dims2(x, "layer_norm")?;
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(shape_err(
            "layer_norm",
            format!("gain {:?} bias {:?} for width {c}", gain.shape(), bias.shape()),
        ));
    }
    let xd = x.data();
    let gd = gain.data();
    let bd = bias.data();
    let mut out = vec![0.0f64; xd.len()];
    let mut xhat = vec![0.0f64; xd.len()];
    let mut inv_std = vec![0.0f64; r];
    for i in 0..r {
        let row = &xd[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[i] = istd;
        for j in 0..c {
            let h = (row[j] - mean) * istd;
            xhat[i * c + j] = h;
            out[i * c + j] = gd[j] * h + bd[j];
        }
    }
    let xhat = Tensor::new(vec![r, c], xhat)?;
    Ok((Tensor::new(vec![r, c], out)?, LayerNormCache { xhat, inv_std }))
}

/// Gradients for [`layer_norm_rows`]: returns `(dx, dgain, dbias)`.
pub fn layer_norm_rows_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (r, c) = match cache.xhat.shape() {
        [r, c] => (*r, *c),
        _ => unreachable!("cache built from rank 2"),
    };
    let hd = cache.xhat.data();
    let gd = gain.data();
    let dyd = dy.data();
    let mut dx = vec![0.0f64; r * c];
    let mut dgain = vec![0.0f64; c];
    let mut dbias = vec![0.0f64; c];
    for i in 0..r {
        let h = &hd[i * c..(i + 1) * c];
        let d = &dyd[i * c..(i + 1) * c];
        let istd = cache.inv_std[i];
        let mut sum_dh = 0.0;
        let mut sum_dh_h = 0.0;
        for j in 0..c {
            let dh = d[j] * gd[j];
            sum_dh += dh;
            sum_dh_h += dh * h[j];
            dgain[j] += d[j] * h[j];
            dbias[j] += d[j];
        }
        let mean_dh = sum_dh / c as f64;
        let mean_dh_h = sum_dh_h / c as f64;
        for j in 0..c {
            let dh = d[j] * gd[j];
            dx[i * c + j] = istd * (dh - mean_dh - h[j] * mean_dh_h);
        }
    }
    (
        Tensor::new(vec![r, c], dx).expect("same element count"),
        Tensor::new(vec![c], dgain).expect("same element count"),
        Tensor::new(vec![c], dbias).expect("same element count"),
    )
}

fn div_ceil_i64(a: i64, b: i64) -> i64 {
    (a + b - 1).div_euclid(b)
}

/// 2D convolution, NCHW layout, square behavior per axis with shared
/// `stride` and zero `pad` on all sides.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor, NnError> {
    let (bs, ci, h, wd) = dims4(x, "conv2d")?;
    let (co, ciw, kh, kw) = dims4(w, "conv2d")?;
    if ci != ciw {
        return Err(shape_err("conv2d", format!("input channels {ci} vs kernel {ciw}")));
    }
    if b.shape() != [co] {
        return Err(shape_err("conv2d", format!("bias {:?} for {co} filters", b.shape())));
    }
    if stride == 0 {
        return Err(shape_err("conv2d", "stride must be positive".to_string()));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(shape_err(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {h}x{wd} pad {pad}"),
        ));
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let xd = x.data();
    let wdta = w.data();
    let bd = b.data();
    let mut out = vec![0.0f64; bs * co * ho * wo];
    let (stride_i, pad_i) = (stride as i64, pad as i64);
    for bi in 0..bs {
        for c in 0..co {
            let oplane = &mut out[(bi * co + c) * ho * wo..(bi * co + c + 1) * ho * wo];
            oplane.fill(bd[c]);
            for cin in 0..ci {
                let xplane = &xd[(bi * ci + cin) * h * wd..(bi * ci + cin + 1) * h * wd];
                for dkh in 0..kh {
                    for dkw in 0..kw {
                        let wv = wdta[((c * ci + cin) * kh + dkh) * kw + dkw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (dkh_i, dkw_i) = (dkh as i64, dkw as i64);
                        let wo_lo = div_ceil_i64(pad_i - dkw_i, stride_i).max(0) as usize;
                        let wo_hi =
                            (div_ceil_i64(wd as i64 + pad_i - dkw_i, stride_i).max(0) as usize)
                                .min(wo);
                        for oh in 0..ho {
                            let ih = oh as i64 * stride_i + dkh_i - pad_i;
                            if ih < 0 || ih >= h as i64 {
                                continue;
                            }
                            let xrow = &xplane[ih as usize * wd..(ih as usize + 1) * wd];
                            let orow = &mut oplane[oh * wo..(oh + 1) * wo];
                            for ow in wo_lo..wo_hi {
                                let iw = (ow as i64 * stride_i + dkw_i - pad_i) as usize;
                                orow[ow] += wv * xrow[iw];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![bs, co, ho, wo], out)
}

/// Gradients for [`conv2d`]: `(dx, dw, db)`.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (bs, ci, h, wd) = dims4(x, "conv2d_backward").expect("checked in forward");
    let (co, _, kh, kw) = dims4(w, "conv2d_backward").expect("checked in forward");
    let (_, _, ho, wo) = dims4(dout, "conv2d_backward").expect("produced by forward");
    let xd = x.data();
    let wdta = w.data();
    let dod = dout.data();
    let mut dx = vec![0.0f64; xd.len()];
    let mut dw = vec![0.0f64; wdta.len()];
    let mut db = vec![0.0f64; co];
    let (stride_i, pad_i) = (stride as i64, pad as i64);
    for bi in 0..bs {
        for c in 0..co {
            let doplane = &dod[(bi * co + c) * ho * wo..(bi * co + c + 1) * ho * wo];
            db[c] += doplane.iter().sum::<f64>();
            for cin in 0..ci {
                let xplane = &xd[(bi * ci + cin) * h * wd..(bi * ci + cin + 1) * h * wd];
                let dxplane_base = (bi * ci + cin) * h * wd;
                for dkh in 0..kh {
                    for dkw in 0..kw {
                        let widx = ((c * ci + cin) * kh + dkh) * kw + dkw;
                        let wv = wdta[widx];
                        let (dkh_i, dkw_i) = (dkh as i64, dkw as i64);
                        let wo_lo = div_ceil_i64(pad_i - dkw_i, stride_i).max(0) as usize;
                        let wo_hi =
                            (div_ceil_i64(wd as i64 + pad_i - dkw_i, stride_i).max(0) as usize)
                                .min(wo);
                        let mut wacc = 0.0;
                        for oh in 0..ho {
                            let ih = oh as i64 * stride_i + dkh_i - pad_i;
                            if ih < 0 || ih >= h as i64 {
                                continue;
                            }
                            let xrow = &xplane[ih as usize * wd..(ih as usize + 1) * wd];
                            let dorow = &doplane[oh * wo..(oh + 1) * wo];
                            let dxrow_base = dxplane_base + ih as usize * wd;
                            for ow in wo_lo..wo_hi {
                                let iw = (ow as i64 * stride_i + dkw_i - pad_i) as usize;
                                let g = dorow[ow];
                                wacc += g * xrow[iw];
                                dx[dxrow_base + iw] += wv * g;
                            }
                        }
                        dw[widx] += wacc;
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("same element count"),
        Tensor::new(w.shape().to_vec(), dw).expect("same element count"),
        Tensor::new(vec![co], db).expect("same element count"),
    )
}

/// 2x2 max pooling with stride 2. Requires even spatial dims. Returns the
/// flat input index of each winner; ties go to the first element scanned
/// (row-major), keeping backward routing deterministic.
pub fn maxpool2(x: &Tensor) -> Result<(Tensor, Vec<u32>), NnError> {
    let (bs, c, h, w) = dims4(x, "maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err("maxpool2", format!("odd spatial dims {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0f64; bs * c * ho * wo];
    let mut argmax = vec![0u32; bs * c * ho * wo];
    for bc in 0..bs * c {
        let plane = &xd[bc * h * w..(bc + 1) * h * w];
        let obase = bc * ho * wo;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best_v = f64::NEG_INFINITY;
                let mut best_i = 0usize;
                for dh in 0..2 {
                    for dw in 0..2 {
                        let idx = (oh * 2 + dh) * w + ow * 2 + dw;
                        if plane[idx] > best_v {
                            best_v = plane[idx];
                            best_i = idx;
                        }
                    }
                }
                out[obase + oh * wo + ow] = best_v;
                argmax[obase + oh * wo + ow] = (bc * h * w + best_i) as u32;
            }
        }
    }
    Ok((Tensor::new(vec![bs, c, ho, wo], out)?, argmax))
}

pub fn maxpool2_backward(x_shape: &[usize], argmax: &[u32], dout: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x_shape);
    let dxd = dx.data_mut();
    for (&src, &g) in argmax.iter().zip(dout.data()) {
        dxd[src as usize] += g;
    }
    dx
}

/// Mean over the spatial dims: `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor, NnError> {
    let (bs, c, h, w) = dims4(x, "global_avg_pool")?;
    if h * w == 0 {
        return Err(shape_err("global_avg_pool", "empty spatial extent".to_string()));
    }
    let xd = x.data();
    let inv = 1.0 / (h * w) as f64;
    let mut out = vec![0.0f64; bs * c];
    for bc in 0..bs * c {
        out[bc] = xd[bc * h * w..(bc + 1) * h * w].iter().sum::<f64>() * inv;
    }
    Tensor::new(vec![bs, c], out)
}

pub fn global_avg_pool_backward(x_shape: &[usize], dout: &Tensor) -> Tensor {
    let (h, w) = (x_shape[2], x_shape[3]);
    let inv = 1.0 / (h * w) as f64;
    let mut dx = Tensor::zeros(x_shape);
    let dxd = dx.data_mut();
    for (bc, &g) in dout.data().iter().enumerate() {
        let v = g * inv;
        for d in &mut dxd[bc * h * w..(bc + 1) * h * w] {
            *d += v;
        }
    }
    dx
}

/// Concatenates matrices with equal row counts along columns.
pub fn concat_cols(xs: &[&Tensor]) -> Result<Tensor, NnError> {
    if xs.is_empty() {
        return Err(shape_err("concat_cols", "no inputs".to_string()));
    }
    let (r, _) = dims2(xs[0], "concat_cols")?;
    let mut widths = Vec::with_capacity(xs.len());
    for x in xs {
        let (ri, ci) = dims2(x, "concat_cols")?;
        if ri != r {
            return Err(shape_err("concat_cols", format!("row counts {r} vs {ri}")));
        }
        widths.push(ci);
    }
    let total: usize = widths.iter().sum();
    let mut out = vec![0.0f64; r * total];
    let mut offset = 0;
    for (x, &cw) in xs.iter().zip(&widths) {
        let xd = x.data();
        for i in 0..r {
            out[i * total + offset..i * total + offset + cw]
                .copy_from_slice(&xd[i * cw..(i + 1) * cw]);
        }
        offset += cw;
    }
    Tensor::new(vec![r, total], out)
}

/// Columns `[start, start + len)` of an `[r, c]` matrix.
pub fn slice_cols(x: &Tensor, start: usize, len: usize) -> Result<Tensor, NnError> {
    let (r, c) = dims2(x, "slice_cols")?;
    if start + len > c {
        return Err(shape_err("slice_cols", format!("[{start}, {}) of width {c}", start + len)));
    }
    let xd = x.data();
    let mut out = vec![0.0f64; r * len];
    for i in 0..r {
        out[i * len..(i + 1) * len].copy_from_slice(&xd[i * c + start..i * c + start + len]);
    }
    Tensor::new(vec![r, len], out)
}

pub fn sum_all(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data().iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(r: usize, c: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![r, c], v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_case() {
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 1, &[1.0, 1.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_identity_and_errors() {
        let a = t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let id = t2(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&a, &id).unwrap().data(), a.data());
        assert!(matmul(&a, &t2(2, 2, &[0.0; 4])).is_err());
    }

    #[test]
    fn transpose_round_trip() {
        let a = t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let at = transpose2(&a).unwrap();
        assert_eq!(at.shape(), &[3, 2]);
        assert_eq!(at.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(transpose2(&at).unwrap(), a);
    }

    #[test]
    fn elementwise_and_broadcast() {
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 2, &[10.0, 20.0, 30.0, 40.0]);
        assert_eq!(add(&a, &b).unwrap().data(), &[11.0, 22.0, 33.0, 44.0]);
        assert_eq!(mul(&a, &b).unwrap().data(), &[10.0, 40.0, 90.0, 160.0]);
        assert_eq!(scale(&a, -2.0).data(), &[-2.0, -4.0, -6.0, -8.0]);
        let bias = Tensor::new(vec![2], vec![100.0, 200.0]).unwrap();
        assert_eq!(add_row(&a, &bias).unwrap().data(), &[101.0, 202.0, 103.0, 204.0]);
        assert!(add_row(&a, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn relu_and_tanh_values() {
        let x = t2(1, 4, &[-2.0, 0.0, 0.5, 3.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 0.5, 3.0]);
        let y = tanh(&x);
        assert!((y.data()[3] - 3.0f64.tanh()).abs() < 1e-15);
        assert_eq!(y.data()[1], 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t2(2, 3, &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
        let y = softmax(&x, 1).unwrap();
        for i in 0..2 {
            let s: f64 = y.data()[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // Uniform input gives the uniform distribution.
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-12);
        // Monotone in the input.
        assert!(y.data()[3] < y.data()[4] && y.data()[4] < y.data()[5]);
    }

    #[test]
    fn softmax_handles_large_inputs() {
        let x = t2(1, 3, &[1e300, 1e300, -1e300]);
        let y = softmax(&x, 1).unwrap();
        assert!(y.is_finite());
        assert!((y.data()[0] - 0.5).abs() < 1e-12);
        assert!(y.data()[2].abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = t2(1, 4, &[0.3, -1.2, 2.0, 0.7]);
        let shifted = add(&x, &Tensor::full(&[1, 4], 5.0)).unwrap();
        let a = softmax(&x, 1).unwrap();
        let b = softmax(&shifted, 1).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn softmax_axis_zero() {
        let x = t2(2, 2, &[0.0, 10.0, 0.0, -10.0]);
        let y = softmax(&x, 0).unwrap();
        // Columns sum to one.
        assert!((y.data()[0] + y.data()[2] - 1.0).abs() < 1e-12);
        assert!((y.data()[1] + y.data()[3] - 1.0).abs() < 1e-12);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_bias() {
        let x = t2(1, 4, &[3.0, 3.0, 3.0, 3.0]);
        let gain = Tensor::full(&[4], 2.0);
        let bias = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = layer_norm_rows(&x, &gain, &bias).unwrap();
        // Constant rows normalize to ~0, leaving just the bias.
        assert!(y.max_abs_diff(&t2(1, 4, &[1.0, 2.0, 3.0, 4.0])) < 1e-9);
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let x = t2(2, 4, &[1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]);
        let gain = Tensor::full(&[4], 1.0);
        let bias = Tensor::zeros(&[4]);
        let (y, _) = layer_norm_rows(&x, &gain, &bias).unwrap();
        for i in 0..2 {
            let row = &y.data()[i * 4..(i + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3); // eps shifts variance slightly
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(|i| i as f64).collect()).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_all_ones_with_padding() {
        // 3x3 ones kernel over a 3x3 ones image, pad 1: center sees all 9.
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0); // corner sees a 2x2 patch
        assert_eq!(y.data()[1], 6.0); // edge sees a 2x3 patch
    }

    #[test]
    fn conv_stride_and_bias() {
        let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|i| i as f64).collect()).unwrap();
        let w = Tensor::full(&[1, 1, 2, 2], 1.0);
        let b = Tensor::new(vec![1], vec![0.5]).unwrap();
        let y = conv2d(&x, &w, &b, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        // Window sums + bias.
        assert_eq!(y.data(), &[10.5, 18.5, 42.5, 50.5]);
    }

    #[test]
    fn conv_channel_mixing() {
        // Two input channels, kernel picks out the second.
        let x = Tensor::new(
            vec![1, 2, 2, 2],
            vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0],
        )
        .unwrap();
        let w = Tensor::new(vec![1, 2, 1, 1], vec![0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.data(), &[10.0, 20.0, 30.0, 40.0]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 3, 1, 1]), &b, 1, 0).is_err());
    }

    #[test]
    fn maxpool_values_and_routing() {
        let x = Tensor::new(
            vec![1, 1, 4, 4],
            vec![
                1.0, 2.0, 5.0, 4.0, //
                3.0, 0.0, 1.0, 1.0, //
                0.0, 0.0, 9.0, 8.0, //
                7.0, 0.0, 2.0, 3.0,
            ],
        )
        .unwrap();
        let (y, argmax) = maxpool2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[3.0, 5.0, 7.0, 9.0]);
        let dout = Tensor::full(&[1, 1, 2, 2], 1.0);
        let dx = maxpool2_backward(&[1, 1, 4, 4], &argmax, &dout);
        let expect_hot = [4usize, 2, 12, 10];
        for (i, &v) in dx.data().iter().enumerate() {
            let want = if expect_hot.contains(&i) { 1.0 } else { 0.0 };
            assert_eq!(v, want, "index {i}");
        }
        assert!(maxpool2(&Tensor::zeros(&[1, 1, 3, 4])).is_err());
    }

    #[test]
    fn maxpool_tie_takes_first_in_scan_order() {
        let x = Tensor::full(&[1, 1, 2, 2], 7.0);
        let (_, argmax) = maxpool2(&x).unwrap();
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn global_avg_pool_means() {
        let x = Tensor::new(vec![1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0])
            .unwrap();
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_eq!(y.data(), &[2.5, 10.0]);
        let dx = global_avg_pool_backward(&[1, 2, 2, 2], &Tensor::new(vec![1, 2], vec![4.0, 8.0]).unwrap());
        assert_eq!(dx.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 1, &[9.0, 8.0]);
        let cat = concat_cols(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 3]);
        assert_eq!(cat.data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        assert_eq!(slice_cols(&cat, 0, 2).unwrap(), a);
        assert_eq!(slice_cols(&cat, 2, 1).unwrap(), b);
        assert!(slice_cols(&cat, 2, 2).is_err());
        assert!(concat_cols(&[&a, &t2(1, 1, &[0.0])]).is_err());
    }

    #[test]
    fn sum_all_scalar() {
        let x = t2(2, 2, &[1.0, -2.0, 3.0, 4.5]);
        assert_eq!(sum_all(&x).item().unwrap(), 6.5);
    }
}
