//! Convolution and rearrangement kernels with exact adjoints.
//!
//! All convolutions are stride 1 with replicate padding. Planes are
//! channel-major (`C x H x W`), rows contiguous, so the hot loops below are
//! plain slice walks the compiler can vectorize. Accumulation order is fixed;
//! outputs are bit-identical run to run.

#[inline]
fn axpy(out: &mut [f64], inp: &[f64], w: f64) {
    for (o, i) in out.iter_mut().zip(inp) {
        *o = w.mul_add(*i, *o);
    }
}

/// Dot product with a fixed 8-lane accumulation order. The lane split keeps
/// the reduction vectorizable while staying bit-identical run to run.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let ac = &a[c * 8..c * 8 + 8];
        let bc = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            lanes[l] = ac[l].mul_add(bc[l], lanes[l]);
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail = a[i].mul_add(b[i], tail);
    }
    let quad = [lanes[0] + lanes[4], lanes[1] + lanes[5], lanes[2] + lanes[6], lanes[3] + lanes[7]];
    ((quad[0] + quad[2]) + (quad[1] + quad[3])) + tail
}

/// Plane sum with the same fixed lane structure as [`dot`].
#[inline]
fn sum(a: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let ac = &a[c * 8..c * 8 + 8];
        for l in 0..8 {
            lanes[l] += ac[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i];
    }
    let quad = [lanes[0] + lanes[4], lanes[1] + lanes[5], lanes[2] + lanes[6], lanes[3] + lanes[7]];
    ((quad[0] + quad[2]) + (quad[1] + quad[3])) + tail
}

#[inline]
fn clamp_row(y: i64, h: usize) -> usize {
    y.clamp(0, h as i64 - 1) as usize
}

/// One output row of a replicate-padded 3x3 convolution: all nine taps are
/// applied in a single sweep. `rm`, `r0`, `rp` are the clamped source rows.
#[inline]
fn conv_row_pass(out_row: &mut [f64], rm: &[f64], r0: &[f64], rp: &[f64], w9: &[f64]) {
    let n = out_row.len();
    if n == 1 {
        out_row[0] += (w9[0] + w9[1] + w9[2]) * rm[0]
            + (w9[3] + w9[4] + w9[5]) * r0[0]
            + (w9[6] + w9[7] + w9[8]) * rp[0];
        return;
    }
    out_row[0] += w9[0] * rm[0]
        + w9[1] * rm[0]
        + w9[2] * rm[1]
        + w9[3] * r0[0]
        + w9[4] * r0[0]
        + w9[5] * r0[1]
        + w9[6] * rp[0]
        + w9[7] * rp[0]
        + w9[8] * rp[1];
    for x in 1..n - 1 {
        let mut acc = out_row[x];
        acc = w9[0].mul_add(rm[x - 1], acc);
        acc = w9[1].mul_add(rm[x], acc);
        acc = w9[2].mul_add(rm[x + 1], acc);
        acc = w9[3].mul_add(r0[x - 1], acc);
        acc = w9[4].mul_add(r0[x], acc);
        acc = w9[5].mul_add(r0[x + 1], acc);
        acc = w9[6].mul_add(rp[x - 1], acc);
        acc = w9[7].mul_add(rp[x], acc);
        acc = w9[8].mul_add(rp[x + 1], acc);
        out_row[x] = acc;
    }
    out_row[n - 1] += w9[0] * rm[n - 2]
        + w9[1] * rm[n - 1]
        + w9[2] * rm[n - 1]
        + w9[3] * r0[n - 2]
        + w9[4] * r0[n - 1]
        + w9[5] * r0[n - 1]
        + w9[6] * rp[n - 2]
        + w9[7] * rp[n - 1]
        + w9[8] * rp[n - 1];
}

/// Column adjoint of one kernel row: `din_row` gathers `dout_row` with the
/// flipped taps plus the replicate-border fold.
#[inline]
fn adjoint_row_pass(din_row: &mut [f64], dout_row: &[f64], w3: &[f64; 3]) {
    let n = din_row.len();
    if n == 1 {
        din_row[0] += (w3[0] + w3[1] + w3[2]) * dout_row[0];
        return;
    }
    din_row[0] += w3[0] * (dout_row[0] + dout_row[1]) + w3[1] * dout_row[0];
    for x in 1..n - 1 {
        let mut acc = din_row[x];
        acc = w3[0].mul_add(dout_row[x + 1], acc);
        acc = w3[1].mul_add(dout_row[x], acc);
        acc = w3[2].mul_add(dout_row[x - 1], acc);
        din_row[x] = acc;
    }
    din_row[n - 1] += w3[2] * (dout_row[n - 1] + dout_row[n - 2]) + w3[1] * dout_row[n - 1];
}

/// Row pairs contributing to input row `sy` in the adjoint: `(source dout
/// row, kernel row index)`. Border rows absorb the clamped reads.
#[inline]
fn adjoint_row_sources(sy: usize, h: usize, out: &mut [(usize, usize); 4]) -> usize {
    let mut n = 0;
    for (ky, dy) in [(0usize, -1i64), (1, 0), (2, 1)] {
        let y = sy as i64 - dy;
        if y >= 0 && y < h as i64 {
            out[n] = (y as usize, ky);
            n += 1;
        }
    }
    if sy == 0 {
        out[n] = (0, 0);
        n += 1;
    }
    if sy == h - 1 {
        out[n] = (h - 1, 2);
        n += 1;
    }
    n
}

/// 3x3 convolution, replicate padding. `weight` is `[cout][cin][3][3]`.
pub fn conv3x3_forward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; cout * plane];
    for o in 0..cout {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        out_plane.fill(bias[o]);
        for i in 0..cin {
            let in_plane = &input[i * plane..(i + 1) * plane];
            let w9 = &weight[(o * cin + i) * 9..(o * cin + i) * 9 + 9];
            for y in 0..h {
                let ym = clamp_row(y as i64 - 1, h);
                let yp = clamp_row(y as i64 + 1, h);
                conv_row_pass(
                    &mut out_plane[y * w..(y + 1) * w],
                    &in_plane[ym * w..ym * w + w],
                    &in_plane[y * w..y * w + w],
                    &in_plane[yp * w..yp * w + w],
                    w9,
                );
            }
        }
    }
    out
}

/// Input gradient of [`conv3x3_forward`].
pub fn conv3x3_backward_input(
    dout: &[f64],
    cout: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cin: usize,
) -> Vec<f64> {
    let plane = h * w;
    let mut din = vec![0.0; cin * plane];
    let mut sources = [(0usize, 0usize); 4];
    for i in 0..cin {
        let din_plane = &mut din[i * plane..(i + 1) * plane];
        for o in 0..cout {
            let dout_plane = &dout[o * plane..(o + 1) * plane];
            let w9 = &weight[(o * cin + i) * 9..(o * cin + i) * 9 + 9];
            for sy in 0..h {
                let count = adjoint_row_sources(sy, h, &mut sources);
                let din_row = &mut din_plane[sy * w..(sy + 1) * w];
                for &(y, ky) in &sources[..count] {
                    let w3 = [w9[ky * 3], w9[ky * 3 + 1], w9[ky * 3 + 2]];
                    adjoint_row_pass(din_row, &dout_plane[y * w..(y + 1) * w], &w3);
                }
            }
        }
    }
    din
}

/// Per-row tap accumulation for weight gradients: one sweep collects all
/// nine `sum dout[x] * in[clamp(x+dx)]` terms for the three source rows.
#[inline]
fn weight_grad_row_pass(acc: &mut [f64; 9], dout_row: &[f64], rm: &[f64], r0: &[f64], rp: &[f64]) {
    let n = dout_row.len();
    if n == 1 {
        for (t, row) in [rm, r0, rp].into_iter().enumerate() {
            let v = dout_row[0] * row[0];
            acc[t * 3] += v;
            acc[t * 3 + 1] += v;
            acc[t * 3 + 2] += v;
        }
        return;
    }
    for x in 1..n - 1 {
        let d = dout_row[x];
        acc[0] = d.mul_add(rm[x - 1], acc[0]);
        acc[1] = d.mul_add(rm[x], acc[1]);
        acc[2] = d.mul_add(rm[x + 1], acc[2]);
        acc[3] = d.mul_add(r0[x - 1], acc[3]);
        acc[4] = d.mul_add(r0[x], acc[4]);
        acc[5] = d.mul_add(r0[x + 1], acc[5]);
        acc[6] = d.mul_add(rp[x - 1], acc[6]);
        acc[7] = d.mul_add(rp[x], acc[7]);
        acc[8] = d.mul_add(rp[x + 1], acc[8]);
    }
    let d0 = dout_row[0];
    let dn = dout_row[n - 1];
    for (t, row) in [rm, r0, rp].into_iter().enumerate() {
        acc[t * 3] += d0 * row[0] + dn * row[n - 2];
        acc[t * 3 + 1] += d0 * row[0] + dn * row[n - 1];
        acc[t * 3 + 2] += d0 * row[1] + dn * row[n - 1];
    }
}

/// Weight and bias gradients of [`conv3x3_forward`].
pub fn conv3x3_backward_params(
    dout: &[f64],
    cout: usize,
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<f64>) {
    let plane = h * w;
    let mut dweight = vec![0.0; cout * cin * 9];
    let mut dbias = vec![0.0; cout];
    for o in 0..cout {
        let dout_plane = &dout[o * plane..(o + 1) * plane];
        dbias[o] = sum(dout_plane);
        for i in 0..cin {
            let in_plane = &input[i * plane..(i + 1) * plane];
            let mut acc = [0.0f64; 9];
            for y in 0..h {
                let ym = clamp_row(y as i64 - 1, h);
                let yp = clamp_row(y as i64 + 1, h);
                weight_grad_row_pass(
                    &mut acc,
                    &dout_plane[y * w..(y + 1) * w],
                    &in_plane[ym * w..ym * w + w],
                    &in_plane[y * w..y * w + w],
                    &in_plane[yp * w..yp * w + w],
                );
            }
            dweight[(o * cin + i) * 9..(o * cin + i) * 9 + 9].copy_from_slice(&acc);
        }
    }
    (dweight, dbias)
}

/// Accumulates `k_t * src` into four destination planes in one sweep over
/// `src`. Keeping four outputs hot cuts the memory traffic of the 1x1 convs.
#[inline]
fn quad_axpy(group: &mut [f64], plane: usize, src: &[f64], k: [f64; 4]) {
    let (p0, rest) = group.split_at_mut(plane);
    let (p1, rest) = rest.split_at_mut(plane);
    let (p2, p3) = rest.split_at_mut(plane);
    for x in 0..plane {
        let v = src[x];
        p0[x] = k[0].mul_add(v, p0[x]);
        p1[x] = k[1].mul_add(v, p1[x]);
        p2[x] = k[2].mul_add(v, p2[x]);
        p3[x] = k[3].mul_add(v, p3[x]);
    }
}

/// 1x1 convolution: a per-pixel linear map across channels.
pub fn conv1x1_forward(
    input: &[f64],
    cin: usize,
    plane: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; cout * plane];
    let mut o = 0usize;
    for group in out.chunks_mut(4 * plane) {
        let obn = group.len() / plane;
        for (t, p) in group.chunks_mut(plane).enumerate() {
            p.fill(bias[o + t]);
        }
        for i in 0..cin {
            let src = &input[i * plane..(i + 1) * plane];
            if obn == 4 {
                let k = [
                    weight[o * cin + i],
                    weight[(o + 1) * cin + i],
                    weight[(o + 2) * cin + i],
                    weight[(o + 3) * cin + i],
                ];
                quad_axpy(group, plane, src, k);
            } else {
                for (t, p) in group.chunks_mut(plane).enumerate() {
                    axpy(p, src, weight[(o + t) * cin + i]);
                }
            }
        }
        o += obn;
    }
    out
}

pub fn conv1x1_backward_input(
    dout: &[f64],
    cout: usize,
    plane: usize,
    weight: &[f64],
    cin: usize,
) -> Vec<f64> {
    let mut din = vec![0.0; cin * plane];
    let mut i = 0usize;
    for group in din.chunks_mut(4 * plane) {
        let ibn = group.len() / plane;
        for o in 0..cout {
            let src = &dout[o * plane..(o + 1) * plane];
            if ibn == 4 {
                let k = [
                    weight[o * cin + i],
                    weight[o * cin + i + 1],
                    weight[o * cin + i + 2],
                    weight[o * cin + i + 3],
                ];
                quad_axpy(group, plane, src, k);
            } else {
                for (t, p) in group.chunks_mut(plane).enumerate() {
                    axpy(p, src, weight[o * cin + i + t]);
                }
            }
        }
        i += ibn;
    }
    din
}

pub fn conv1x1_backward_params(
    dout: &[f64],
    cout: usize,
    input: &[f64],
    cin: usize,
    plane: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut dweight = vec![0.0; cout * cin];
    let mut dbias = vec![0.0; cout];
    for o in 0..cout {
        let dout_plane = &dout[o * plane..(o + 1) * plane];
        dbias[o] = sum(dout_plane);
        let mut i = 0usize;
        while i + 4 <= cin {
            // Four dots in one sweep, two partial lanes each to shorten the
            // dependency chains; lane order is fixed.
            let i0 = &input[i * plane..(i + 1) * plane];
            let i1 = &input[(i + 1) * plane..(i + 2) * plane];
            let i2 = &input[(i + 2) * plane..(i + 3) * plane];
            let i3 = &input[(i + 3) * plane..(i + 4) * plane];
            let mut acc = [0.0f64; 8];
            let pairs = plane / 2;
            for p in 0..pairs {
                let (a, b) = (dout_plane[2 * p], dout_plane[2 * p + 1]);
                acc[0] = a.mul_add(i0[2 * p], acc[0]);
                acc[1] = b.mul_add(i0[2 * p + 1], acc[1]);
                acc[2] = a.mul_add(i1[2 * p], acc[2]);
                acc[3] = b.mul_add(i1[2 * p + 1], acc[3]);
                acc[4] = a.mul_add(i2[2 * p], acc[4]);
                acc[5] = b.mul_add(i2[2 * p + 1], acc[5]);
                acc[6] = a.mul_add(i3[2 * p], acc[6]);
                acc[7] = b.mul_add(i3[2 * p + 1], acc[7]);
            }
            if plane % 2 == 1 {
                let a = dout_plane[plane - 1];
                acc[0] += a * i0[plane - 1];
                acc[2] += a * i1[plane - 1];
                acc[4] += a * i2[plane - 1];
                acc[6] += a * i3[plane - 1];
            }
            dweight[o * cin + i] = acc[0] + acc[1];
            dweight[o * cin + i + 1] = acc[2] + acc[3];
            dweight[o * cin + i + 2] = acc[4] + acc[5];
            dweight[o * cin + i + 3] = acc[6] + acc[7];
            i += 4;
        }
        while i < cin {
            dweight[o * cin + i] = dot(dout_plane, &input[i * plane..(i + 1) * plane]);
            i += 1;
        }
    }
    (dweight, dbias)
}

/// Depthwise 3x3 convolution, replicate padding. `weight` is `[c][3][3]`.
pub fn depthwise3x3_forward(
    input: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; channels * plane];
    for c in 0..channels {
        let out_plane = &mut out[c * plane..(c + 1) * plane];
        out_plane.fill(bias[c]);
        let in_plane = &input[c * plane..(c + 1) * plane];
        let w9 = &weight[c * 9..c * 9 + 9];
        for y in 0..h {
            let ym = clamp_row(y as i64 - 1, h);
            let yp = clamp_row(y as i64 + 1, h);
            conv_row_pass(
                &mut out_plane[y * w..(y + 1) * w],
                &in_plane[ym * w..ym * w + w],
                &in_plane[y * w..y * w + w],
                &in_plane[yp * w..yp * w + w],
                w9,
            );
        }
    }
    out
}

pub fn depthwise3x3_backward_input(
    dout: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    weight: &[f64],
) -> Vec<f64> {
    let plane = h * w;
    let mut din = vec![0.0; channels * plane];
    let mut sources = [(0usize, 0usize); 4];
    for c in 0..channels {
        let dout_plane = &dout[c * plane..(c + 1) * plane];
        let din_plane = &mut din[c * plane..(c + 1) * plane];
        let w9 = &weight[c * 9..c * 9 + 9];
        for sy in 0..h {
            let count = adjoint_row_sources(sy, h, &mut sources);
            let din_row = &mut din_plane[sy * w..(sy + 1) * w];
            for &(y, ky) in &sources[..count] {
                let w3 = [w9[ky * 3], w9[ky * 3 + 1], w9[ky * 3 + 2]];
                adjoint_row_pass(din_row, &dout_plane[y * w..(y + 1) * w], &w3);
            }
        }
    }
    din
}

pub fn depthwise3x3_backward_params(
    dout: &[f64],
    input: &[f64],
    channels: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<f64>) {
    let plane = h * w;
    let mut dweight = vec![0.0; channels * 9];
    let mut dbias = vec![0.0; channels];
    for c in 0..channels {
        let dout_plane = &dout[c * plane..(c + 1) * plane];
        dbias[c] = sum(dout_plane);
        let in_plane = &input[c * plane..(c + 1) * plane];
        let mut acc = [0.0f64; 9];
        for y in 0..h {
            let ym = clamp_row(y as i64 - 1, h);
            let yp = clamp_row(y as i64 + 1, h);
            weight_grad_row_pass(
                &mut acc,
                &dout_plane[y * w..(y + 1) * w],
                &in_plane[ym * w..ym * w + w],
                &in_plane[y * w..y * w + w],
                &in_plane[yp * w..yp * w + w],
            );
        }
        dweight[c * 9..c * 9 + 9].copy_from_slice(&acc);
    }
    (dweight, dbias)
}

/// Rectifier, with the mask needed for the adjoint taken from the
/// pre-activation values.
pub fn relu_forward(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

pub fn relu_backward(dout: &mut [f64], pre: &[f64]) {
    for (d, &p) in dout.iter_mut().zip(pre) {
        if p <= 0.0 {
            *d = 0.0;
        }
    }
}

/// 2x sub-pixel rearrangement: `[4*c, h, w] -> [c, 2h, 2w]` with channel
/// `c*4 + dy*2 + dx` landing at spatial offset `(dy, dx)`.
pub fn pixel_shuffle2(input: &[f64], cout: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; cout * oh * ow];
    for c in 0..cout {
        for dy in 0..2 {
            for dx in 0..2 {
                let ci = c * 4 + dy * 2 + dx;
                let in_plane = &input[ci * h * w..(ci + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        out[c * oh * ow + (2 * y + dy) * ow + (2 * x + dx)] = in_plane[y * w + x];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint (and inverse) of [`pixel_shuffle2`].
pub fn pixel_unshuffle2(output: &[f64], cout: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut input = vec![0.0; cout * 4 * h * w];
    for c in 0..cout {
        for dy in 0..2 {
            for dx in 0..2 {
                let ci = c * 4 + dy * 2 + dx;
                let in_plane = &mut input[ci * h * w..(ci + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        in_plane[y * w + x] = output[c * oh * ow + (2 * y + dy) * ow + (2 * x + dx)];
                    }
                }
            }
        }
    }
    input
}
