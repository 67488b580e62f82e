//! Differentiable kernels.
//!
//! Every function takes the active [`GradRecord`]; outputs are recorded only
//! when at least one input is attached to it, so constant subgraphs are free.
//! Convolution uses cross-correlation semantics (no kernel flip) with zero
//! padding sized to preserve spatial extents at stride 1.

use super::{DiffArray, GradRecord, TensorError};

fn same_shape(op: &'static str, a: &DiffArray, b: &DiffArray) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn rank2(op: &'static str, a: &DiffArray) -> Result<(usize, usize), TensorError> {
    match a.shape() {
        [n, m] => Ok((*n, *m)),
        _ => Err(TensorError::BadRank { op, expected: 2, shape: a.shape().to_vec() }),
    }
}

fn rank3(op: &'static str, a: &DiffArray) -> Result<(usize, usize, usize), TensorError> {
    match a.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        _ => Err(TensorError::BadRank { op, expected: 3, shape: a.shape().to_vec() }),
    }
}

// ── elementwise binary ───────────────────────────────────────────────

pub fn add(rec: &GradRecord, a: &DiffArray, b: &DiffArray) -> Result<DiffArray, TensorError> {
    same_shape("add", a, b)?;
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    let (na, nb) = (rec.node_of(a)?, rec.node_of(b)?);
    if na.is_none() && nb.is_none() {
        return DiffArray::new(a.shape().to_vec(), data);
    }
    let len = data.len();
    Ok(rec.emit(
        a.shape().to_vec(),
        data,
        Box::new(move |up, table| {
            if let Some(ix) = na {
                let g = table.buf(ix, len);
                for (gi, ui) in g.iter_mut().zip(up) {
                    *gi += ui;
                }
            }
            if let Some(ix) = nb {
                let g = table.buf(ix, len);
                for (gi, ui) in g.iter_mut().zip(up) {
                    *gi += ui;
                }
            }
        }),
    ))
}

pub fn sub(rec: &GradRecord, a: &DiffArray, b: &DiffArray) -> Result<DiffArray, TensorError> {
    same_shape("sub", a, b)?;
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let (na, nb) = (rec.node_of(a)?, rec.node_of(b)?);
    if na.is_none() && nb.is_none() {
        return DiffArray::new(a.shape().to_vec(), data);
    }
    let len = data.len();
    Ok(rec.emit(
        a.shape().to_vec(),
        data,
        Box::new(move |up, table| {
            if let Some(ix) = na {
                let g = table.buf(ix, len);
                for (gi, ui) in g.iter_mut().zip(up) {
                    *gi += ui;
                }
            }
            if let Some(ix) = nb {
                let g = table.buf(ix, len);
                for (gi, ui) in g.iter_mut().zip(up) {
                    *gi -= ui;
                }
            }
        }),
    ))
}

/// Hadamard product. Passing the same array twice is fine; both gradient
/// contributions accumulate.
pub fn mul(rec: &GradRecord, a: &DiffArray, b: &DiffArray) -> Result<DiffArray, TensorError> {
    same_shape("mul", a, b)?;
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let (na, nb) = (rec.node_of(a)?, rec.node_of(b)?);
    if na.is_none() && nb.is_none() {
        return DiffArray::new(a.shape().to_vec(), data);
    }
    let len = data.len();
    let a_data = a.shared_data();
    let b_data = b.shared_data();
    Ok(rec.emit(
        a.shape().to_vec(),
        data,
        Box::new(move |up, table| {
            if let Some(ix) = na {
                let g = table.buf(ix, len);
                for i in 0..len {
                    g[i] += up[i] * b_data[i];
                }
            }
            if let Some(ix) = nb {
                let g = table.buf(ix, len);
                for i in 0..len {
                    g[i] += up[i] * a_data[i];
                }
            }
        }),
    ))
}

// ── elementwise unary ────────────────────────────────────────────────

/// y = mul * x + add, elementwise with scalar coefficients.
pub fn affine(rec: &GradRecord, x: &DiffArray, m: f64, c: f64) -> Result<DiffArray, TensorError> {
    let data: Vec<f64> = x.data().iter().map(|v| m * v + c).collect();
    let nx = rec.node_of(x)?;
    if nx.is_none() {
        return DiffArray::new(x.shape().to_vec(), data);
    }
    let len = data.len();
    let ix = nx.unwrap();
    Ok(rec.emit(
        x.shape().to_vec(),
        data,
        Box::new(move |up, table| {
            let g = table.buf(ix, len);
            for i in 0..len {
                g[i] += m * up[i];
            }
        }),
    ))
}

pub fn scale(rec: &GradRecord, x: &DiffArray, s: f64) -> Result<DiffArray, TensorError> {
    affine(rec, x, s, 0.0)
}

/// Numerically stable logistic function. Saturated values are pulled to the
/// nearest representable point strictly inside (0, 1).
pub fn sigmoid(rec: &GradRecord, x: &DiffArray) -> Result<DiffArray, TensorError> {
    const HI: f64 = 1.0 - f64::EPSILON / 2.0;
    let data: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| {
            let s = if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            };
            s.clamp(f64::MIN_POSITIVE, HI)
        })
        .collect();
    let nx = rec.node_of(x)?;
    if nx.is_none() {
        return DiffArray::new(x.shape().to_vec(), data);
    }
    let ix = nx.unwrap();
    let len = data.len();
    let y = data.clone();
    Ok(rec.emit(
        x.shape().to_vec(),
        data,
        Box::new(move |up, table| {
            let g = table.buf(ix, len);
            for i in 0..len {
                g[i] += up[i] * y[i] * (1.0 - y[i]);
            }
        }),
    ))
}

pub fn relu(rec: &GradRecord, x: &DiffArray) -> Result<DiffArray, TensorError> {
    let data: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    let nx = rec.node_of(x)?;
    if nx.is_none() {
        return DiffArray::new(x.shape().to_vec(), data);
    }
    let ix = nx.unwrap();
    let len = data.len();
    let x_data = x.shared_data();
    Ok(rec.emit(
        x.shape().to_vec(),
        data,
        Box::new(move |up, table| {
            let g = table.buf(ix, len);
            for i in 0..len {
                if x_data[i] > 0.0 {
                    g[i] += up[i];
                }
            }
        }),
    ))
}

/// Natural log; rejects non-positive inputs instead of producing NaN.
pub fn ln(rec: &GradRecord, x: &DiffArray) -> Result<DiffArray, TensorError> {
    if let Some(&bad) = x.data().iter().find(|v| **v <= 0.0) {
        return Err(TensorError::LogDomain { value: bad });
    }
    let data: Vec<f64> = x.data().iter().map(|v| v.ln()).collect();
    let nx = rec.node_of(x)?;
    if nx.is_none() {
        return DiffArray::new(x.shape().to_vec(), data);
    }
    let ix = nx.unwrap();
    let len = data.len();
    let x_data = x.shared_data();
    Ok(rec.emit(
        x.shape().to_vec(),
        data,
        Box::new(move |up, table| {
            let g = table.buf(ix, len);
            for i in 0..len {
                g[i] += up[i] / x_data[i];
            }
        }),
    ))
}

/// Value clamp for log arguments: the forward value is clamped into
/// [lo, hi] but the gradient passes through unchanged, so saturated
/// predictions keep a recovery signal instead of freezing at the boundary.
pub fn clamp_value(
    rec: &GradRecord,
    x: &DiffArray,
    lo: f64,
    hi: f64,
) -> Result<DiffArray, TensorError> {
    if !(lo < hi) {
        return Err(TensorError::InvalidArgument { op: "clamp_value", what: format!("lo {lo} < hi {hi}") });
    }
    let data: Vec<f64> = x.data().iter().map(|v| v.clamp(lo, hi)).collect();
    let nx = rec.node_of(x)?;
    if nx.is_none() {
        return DiffArray::new(x.shape().to_vec(), data);
    }
    let ix = nx.unwrap();
    let len = data.len();
    Ok(rec.emit(
        x.shape().to_vec(),
        data,
        Box::new(move |up, table| {
            let g = table.buf(ix, len);
            for i in 0..len {
                g[i] += up[i];
            }
        }),
    ))
}

/// Clamp into [lo, hi]; gradient passes only strictly inside the interval.
pub fn clamp(rec: &GradRecord, x: &DiffArray, lo: f64, hi: f64) -> Result<DiffArray, TensorError> {
    if !(lo < hi) {
        return Err(TensorError::InvalidArgument { op: "clamp", what: format!("lo {lo} < hi {hi}") });
    }
    let data: Vec<f64> = x.data().iter().map(|v| v.clamp(lo, hi)).collect();
    let nx = rec.node_of(x)?;
    if nx.is_none() {
        return DiffArray::new(x.shape().to_vec(), data);
    }
    let ix = nx.unwrap();
    let len = data.len();
    let x_data = x.shared_data();
    Ok(rec.emit(
        x.shape().to_vec(),
        data,
        Box::new(move |up, table| {
            let g = table.buf(ix, len);
            for i in 0..len {
                if x_data[i] > lo && x_data[i] < hi {
                    g[i] += up[i];
                }
            }
        }),
    ))
}

// ── broadcasting ─────────────────────────────────────────────────────

/// x[n, m] + b[m], broadcasting b over rows.
pub fn add_row_vector(rec: &GradRecord, x: &DiffArray, b: &DiffArray) -> Result<DiffArray, TensorError> {
    let (n, m) = rank2("add_row_vector", x)?;
    if b.shape() != [m] {
        return Err(TensorError::ShapeMismatch {
            op: "add_row_vector",
            left: x.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut data = x.data().to_vec();
    for r in 0..n {
        for j in 0..m {
            data[r * m + j] += b.data()[j];
        }
    }
    let (nx, nb) = (rec.node_of(x)?, rec.node_of(b)?);
    if nx.is_none() && nb.is_none() {
        return DiffArray::new(x.shape().to_vec(), data);
    }
    Ok(rec.emit(
        x.shape().to_vec(),
        data,
        Box::new(move |up, table| {
            if let Some(ix) = nx {
                let g = table.buf(ix, n * m);
                for (gi, ui) in g.iter_mut().zip(up) {
                    *gi += ui;
                }
            }
            if let Some(ib) = nb {
                let g = table.buf(ib, m);
                for r in 0..n {
                    for j in 0..m {
                        g[j] += up[r * m + j];
                    }
                }
            }
        }),
    ))
}

fn channels_of(op: &'static str, x: &DiffArray, v: &DiffArray) -> Result<usize, TensorError> {
    let c = *x.shape().last().ok_or(TensorError::BadRank { op, expected: 1, shape: vec![] })?;
    if v.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op,
            left: x.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    Ok(c)
}

/// Per-channel scale: y[.., c] = x[.., c] * s[c] (channels = last axis).
pub fn mul_channels(rec: &GradRecord, x: &DiffArray, s: &DiffArray) -> Result<DiffArray, TensorError> {
    let c = channels_of("mul_channels", x, s)?;
    let lead = x.len() / c;
    let mut data = vec![0.0; x.len()];
    for i in 0..lead {
        for ch in 0..c {
            data[i * c + ch] = x.data()[i * c + ch] * s.data()[ch];
        }
    }
    let (nx, ns) = (rec.node_of(x)?, rec.node_of(s)?);
    if nx.is_none() && ns.is_none() {
        return DiffArray::new(x.shape().to_vec(), data);
    }
    let x_data = x.shared_data();
    let s_data = s.shared_data();
    Ok(rec.emit(
        x.shape().to_vec(),
        data,
        Box::new(move |up, table| {
            if let Some(ix) = nx {
                let g = table.buf(ix, lead * c);
                for i in 0..lead {
                    for ch in 0..c {
                        g[i * c + ch] += up[i * c + ch] * s_data[ch];
                    }
                }
            }
            if let Some(is) = ns {
                let g = table.buf(is, c);
                for i in 0..lead {
                    for ch in 0..c {
                        g[ch] += up[i * c + ch] * x_data[i * c + ch];
                    }
                }
            }
        }),
    ))
}

/// Per-channel shift: y[.., c] = x[.., c] + b[c].
pub fn add_channels(rec: &GradRecord, x: &DiffArray, b: &DiffArray) -> Result<DiffArray, TensorError> {
    let c = channels_of("add_channels", x, b)?;
    let lead = x.len() / c;
    let mut data = x.data().to_vec();
    for i in 0..lead {
        for ch in 0..c {
            data[i * c + ch] += b.data()[ch];
        }
    }
    let (nx, nb) = (rec.node_of(x)?, rec.node_of(b)?);
    if nx.is_none() && nb.is_none() {
        return DiffArray::new(x.shape().to_vec(), data);
    }
    Ok(rec.emit(
        x.shape().to_vec(),
        data,
        Box::new(move |up, table| {
            if let Some(ix) = nx {
                let g = table.buf(ix, lead * c);
                for (gi, ui) in g.iter_mut().zip(up) {
                    *gi += ui;
                }
            }
            if let Some(ib) = nb {
                let g = table.buf(ib, c);
                for i in 0..lead {
                    for ch in 0..c {
                        g[ch] += up[i * c + ch];
                    }
                }
            }
        }),
    ))
}

// ── shape ────────────────────────────────────────────────────────────

pub fn transpose2d(rec: &GradRecord, x: &DiffArray) -> Result<DiffArray, TensorError> {
    let (n, m) = rank2("transpose2d", x)?;
    let mut data = vec![0.0; n * m];
    for r in 0..n {
        for j in 0..m {
            data[j * n + r] = x.data()[r * m + j];
        }
    }
    let nx = rec.node_of(x)?;
    if nx.is_none() {
        return DiffArray::new(vec![m, n], data);
    }
    let ix = nx.unwrap();
    Ok(rec.emit(
        vec![m, n],
        data,
        Box::new(move |up, table| {
            let g = table.buf(ix, n * m);
            for r in 0..n {
                for j in 0..m {
                    g[r * m + j] += up[j * n + r];
                }
            }
        }),
    ))
}

/// Concatenate along the last axis; leading axes must match.
pub fn concat_last(rec: &GradRecord, a: &DiffArray, b: &DiffArray) -> Result<DiffArray, TensorError> {
    let (la, lb) = (a.shape(), b.shape());
    if la.len() != lb.len() || la.is_empty() || la[..la.len() - 1] != lb[..lb.len() - 1] {
        return Err(TensorError::ShapeMismatch {
            op: "concat_last",
            left: la.to_vec(),
            right: lb.to_vec(),
        });
    }
    let ca = la[la.len() - 1];
    let cb = lb[lb.len() - 1];
    let lead: usize = la[..la.len() - 1].iter().product();
    let mut out_shape = la.to_vec();
    *out_shape.last_mut().unwrap() = ca + cb;
    let mut data = vec![0.0; lead * (ca + cb)];
    for i in 0..lead {
        data[i * (ca + cb)..i * (ca + cb) + ca].copy_from_slice(&a.data()[i * ca..(i + 1) * ca]);
        data[i * (ca + cb) + ca..(i + 1) * (ca + cb)].copy_from_slice(&b.data()[i * cb..(i + 1) * cb]);
    }
    let (na, nb) = (rec.node_of(a)?, rec.node_of(b)?);
    if na.is_none() && nb.is_none() {
        return DiffArray::new(out_shape, data);
    }
    Ok(rec.emit(
        out_shape,
        data,
        Box::new(move |up, table| {
            let cc = ca + cb;
            if let Some(ix) = na {
                let g = table.buf(ix, lead * ca);
                for i in 0..lead {
                    for j in 0..ca {
                        g[i * ca + j] += up[i * cc + j];
                    }
                }
            }
            if let Some(ix) = nb {
                let g = table.buf(ix, lead * cb);
                for i in 0..lead {
                    for j in 0..cb {
                        g[i * cb + j] += up[i * cc + ca + j];
                    }
                }
            }
        }),
    ))
}

/// Slice [from, to) of the last axis.
pub fn slice_last(rec: &GradRecord, x: &DiffArray, from: usize, to: usize) -> Result<DiffArray, TensorError> {
    let shape = x.shape();
    let c = *shape.last().ok_or(TensorError::BadRank { op: "slice_last", expected: 1, shape: vec![] })?;
    if from >= to || to > c {
        return Err(TensorError::InvalidArgument {
            op: "slice_last",
            what: format!("slice [{from}, {to}) of axis {c}"),
        });
    }
    let lead: usize = shape[..shape.len() - 1].iter().product();
    let width = to - from;
    let mut out_shape = shape.to_vec();
    *out_shape.last_mut().unwrap() = width;
    let mut data = vec![0.0; lead * width];
    for i in 0..lead {
        data[i * width..(i + 1) * width].copy_from_slice(&x.data()[i * c + from..i * c + to]);
    }
    let nx = rec.node_of(x)?;
    if nx.is_none() {
        return DiffArray::new(out_shape, data);
    }
    let ix = nx.unwrap();
    Ok(rec.emit(
        out_shape,
        data,
        Box::new(move |up, table| {
            let g = table.buf(ix, lead * c);
            for i in 0..lead {
                for j in 0..width {
                    g[i * c + from + j] += up[i * width + j];
                }
            }
        }),
    ))
}

// ── reductions ───────────────────────────────────────────────────────

pub fn sum(rec: &GradRecord, x: &DiffArray) -> Result<DiffArray, TensorError> {
    let total: f64 = x.data().iter().sum();
    let nx = rec.node_of(x)?;
    if nx.is_none() {
        return Ok(DiffArray::scalar(total));
    }
    let ix = nx.unwrap();
    let len = x.len();
    Ok(rec.emit(
        vec![],
        vec![total],
        Box::new(move |up, table| {
            let g = table.buf(ix, len);
            for gi in g.iter_mut() {
                *gi += up[0];
            }
        }),
    ))
}

pub fn mean(rec: &GradRecord, x: &DiffArray) -> Result<DiffArray, TensorError> {
    if x.is_empty() {
        return Err(TensorError::InvalidArgument { op: "mean", what: "non-empty input".into() });
    }
    let n = x.len() as f64;
    let total: f64 = x.data().iter().sum();
    let nx = rec.node_of(x)?;
    if nx.is_none() {
        return Ok(DiffArray::scalar(total / n));
    }
    let ix = nx.unwrap();
    let len = x.len();
    Ok(rec.emit(
        vec![],
        vec![total / n],
        Box::new(move |up, table| {
            let g = table.buf(ix, len);
            let u = up[0] / n;
            for gi in g.iter_mut() {
                *gi += u;
            }
        }),
    ))
}

/// Spatial max per channel over an [H, W, C] array. Gradient routes to the
/// first argmax cell in row-major order on ties.
pub fn global_max_pool(rec: &GradRecord, x: &DiffArray) -> Result<DiffArray, TensorError> {
    let (h, w, c) = rank3("global_max_pool", x)?;
    if h == 0 || w == 0 {
        return Err(TensorError::InvalidArgument { op: "global_max_pool", what: "H, W >= 1".into() });
    }
    let mut best = vec![f64::NEG_INFINITY; c];
    let mut arg = vec![0usize; c];
    for cell in 0..h * w {
        for ch in 0..c {
            let v = x.data()[cell * c + ch];
            if v > best[ch] {
                best[ch] = v;
                arg[ch] = cell;
            }
        }
    }
    let nx = rec.node_of(x)?;
    if nx.is_none() {
        return DiffArray::new(vec![c], best);
    }
    let ix = nx.unwrap();
    let len = x.len();
    Ok(rec.emit(
        vec![c],
        best,
        Box::new(move |up, table| {
            let g = table.buf(ix, len);
            for ch in 0..c {
                g[arg[ch] * c + ch] += up[ch];
            }
        }),
    ))
}

/// Spatial mean per channel over an [H, W, C] array.
pub fn global_avg_pool(rec: &GradRecord, x: &DiffArray) -> Result<DiffArray, TensorError> {
    let (h, w, c) = rank3("global_avg_pool", x)?;
    if h == 0 || w == 0 {
        return Err(TensorError::InvalidArgument { op: "global_avg_pool", what: "H, W >= 1".into() });
    }
    let cells = (h * w) as f64;
    let mut out = vec![0.0; c];
    for cell in 0..h * w {
        for ch in 0..c {
            out[ch] += x.data()[cell * c + ch];
        }
    }
    for v in out.iter_mut() {
        *v /= cells;
    }
    let nx = rec.node_of(x)?;
    if nx.is_none() {
        return DiffArray::new(vec![c], out);
    }
    let ix = nx.unwrap();
    let len = x.len();
    let hw = h * w;
    Ok(rec.emit(
        vec![c],
        out,
        Box::new(move |up, table| {
            let g = table.buf(ix, len);
            for cell in 0..hw {
                for ch in 0..c {
                    g[cell * c + ch] += up[ch] / cells;
                }
            }
        }),
    ))
}

// ── linear algebra ───────────────────────────────────────────────────

pub fn matmul(rec: &GradRecord, a: &DiffArray, b: &DiffArray) -> Result<DiffArray, TensorError> {
    let (n, k) = rank2("matmul", a)?;
    let (k2, m) = rank2("matmul", b)?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut data = vec![0.0; n * m];
    for r in 0..n {
        for kk in 0..k {
            let av = a.data()[r * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[kk * m..(kk + 1) * m];
            let orow = &mut data[r * m..(r + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    let (na, nb) = (rec.node_of(a)?, rec.node_of(b)?);
    if na.is_none() && nb.is_none() {
        return DiffArray::new(vec![n, m], data);
    }
    let a_data = a.shared_data();
    let b_data = b.shared_data();
    Ok(rec.emit(
        vec![n, m],
        data,
        Box::new(move |up, table| {
            if let Some(ix) = na {
                // dA = up · Bᵀ
                let g = table.buf(ix, n * k);
                for r in 0..n {
                    for kk in 0..k {
                        let mut acc = 0.0;
                        let urow = &up[r * m..(r + 1) * m];
                        let brow = &b_data[kk * m..(kk + 1) * m];
                        for j in 0..m {
                            acc += urow[j] * brow[j];
                        }
                        g[r * k + kk] += acc;
                    }
                }
            }
            if let Some(ix) = nb {
                // dB = Aᵀ · up
                let g = table.buf(ix, k * m);
                for r in 0..n {
                    let urow = &up[r * m..(r + 1) * m];
                    for kk in 0..k {
                        let av = a_data[r * k + kk];
                        if av == 0.0 {
                            continue;
                        }
                        let grow = &mut g[kk * m..(kk + 1) * m];
                        for j in 0..m {
                            grow[j] += av * urow[j];
                        }
                    }
                }
            }
        }),
    ))
}

// ── convolution ──────────────────────────────────────────────────────

struct ConvGeom {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad_h: usize,
    pad_w: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    dilation: usize,
}

fn conv_geometry(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    dilation: usize,
) -> Result<ConvGeom, TensorError> {
    if stride < 1 || dilation < 1 {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            what: format!("stride {stride} and dilation {dilation} must be >= 1"),
        });
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            what: format!("odd kernel extents required, got {kh}x{kw}"),
        });
    }
    let eff_h = dilation * (kh - 1) + 1;
    let eff_w = dilation * (kw - 1) + 1;
    // Zero padding preserves H x W at stride 1; strided convolutions run
    // unpadded.
    let (pad_h, pad_w) = if stride == 1 {
        (dilation * (kh - 1) / 2, dilation * (kw - 1) / 2)
    } else {
        (0, 0)
    };
    if eff_h > h + 2 * pad_h {
        return Err(TensorError::KernelTooLarge { kernel: eff_h, input: h + 2 * pad_h });
    }
    if eff_w > w + 2 * pad_w {
        return Err(TensorError::KernelTooLarge { kernel: eff_w, input: w + 2 * pad_w });
    }
    let out_h = (h + 2 * pad_h - eff_h) / stride + 1;
    let out_w = (w + 2 * pad_w - eff_w) / stride + 1;
    Ok(ConvGeom { h, w, kh, kw, pad_h, pad_w, out_h, out_w, stride, dilation })
}

/// 2-D cross-correlation over an [H, W, Cin] input.
///
/// Standard kernels are [KH, KW, Cin, Cout]; with `depthwise` the kernel is
/// [KH, KW, C] and each channel is filtered independently (kernel count must
/// equal the input channel count). Zero padding preserves H and W at stride 1.
pub fn conv2d(
    rec: &GradRecord,
    input: &DiffArray,
    kernel: &DiffArray,
    stride: usize,
    dilation: usize,
    depthwise: bool,
) -> Result<DiffArray, TensorError> {
    if depthwise {
        conv2d_depthwise(rec, input, kernel, stride, dilation)
    } else {
        conv2d_standard(rec, input, kernel, stride, dilation)
    }
}

fn conv2d_standard(
    rec: &GradRecord,
    input: &DiffArray,
    kernel: &DiffArray,
    stride: usize,
    dilation: usize,
) -> Result<DiffArray, TensorError> {
    let (h, w, cin) = rank3("conv2d", input)?;
    let (kh, kw, kcin, cout) = match kernel.shape() {
        [a, b, c, d] => (*a, *b, *c, *d),
        _ => {
            return Err(TensorError::BadRank { op: "conv2d kernel", expected: 4, shape: kernel.shape().to_vec() })
        }
    };
    if kcin != cin {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: input.shape().to_vec(),
            right: kernel.shape().to_vec(),
        });
    }
    let g = conv_geometry(h, w, kh, kw, stride, dilation)?;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; g.out_h * g.out_w * cout];
    for oh in 0..g.out_h {
        let ih0 = (oh * g.stride) as isize - g.pad_h as isize;
        for ow in 0..g.out_w {
            let iw0 = (ow * g.stride) as isize - g.pad_w as isize;
            let orow = &mut out[(oh * g.out_w + ow) * cout..(oh * g.out_w + ow + 1) * cout];
            for p in 0..kh {
                let ih = ih0 + (p * g.dilation) as isize;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                for q in 0..kw {
                    let iw = iw0 + (q * g.dilation) as isize;
                    if iw < 0 || iw >= w as isize {
                        continue;
                    }
                    let xbase = (ih as usize * w + iw as usize) * cin;
                    let kbase = (p * kw + q) * cin * cout;
                    for ic in 0..cin {
                        let xv = x[xbase + ic];
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &k[kbase + ic * cout..kbase + (ic + 1) * cout];
                        for oc in 0..cout {
                            orow[oc] += xv * krow[oc];
                        }
                    }
                }
            }
        }
    }
    let (nx, nk) = (rec.node_of(input)?, rec.node_of(kernel)?);
    if nx.is_none() && nk.is_none() {
        return DiffArray::new(vec![g.out_h, g.out_w, cout], out);
    }
    let x_data = x.to_vec();
    let k_data = k.to_vec();
    let (in_len, k_len) = (input.len(), kernel.len());
    Ok(rec.emit(
        vec![g.out_h, g.out_w, cout],
        out,
        Box::new(move |up, table| {
            let mut gx = nx.map(|ix| table.take(ix, in_len));
            let mut gk = nk.map(|ik| table.take(ik, k_len));
            for oh in 0..g.out_h {
                let ih0 = (oh * g.stride) as isize - g.pad_h as isize;
                for ow in 0..g.out_w {
                    let iw0 = (ow * g.stride) as isize - g.pad_w as isize;
                    let urow = &up[(oh * g.out_w + ow) * cout..(oh * g.out_w + ow + 1) * cout];
                    for p in 0..g.kh {
                        let ih = ih0 + (p * g.dilation) as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        for q in 0..g.kw {
                            let iw = iw0 + (q * g.dilation) as isize;
                            if iw < 0 || iw >= g.w as isize {
                                continue;
                            }
                            let xbase = (ih as usize * g.w + iw as usize) * cin;
                            let kbase = (p * g.kw + q) * cin * cout;
                            if let Some(gx) = gx.as_deref_mut() {
                                for ic in 0..cin {
                                    let krow = &k_data[kbase + ic * cout..kbase + (ic + 1) * cout];
                                    let mut acc = 0.0;
                                    for oc in 0..cout {
                                        acc += urow[oc] * krow[oc];
                                    }
                                    gx[xbase + ic] += acc;
                                }
                            }
                            if let Some(gk) = gk.as_deref_mut() {
                                for ic in 0..cin {
                                    let xv = x_data[xbase + ic];
                                    if xv == 0.0 {
                                        continue;
                                    }
                                    let grow = &mut gk[kbase + ic * cout..kbase + (ic + 1) * cout];
                                    for oc in 0..cout {
                                        grow[oc] += xv * urow[oc];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let (Some(ix), Some(gx)) = (nx, gx) {
                table.restore(ix, gx);
            }
            if let (Some(ik), Some(gk)) = (nk, gk) {
                table.restore(ik, gk);
            }
        }),
    ))
}

fn conv2d_depthwise(
    rec: &GradRecord,
    input: &DiffArray,
    kernel: &DiffArray,
    stride: usize,
    dilation: usize,
) -> Result<DiffArray, TensorError> {
    let (h, w, c) = rank3("conv2d", input)?;
    let (kh, kw, kc) = match kernel.shape() {
        [a, b, d] => (*a, *b, *d),
        _ => {
            return Err(TensorError::BadRank { op: "depthwise kernel", expected: 3, shape: kernel.shape().to_vec() })
        }
    };
    if kc != c {
        return Err(TensorError::DepthwiseChannelMismatch { kernels: kc, channels: c });
    }
    let g = conv_geometry(h, w, kh, kw, stride, dilation)?;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; g.out_h * g.out_w * c];
    for oh in 0..g.out_h {
        let ih0 = (oh * g.stride) as isize - g.pad_h as isize;
        for ow in 0..g.out_w {
            let iw0 = (ow * g.stride) as isize - g.pad_w as isize;
            let orow = &mut out[(oh * g.out_w + ow) * c..(oh * g.out_w + ow + 1) * c];
            for p in 0..kh {
                let ih = ih0 + (p * g.dilation) as isize;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                for q in 0..kw {
                    let iw = iw0 + (q * g.dilation) as isize;
                    if iw < 0 || iw >= w as isize {
                        continue;
                    }
                    let xbase = (ih as usize * w + iw as usize) * c;
                    let kbase = (p * kw + q) * c;
                    for ch in 0..c {
                        orow[ch] += x[xbase + ch] * k[kbase + ch];
                    }
                }
            }
        }
    }
    let (nx, nk) = (rec.node_of(input)?, rec.node_of(kernel)?);
    if nx.is_none() && nk.is_none() {
        return DiffArray::new(vec![g.out_h, g.out_w, c], out);
    }
    let x_data = x.to_vec();
    let k_data = k.to_vec();
    let (in_len, k_len) = (input.len(), kernel.len());
    Ok(rec.emit(
        vec![g.out_h, g.out_w, c],
        out,
        Box::new(move |up, table| {
            let mut gx = nx.map(|ix| table.take(ix, in_len));
            let mut gk = nk.map(|ik| table.take(ik, k_len));
            for oh in 0..g.out_h {
                let ih0 = (oh * g.stride) as isize - g.pad_h as isize;
                for ow in 0..g.out_w {
                    let iw0 = (ow * g.stride) as isize - g.pad_w as isize;
                    let urow = &up[(oh * g.out_w + ow) * c..(oh * g.out_w + ow + 1) * c];
                    for p in 0..g.kh {
                        let ih = ih0 + (p * g.dilation) as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        for q in 0..g.kw {
                            let iw = iw0 + (q * g.dilation) as isize;
                            if iw < 0 || iw >= g.w as isize {
                                continue;
                            }
                            let xbase = (ih as usize * g.w + iw as usize) * c;
                            let kbase = (p * g.kw + q) * c;
                            if let Some(gx) = gx.as_deref_mut() {
                                for ch in 0..c {
                                    gx[xbase + ch] += urow[ch] * k_data[kbase + ch];
                                }
                            }
                            if let Some(gk) = gk.as_deref_mut() {
                                for ch in 0..c {
                                    gk[kbase + ch] += urow[ch] * x_data[xbase + ch];
                                }
                            }
                        }
                    }
                }
            }
            if let (Some(ix), Some(gx)) = (nx, gx) {
                table.restore(ix, gx);
            }
            if let (Some(ik), Some(gk)) = (nk, gk) {
                table.restore(ik, gk);
            }
        }),
    ))
}

// ── softmax and normalization ────────────────────────────────────────

/// Row-wise softmax over an [n, m] array.
pub fn softmax_rows(rec: &GradRecord, x: &DiffArray) -> Result<DiffArray, TensorError> {
    softmax_rows_inner(rec, x, None)
}

/// Row-wise softmax with masked columns receiving exactly zero weight.
///
/// Rows with no unmasked column come out all-zero instead of NaN.
pub fn softmax_rows_masked(
    rec: &GradRecord,
    x: &DiffArray,
    mask: &[bool],
) -> Result<DiffArray, TensorError> {
    let (_, m) = rank2("softmax_rows_masked", x)?;
    if mask.len() != m {
        return Err(TensorError::InvalidArgument {
            op: "softmax_rows_masked",
            what: format!("mask length {} != columns {m}", mask.len()),
        });
    }
    softmax_rows_inner(rec, x, Some(mask.to_vec()))
}

fn softmax_rows_inner(
    rec: &GradRecord,
    x: &DiffArray,
    mask: Option<Vec<bool>>,
) -> Result<DiffArray, TensorError> {
    let (n, m) = rank2("softmax_rows", x)?;
    let live = |j: usize| mask.as_ref().map_or(true, |mk| mk[j]);
    let mut data = vec![0.0; n * m];
    for r in 0..n {
        let row = &x.data()[r * m..(r + 1) * m];
        let mut hi = f64::NEG_INFINITY;
        for j in 0..m {
            if live(j) && row[j] > hi {
                hi = row[j];
            }
        }
        if hi == f64::NEG_INFINITY {
            continue; // fully masked row stays zero
        }
        let mut total = 0.0;
        for j in 0..m {
            if live(j) {
                let e = (row[j] - hi).exp();
                data[r * m + j] = e;
                total += e;
            }
        }
        for j in 0..m {
            if live(j) {
                data[r * m + j] /= total;
            }
        }
    }
    let nx = rec.node_of(x)?;
    if nx.is_none() {
        return DiffArray::new(vec![n, m], data);
    }
    let ix = nx.unwrap();
    let y = data.clone();
    Ok(rec.emit(
        vec![n, m],
        data,
        Box::new(move |up, table| {
            let live = |j: usize| mask.as_ref().map_or(true, |mk| mk[j]);
            let g = table.buf(ix, n * m);
            for r in 0..n {
                let yrow = &y[r * m..(r + 1) * m];
                let urow = &up[r * m..(r + 1) * m];
                let mut dot = 0.0;
                for j in 0..m {
                    if live(j) {
                        dot += urow[j] * yrow[j];
                    }
                }
                for j in 0..m {
                    if live(j) {
                        g[r * m + j] += yrow[j] * (urow[j] - dot);
                    }
                }
            }
        }),
    ))
}

/// Row-wise standardization: (x - mean) / sqrt(var + eps), no learned affine.
pub fn layer_norm_rows(rec: &GradRecord, x: &DiffArray, eps: f64) -> Result<DiffArray, TensorError> {
    let (n, m) = rank2("layer_norm_rows", x)?;
    if m == 0 {
        return Err(TensorError::InvalidArgument { op: "layer_norm_rows", what: "columns >= 1".into() });
    }
    let mut data = vec![0.0; n * m];
    let mut inv_std = vec![0.0; n];
    for r in 0..n {
        let row = &x.data()[r * m..(r + 1) * m];
        let mu = row.iter().sum::<f64>() / m as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
        let s = 1.0 / (var + eps).sqrt();
        inv_std[r] = s;
        for j in 0..m {
            data[r * m + j] = (row[j] - mu) * s;
        }
    }
    let nx = rec.node_of(x)?;
    if nx.is_none() {
        return DiffArray::new(vec![n, m], data);
    }
    let ix = nx.unwrap();
    let y = data.clone();
    Ok(rec.emit(
        vec![n, m],
        data,
        Box::new(move |up, table| {
            let g = table.buf(ix, n * m);
            for r in 0..n {
                let yrow = &y[r * m..(r + 1) * m];
                let urow = &up[r * m..(r + 1) * m];
                let mean_u = urow.iter().sum::<f64>() / m as f64;
                let mean_uy = urow.iter().zip(yrow).map(|(u, v)| u * v).sum::<f64>() / m as f64;
                for j in 0..m {
                    g[r * m + j] += inv_std[r] * (urow[j] - mean_u - yrow[j] * mean_uy);
                }
            }
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::GradRecord;

    fn arr(shape: Vec<usize>, data: Vec<f64>) -> DiffArray {
        DiffArray::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let rec = GradRecord::new();
        let eye = arr(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = arr(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = matmul(&rec, &eye, &a).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn matmul_hand_case() {
        let rec = GradRecord::new();
        let a = arr(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = arr(vec![2, 1], vec![1.0, 1.0]);
        let out = matmul(&rec, &a, &b).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let rec = GradRecord::new();
        let a = arr(vec![2, 3], vec![0.0; 6]);
        let b = arr(vec![2, 2], vec![0.0; 4]);
        match matmul(&rec, &a, &b) {
            Err(TensorError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn sigmoid_closed_forms() {
        let rec = GradRecord::new();
        let x = arr(vec![2], vec![0.0, 1.0]);
        let y = sigmoid(&rec, &x).unwrap();
        assert_eq!(y.data()[0], 0.5);
        assert!((y.data()[1] - 0.7310586).abs() < 1e-7);
    }

    #[test]
    fn sigmoid_strictly_interior() {
        let rec = GradRecord::new();
        let x = arr(vec![4], vec![-1000.0, -50.0, 50.0, 1000.0]);
        let y = sigmoid(&rec, &x).unwrap();
        for &v in y.data() {
            assert!(v > 0.0 && v < 1.0, "saturated to {v}");
        }
        assert!((y.data()[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let rec = GradRecord::new();
        let x = arr(vec![1, 4], vec![3.0; 4]);
        let y = softmax_rows(&rec, &x).unwrap();
        for &v in y.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let rec = GradRecord::new();
        let x = arr(vec![3, 5], (0..15).map(|i| (i as f64 * 0.7).sin() * 10.0).collect());
        let y = softmax_rows(&rec, &x).unwrap();
        for r in 0..3 {
            let s: f64 = y.data()[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let rec = GradRecord::new();
        let x = arr(vec![2, 4], vec![5.0, 1.0, 2.0, 9.0, 0.0, 0.0, 0.0, 0.0]);
        let mask = [true, false, true, false];
        let y = softmax_rows_masked(&rec, &x, &mask).unwrap();
        for r in 0..2 {
            assert_eq!(y.data()[r * 4 + 1], 0.0);
            assert_eq!(y.data()[r * 4 + 3], 0.0);
            let s: f64 = y.data()[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_all_masked_is_zero() {
        let rec = GradRecord::new();
        let x = arr(vec![2, 3], vec![1.0; 6]);
        let y = softmax_rows_masked(&rec, &x, &[false, false, false]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_identity_1x1_all_ones() {
        let rec = GradRecord::new();
        let x = arr(vec![3, 3, 1], (0..9).map(|i| i as f64).collect());
        let k = arr(vec![1, 1, 1, 1], vec![1.0]);
        let y = conv2d(&rec, &x, &k, 1, 1, false).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_averaging_on_constant_tile() {
        let rec = GradRecord::new();
        let x = arr(vec![5, 5, 1], vec![2.0; 25]);
        let k = arr(vec![3, 3, 1, 1], vec![1.0 / 9.0; 9]);
        let y = conv2d(&rec, &x, &k, 1, 1, false).unwrap();
        assert_eq!(y.shape(), &[5, 5, 1]);
        // interior stays constant
        assert!((y.data()[2 * 5 + 2] - 2.0).abs() < 1e-12);
        // zero-padded corner sees only 4 of 9 taps
        assert!((y.data()[0] - 2.0 * 4.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn dilated_conv_taps_land_at_offset_two() {
        // impulse at the center of an 8x8 grid, 3x3 kernel with dilation 2:
        // direct summation over the dilated receptive field puts each kernel
        // tap at spatial offset ±2 from the impulse.
        let rec = GradRecord::new();
        let mut data = vec![0.0; 64];
        data[3 * 8 + 3] = 1.0;
        let x = arr(vec![8, 8, 1], data);
        let k = arr(vec![3, 3, 1, 1], (1..=9).map(|v| v as f64).collect());
        let y = conv2d(&rec, &x, &k, 1, 2, false).unwrap();
        assert_eq!(y.shape(), &[8, 8, 1]);
        // output(o) = sum_p sum_q x(o - 2 + 2p, ...) k(p, q); the impulse makes
        // output nonzero exactly at offsets in {-2, 0, +2}^2 around (3, 3),
        // mirrored through the kernel.
        let mut expected = vec![0.0; 64];
        for p in 0..3usize {
            for q in 0..3usize {
                let oh = 5 - 2 * p;
                let ow = 5 - 2 * q;
                expected[oh * 8 + ow] = (p * 3 + q + 1) as f64;
            }
        }
        assert_eq!(y.data(), &expected[..]);
    }

    #[test]
    fn depthwise_requires_matching_channels() {
        let rec = GradRecord::new();
        let x = arr(vec![4, 4, 3], vec![0.0; 48]);
        let k = arr(vec![3, 3, 2], vec![0.0; 18]);
        match conv2d(&rec, &x, &k, 1, 1, true) {
            Err(TensorError::DepthwiseChannelMismatch { kernels: 2, channels: 3 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn kernel_larger_than_padded_input_rejected() {
        let rec = GradRecord::new();
        let x = arr(vec![2, 2, 1], vec![0.0; 4]);
        let k = arr(vec![7, 7, 1, 1], vec![0.0; 49]);
        match conv2d(&rec, &x, &k, 2, 1, false) {
            Err(TensorError::KernelTooLarge { kernel: 7, input: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn strided_output_follows_padded_convolution_formula() {
        let rec = GradRecord::new();
        let x = arr(vec![7, 7, 1], (0..49).map(|i| i as f64).collect());
        let k = arr(vec![3, 3, 1, 1], vec![1.0; 9]);
        let y = conv2d(&rec, &x, &k, 2, 1, false).unwrap();
        // (7 + 0 - 3) / 2 + 1 = 3
        assert_eq!(y.shape(), &[3, 3, 1]);
    }

    #[test]
    fn global_max_pool_constant_and_single_peak() {
        let rec = GradRecord::new();
        let x = arr(vec![2, 2, 3], vec![7.0; 12]);
        let y = global_max_pool(&rec, &x).unwrap();
        assert_eq!(y.data(), &[7.0, 7.0, 7.0]);

        let mut data = vec![0.0; 16];
        data[5] = 9.0;
        let x = arr(vec![4, 4, 1], data);
        let y = global_max_pool(&rec, &x).unwrap();
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn max_pool_gradient_routes_to_first_tie() {
        let rec = GradRecord::new();
        let x = rec.leaf(&arr(vec![2, 2, 1], vec![5.0, 5.0, 1.0, 5.0]));
        let y = global_max_pool(&rec, &x).unwrap();
        let loss = sum(&rec, &y).unwrap();
        let grads = rec.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_zero_row_stays_zero() {
        let rec = GradRecord::new();
        let x = arr(vec![2, 4], vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        let y = layer_norm_rows(&rec, &x, 1e-5).unwrap();
        assert!(y.data()[..4].iter().all(|&v| v == 0.0));
        let mu: f64 = y.data()[4..].iter().sum::<f64>() / 4.0;
        assert!(mu.abs() < 1e-12);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let rec = GradRecord::new();
        let a = arr(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = arr(vec![2, 3], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let cat = concat_last(&rec, &a, &b).unwrap();
        assert_eq!(cat.shape(), &[2, 5]);
        assert_eq!(cat.data(), &[1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]);
        let back = slice_last(&rec, &cat, 0, 2).unwrap();
        assert_eq!(back.data(), a.data());
        let tail = slice_last(&rec, &cat, 2, 5).unwrap();
        assert_eq!(tail.data(), b.data());
    }

    #[test]
    fn ln_rejects_nonpositive() {
        let rec = GradRecord::new();
        let x = arr(vec![2], vec![1.0, 0.0]);
        match ln(&rec, &x) {
            Err(TensorError::LogDomain { value }) => assert_eq!(value, 0.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let rec = GradRecord::new();
            let x = arr(vec![4, 4], (0..16).map(|i| (i as f64).sin()).collect());
            let y = softmax_rows(&rec, &x).unwrap();
            let z = matmul(&rec, &y, &transpose2d(&rec, &y).unwrap()).unwrap();
            z.data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
