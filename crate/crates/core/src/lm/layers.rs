use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use super::dropout::apply_rows;
use super::params::{ConvBank, HighwayLayer, LstmLayer};
use super::{Composition, LstmState};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

/// Composes one word from its subword vectors (`len x d_x`).
///
/// `concat` truncates or zero-pads to `pad_len` vectors. `cnn` runs each bank
/// as a narrow convolution with a tanh, over the word zero-padded to the widest
/// filter, and keeps the maximum over positions. Returns the composed vector and,
/// for `cnn`, the winning position of every output feature.
pub(crate) fn compose_word<T: Scalar>(
    method: Composition,
    x: ArrayView2<'_, T>,
    pad_len: usize,
    banks: &[ConvBank<T>],
) -> (Array1<T>, Vec<u32>) {
    let (len, dx) = x.dim();
    match method {
        Composition::Sum => (x.sum_axis(Axis(0)), Vec::new()),
        Composition::Concat => {
            let mut out = Array1::zeros(pad_len * dx);
            for i in 0..len.min(pad_len) {
                out.slice_mut(s![i * dx..(i + 1) * dx]).assign(&x.row(i));
            }
            (out, Vec::new())
        }
        Composition::Cnn => {
            let max_w = banks.iter().map(|b| b.width).max().unwrap_or(1);
            let padded = len.max(max_w);
            let total: usize = banks.iter().map(|b| b.bias.len()).sum();
            let mut out = Array1::zeros(total);
            let mut arg = Vec::with_capacity(total);
            let mut off = 0;
            for bank in banks {
                let w = bank.width;
                let positions = padded - w + 1;
                let mut unfolded = Array2::<T>::zeros((positions, w * dx));
                for p in 0..positions {
                    for k in 0..w {
                        if p + k < len {
                            unfolded.slice_mut(s![p, k * dx..(k + 1) * dx]).assign(&x.row(p + k));
                        }
                    }
                }
                let mut pre = unfolded.dot(&bank.weight);
                pre += &bank.bias;
                for j in 0..bank.bias.len() {
                    let col = pre.column(j);
                    let mut best = 0;
                    for p in 1..positions {
                        if col[p] > col[best] {
                            best = p;
                        }
                    }
                    out[off + j] = col[best].tanh();
                    arg.push(best as u32);
                }
                off += bank.bias.len();
            }
            (out, arg)
        }
    }
}

/// Composes a word vector from its subword embeddings.
pub fn compose<T: Scalar>(
    method: Composition,
    vectors: ArrayView2<'_, T>,
    pad_len: usize,
    banks: &[ConvBank<T>],
) -> Result<Array1<T>> {
    if vectors.nrows() == 0 {
        return Err(Error::InvalidArgument("word has no subwords".into()));
    }
    match method {
        Composition::Concat if pad_len == 0 => Err(Error::InvalidArgument("pad_len must be positive".into())),
        Composition::Cnn if banks.is_empty() => Err(Error::InvalidArgument("cnn needs filter banks".into())),
        _ => Ok(compose_word(method, vectors, pad_len, banks).0),
    }
}

/// Backward of [`compose_word`] for one word: adds into `d_embed` (rows indexed
/// by subword id) and into the filter gradients.
#[allow(clippy::too_many_arguments)]
pub(crate) fn compose_word_backward<T: Scalar>(
    method: Composition,
    subwords: &[u32],
    embedding: &Array2<T>,
    pad_len: usize,
    banks: &[ConvBank<T>],
    composed: ArrayView1<'_, T>,
    argmax: &[u32],
    d_composed: ArrayView1<'_, T>,
    d_embed: &mut Array2<T>,
    d_banks: &mut [ConvBank<T>],
) {
    let dx = embedding.ncols();
    match method {
        Composition::Sum => {
            for &s in subwords {
                let mut row = d_embed.row_mut(s as usize);
                row += &d_composed;
            }
        }
        Composition::Concat => {
            for (i, &s) in subwords.iter().take(pad_len).enumerate() {
                let mut row = d_embed.row_mut(s as usize);
                row += &d_composed.slice(s![i * dx..(i + 1) * dx]);
            }
        }
        Composition::Cnn => {
            let mut off = 0;
            for (bank, dbank) in banks.iter().zip(d_banks.iter_mut()) {
                for j in 0..bank.bias.len() {
                    let z = composed[off + j];
                    let g = d_composed[off + j] * (T::one() - z * z);
                    if g == T::zero() {
                        continue;
                    }
                    dbank.bias[j] += g;
                    let p = argmax[off + j] as usize;
                    for k in 0..bank.width {
                        let Some(&sid) = subwords.get(p + k) else { break };
                        let e = embedding.row(sid as usize);
                        let rows = s![k * dx..(k + 1) * dx, j];
                        let mut dw = dbank.weight.slice_mut(rows);
                        dw.scaled_add(g, &e);
                        let w = bank.weight.slice(rows);
                        let mut de = d_embed.row_mut(sid as usize);
                        de.scaled_add(g, &w);
                    }
                }
                off += bank.bias.len();
            }
        }
    }
}

pub(crate) struct HighwayCache<T> {
    x: Array2<T>,
    pub(crate) gate: Array2<T>,
    act: Array2<T>,
}

pub(crate) fn highway_layer_forward<T: Scalar>(layer: &HighwayLayer<T>, x: Array2<T>) -> (Array2<T>, HighwayCache<T>) {
    let mut gate = x.dot(&layer.w_t);
    gate += &layer.b_t;
    gate.mapv_inplace(|v| v.sigmoid());
    let mut act = x.dot(&layer.w_h);
    act += &layer.b_h;
    act.mapv_inplace(relu);
    let mut y = x.clone();
    Zip::from(&mut y)
        .and(&gate)
        .and(&act)
        .for_each(|y, &t, &a| *y = t * a + (T::one() - t) * *y);
    (y, HighwayCache { x, gate, act })
}

pub(crate) fn highway_layer_backward<T: Scalar>(
    layer: &HighwayLayer<T>,
    cache: &HighwayCache<T>,
    dy: &Array2<T>,
    grad: &mut HighwayLayer<T>,
) -> Array2<T> {
    let one = T::one();
    let mut da_t = Array2::zeros(dy.raw_dim());
    let mut da_h = Array2::zeros(dy.raw_dim());
    let mut dx = Array2::zeros(dy.raw_dim());
    Zip::from(&mut da_t)
        .and(dy)
        .and(&cache.gate)
        .and(&cache.act)
        .and(&cache.x)
        .for_each(|dt, &g, &t, &a, &x| *dt = g * (a - x) * t * (one - t));
    Zip::from(&mut da_h)
        .and(&mut dx)
        .and(dy)
        .and(&cache.gate)
        .and(&cache.act)
        .for_each(|dh, dxv, &g, &t, &a| {
            *dh = if a > T::zero() { g * t } else { T::zero() };
            *dxv = g * (one - t);
        });
    general_mat_mul(one, &cache.x.t(), &da_t, one, &mut grad.w_t);
    grad.b_t += &da_t.sum_axis(Axis(0));
    general_mat_mul(one, &cache.x.t(), &da_h, one, &mut grad.w_h);
    grad.b_h += &da_h.sum_axis(Axis(0));
    general_mat_mul(one, &da_t, &layer.w_t.t(), one, &mut dx);
    general_mat_mul(one, &da_h, &layer.w_h.t(), one, &mut dx);
    dx
}

/// One highway layer on a single vector; returns the output and the transform gate.
pub fn highway_forward<T: Scalar>(x: ArrayView1<'_, T>, layer: &HighwayLayer<T>) -> Result<(Array1<T>, Array1<T>)> {
    if x.len() != layer.w_t.nrows() {
        return Err(Error::InvalidArgument(format!(
            "highway input has width {}, layer expects {}",
            x.len(),
            layer.w_t.nrows()
        )));
    }
    let (y, cache) = highway_layer_forward(layer, x.to_owned().insert_axis(Axis(0)));
    Ok((y.row(0).to_owned(), cache.gate.row(0).to_owned()))
}

/// Applies gate nonlinearities in place to pre-activations `[i f o g]`.
fn activate<T: Scalar>(a: &mut Array2<T>, d: usize) {
    a.slice_mut(s![.., ..3 * d]).mapv_inplace(|v| v.sigmoid());
    a.slice_mut(s![.., 3 * d..]).mapv_inplace(|v| v.tanh());
}

/// One LSTM step on `batch` rows; updates `h` and `c` and returns the gates and `tanh(c)`.
fn lstm_cell<T: Scalar>(
    layer: &LstmLayer<T>,
    mut a: Array2<T>,
    h_in: &Array2<T>,
    c: &mut Array2<T>,
    h: &mut Array2<T>,
) -> (Array2<T>, Array2<T>) {
    let d = layer.hidden();
    general_mat_mul(T::one(), h_in, &layer.w_h, T::one(), &mut a);
    activate(&mut a, d);
    Zip::from(c.view_mut())
        .and(a.slice(s![.., ..d]))
        .and(a.slice(s![.., d..2 * d]))
        .and(a.slice(s![.., 3 * d..]))
        .for_each(|c, &i, &f, &g| *c = f * *c + i * g);
    let tc = c.mapv(|v| v.tanh());
    Zip::from(h.view_mut())
        .and(a.slice(s![.., 2 * d..3 * d]))
        .and(&tc)
        .for_each(|h, &o, &t| *h = o * t);
    (a, tc)
}

/// Advances a stack of LSTM layers by one time step for every row of `x`
/// and returns the top hidden state.
pub fn lstm_stack_step<T: Scalar>(x: ArrayView2<'_, T>, layers: &[LstmLayer<T>], state: &mut LstmState<T>) -> Result<Array2<T>> {
    if layers.len() != state.h.len() {
        return Err(Error::InvalidArgument("state depth differs from layer count".into()));
    }
    let mut input = x.to_owned();
    for (l, layer) in layers.iter().enumerate() {
        if input.ncols() != layer.w_x.nrows() || state.h[l].nrows() != input.nrows() {
            return Err(Error::InvalidArgument(format!("shape mismatch at LSTM layer {l}")));
        }
        let mut a = input.dot(&layer.w_x);
        a += &layer.b;
        let h_in = state.h[l].clone();
        lstm_cell(layer, a, &h_in, &mut state.c[l], &mut state.h[l]);
        input = state.h[l].clone();
    }
    Ok(input)
}

pub(crate) struct LstmLayerCache<T> {
    x: Array2<T>,
    h_prev: Vec<Array2<T>>,
    c_prev: Vec<Array2<T>>,
    gates: Vec<Array2<T>>,
    tanh_c: Vec<Array2<T>>,
    in_mask: Option<Array2<T>>,
    h_mask: Option<Array2<T>>,
}

/// Runs one LSTM layer over a window. Dropout masks act on the layer input
/// and on the recurrent state entering the gates; the carried state is unmasked.
#[allow(clippy::too_many_arguments)]
pub(crate) fn lstm_layer_forward<T: Scalar>(
    layer: &LstmLayer<T>,
    mut x: Array2<T>,
    in_mask: Option<&Array2<T>>,
    h_mask: Option<&Array2<T>>,
    h: &mut Array2<T>,
    c: &mut Array2<T>,
    steps: usize,
    batch: usize,
    keep_cache: bool,
) -> (Array2<T>, Option<LstmLayerCache<T>>) {
    let d = layer.hidden();
    apply_rows(&mut x, in_mask);
    let mut ax = x.dot(&layer.w_x);
    ax += &layer.b;
    let mut out = Array2::zeros((steps * batch, d));
    let mut cache = LstmLayerCache {
        x: Array2::zeros((0, 0)),
        h_prev: Vec::new(),
        c_prev: Vec::new(),
        gates: Vec::new(),
        tanh_c: Vec::new(),
        in_mask: in_mask.cloned(),
        h_mask: h_mask.cloned(),
    };
    for t in 0..steps {
        let rows = s![t * batch..(t + 1) * batch, ..];
        let mut h_in = h.clone();
        apply_rows(&mut h_in, h_mask);
        if keep_cache {
            cache.c_prev.push(c.clone());
        }
        let (gates, tc) = lstm_cell(layer, ax.slice(rows).to_owned(), &h_in, c, h);
        out.slice_mut(rows).assign(h);
        if keep_cache {
            cache.h_prev.push(h_in);
            cache.gates.push(gates);
            cache.tanh_c.push(tc);
        }
    }
    if keep_cache {
        cache.x = x;
        (out, Some(cache))
    } else {
        (out, None)
    }
}

/// Backpropagates through the window; gradients flowing into the initial
/// state are dropped.
pub(crate) fn lstm_layer_backward<T: Scalar>(
    layer: &LstmLayer<T>,
    cache: &LstmLayerCache<T>,
    d_out: &Array2<T>,
    grad: &mut LstmLayer<T>,
) -> Array2<T> {
    let one = T::one();
    let d = layer.hidden();
    let steps = cache.gates.len();
    let batch = d_out.nrows() / steps.max(1);
    let mut dax = Array2::<T>::zeros((d_out.nrows(), 4 * d));
    let mut dh_next = Array2::<T>::zeros((batch, d));
    let mut dc = Array2::<T>::zeros((batch, d));
    for t in (0..steps).rev() {
        let rows = s![t * batch..(t + 1) * batch, ..];
        let g = &cache.gates[t];
        let tc = &cache.tanh_c[t];
        let c_prev = &cache.c_prev[t];
        let mut dh = d_out.slice(rows).to_owned();
        dh += &dh_next;
        let mut da = dax.slice_mut(rows);
        for r in 0..batch {
            for j in 0..d {
                let (i, f, o, gg) = (g[[r, j]], g[[r, d + j]], g[[r, 2 * d + j]], g[[r, 3 * d + j]]);
                let tcv = tc[[r, j]];
                let dhv = dh[[r, j]];
                let dcv = dc[[r, j]] + dhv * o * (one - tcv * tcv);
                da[[r, j]] = dcv * gg * i * (one - i);
                da[[r, d + j]] = dcv * c_prev[[r, j]] * f * (one - f);
                da[[r, 2 * d + j]] = dhv * tcv * o * (one - o);
                da[[r, 3 * d + j]] = dcv * i * (one - gg * gg);
                dc[[r, j]] = dcv * f;
            }
        }
        general_mat_mul(one, &cache.h_prev[t].t(), &da, one, &mut grad.w_h);
        dh_next = da.dot(&layer.w_h.t());
        apply_rows(&mut dh_next, cache.h_mask.as_ref());
    }
    general_mat_mul(one, &cache.x.t(), &dax, one, &mut grad.w_x);
    grad.b += &dax.sum_axis(Axis(0));
    let mut dx = dax.dot(&layer.w_x.t());
    apply_rows(&mut dx, cache.in_mask.as_ref());
    dx
}

/// Softmax cross-entropy over rows of `o`. Rows without a target contribute
/// nothing. Returns the summed negative log-likelihood, the number of scored
/// rows and, if requested, `scale * dNLL/dlogits`.
pub(crate) fn softmax_rows<T: Scalar>(
    w: &Array2<T>,
    b: &Array1<T>,
    o: &Array2<T>,
    targets: &[Option<u32>],
    grad_scale: Option<T>,
) -> (f64, usize, Option<Array2<T>>) {
    let mut logits = o.dot(w);
    logits += b;
    let mut loss = 0.0;
    let mut count = 0;
    for (mut row, target) in logits.rows_mut().into_iter().zip(targets) {
        let Some(target) = *target else {
            row.fill(T::zero());
            continue;
        };
        let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter() {
            z += (*v - m).exp();
        }
        let lse = m + z.ln();
        loss += (lse - row[target as usize]).as_f64();
        count += 1;
        if let Some(scale) = grad_scale {
            row.mapv_inplace(|v| (v - lse).exp() * scale);
            row[target as usize] -= scale;
        }
    }
    (loss, count, grad_scale.map(|_| logits))
}

/// Gradients of one softmax negative log-likelihood term.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxGrads<T> {
    pub d_h: Array1<T>,
    pub d_w: Array2<T>,
    pub d_b: Array1<T>,
}

/// `-log softmax(h W + b)[target]` with its gradients.
pub fn softmax_nll<T: Scalar>(h: ArrayView1<'_, T>, target: u32, w: &Array2<T>, b: &Array1<T>) -> Result<(T, SoftmaxGrads<T>)> {
    if h.len() != w.nrows() || b.len() != w.ncols() {
        return Err(Error::InvalidArgument("softmax shapes disagree".into()));
    }
    if target as usize >= w.ncols() {
        return Err(Error::OutOfRange {
            index: target as usize,
            size: w.ncols(),
        });
    }
    let o = h.to_owned().insert_axis(Axis(0));
    let (loss, _, dl) = softmax_rows(w, b, &o, &[Some(target)], Some(T::one()));
    let dl = dl.expect("gradient requested");
    let d_w = o.t().dot(&dl);
    let d_h = dl.dot(&w.t()).row(0).to_owned();
    Ok((
        T::of(loss),
        SoftmaxGrads {
            d_h,
            d_w,
            d_b: dl.row(0).to_owned(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sum_and_concat_examples() {
        let x: Array2<f64> = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(compose(Composition::Sum, x.view(), 0, &[]).unwrap(), array![9.0, 12.0]);
        assert_eq!(
            compose(Composition::Concat, x.view(), 2, &[]).unwrap(),
            array![1.0, 2.0, 3.0, 4.0]
        );
        assert_eq!(
            compose(Composition::Concat, x.view(), 4, &[]).unwrap(),
            array![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.0, 0.0]
        );
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(compose(Composition::Sum, empty.view(), 0, &[]).is_err());
    }

    #[test]
    fn cnn_max_over_time() {
        let x: Array2<f64> = array![[1.0], [-2.0], [3.0]];
        let bank = ConvBank {
            width: 2,
            weight: array![[1.0, 0.0], [1.0, 1.0]],
            bias: array![0.0, -1.0],
        };
        let out = compose(Composition::Cnn, x.view(), 0, &[bank]).unwrap();
        // Windows (1,-2) and (-2,3): feature 0 sums to -1 and 1; feature 1 is the second element minus 1.
        assert!((out[0] - 1.0_f64.tanh()).abs() < 1e-15);
        assert!((out[1] - 2.0_f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn cnn_pads_short_words() {
        let x: Array2<f64> = array![[2.0]];
        let bank = ConvBank {
            width: 3,
            weight: array![[1.0], [1.0], [1.0]],
            bias: array![0.0],
        };
        let out = compose(Composition::Cnn, x.view(), 0, &[bank]).unwrap();
        assert!((out[0] - 2.0_f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn highway_gate_at_init() {
        let d = 3;
        let layer = HighwayLayer {
            w_t: Array2::zeros((d, d)),
            b_t: Array1::from_elem(d, -2.0),
            w_h: Array2::eye(d),
            b_h: Array1::zeros(d),
        };
        let x: Array1<f64> = array![1.0, -1.0, 0.5];
        let (y, gate) = highway_forward(x.view(), &layer).unwrap();
        let t = 0.11920292202211755;
        for j in 0..d {
            assert!((gate[j] - t).abs() < 1e-15);
            let want = t * x[j].max(0.0) + (1.0 - t) * x[j];
            assert!((y[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn lstm_step_by_hand() {
        let layer = LstmLayer {
            w_x: Array2::from_elem((1, 4), 1.0),
            w_h: Array2::zeros((1, 4)),
            b: array![0.0, 0.0, 0.0, 0.0],
        };
        let mut state = LstmState {
            h: vec![Array2::zeros((1, 1))],
            c: vec![Array2::from_elem((1, 1), 0.5)],
        };
        let x: Array2<f64> = array![[0.3]];
        let h = lstm_stack_step(x.view(), std::slice::from_ref(&layer), &mut state).unwrap();
        let s = 1.0 / (1.0 + (-0.3f64).exp());
        let c = s * 0.5 + s * 0.3f64.tanh();
        assert!((state.c[0][[0, 0]] - c).abs() < 1e-15);
        assert!((h[[0, 0]] - s * c.tanh()).abs() < 1e-15);
    }

    #[test]
    fn softmax_nll_uniform_and_gradient() {
        let w = Array2::<f64>::zeros((2, 4));
        let b = Array1::<f64>::zeros(4);
        let (loss, g) = softmax_nll(array![0.3, -0.1].view(), 2, &w, &b).unwrap();
        assert!((loss - 4.0_f64.ln()).abs() < 1e-15);
        assert_eq!(g.d_b, array![0.25, 0.25, -0.75, 0.25]);
        assert!(softmax_nll(array![0.3, -0.1].view(), 4, &w, &b).is_err());

        let w: Array2<f64> = array![[0.2, -0.4, 0.1], [0.5, 0.3, -0.2]];
        let b = array![0.1, 0.0, -0.3];
        let h = array![0.7, -1.2];
        let (_, g) = softmax_nll(h.view(), 1, &w, &b).unwrap();
        let eps = 1e-6;
        for k in 0..2 {
            let mut hp = h.clone();
            hp[k] += eps;
            let mut hm = h.clone();
            hm[k] -= eps;
            let fd = (softmax_nll(hp.view(), 1, &w, &b).unwrap().0 - softmax_nll(hm.view(), 1, &w, &b).unwrap().0) / (2.0 * eps);
            assert!((fd - g.d_h[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn sum_ignores_order_and_concat_does_not() {
        let x: Array2<f64> = array![[1.0, -2.0], [0.5, 4.0], [3.0, 0.25]];
        let y: Array2<f64> = array![[3.0, 0.25], [1.0, -2.0], [0.5, 4.0]];
        assert_eq!(
            compose(Composition::Sum, x.view(), 0, &[]).unwrap(),
            compose(Composition::Sum, y.view(), 0, &[]).unwrap()
        );
        assert_ne!(
            compose(Composition::Concat, x.view(), 3, &[]).unwrap(),
            compose(Composition::Concat, y.view(), 3, &[]).unwrap()
        );
    }

    #[test]
    fn highway_gates_pinned_shut_or_open() {
        let w_h: Array2<f64> = array![[0.5, -1.0], [2.0, 0.25]];
        let x: Array1<f64> = array![0.75, -0.5];
        let mut layer = HighwayLayer {
            w_t: array![[0.3, 0.1], [-0.2, 0.4]],
            b_t: Array1::from_elem(2, f64::NEG_INFINITY),
            w_h: w_h.clone(),
            b_h: array![0.1, -0.1],
        };
        let (y, gate) = highway_forward(x.view(), &layer).unwrap();
        assert_eq!(gate, array![0.0, 0.0]);
        assert_eq!(y, x);

        layer.b_t = Array1::from_elem(2, f64::INFINITY);
        let (y, gate) = highway_forward(x.view(), &layer).unwrap();
        assert_eq!(gate, array![1.0, 1.0]);
        let z = (x.dot(&w_h) + &layer.b_h).mapv(|v| v.max(0.0));
        assert_eq!(y, z);
    }

    #[test]
    fn zero_lstm_stays_at_zero() {
        let layer = LstmLayer {
            w_x: Array2::<f64>::zeros((3, 8)),
            w_h: Array2::zeros((2, 8)),
            b: Array1::zeros(8),
        };
        let layers = vec![layer.clone(), LstmLayer { w_x: Array2::zeros((2, 8)), ..layer }];
        let mut state = LstmState {
            h: vec![Array2::zeros((1, 2)); 2],
            c: vec![Array2::zeros((1, 2)); 2],
        };
        let x: Array2<f64> = array![[0.4, -1.0, 2.0]];
        for _ in 0..3 {
            let h = lstm_stack_step(x.view(), &layers, &mut state).unwrap();
            assert!(h.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forget_gate_at_init_keeps_sigmoid_of_one() {
        let cfg = crate::lm::LmConfig::recipe(
            Composition::Sum,
            crate::corpus::SubwordKind::Chars,
            crate::lm::SizeClass::Small,
            4,
            4,
            2,
        );
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9);
        let p = crate::lm::LmParams::<f64>::init(&cfg, 0.05, 1.0, -2.0, &mut rng).unwrap();
        let d = cfg.d_lm;
        let mut layer = p.lstm[0].clone();
        assert!(layer.b.slice(ndarray::s![d..2 * d]).iter().all(|&v| v == 1.0));
        // Keep only the forget bias so that, with zero input and output, the
        // cell update reduces to c' = f * c.
        for (j, v) in layer.b.iter_mut().enumerate() {
            if !(d..2 * d).contains(&j) {
                *v = 0.0;
            }
        }
        let mut state = LstmState {
            h: vec![Array2::zeros((1, d))],
            c: vec![Array2::ones((1, d))],
        };
        let x = Array2::<f64>::zeros((1, cfg.lstm_input_dim(0)));
        lstm_stack_step(x.view(), std::slice::from_ref(&layer), &mut state).unwrap();
        let f = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((f - 0.7311).abs() < 1e-4);
        assert!(state.c[0].iter().all(|&c| (c - f).abs() < 1e-15));
    }

    #[test]
    fn softmax_saturation_stays_finite() {
        let w: Array2<f64> = array![[30.0, 0.0, 0.0, 0.0]];
        let b = Array1::<f64>::zeros(4);
        let h = array![1.0];
        let (loss, g) = softmax_nll(h.view(), 0, &w, &b).unwrap();
        assert!(loss >= 0.0 && loss < 1e-12);
        assert!((loss - 3.0 * (-30.0f64).exp()).abs() < 1e-14);
        assert!(g.d_w.iter().chain(g.d_b.iter()).all(|v| v.is_finite()));
        let (loss, g) = softmax_nll(h.view(), 1, &w, &b).unwrap();
        assert!((loss - (30.0 + (1.0 + 3.0 * (-30.0f64).exp()).ln())).abs() < 1e-12);
        assert!((g.d_b[0] - 1.0).abs() < 1e-12 && (g.d_b[1] + 1.0).abs() < 1e-12);
    }
}
