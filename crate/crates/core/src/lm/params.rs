use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayD, ArrayViewD, ArrayViewMutD, IxDyn};
use rand::Rng;
use serde::Serialize;

use super::LmConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PATLMCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Convolution filters of one width: `weight` is `(width * d_x) x depth`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBank<T> {
    pub width: usize,
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

/// `y = t * relu(x W_H + b_H) + (1 - t) * x` with `t = sigmoid(x W_T + b_T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HighwayLayer<T> {
    pub w_t: Array2<T>,
    pub b_t: Array1<T>,
    pub w_h: Array2<T>,
    pub b_h: Array1<T>,
}

/// Gate blocks are laid out `[input, forget, output, candidate]` along the
/// columns of `w_x`, `w_h` and `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer<T> {
    pub w_x: Array2<T>,
    pub w_h: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Scalar> LstmLayer<T> {
    pub fn hidden(&self) -> usize {
        self.w_h.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmParams<T> {
    pub embedding: Array2<T>,
    pub conv: Vec<ConvBank<T>>,
    pub projection: Option<(Array2<T>, Array1<T>)>,
    pub highway: Vec<HighwayLayer<T>>,
    pub lstm: Vec<LstmLayer<T>>,
    pub softmax_w: Array2<T>,
    pub softmax_b: Array1<T>,
}

/// Parameter counts, total and per module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub modules: BTreeMap<String, usize>,
}

impl<T: Scalar> LmParams<T> {
    pub fn zeros(cfg: &LmConfig) -> Self {
        let z2 = |r, c| Array2::<T>::zeros((r, c));
        let z1 = |n| Array1::<T>::zeros(n);
        let conv = match cfg.composition {
            super::Composition::Cnn => cfg
                .cnn_widths
                .iter()
                .zip(&cfg.cnn_depths)
                .map(|(&w, &h)| ConvBank {
                    width: w,
                    weight: z2(w * cfg.d_x, h),
                    bias: z1(h),
                })
                .collect(),
            _ => Vec::new(),
        };
        let projection = cfg
            .has_projection()
            .then(|| (z2(cfg.composed_dim(), cfg.d_hw), z1(cfg.d_hw)));
        let highway = (0..cfg.highway_layers)
            .map(|_| HighwayLayer {
                w_t: z2(cfg.d_hw, cfg.d_hw),
                b_t: z1(cfg.d_hw),
                w_h: z2(cfg.d_hw, cfg.d_hw),
                b_h: z1(cfg.d_hw),
            })
            .collect();
        let lstm = (0..cfg.lstm_layers)
            .map(|l| LstmLayer {
                w_x: z2(cfg.lstm_input_dim(l), 4 * cfg.d_lm),
                w_h: z2(cfg.d_lm, 4 * cfg.d_lm),
                b: z1(4 * cfg.d_lm),
            })
            .collect();
        LmParams {
            embedding: z2(cfg.input_size, cfg.d_x),
            conv,
            projection,
            highway,
            lstm,
            softmax_w: z2(cfg.d_lm, cfg.vocab_size),
            softmax_b: z1(cfg.vocab_size),
        }
    }

    /// Uniform `[-range, range]` everywhere, then LSTM forget-gate biases set
    /// to `forget_bias` and highway transform biases to `transform_bias`.
    pub fn init<R: Rng>(
        cfg: &LmConfig,
        range: f64,
        forget_bias: f64,
        transform_bias: f64,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if !(range.is_finite() && range >= 0.0) {
            return Err(Error::InvalidArgument(format!("init range {range}")));
        }
        let mut p = Self::zeros(cfg);
        for (_, mut t) in p.tensors_mut() {
            t.mapv_inplace(|_| T::of(rng.random_range(-range..=range)));
        }
        for layer in &mut p.highway {
            layer.b_t.fill(T::of(transform_bias));
        }
        for layer in &mut p.lstm {
            let d = layer.hidden();
            layer.b.slice_mut(ndarray::s![d..2 * d]).fill(T::of(forget_bias));
        }
        Ok(p)
    }

    /// Every tensor with its stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = vec![("embedding".to_string(), self.embedding.view().into_dyn())];
        for (i, b) in self.conv.iter().enumerate() {
            out.push((format!("conv.{i}.weight"), b.weight.view().into_dyn()));
            out.push((format!("conv.{i}.bias"), b.bias.view().into_dyn()));
        }
        if let Some((w, b)) = &self.projection {
            out.push(("projection.weight".into(), w.view().into_dyn()));
            out.push(("projection.bias".into(), b.view().into_dyn()));
        }
        for (i, l) in self.highway.iter().enumerate() {
            out.push((format!("highway.{i}.transform_weight"), l.w_t.view().into_dyn()));
            out.push((format!("highway.{i}.transform_bias"), l.b_t.view().into_dyn()));
            out.push((format!("highway.{i}.hidden_weight"), l.w_h.view().into_dyn()));
            out.push((format!("highway.{i}.hidden_bias"), l.b_h.view().into_dyn()));
        }
        for (i, l) in self.lstm.iter().enumerate() {
            out.push((format!("lstm.{i}.input_weight"), l.w_x.view().into_dyn()));
            out.push((format!("lstm.{i}.recurrent_weight"), l.w_h.view().into_dyn()));
            out.push((format!("lstm.{i}.bias"), l.b.view().into_dyn()));
        }
        out.push(("softmax.weight".into(), self.softmax_w.view().into_dyn()));
        out.push(("softmax.bias".into(), self.softmax_b.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = vec![("embedding".to_string(), self.embedding.view_mut().into_dyn())];
        for (i, b) in self.conv.iter_mut().enumerate() {
            out.push((format!("conv.{i}.weight"), b.weight.view_mut().into_dyn()));
            out.push((format!("conv.{i}.bias"), b.bias.view_mut().into_dyn()));
        }
        if let Some((w, b)) = &mut self.projection {
            out.push(("projection.weight".into(), w.view_mut().into_dyn()));
            out.push(("projection.bias".into(), b.view_mut().into_dyn()));
        }
        for (i, l) in self.highway.iter_mut().enumerate() {
            out.push((format!("highway.{i}.transform_weight"), l.w_t.view_mut().into_dyn()));
            out.push((format!("highway.{i}.transform_bias"), l.b_t.view_mut().into_dyn()));
            out.push((format!("highway.{i}.hidden_weight"), l.w_h.view_mut().into_dyn()));
            out.push((format!("highway.{i}.hidden_bias"), l.b_h.view_mut().into_dyn()));
        }
        for (i, l) in self.lstm.iter_mut().enumerate() {
            out.push((format!("lstm.{i}.input_weight"), l.w_x.view_mut().into_dyn()));
            out.push((format!("lstm.{i}.recurrent_weight"), l.w_h.view_mut().into_dyn()));
            out.push((format!("lstm.{i}.bias"), l.b.view_mut().into_dyn()));
        }
        out.push(("softmax.weight".into(), self.softmax_w.view_mut().into_dyn()));
        out.push(("softmax.bias".into(), self.softmax_b.view_mut().into_dyn()));
        out
    }

    pub fn count(&self) -> ParamCount {
        let mut modules = BTreeMap::new();
        let mut total = 0;
        for (name, t) in self.tensors() {
            let module = name.split('.').next().unwrap_or(&name).to_string();
            *modules.entry(module).or_insert(0) += t.len();
            total += t.len();
        }
        ParamCount { total, modules }
    }

    pub fn fill_zero(&mut self) {
        for (_, mut t) in self.tensors_mut() {
            t.fill(T::zero());
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, t)| t.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
            .sum()
    }

    pub fn scale(&mut self, a: T) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * a);
        }
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: T, other: &Self) {
        for ((_, mut x), (_, y)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            x.scaled_add(a, &y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Same values in another precision.
    pub fn cast<U: Scalar>(&self, cfg: &LmConfig) -> LmParams<U> {
        let mut out = LmParams::<U>::zeros(cfg);
        for ((_, mut dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            dst.zip_mut_with(&src, |d, &s| *d = U::of(s.as_f64()));
        }
        out
    }
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_bytes<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(get_bytes::<4>(r)?))
}

fn get_vec(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

/// Binary checkpoint layout, all integers little-endian:
///
/// ```text
/// magic "PATLMCKP" | u32 version | u8 dtype (0 = f32, 1 = f64)
/// u32 config length | config JSON
/// u32 tensor count
/// per tensor: u32 name length | name | u32 ndim | u64 dims[ndim] | values
/// ```
pub fn write_checkpoint<T: Scalar, W: Write>(mut w: W, cfg: &LmConfig, params: &LmParams<T>) -> Result<()> {
    let io = |e| Error::io("<checkpoint>", e);
    let config = serde_json::to_vec(cfg).map_err(|e| Error::Format(e.to_string()))?;
    let tensors = params.tensors();
    let mut run = || -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        put_u32(&mut w, CHECKPOINT_VERSION)?;
        w.write_all(&[T::DTYPE])?;
        put_u32(&mut w, config.len() as u32)?;
        w.write_all(&config)?;
        put_u32(&mut w, tensors.len() as u32)?;
        for (name, t) in &tensors {
            put_u32(&mut w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            put_u32(&mut w, t.ndim() as u32)?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.iter() {
                if T::DTYPE == 0 {
                    w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
                } else {
                    w.write_all(&v.as_f64().to_le_bytes())?;
                }
            }
        }
        w.flush()
    };
    run().map_err(io)
}

/// Reads a checkpoint written in either precision into `T`.
pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<(LmConfig, LmParams<T>)> {
    let magic = get_bytes::<8>(&mut r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let version = get_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let [dtype] = get_bytes::<1>(&mut r)?;
    let width = match dtype {
        0 => 4,
        1 => 8,
        d => return Err(Error::Format(format!("unknown dtype tag {d}"))),
    };
    let n = get_u32(&mut r)? as usize;
    let cfg: LmConfig =
        serde_json::from_slice(&get_vec(&mut r, n)?).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    cfg.validate()?;
    let mut stored: BTreeMap<String, ArrayD<T>> = BTreeMap::new();
    let count = get_u32(&mut r)?;
    for _ in 0..count {
        let n = get_u32(&mut r)? as usize;
        let name = String::from_utf8(get_vec(&mut r, n)?).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let ndim = get_u32(&mut r)? as usize;
        if ndim > 4 {
            return Err(Error::Format(format!("tensor {name} has {ndim} dimensions")));
        }
        let dims: Vec<usize> = (0..ndim)
            .map(|_| get_bytes::<8>(&mut r).map(|b| u64::from_le_bytes(b) as usize))
            .collect::<Result<_>>()?;
        let len = dims.iter().product::<usize>();
        let raw = get_vec(&mut r, len * width)?;
        let values: Vec<T> = raw
            .chunks_exact(width)
            .map(|c| {
                if width == 4 {
                    T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64)
                } else {
                    T::of(f64::from_le_bytes(c.try_into().unwrap()))
                }
            })
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), values).map_err(|e| Error::Format(e.to_string()))?;
        stored.insert(name, arr);
    }
    let mut params = LmParams::<T>::zeros(&cfg);
    let mut used = 0;
    for (name, mut dst) in params.tensors_mut() {
        let src = stored
            .get(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
        if src.shape() != dst.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        dst.assign(src);
        used += 1;
    }
    if used != stored.len() {
        return Err(Error::Format("checkpoint has unexpected tensors".into()));
    }
    Ok((cfg, params))
}
