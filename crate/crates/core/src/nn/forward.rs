use super::{Attachment, LayerKind, LayerParams, Network};
use crate::disout::{apply_distortion, DistortionState, NextLayer};
use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::{
    conv2d, conv2d_with_cols, input_grad_from_output, kernel_grad_from_cols, maxpool2d, maxpool2d_backward, Im2ColShape,
    PoolIndices, Scalar, Tensor,
};

use super::loss::softmax_crossentropy;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Distortion applied at every attachment.
    Train,
    /// Attachments are the identity.
    Eval,
}

/// Supplies the distortion for each attachment during a training forward pass.
pub trait DistortionSource<T: Scalar> {
    /// `index` counts attachments in layer order; `f` is the clean relu
    /// output and `next` the weight that consumes it.
    fn distortion(
        &mut self,
        index: usize,
        attachment: &Attachment,
        f: &Tensor<T>,
        next: NextLayer<'_, T>,
    ) -> Result<DistortionState<T>>;
}

impl<T, F> DistortionSource<T> for F
where
    T: Scalar,
    F: FnMut(usize, &Attachment, &Tensor<T>, NextLayer<'_, T>) -> Result<DistortionState<T>>,
{
    fn distortion(
        &mut self,
        index: usize,
        attachment: &Attachment,
        f: &Tensor<T>,
        next: NextLayer<'_, T>,
    ) -> Result<DistortionState<T>> {
        self(index, attachment, f, next)
    }
}

/// Precomputed states, one per attachment.
pub struct FixedStates<'a, T: Scalar>(pub &'a [DistortionState<T>]);

impl<T: Scalar> DistortionSource<T> for FixedStates<'_, T> {
    fn distortion(
        &mut self,
        index: usize,
        _attachment: &Attachment,
        f: &Tensor<T>,
        _next: NextLayer<'_, T>,
    ) -> Result<DistortionState<T>> {
        let state = self
            .0
            .get(index)
            .ok_or_else(|| config_err!("no distortion state for attachment {index}"))?;
        if state.mask.shape() != f.shape() || state.epsilon.shape() != f.shape() {
            return Err(dim_err!(
                "distortion state {index} has shape {:?}, features are {:?}",
                state.mask.shape(),
                f.shape()
            ));
        }
        Ok(state.clone())
    }
}

#[derive(Clone, Debug)]
enum LayerCache<T: Scalar> {
    Dense { input: Tensor<T> },
    Conv { cols: Vec<T>, shape: Im2ColShape },
    Relu { output: Tensor<T>, attachment: Option<usize> },
    Pool(PoolIndices),
    Flatten(Vec<usize>),
    Head,
}

/// Everything the backward pass needs from one training forward pass.
#[derive(Clone, Debug)]
pub struct BatchCache<T: Scalar> {
    layers: Vec<LayerCache<T>>,
    pub logits: Tensor<T>,
    /// Distortion used at each attachment, in layer order.
    pub states: Vec<DistortionState<T>>,
    /// Clean relu output at each attachment.
    pub features: Vec<Tensor<T>>,
}

impl<T: Scalar> BatchCache<T> {
    /// Which side of every kink the pass went through: relu on/off per
    /// element and the chosen input of every pooling window. Two passes
    /// with equal patterns lie on the same smooth piece of the loss.
    pub fn kink_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerCache::Relu { output, .. } => out.extend(output.data().iter().map(|&v| usize::from(v > T::zero()))),
                LayerCache::Pool(idx) => out.extend_from_slice(&idx.argmax),
                _ => {}
            }
        }
        out
    }
}

/// Parameter gradients in the layout of [`Network::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T: Scalar> {
    pub params: Vec<Option<LayerParams<T>>>,
    /// Gradient with respect to the network input, when requested.
    pub input: Option<Tensor<T>>,
}

fn add_channel_bias<T: Scalar>(out: &mut Tensor<T>, bias: &Tensor<T>) {
    let channels = bias.len();
    let plane = out.len() / (out.dim(0) * channels);
    for (i, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        let b = bias.data()[i % channels];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_bias_grad<T: Scalar>(grad: &Tensor<T>, channels: usize) -> Tensor<T> {
    let plane = grad.len() / (grad.dim(0) * channels);
    let mut out = vec![T::zero(); channels];
    for (i, chunk) in grad.data().chunks_exact(plane).enumerate() {
        out[i % channels] += chunk.iter().copied().sum::<T>();
    }
    Tensor::from_parts(vec![channels], out)
}

fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

impl<T: Scalar> Network<T> {
    fn check_batch(&self, batch: &Tensor<T>) -> Result<()> {
        if batch.rank() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..] {
            return Err(dim_err!(
                "batch shape {:?} does not match network input N×{:?}",
                batch.shape(),
                self.input_shape
            ));
        }
        Ok(())
    }

    /// Logits for `batch` with every attachment disabled.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for (spec, params) in self.layers.iter().zip(&self.params) {
            x = match spec.kind {
                LayerKind::Dense { .. } => dense_forward(&x, params.as_ref().expect("validated"))?,
                LayerKind::Conv { geom, .. } => {
                    let p = params.as_ref().expect("validated");
                    let mut out = conv2d(&x, &p.weight, geom)?;
                    if let Some(b) = &p.bias {
                        add_channel_bias(&mut out, b);
                    }
                    out
                }
                LayerKind::Relu => relu(&x),
                LayerKind::MaxPool { window, stride } => maxpool2d(&x, window, stride)?.0,
                LayerKind::Flatten => {
                    let n = x.dim(0);
                    let rest = x.row_len();
                    x.reshape(&[n, rest])?
                }
                LayerKind::SoftmaxCrossEntropy => x,
            };
        }
        Ok(x)
    }

    /// Forward pass with optional precomputed distortion states.
    ///
    /// In `Train` mode every attachment needs a state; in `Eval` mode states
    /// must be absent.
    pub fn forward(
        &self,
        batch: &Tensor<T>,
        distortion: Option<&[DistortionState<T>]>,
        mode: Mode,
    ) -> Result<(Tensor<T>, BatchCache<T>)> {
        match distortion {
            Some(states) => self.forward_with(batch, mode, Some(&mut FixedStates(states))),
            None => self.forward_with(batch, mode, None),
        }
    }

    /// Forward pass that asks `source` for each attachment's distortion
    /// once the clean features are known.
    pub fn forward_with(
        &self,
        batch: &Tensor<T>,
        mode: Mode,
        mut source: Option<&mut dyn DistortionSource<T>>,
    ) -> Result<(Tensor<T>, BatchCache<T>)> {
        self.check_batch(batch)?;
        match (mode, source.is_some()) {
            (Mode::Eval, true) => return Err(config_err!("distortion states are not used in eval mode")),
            (Mode::Train, false) if !self.attachments.is_empty() => {
                return Err(config_err!(
                    "training forward pass needs distortion for {} attachment(s)",
                    self.attachments.len()
                ))
            }
            _ => {}
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut states = Vec::new();
        let mut features = Vec::new();
        let mut x = batch.clone();
        for (i, (spec, params)) in self.layers.iter().zip(&self.params).enumerate() {
            let (y, cache) = match spec.kind {
                LayerKind::Dense { .. } => {
                    let y = dense_forward(&x, params.as_ref().expect("validated"))?;
                    (y, LayerCache::Dense { input: x })
                }
                LayerKind::Conv { geom, .. } => {
                    let p = params.as_ref().expect("validated");
                    let (mut y, cols, shape) = conv2d_with_cols(&x, &p.weight, geom)?;
                    if let Some(b) = &p.bias {
                        add_channel_bias(&mut y, b);
                    }
                    (y, LayerCache::Conv { cols, shape })
                }
                LayerKind::Relu => {
                    let f = relu(&x);
                    match (spec.distort, mode, source.as_deref_mut()) {
                        (true, Mode::Train, Some(src)) => {
                            let index = states.len();
                            let attachment = &self.attachments[index];
                            let state = src.distortion(index, attachment, &f, self.next_layer(attachment))?;
                            let y = apply_distortion(&f, &state.mask, &state.epsilon, state.p_effective)?;
                            states.push(state);
                            features.push(f.clone());
                            (
                                y,
                                LayerCache::Relu {
                                    output: f,
                                    attachment: Some(index),
                                },
                            )
                        }
                        _ => (
                            f.clone(),
                            LayerCache::Relu {
                                output: f,
                                attachment: None,
                            },
                        ),
                    }
                }
                LayerKind::MaxPool { window, stride } => {
                    let (y, idx) = maxpool2d(&x, window, stride)?;
                    (y, LayerCache::Pool(idx))
                }
                LayerKind::Flatten => {
                    let shape = x.shape().to_vec();
                    let rest = x.row_len();
                    (x.reshape(&[shape[0], rest])?, LayerCache::Flatten(shape))
                }
                LayerKind::SoftmaxCrossEntropy => (x, LayerCache::Head),
            };
            debug_assert_eq!(y.shape()[1..], self.shapes[i][..]);
            caches.push(cache);
            x = y;
        }
        let cache = BatchCache {
            layers: caches,
            logits: x.clone(),
            states,
            features,
        };
        Ok((x, cache))
    }

    /// Mean cross-entropy of the cached logits and its parameter gradients.
    ///
    /// Distorted positions are treated as fixed: the gradient reaching the
    /// clean features of an attachment is `g∘(1−m)/(1−p)`.
    pub fn backward(&self, cache: &BatchCache<T>, labels: &[usize], input_grad: bool) -> Result<(T, Gradients<T>)> {
        let (loss, probs) = softmax_crossentropy(&cache.logits, labels)?;
        let n = cache.logits.dim(0);
        let classes = cache.logits.dim(1);
        let inv_n = T::one() / T::from_usize(n).expect("batch size fits");
        let mut g = probs;
        for (row, &y) in g.data_mut().chunks_exact_mut(classes).zip(labels) {
            row[y] -= T::one();
            row.iter_mut().for_each(|v| *v *= inv_n);
        }

        let mut grads: Vec<Option<LayerParams<T>>> = vec![None; self.layers.len()];
        for i in (0..self.layers.len()).rev() {
            let need_input = i > 0 || input_grad;
            match (&cache.layers[i], &self.layers[i].kind) {
                (LayerCache::Head, _) => {}
                (LayerCache::Dense { input }, _) => {
                    let p = self.params[i].as_ref().expect("validated");
                    let dw = g.matmul_tn(input)?;
                    let db = p.bias.as_ref().map(|b| channel_bias_grad(&g, b.len()));
                    grads[i] = Some(LayerParams { weight: dw, bias: db });
                    if need_input {
                        g = g.matmul(&p.weight)?;
                    }
                }
                (LayerCache::Conv { cols, shape }, LayerKind::Conv { out_channels, .. }) => {
                    let p = self.params[i].as_ref().expect("validated");
                    let k = *out_channels;
                    let dw = Tensor::from_parts(p.weight.shape().to_vec(), kernel_grad_from_cols(g.data(), cols, k, *shape));
                    let db = p.bias.as_ref().map(|_| channel_bias_grad(&g, k));
                    grads[i] = Some(LayerParams { weight: dw, bias: db });
                    if need_input {
                        let dx = input_grad_from_output(g.data(), p.weight.data(), k, *shape);
                        g = Tensor::from_parts(vec![shape.n, shape.c, shape.h, shape.w], dx);
                    }
                }
                (LayerCache::Relu { output, attachment }, _) => {
                    let keep = attachment.map(|a| {
                        let s = &cache.states[a];
                        (&s.mask, T::from_f64_lossy(1.0 / (1.0 - s.p_effective)))
                    });
                    let data = g.data_mut();
                    match keep {
                        Some((mask, scale)) => {
                            for ((v, &f), &m) in data.iter_mut().zip(output.data()).zip(mask.data()) {
                                *v = if f > T::zero() { *v * (T::one() - m) * scale } else { T::zero() };
                            }
                        }
                        None => {
                            for (v, &f) in data.iter_mut().zip(output.data()) {
                                if f <= T::zero() {
                                    *v = T::zero();
                                }
                            }
                        }
                    }
                }
                (LayerCache::Pool(idx), _) => g = maxpool2d_backward(&g, idx)?,
                (LayerCache::Flatten(shape), _) => g = g.reshape(shape)?,
                (LayerCache::Conv { .. }, _) => unreachable!("conv cache on a non-conv layer"),
            }
            if !need_input {
                break;
            }
        }
        let input = if input_grad { Some(g.finite()?) } else { None };
        for p in grads.iter().flatten() {
            if p.weight.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite weight gradient".into()));
            }
        }
        Ok((loss, Gradients { params: grads, input }))
    }
}

fn dense_forward<T: Scalar>(x: &Tensor<T>, p: &LayerParams<T>) -> Result<Tensor<T>> {
    let mut y = x.matmul_nt(&p.weight)?;
    if let Some(b) = &p.bias {
        for row in y.data_mut().chunks_exact_mut(b.len()) {
            row.iter_mut().zip(b.data()).for_each(|(v, &bb)| *v += bb);
        }
    }
    y.finite()
}
