//! Layer stack with hand-written forward and backward passes.
//!
//! Distortion attaches to the output of a `Relu` layer and is consumed by
//! the next parameterized layer (dense or conv, with `Flatten` allowed in
//! between). That layer's weight is the `K` of the surrogate objective.

mod checkpoint;
mod forward;
mod loss;
mod optim;
pub mod presets;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::disout::NextLayer;
use crate::error::{config_err, dim_err, Result};
use crate::rng::init_rng;
use crate::tensor::{conv_output_hw, Conv2dGeometry, Scalar, Tensor};

pub use checkpoint::{Checkpoint, Entry, EntryData, CHECKPOINT_MAGIC};
pub use forward::{BatchCache, DistortionSource, FixedStates, Gradients, Mode};
pub use loss::softmax_crossentropy;
pub use optim::Sgd;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: Conv2dGeometry,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Flatten,
    /// Marks the logits; the loss itself lives in [`softmax_crossentropy`].
    SoftmaxCrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Distort this layer's output during training. Only valid on `Relu`.
    pub distort: bool,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        LayerSpec { kind, distort: false }
    }

    pub fn dense(inputs: usize, outputs: usize) -> Self {
        Self::new(LayerKind::Dense { inputs, outputs })
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self::new(LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            geom: Conv2dGeometry::new(stride, padding),
        })
    }

    pub fn relu() -> Self {
        Self::new(LayerKind::Relu)
    }

    pub fn distorted_relu() -> Self {
        LayerSpec {
            kind: LayerKind::Relu,
            distort: true,
        }
    }

    pub fn maxpool(window: usize, stride: usize) -> Self {
        Self::new(LayerKind::MaxPool { window, stride })
    }

    pub fn flatten() -> Self {
        Self::new(LayerKind::Flatten)
    }

    pub fn head() -> Self {
        Self::new(LayerKind::SoftmaxCrossEntropy)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// A distortion attachment point resolved against the layer stack.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Attachment {
    /// Index of the distorted `Relu` layer.
    pub layer: usize,
    /// Index of the layer whose weight consumes the distorted features.
    pub consumer: usize,
    /// Per-sample feature shape at the attachment.
    pub feature_shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Scalar> {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Option<LayerParams<T>>>,
    /// Per-sample output shape of every layer.
    shapes: Vec<Vec<usize>>,
    attachments: Vec<Attachment>,
}

fn output_shape(kind: &LayerKind, input: &[usize], index: usize) -> Result<Vec<usize>> {
    let bad = |what: &str| dim_err!("layer {index} ({kind:?}): {what}, input shape {input:?}");
    match *kind {
        LayerKind::Dense { inputs, outputs } => match input {
            [d] if *d == inputs => Ok(vec![outputs]),
            _ => Err(bad(&format!("expects {inputs} flat features"))),
        },
        LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            geom,
        } => match *input {
            [c, h, w] if c == in_channels => {
                let (oh, ow) = conv_output_hw(h, w, kernel, kernel, geom)?;
                Ok(vec![out_channels, oh, ow])
            }
            _ => Err(bad(&format!("expects {in_channels}×H×W"))),
        },
        LayerKind::MaxPool { window, stride } => match *input {
            [c, h, w] if window <= h && window <= w && window > 0 && stride > 0 => {
                Ok(vec![c, (h - window) / stride + 1, (w - window) / stride + 1])
            }
            _ => Err(bad(&format!("window {window} does not fit"))),
        },
        LayerKind::Flatten => Ok(vec![input.iter().product()]),
        LayerKind::Relu => Ok(input.to_vec()),
        LayerKind::SoftmaxCrossEntropy => match input {
            [c] if *c >= 2 => Ok(input.to_vec()),
            _ => Err(bad("head needs at least two flat class scores")),
        },
    }
}

impl<T: Scalar> Network<T> {
    /// Validates the stack and draws He-normal weights from the init
    /// stream of `seed`. Biases start at zero.
    pub fn new(input_shape: &[usize], layers: Vec<LayerSpec>, bias: bool, seed: u64) -> Result<Self> {
        let mut net = Self::skeleton(input_shape, layers)?;
        let mut rng = init_rng(seed);
        for (i, spec) in net.layers.iter().enumerate() {
            let (shape, fan_in) = match spec.kind {
                LayerKind::Dense { inputs, outputs } => (vec![outputs, inputs], inputs),
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (vec![out_channels, in_channels, kernel, kernel], in_channels * kernel * kernel),
                _ => continue,
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let weight = Tensor::from_fn(&shape, |_| T::from_f64_lossy(std * rng.sample::<f64, _>(StandardNormal)))?;
            let bias = if bias { Some(Tensor::zeros(&[shape[0]])?) } else { None };
            net.params[i] = Some(LayerParams { weight, bias });
        }
        Ok(net)
    }

    /// Validated stack with explicit parameters, one entry per layer.
    pub fn with_params(input_shape: &[usize], layers: Vec<LayerSpec>, params: Vec<Option<LayerParams<T>>>) -> Result<Self> {
        let mut net = Self::skeleton(input_shape, layers)?;
        if params.len() != net.layers.len() {
            return Err(config_err!("{} parameter slots for {} layers", params.len(), net.layers.len()));
        }
        for (i, (spec, p)) in net.layers.iter().zip(&params).enumerate() {
            let expected = match spec.kind {
                LayerKind::Dense { inputs, outputs } => Some(vec![outputs, inputs]),
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => Some(vec![out_channels, in_channels, kernel, kernel]),
                _ => None,
            };
            match (expected, p) {
                (None, None) => {}
                (Some(shape), Some(p)) => {
                    if p.weight.shape() != shape.as_slice() {
                        return Err(dim_err!("layer {i}: weight {:?}, expected {shape:?}", p.weight.shape()));
                    }
                    if let Some(b) = &p.bias {
                        if b.shape() != [shape[0]] {
                            return Err(dim_err!("layer {i}: bias {:?}, expected [{}]", b.shape(), shape[0]));
                        }
                    }
                }
                (Some(_), None) => return Err(config_err!("layer {i} is missing its parameters")),
                (None, Some(_)) => return Err(config_err!("layer {i} takes no parameters")),
            }
        }
        net.params = params;
        Ok(net)
    }

    fn skeleton(input_shape: &[usize], layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(config_err!("network has no layers"));
        }
        match layers.iter().position(|l| l.kind == LayerKind::SoftmaxCrossEntropy) {
            Some(p) if p == layers.len() - 1 => {}
            _ => return Err(config_err!("the softmax cross-entropy head must be the last layer, exactly once")),
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut current = input_shape.to_vec();
        for (i, spec) in layers.iter().enumerate() {
            current = output_shape(&spec.kind, &current, i)?;
            shapes.push(current.clone());
        }
        let mut attachments = Vec::new();
        for (i, spec) in layers.iter().enumerate() {
            if !spec.distort {
                continue;
            }
            if spec.kind != LayerKind::Relu {
                return Err(config_err!("layer {i}: distortion may only attach to a relu output"));
            }
            let consumer = layers[i + 1..]
                .iter()
                .position(|l| l.kind != LayerKind::Flatten)
                .map(|off| i + 1 + off)
                .filter(|&j| matches!(layers[j].kind, LayerKind::Dense { .. } | LayerKind::Conv { .. }))
                .ok_or_else(|| config_err!("layer {i}: distorted features must feed a dense or conv layer"))?;
            attachments.push(Attachment {
                layer: i,
                consumer,
                feature_shape: shapes[i].clone(),
            });
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            params: vec![None; layers.len()],
            layers,
            shapes,
            attachments,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Option<LayerParams<T>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<LayerParams<T>>] {
        &mut self.params
    }

    pub fn output_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn attachments(&self) -> &[Attachment] {
        &self.attachments
    }

    pub fn classes(&self) -> usize {
        self.shapes.last().expect("non-empty")[0]
    }

    /// Weight that consumes the features of `attachment`.
    pub fn next_layer(&self, attachment: &Attachment) -> NextLayer<'_, T> {
        let weight = &self.params[attachment.consumer].as_ref().expect("validated").weight;
        match self.layers[attachment.consumer].kind {
            LayerKind::Conv { geom, .. } => NextLayer::Conv { kernel: weight, geom },
            _ => NextLayer::Dense(weight),
        }
    }

    /// `(name, tensor)` for every parameter, in layer order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            if let Some(p) = p {
                out.push((format!("layers.{i}.weight"), &p.weight));
                if let Some(b) = &p.bias {
                    out.push((format!("layers.{i}.bias"), b));
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp(distort: bool) -> Vec<LayerSpec> {
        vec![
            LayerSpec::dense(4, 8),
            if distort { LayerSpec::distorted_relu() } else { LayerSpec::relu() },
            LayerSpec::dense(8, 3),
            LayerSpec::head(),
        ]
    }

    #[test]
    fn shapes_chain() {
        let net = Network::<f64>::new(&[4], mlp(true), true, 0).unwrap();
        assert_eq!(net.output_shapes(), &[vec![8], vec![8], vec![3], vec![3]]);
        assert_eq!(net.attachments().len(), 1);
        assert_eq!(net.attachments()[0].consumer, 2);
        assert_eq!(net.classes(), 3);
        assert_eq!(net.param_count(), 4 * 8 + 8 + 8 * 3 + 3);
        assert!(Network::<f64>::new(&[5], mlp(false), true, 0).is_err());
    }

    #[test]
    fn conv_stack_shapes() {
        let layers = vec![
            LayerSpec::conv(1, 4, 5, 1, 0),
            LayerSpec::maxpool(2, 2),
            LayerSpec::distorted_relu(),
            LayerSpec::conv(4, 6, 3, 1, 1),
            LayerSpec::relu(),
            LayerSpec::flatten(),
            LayerSpec::dense(6 * 12 * 12, 10),
            LayerSpec::head(),
        ];
        let net = Network::<f32>::new(&[1, 28, 28], layers, false, 0).unwrap();
        assert_eq!(net.output_shapes()[0], vec![4, 24, 24]);
        assert_eq!(net.attachments()[0].feature_shape, vec![4, 12, 12]);
        assert!(matches!(net.next_layer(&net.attachments()[0]), NextLayer::Conv { .. }));
    }

    #[test]
    fn invalid_attachments() {
        let mut layers = mlp(false);
        layers[0].distort = true;
        assert!(Network::<f64>::new(&[4], layers, true, 0).is_err());

        let layers = vec![
            LayerSpec::conv(1, 2, 3, 1, 0),
            LayerSpec::distorted_relu(),
            LayerSpec::maxpool(2, 2),
            LayerSpec::flatten(),
            LayerSpec::dense(2 * 3 * 3, 2),
            LayerSpec::head(),
        ];
        assert!(Network::<f64>::new(&[1, 8, 8], layers, true, 0).is_err());
    }

    #[test]
    fn head_must_be_last() {
        let layers = vec![LayerSpec::dense(4, 3), LayerSpec::head(), LayerSpec::relu()];
        assert!(Network::<f64>::new(&[4], layers, true, 0).is_err());
        assert!(Network::<f64>::new(&[4], vec![LayerSpec::dense(4, 3)], true, 0).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = Network::<f32>::new(&[4], mlp(false), true, 7).unwrap();
        let b = Network::<f32>::new(&[4], mlp(false), true, 7).unwrap();
        let c = Network::<f32>::new(&[4], mlp(false), true, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn explicit_params_are_checked() {
        let eye = Tensor::<f64>::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let layers = vec![LayerSpec::dense(2, 2), LayerSpec::head()];
        let ok = Network::with_params(
            &[2],
            layers.clone(),
            vec![Some(LayerParams { weight: eye.clone(), bias: None }), None],
        );
        assert!(ok.is_ok());
        let bad = Network::with_params(
            &[2],
            layers,
            vec![Some(LayerParams { weight: eye.transpose().unwrap().reshape(&[4, 1]).unwrap(), bias: None }), None],
        );
        assert!(bad.is_err());
    }
}
