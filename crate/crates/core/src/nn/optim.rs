use super::{Gradients, LayerParams, Network};
use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// SGD with heavy-ball momentum and L2 weight decay:
/// `g' = g + wd·θ`, `v ← μ·v + g'`, `θ ← θ − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T: Scalar> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<LayerParams<T>>>,
}

fn step_tensor<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, velocity: &mut Tensor<T>, lr: T, mu: T, wd: T) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(dim_err!("gradient shape {:?} for parameter {:?}", grad.shape(), param.shape()));
    }
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
        if !p.is_finite() {
            return Err(Error::Numeric("parameter became non-finite".into()));
        }
    }
    Ok(())
}

impl<T: Scalar> Sgd<T> {
    pub fn new<U: Scalar>(net: &Network<U>, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) || !(0.0..1.0).contains(&momentum) || weight_decay.is_nan() || weight_decay < 0.0 {
            return Err(config_err!(
                "invalid optimizer settings: lr {lr}, momentum {momentum}, weight decay {weight_decay}"
            ));
        }
        let velocity = net
            .params()
            .iter()
            .map(|p| {
                p.as_ref().map(|p| LayerParams {
                    weight: Tensor::from_parts(p.weight.shape().to_vec(), vec![T::zero(); p.weight.len()]),
                    bias: p.bias.as_ref().map(|b| Tensor::from_parts(b.shape().to_vec(), vec![T::zero(); b.len()])),
                })
            })
            .collect();
        Ok(Sgd {
            lr,
            momentum,
            weight_decay,
            velocity,
        })
    }

    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.params.len() != net.params().len() || self.velocity.len() != net.params().len() {
            return Err(dim_err!("gradient layout does not match the network"));
        }
        let lr = T::from_f64_lossy(self.lr);
        let mu = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        for ((p, g), v) in net.params_mut().iter_mut().zip(&grads.params).zip(&mut self.velocity) {
            match (p, g, v) {
                (None, None, None) => {}
                (Some(p), Some(g), Some(v)) => {
                    step_tensor(&mut p.weight, &g.weight, &mut v.weight, lr, mu, wd)?;
                    match (&mut p.bias, &g.bias, &mut v.bias) {
                        (None, None, None) => {}
                        (Some(pb), Some(gb), Some(vb)) => step_tensor(pb, gb, vb, lr, mu, wd)?,
                        _ => return Err(dim_err!("bias gradient layout does not match the network")),
                    }
                }
                _ => return Err(dim_err!("gradient layout does not match the network")),
            }
        }
        Ok(())
    }

    /// `(name, tensor)` for every velocity buffer, named like the parameters.
    pub fn named_velocity(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, v) in self.velocity.iter().enumerate() {
            if let Some(v) = v {
                out.push((format!("velocity.{i}.weight"), &v.weight));
                if let Some(b) = &v.bias {
                    out.push((format!("velocity.{i}.bias"), b));
                }
            }
        }
        out
    }

    pub(crate) fn velocity_mut(&mut self) -> &mut [Option<LayerParams<T>>] {
        &mut self.velocity
    }
}

#[cfg(test)]
mod tests {
    use super::super::LayerSpec;
    use super::*;

    fn net() -> Network<f64> {
        Network::new(&[2], vec![LayerSpec::dense(2, 2), LayerSpec::head()], true, 1).unwrap()
    }

    fn grads(v: f64) -> Gradients<f64> {
        Gradients {
            params: vec![
                Some(LayerParams {
                    weight: Tensor::full(&[2, 2], v).unwrap(),
                    bias: Some(Tensor::full(&[2], v).unwrap()),
                }),
                None,
            ],
            input: None,
        }
    }

    #[test]
    fn plain_step() {
        let mut n = net();
        let before = n.params()[0].clone().unwrap();
        let mut opt = Sgd::new(&n, 0.1, 0.0, 0.0).unwrap();
        opt.step(&mut n, &grads(2.0)).unwrap();
        let after = n.params()[0].as_ref().unwrap();
        for (a, b) in after.weight.data().iter().zip(before.weight.data()) {
            assert_eq!(*a, b - 0.1 * 2.0);
        }
    }

    #[test]
    fn momentum_and_decay() {
        let mut n = net();
        let w0 = n.params()[0].as_ref().unwrap().weight.data()[0];
        let mut opt = Sgd::new(&n, 0.5, 0.9, 0.01).unwrap();
        opt.step(&mut n, &grads(1.0)).unwrap();
        let v1 = 1.0 + 0.01 * w0;
        let w1 = w0 - 0.5 * v1;
        assert!((n.params()[0].as_ref().unwrap().weight.data()[0] - w1).abs() < 1e-15);
        opt.step(&mut n, &grads(1.0)).unwrap();
        let v2 = 0.9 * v1 + 1.0 + 0.01 * w1;
        let w2 = w1 - 0.5 * v2;
        assert!((n.params()[0].as_ref().unwrap().weight.data()[0] - w2).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_settings_and_layouts() {
        let n = net();
        assert!(Sgd::<f64>::new(&n, 0.0, 0.0, 0.0).is_err());
        assert!(Sgd::<f64>::new(&n, 0.1, 1.0, 0.0).is_err());
        assert!(Sgd::<f64>::new(&n, 0.1, 0.0, -1.0).is_err());
        let mut n = net();
        let mut opt = Sgd::new(&n, 0.1, 0.9, 0.0).unwrap();
        let bad = Gradients { params: vec![None, None], input: None };
        assert!(opt.step(&mut n, &bad).is_err());
        opt.step(&mut n, &grads(f64::MAX)).unwrap();
        assert!(matches!(opt.step(&mut n, &grads(f64::MAX)), Err(Error::Numeric(_))));
    }
}
