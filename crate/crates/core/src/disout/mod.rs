//! Feature-map distortion.
//!
//! At an attachment point the clean feature batch `f` is replaced by
//! `f̂ = (f − m∘ε) / (1 − p)`, where `m` is a binary mask (1 = distorted)
//! and `ε` is a distortion that starts at `f` (which makes the result plain
//! dropout) and is then moved by gradient steps that lower a Rademacher
//! complexity surrogate of the next layer's pre-activation.
//!
//! The surrogate and its gradients are defined on the unscaled map
//! `f − m∘ε`; the `1/(1 − p)` factor belongs to the forward pass only.

mod conv;
mod fc;
mod mask;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{config_err, dim_err, Result};
use crate::rng::RunRng;
use crate::tensor::{Conv2dGeometry, Scalar, Tensor};

pub use conv::{approx_grad_conv, erc_surrogate_conv, exact_grad_conv, kernel_max_conv};
pub use fc::{approx_grad_fc, erc_surrogate_fc, exact_grad_fc, signed_feature_sum};
pub use mask::{block_seed_rate, component_sizes, sample_block_mask, sample_element_mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskKind {
    Element,
    Block,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GradMode {
    Exact,
    Approx,
}

impl std::str::FromStr for GradMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "exact" => Ok(GradMode::Exact),
            "approx" => Ok(GradMode::Approx),
            other => Err(format!("unknown grad mode `{other}` (expected exact or approx)")),
        }
    }
}

impl GradMode {
    pub fn name(self) -> &'static str {
        match self {
            GradMode::Exact => "exact",
            GradMode::Approx => "approx",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistortionConfig {
    /// Target drop probability, reached after the ramp.
    pub p_target: f64,
    /// Step length, multiplied by the feature standard deviation at use.
    pub gamma: f64,
    pub lambda: f64,
    pub block_size: usize,
    pub mask_kind: MaskKind,
    /// Distortion updates per weight update.
    pub steps_per_batch: usize,
    /// Fraction of all iterations over which `p` ramps up from 0.
    pub ramp_fraction: f64,
}

impl Default for DistortionConfig {
    fn default() -> Self {
        DistortionConfig {
            p_target: 0.1,
            gamma: 1.0,
            lambda: 0.1,
            block_size: 3,
            mask_kind: MaskKind::Element,
            steps_per_batch: 1,
            ramp_fraction: 1.0,
        }
    }
}

impl DistortionConfig {
    /// Checks the ranges, and for block masks that `block_size` fits every
    /// `feature_hw` it will be applied to.
    pub fn validate(&self, feature_hw: &[(usize, usize)]) -> Result<()> {
        if !(0.0..1.0).contains(&self.p_target) {
            return Err(config_err!("disout.p_target = {} outside [0, 1)", self.p_target));
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(config_err!("disout.gamma = {} must be non-negative", self.gamma));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(config_err!("disout.lambda = {} must be non-negative", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.ramp_fraction) {
            return Err(config_err!("disout.ramp_fraction = {} outside [0, 1]", self.ramp_fraction));
        }
        if self.steps_per_batch == 0 {
            return Err(config_err!("disout.steps_per_batch must be at least 1"));
        }
        if self.mask_kind == MaskKind::Block {
            if self.block_size == 0 {
                return Err(config_err!("disout.block_size must be positive"));
            }
            for &(h, w) in feature_hw {
                if self.block_size > h.min(w) {
                    return Err(config_err!(
                        "disout.block_size = {} exceeds the {h}x{w} feature map it attaches to",
                        self.block_size
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Linear ramp of the drop probability: 0 at `iter = 0`, `p_target` from
/// `ramp_fraction · total_iters` on.
pub fn ramp_p(iter: usize, total_iters: usize, cfg: &DistortionConfig) -> f64 {
    let span = cfg.ramp_fraction * total_iters as f64;
    if span <= 0.0 {
        return cfg.p_target;
    }
    cfg.p_target * (iter as f64 / span).min(1.0)
}

/// Rademacher signs, one per sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Signs(Vec<i8>);

impl Signs {
    pub fn sample<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        Signs((0..n).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect())
    }

    /// Panics if any entry is not ±1.
    pub fn from_vec(v: Vec<i8>) -> Self {
        assert!(v.iter().all(|&s| s == 1 || s == -1), "signs must be ±1");
        Signs(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }

    pub fn value<T: Scalar>(&self, i: usize) -> T {
        if self.0[i] > 0 {
            T::one()
        } else {
            -T::one()
        }
    }
}

/// One evaluation of the surrogate objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateValue<T> {
    pub sup_term: T,
    pub penalty_term: T,
    /// Maximizing row (dense) or output channel (conv).
    pub selected: usize,
}

impl<T: Scalar> SurrogateValue<T> {
    pub fn total(&self) -> T {
        self.sup_term + self.penalty_term
    }
}

/// Surrogate before and after the distortion update of one mini-batch.
/// `sup_term` and `penalty_term` decompose `t_after`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErcReport {
    pub layer: usize,
    pub t_before: f64,
    pub t_after: f64,
    pub sup_term: f64,
    pub penalty_term: f64,
}

/// Auxiliary noise drawn for the randomized gradients.
#[derive(Clone, Debug, PartialEq)]
pub enum AuxSample<T: Scalar> {
    None,
    Dense { u: Tensor<T> },
    Conv { s_prime: Tensor<T>, u: Tensor<T> },
}

#[derive(Clone, Debug)]
pub struct DistortionState<T: Scalar> {
    pub mask: Tensor<T>,
    pub epsilon: Tensor<T>,
    pub sigma: Signs,
    /// Noise of the last update step.
    pub aux: AuxSample<T>,
    pub p_effective: f64,
}

impl<T: Scalar> DistortionState<T> {
    /// Plain dropout: `ε = f`, no updates.
    pub fn dropout(f: &Tensor<T>, mask: Tensor<T>, sigma: Signs, p_effective: f64) -> Self {
        DistortionState {
            mask,
            epsilon: init_distortion(f),
            sigma,
            aux: AuxSample::None,
            p_effective,
        }
    }
}

pub(crate) fn penalty_term<T: Scalar>(epsilon: &Tensor<T>, lambda: T, n: usize) -> T {
    lambda * epsilon.squared_norm() / T::from_usize(2 * n).expect("batch size fits")
}

/// Initial distortion for a fresh mini-batch: a copy of the features.
pub fn init_distortion<T: Scalar>(f: &Tensor<T>) -> Tensor<T> {
    f.clone()
}

/// `f − m∘ε`, the map the surrogate is evaluated on.
pub fn distorted_features<T: Scalar>(f: &Tensor<T>, mask: &Tensor<T>, epsilon: &Tensor<T>) -> Result<Tensor<T>> {
    if f.shape() != mask.shape() || f.shape() != epsilon.shape() {
        return Err(dim_err!(
            "distortion shapes differ: features {:?}, mask {:?}, epsilon {:?}",
            f.shape(),
            mask.shape(),
            epsilon.shape()
        ));
    }
    let data = f
        .data()
        .iter()
        .zip(mask.data())
        .zip(epsilon.data())
        .map(|((&x, &m), &e)| x - m * e)
        .collect();
    Tensor::new(f.shape(), data)
}

/// Train-time distorted features `(f − m∘ε) / (1 − p)`.
pub fn apply_distortion<T: Scalar>(
    f: &Tensor<T>,
    mask: &Tensor<T>,
    epsilon: &Tensor<T>,
    p_effective: f64,
) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p_effective) {
        return Err(config_err!("cannot rescale with drop probability {p_effective}"));
    }
    let keep = T::from_f64_lossy(1.0 - p_effective);
    let data = f
        .data()
        .iter()
        .zip(mask.data())
        .zip(epsilon.data())
        .map(|((&x, &m), &e)| (x - m * e) / keep);
    if f.shape() != mask.shape() || f.shape() != epsilon.shape() {
        return Err(dim_err!("apply_distortion: shapes of f, mask and epsilon differ"));
    }
    Tensor::new(f.shape(), data.collect())
}

/// One descent step `ε − (γ·std)·grad`.
pub fn update_distortion<T: Scalar>(epsilon: &Tensor<T>, grad: &Tensor<T>, gamma: T, feature_std: T) -> Result<Tensor<T>> {
    let step = gamma * feature_std;
    if epsilon.shape() != grad.shape() {
        return Err(dim_err!("update_distortion: gradient shape differs from epsilon"));
    }
    let data = epsilon
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&e, &g)| e - step * g)
        .collect();
    Tensor::new(epsilon.shape(), data)
}

/// Weight that consumes the distorted features.
#[derive(Clone, Copy, Debug)]
pub enum NextLayer<'a, T: Scalar> {
    Dense(&'a Tensor<T>),
    Conv {
        kernel: &'a Tensor<T>,
        geom: Conv2dGeometry,
    },
}

impl<T: Scalar> NextLayer<'_, T> {
    pub fn surrogate(&self, distorted: &Tensor<T>, sigma: &Signs, epsilon: &Tensor<T>, lambda: T) -> Result<SurrogateValue<T>> {
        match *self {
            NextLayer::Dense(k) => erc_surrogate_fc(k, distorted, sigma, epsilon, lambda),
            NextLayer::Conv { kernel, geom } => erc_surrogate_conv(kernel, geom, distorted, sigma, epsilon, lambda),
        }
    }

    pub fn exact_grad(
        &self,
        distorted: &Tensor<T>,
        sigma: &Signs,
        mask: &Tensor<T>,
        epsilon: &Tensor<T>,
        lambda: T,
    ) -> Result<Tensor<T>> {
        match *self {
            NextLayer::Dense(k) => exact_grad_fc(k, distorted, sigma, mask, epsilon, lambda),
            NextLayer::Conv { kernel, geom } => exact_grad_conv(kernel, geom, distorted, sigma, mask, epsilon, lambda),
        }
    }

    /// Draws fresh noise from `rng` and evaluates the randomized gradient.
    pub fn approx_grad<R: Rng + ?Sized>(
        &self,
        sigma: &Signs,
        mask: &Tensor<T>,
        epsilon: &Tensor<T>,
        lambda: T,
        rng: &mut R,
    ) -> Result<(Tensor<T>, AuxSample<T>)> {
        match *self {
            NextLayer::Dense(k) => {
                let u = sample_normal(&[epsilon.row_len()], rng)?;
                let g = approx_grad_fc(&k.column_max()?, sigma, &u, mask, epsilon, lambda)?;
                Ok((g, AuxSample::Dense { u }))
            }
            NextLayer::Conv { kernel, geom } => {
                let s_prime = sample_signs(&[kernel.dim(2), kernel.dim(3)], rng)?;
                let u = sample_normal(&epsilon.shape()[1..], rng)?;
                let g = approx_grad_conv(kernel, geom, sigma, &s_prime, &u, mask, epsilon, lambda)?;
                Ok((g, AuxSample::Conv { s_prime, u }))
            }
        }
    }
}

pub fn sample_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor<T>> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
}

pub fn sample_signs<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor<T>> {
    Tensor::from_fn(shape, |_| if rng.gen::<bool>() { T::one() } else { -T::one() })
}

/// How a mini-batch's distortion is produced.
#[derive(Clone, Debug, PartialEq)]
pub struct DistortionPlan {
    pub cfg: DistortionConfig,
    /// `false` keeps `ε = f` (dropout / DropBlock), `true` runs the
    /// surrogate descent steps.
    pub learned: bool,
    pub grad_mode: GradMode,
}

/// Builds the distortion for one attachment point and mini-batch.
///
/// Draw order: mask from `rng.mask`, signs from `rng.sigma`, then per update
/// step (learned and approximate only) noise from `rng.aux`. Dropout and
/// learned distortion therefore see the same masks and signs for the same
/// seed.
pub fn generate_distortion<T: Scalar>(
    f: &Tensor<T>,
    next: &NextLayer<'_, T>,
    plan: &DistortionPlan,
    p_effective: f64,
    layer: usize,
    rng: &mut RunRng,
) -> Result<(DistortionState<T>, ErcReport)> {
    let cfg = &plan.cfg;
    let mask = match cfg.mask_kind {
        MaskKind::Element => sample_element_mask(f.shape(), p_effective, &mut rng.mask)?,
        MaskKind::Block => sample_block_mask(f.shape(), p_effective, cfg.block_size, &mut rng.mask)?,
    };
    let sigma = Signs::sample(f.dim(0), &mut rng.sigma);
    let mut state = DistortionState::dropout(f, mask, sigma, p_effective);
    let lambda = T::from_f64_lossy(cfg.lambda);

    let before = next.surrogate(&distorted_features(f, &state.mask, &state.epsilon)?, &state.sigma, &state.epsilon, lambda)?;
    let mut after = before;
    if plan.learned {
        let gamma = T::from_f64_lossy(cfg.gamma);
        let std = f.std();
        for _ in 0..cfg.steps_per_batch {
            let grad = match plan.grad_mode {
                GradMode::Exact => {
                    let d = distorted_features(f, &state.mask, &state.epsilon)?;
                    next.exact_grad(&d, &state.sigma, &state.mask, &state.epsilon, lambda)?
                }
                GradMode::Approx => {
                    let (g, aux) = next.approx_grad(&state.sigma, &state.mask, &state.epsilon, lambda, &mut rng.aux)?;
                    state.aux = aux;
                    g
                }
            };
            state.epsilon = update_distortion(&state.epsilon, &grad, gamma, std)?;
        }
        let d = distorted_features(f, &state.mask, &state.epsilon)?;
        after = next.surrogate(&d, &state.sigma, &state.epsilon, lambda)?;
    }
    let to64 = |v: T| v.to_f64().unwrap_or(f64::NAN);
    Ok((
        state,
        ErcReport {
            layer,
            t_before: to64(before.total()),
            t_after: to64(after.total()),
            sup_term: to64(after.sup_term),
            penalty_term: to64(after.penalty_term),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(p: f64, ramp: f64) -> DistortionConfig {
        DistortionConfig {
            p_target: p,
            ramp_fraction: ramp,
            ..Default::default()
        }
    }

    #[test]
    fn ramp_is_linear_then_flat() {
        assert_eq!(ramp_p(0, 100, &cfg(0.3, 1.0)), 0.0);
        assert_eq!(ramp_p(100, 100, &cfg(0.3, 1.0)), 0.3);
        assert!((ramp_p(25, 100, &cfg(0.1, 0.5)) - 0.05).abs() < 1e-15);
        assert_eq!(ramp_p(80, 100, &cfg(0.1, 0.5)), 0.1);
        assert_eq!(ramp_p(0, 100, &cfg(0.2, 0.0)), 0.2);
    }

    #[test]
    fn init_copies_features() {
        let f = Tensor::<f64>::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(init_distortion(&f).data(), &[1.0, 2.0, 3.0]);
        let z = Tensor::<f64>::zeros(&[2, 2]).unwrap();
        let m = Tensor::ones(&[2, 2]).unwrap();
        let out = apply_distortion(&z, &m, &init_distortion(&z), 0.0).unwrap();
        assert!(out.bit_eq(&z));
    }

    #[test]
    fn apply_cases() {
        let f = Tensor::<f64>::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let m = Tensor::new(&[3], vec![1.0, 0.0, 1.0]).unwrap();
        assert_eq!(apply_distortion(&f, &m, &f, 0.0).unwrap().data(), &[0.0, 2.0, 0.0]);

        let none = Tensor::zeros(&[3]).unwrap();
        assert!(apply_distortion(&f, &none, &f, 0.0).unwrap().bit_eq(&f));
        assert_eq!(apply_distortion(&f, &none, &f, 0.5).unwrap().data(), &[2.0, 4.0, 6.0]);

        let f = Tensor::<f64>::new(&[1], vec![2.0]).unwrap();
        let m = Tensor::ones(&[1]).unwrap();
        let e = Tensor::new(&[1], vec![0.5]).unwrap();
        assert_eq!(apply_distortion(&f, &m, &e, 0.5).unwrap().data(), &[3.0]);
        assert!(apply_distortion(&f, &m, &e, 1.0).is_err());
    }

    #[test]
    fn update_edge_cases() {
        let e = Tensor::<f64>::new(&[2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        assert!(update_distortion(&e, &g, 0.0, 2.0).unwrap().bit_eq(&e));
        let zero = Tensor::zeros(&[2]).unwrap();
        assert!(update_distortion(&e, &zero, 5.0, 2.0).unwrap().bit_eq(&e));
        assert_eq!(update_distortion(&e, &g, 0.5, 2.0).unwrap().data(), &[-2.0, -5.0]);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0.1, 1.0).validate(&[]).is_ok());
        assert!(cfg(1.0, 1.0).validate(&[]).is_err());
        assert!(cfg(0.1, 1.5).validate(&[]).is_err());
        let block = DistortionConfig {
            mask_kind: MaskKind::Block,
            block_size: 6,
            ..Default::default()
        };
        assert!(block.validate(&[(8, 8)]).is_ok());
        assert!(block.validate(&[(8, 8), (4, 4)]).is_err());
        let neg = DistortionConfig {
            gamma: -1.0,
            ..Default::default()
        };
        assert!(neg.validate(&[]).is_err());
    }

    #[test]
    fn signs_are_plus_minus_one() {
        let s = Signs::sample(1000, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(s.as_slice().iter().all(|&v| v == 1 || v == -1));
        let pos = s.as_slice().iter().filter(|&&v| v == 1).count();
        assert!((400..600).contains(&pos));
    }

    #[test]
    fn fixed_plan_is_dropout() {
        let mut rng = RunRng::new(3);
        let f = sample_normal::<f64, _>(&[4, 6], &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap()
            .map(|v| v.max(0.0))
            .unwrap();
        let k = Tensor::ones(&[2, 6]).unwrap();
        let plan = DistortionPlan {
            cfg: cfg(0.5, 1.0),
            learned: false,
            grad_mode: GradMode::Exact,
        };
        let (state, report) = generate_distortion(&f, &NextLayer::Dense(&k), &plan, 0.5, 0, &mut rng).unwrap();
        assert!(state.epsilon.bit_eq(&f));
        assert_eq!(report.t_before, report.t_after);
        let out = apply_distortion(&f, &state.mask, &state.epsilon, 0.5).unwrap();
        for (o, m) in out.data().iter().zip(state.mask.data()) {
            if *m == 1.0 {
                assert_eq!(*o, 0.0);
            }
        }
    }

    #[test]
    fn learned_plan_lowers_the_surrogate() {
        let mut rng = RunRng::new(4);
        let mut data_rng = ChaCha8Rng::seed_from_u64(2);
        let f = sample_normal::<f64, _>(&[8, 12], &mut data_rng).unwrap().map(|v| v.max(0.0)).unwrap();
        let k = sample_normal::<f64, _>(&[5, 12], &mut data_rng).unwrap();
        let plan = DistortionPlan {
            cfg: DistortionConfig {
                p_target: 0.5,
                gamma: 0.01,
                ..Default::default()
            },
            learned: true,
            grad_mode: GradMode::Exact,
        };
        let (_, report) = generate_distortion(&f, &NextLayer::Dense(&k), &plan, 0.5, 0, &mut rng).unwrap();
        assert!(report.t_after < report.t_before, "{report:?}");
        assert!((report.sup_term + report.penalty_term - report.t_after).abs() < 1e-12);
    }
}
