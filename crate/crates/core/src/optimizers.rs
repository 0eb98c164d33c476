//! Forward update and inverse (undo) kernels.
//!
//! Every kernel keeps exactly one cached gradient per block (the one consumed
//! by the most recent step). Undo recomputes bias corrections from the step
//! counter instead of storing them. LAMB additionally saves the trust ratio it
//! applied, one scalar per step, which is the only non-linear quantity that
//! cannot be recovered from the post-step state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_norm_slice, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(alias = "sgd")]
    Sgd,
    #[serde(alias = "sgdm", alias = "SGDM")]
    SgdMomentum,
    #[serde(alias = "adam")]
    Adam,
    #[serde(alias = "adamw")]
    AdamW,
    #[serde(alias = "lamb", alias = "LAMB")]
    Lamb,
    #[serde(alias = "amsgrad")]
    AmsGrad,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 6] = [
        OptimizerKind::Sgd,
        OptimizerKind::SgdMomentum,
        OptimizerKind::Adam,
        OptimizerKind::AdamW,
        OptimizerKind::Lamb,
        OptimizerKind::AmsGrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "SGD",
            OptimizerKind::SgdMomentum => "SGDM",
            OptimizerKind::Adam => "Adam",
            OptimizerKind::AdamW => "AdamW",
            OptimizerKind::Lamb => "LAMB",
            OptimizerKind::AmsGrad => "AMSGrad",
        }
    }

    /// Whether the update operators admit an inverse. AMSGrad's running
    /// element-wise max destroys the previous second moment.
    pub fn invertibility(self) -> Invertibility {
        match self {
            OptimizerKind::Sgd
            | OptimizerKind::SgdMomentum
            | OptimizerKind::Adam
            | OptimizerKind::AdamW => Invertibility::Invertible,
            OptimizerKind::Lamb => Invertibility::InvertibleWithSavedScalars,
            OptimizerKind::AmsGrad => Invertibility::NotInvertible,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Invertibility {
    Invertible,
    InvertibleWithSavedScalars,
    NotInvertible,
}

pub fn invertibility_check(kind: OptimizerKind) -> Invertibility {
    kind.invertibility()
}

/// Learning rate as a function of the 1-based step number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `base * gamma^((t - 1) / every)`
    Step { base: f64, gamma: f64, every: u64 },
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule::Constant { lr }
    }

    pub fn at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Step { base, gamma, every } => {
                let k = step.saturating_sub(1) / every.max(1);
                base * gamma.powi(k.min(i32::MAX as u64) as i32)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Constant { lr } => lr > 0.0 && lr.is_finite(),
            LrSchedule::Step { base, gamma, every } => {
                base > 0.0 && base.is_finite() && gamma > 0.0 && gamma.is_finite() && every >= 1
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidHyper(format!(
                "learning rate must be positive and finite: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHyper {
    pub kind: OptimizerKind,
    pub lr: LrSchedule,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub dampening: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// When set, stepping a non-invertible optimizer is refused up front.
    #[serde(default = "default_true")]
    pub require_undo: bool,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_true() -> bool {
    true
}

impl OptimizerHyper {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr: LrSchedule::constant(lr),
            weight_decay: 0.0,
            momentum: if kind == OptimizerKind::SgdMomentum { 0.9 } else { 0.0 },
            dampening: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            require_undo: true,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        let bad = |msg: &str| Err(Error::InvalidHyper(msg.to_string()));
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.dampening) {
            return bad("dampening must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Per-tensor optimizer state: parameters, the cached latest gradient, moments
/// and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock<S> {
    pub x: Tensor<S>,
    pub g: Tensor<S>,
    pub m: Tensor<S>,
    pub v: Tensor<S>,
    /// Running max of the second moment; AMSGrad only.
    pub v_max: Option<Tensor<S>>,
    pub t: u64,
    pub saved_scalars: Vec<S>,
    pub updated: bool,
}

impl<S: Scalar> ParamBlock<S> {
    pub fn new(x: Tensor<S>) -> Self {
        let zeros = Tensor::zeros_like(&x);
        Self {
            g: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            v_max: None,
            x,
            t: 0,
            saved_scalars: Vec::new(),
            updated: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.x.shape()
    }

    /// Marks the iteration as globally complete; the block may step again.
    pub fn commit(&mut self) {
        self.updated = false;
    }

    /// Bit-exact equality of the whole state.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.x.bit_eq(&other.x)
            && self.g.bit_eq(&other.g)
            && self.m.bit_eq(&other.m)
            && self.v.bit_eq(&other.v)
            && match (&self.v_max, &other.v_max) {
                (None, None) => true,
                (Some(a), Some(b)) => a.bit_eq(b),
                _ => false,
            }
            && self.t == other.t
            && self.saved_scalars.len() == other.saved_scalars.len()
            && self
                .saved_scalars
                .iter()
                .zip(&other.saved_scalars)
                .all(|(a, b)| a.bits() == b.bits())
            && self.updated == other.updated
    }

    /// Largest relative difference over parameters and moments.
    pub fn max_rel_diff(&self, other: &Self) -> Result<S> {
        let mut worst = self.x.max_rel_diff(&other.x)?;
        worst = worst.max(self.m.max_rel_diff(&other.m)?);
        worst = worst.max(self.v.max_rel_diff(&other.v)?);
        Ok(worst)
    }

    /// Advances the block by one step using `grad`, caching it for undo.
    /// On error the block is left untouched.
    pub fn step(&mut self, grad: &Tensor<S>, hyper: &OptimizerHyper) -> Result<()> {
        self.x.ensure_same_shape(grad)?;
        if self.updated {
            return Err(Error::AlreadyUpdated);
        }
        if hyper.kind == OptimizerKind::AmsGrad && hyper.require_undo {
            return Err(Error::NotInvertible(hyper.kind.name()));
        }
        let t = self.t + 1;
        let lr = S::lit(hyper.lr.at(t));
        let wd = S::lit(hyper.weight_decay);
        let x = self.x.data();
        let g = grad.data();
        let mut nx = self.x.clone();
        let mut nm = self.m.clone();
        let mut nv = self.v.clone();
        let mut nvmax = None;
        let mut saved = None;

        match hyper.kind {
            OptimizerKind::Sgd => {
                for (i, o) in nx.data_mut().iter_mut().enumerate() {
                    *o = x[i] - lr * (g[i] + wd * x[i]);
                }
            }
            OptimizerKind::SgdMomentum => {
                let mu = S::lit(hyper.momentum);
                let damp = S::one() - S::lit(hyper.dampening);
                let m = self.m.data();
                for i in 0..x.len() {
                    let mi = mu * m[i] + damp * (g[i] + wd * x[i]);
                    nm.data_mut()[i] = mi;
                    nx.data_mut()[i] = x[i] - lr * mi;
                }
            }
            OptimizerKind::Adam | OptimizerKind::AmsGrad => {
                let (b1, b2, eps) = betas(hyper);
                let (c1, c2) = bias_corrections(b1, b2, t);
                let m = self.m.data();
                let v = self.v.data();
                let mut vmax = match (&self.v_max, hyper.kind) {
                    (Some(vm), OptimizerKind::AmsGrad) => Some(vm.clone()),
                    (None, OptimizerKind::AmsGrad) => Some(Tensor::zeros_like(&self.v)),
                    _ => None,
                };
                for i in 0..x.len() {
                    let gp = g[i] + wd * x[i];
                    let mi = b1 * m[i] + (S::one() - b1) * gp;
                    let vi = b2 * v[i] + (S::one() - b2) * gp * gp;
                    nm.data_mut()[i] = mi;
                    nv.data_mut()[i] = vi;
                    let denom_v = match vmax.as_mut() {
                        Some(vm) => {
                            let d = vm.data_mut();
                            d[i] = d[i].max(vi);
                            d[i]
                        }
                        None => vi,
                    };
                    let m_hat = mi / c1;
                    let v_hat = denom_v / c2;
                    nx.data_mut()[i] = x[i] - lr * m_hat / (v_hat.sqrt() + eps);
                }
                nvmax = vmax;
            }
            OptimizerKind::AdamW => {
                let (b1, b2, eps) = betas(hyper);
                let (c1, c2) = bias_corrections(b1, b2, t);
                let m = self.m.data();
                let v = self.v.data();
                for i in 0..x.len() {
                    let mi = b1 * m[i] + (S::one() - b1) * g[i];
                    let vi = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
                    nm.data_mut()[i] = mi;
                    nv.data_mut()[i] = vi;
                    let r = (mi / c1) / ((vi / c2).sqrt() + eps);
                    nx.data_mut()[i] = x[i] - lr * (r + wd * x[i]);
                }
            }
            OptimizerKind::Lamb => {
                let (b1, b2, eps) = betas(hyper);
                let (c1, c2) = bias_corrections(b1, b2, t);
                let m = self.m.data();
                let v = self.v.data();
                let mut update = vec![S::zero(); x.len()];
                for i in 0..x.len() {
                    let mi = b1 * m[i] + (S::one() - b1) * g[i];
                    let vi = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
                    nm.data_mut()[i] = mi;
                    nv.data_mut()[i] = vi;
                    update[i] = (mi / c1) / ((vi / c2).sqrt() + eps) + wd * x[i];
                }
                let trust = trust_ratio(l2_norm_slice(x)?, l2_norm_slice(&update)?);
                for i in 0..x.len() {
                    nx.data_mut()[i] = x[i] - lr * trust * update[i];
                }
                saved = Some(trust);
            }
        }

        let nx = nx.ensure_finite("optimizer_step")?;
        let nm = nm.ensure_finite("optimizer_step")?;
        let nv = nv.ensure_finite("optimizer_step")?;
        self.x = nx;
        self.m = nm;
        self.v = nv;
        if nvmax.is_some() {
            self.v_max = nvmax;
        }
        if let Some(s) = saved {
            self.saved_scalars.push(s);
        }
        self.g = grad.clone();
        self.t = t;
        self.updated = true;
        Ok(())
    }

    /// Restores the state from before the most recent step.
    /// On error the block is left untouched.
    pub fn undo(&mut self, hyper: &OptimizerHyper) -> Result<()> {
        if hyper.kind == OptimizerKind::AmsGrad {
            return Err(Error::NotInvertible(hyper.kind.name()));
        }
        if !self.updated || self.t == 0 {
            return Err(Error::NothingToUndo);
        }
        let t = self.t;
        let lr = S::lit(hyper.lr.at(t));
        let wd = S::lit(hyper.weight_decay);
        let xn = self.x.data();
        let g = self.g.data();
        let mut px = self.x.clone();
        let mut pm = self.m.clone();
        let mut pv = self.v.clone();
        let mut pop_saved = false;

        match hyper.kind {
            OptimizerKind::Sgd => {
                let denom = S::one() - lr * wd;
                if denom == S::zero() {
                    return Err(Error::NonInvertibleHyper("1 - lr * weight_decay = 0"));
                }
                for i in 0..xn.len() {
                    px.data_mut()[i] = (xn[i] + lr * g[i]) / denom;
                }
            }
            OptimizerKind::SgdMomentum => {
                let mu = S::lit(hyper.momentum);
                if mu == S::zero() {
                    return Err(Error::NonInvertibleHyper("momentum = 0"));
                }
                let damp = S::one() - S::lit(hyper.dampening);
                let m = self.m.data();
                for i in 0..xn.len() {
                    let xi = xn[i] + lr * m[i];
                    px.data_mut()[i] = xi;
                    pm.data_mut()[i] = (m[i] - damp * (g[i] + wd * xi)) / mu;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = betas(hyper);
                if b1 * b2 == S::zero() {
                    return Err(Error::NonInvertibleHyper("beta1 * beta2 = 0"));
                }
                let (c1, c2) = bias_corrections(b1, b2, t);
                let m = self.m.data();
                let v = self.v.data();
                for i in 0..xn.len() {
                    let xi = xn[i] + lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    let gp = g[i] + wd * xi;
                    px.data_mut()[i] = xi;
                    pm.data_mut()[i] = (m[i] - (S::one() - b1) * gp) / b1;
                    pv.data_mut()[i] = ((v[i] - (S::one() - b2) * gp * gp) / b2).max(S::zero());
                }
            }
            OptimizerKind::AdamW | OptimizerKind::Lamb => {
                let (b1, b2, eps) = betas(hyper);
                if b1 * b2 == S::zero() {
                    return Err(Error::NonInvertibleHyper("beta1 * beta2 = 0"));
                }
                let scale = if hyper.kind == OptimizerKind::Lamb {
                    pop_saved = true;
                    *self.saved_scalars.last().ok_or(Error::NothingToUndo)?
                } else {
                    S::one()
                };
                let denom = S::one() - lr * scale * wd;
                if denom == S::zero() {
                    return Err(Error::NonInvertibleHyper("1 - lr * weight_decay = 0"));
                }
                let (c1, c2) = bias_corrections(b1, b2, t);
                let m = self.m.data();
                let v = self.v.data();
                for i in 0..xn.len() {
                    let r = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    px.data_mut()[i] = (xn[i] + lr * scale * r) / denom;
                    pm.data_mut()[i] = (m[i] - (S::one() - b1) * g[i]) / b1;
                    pv.data_mut()[i] = ((v[i] - (S::one() - b2) * g[i] * g[i]) / b2).max(S::zero());
                }
            }
            OptimizerKind::AmsGrad => unreachable!("rejected above"),
        }

        if t == 1 {
            // moments are zero-initialised, so step 0 is known exactly
            pm = Tensor::zeros_like(&pm);
            pv = Tensor::zeros_like(&pv);
        }
        let px = px.ensure_finite("optimizer_undo")?;
        let pm = pm.ensure_finite("optimizer_undo")?;
        let pv = pv.ensure_finite("optimizer_undo")?;
        self.x = px;
        self.m = pm;
        self.v = pv;
        if pop_saved {
            self.saved_scalars.pop();
        }
        self.t = t - 1;
        self.updated = false;
        Ok(())
    }
}

/// Functional form of [`ParamBlock::step`].
pub fn optimizer_step<S: Scalar>(
    block: &ParamBlock<S>,
    grad: &Tensor<S>,
    hyper: &OptimizerHyper,
) -> Result<ParamBlock<S>> {
    let mut next = block.clone();
    next.step(grad, hyper)?;
    Ok(next)
}

/// Functional form of [`ParamBlock::undo`].
pub fn optimizer_undo<S: Scalar>(block: &ParamBlock<S>, hyper: &OptimizerHyper) -> Result<ParamBlock<S>> {
    let mut prev = block.clone();
    prev.undo(hyper)?;
    Ok(prev)
}

fn betas<S: Scalar>(h: &OptimizerHyper) -> (S, S, S) {
    (S::lit(h.beta1), S::lit(h.beta2), S::lit(h.eps))
}

fn bias_corrections<S: Scalar>(b1: S, b2: S, t: u64) -> (S, S) {
    let e = t.min(i32::MAX as u64) as i32;
    (S::one() - b1.powi(e), S::one() - b2.powi(e))
}

fn trust_ratio<S: Scalar>(param_norm: S, update_norm: S) -> S {
    if param_norm > S::zero() && update_norm > S::zero() {
        param_norm / update_norm
    } else {
        S::one()
    }
}
