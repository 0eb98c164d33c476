//! Stage-partitioned toy network: stacks of `tanh(a·Wᵀ + b)` layers.
//!
//! All loops run in a fixed order so that identical inputs give bit-identical
//! activations and gradients, which replay relies on.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, ordered_sum, Scalar, Tensor};
use crate::optimizers::ParamBlock;

const TAG_WEIGHT: u64 = 1;
const TAG_BIAS: u64 = 2;
const TAG_INPUT: u64 = 3;
const TAG_TARGET: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub layers_per_stage: usize,
    /// Rows per micro-batch.
    pub batch_rows: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("output_dim", self.output_dim),
            ("layers_per_stage", self.layers_per_stage),
            ("batch_rows", self.batch_rows),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("model.{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// (input, output) width of stage `s` in a `p`-stage pipeline.
    pub fn stage_io(&self, s: usize, p: usize) -> (usize, usize) {
        let i = if s == 0 { self.input_dim } else { self.hidden_dim };
        let o = if s + 1 == p { self.output_dim } else { self.hidden_dim };
        (i, o)
    }

    /// Elements in one activation message crossing a stage boundary.
    pub fn boundary_elems(&self) -> usize {
        self.batch_rows * self.hidden_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<S> {
    /// `[out, in]`
    pub weight: ParamBlock<S>,
    /// `[out]`
    pub bias: ParamBlock<S>,
}

impl<S: Scalar> Layer<S> {
    pub fn new(weight: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::shape(&[weight.shape()[0]], bias.shape()));
        }
        Ok(Self {
            weight: ParamBlock::new(weight),
            bias: ParamBlock::new(bias),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.x.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.x.shape()[0]
    }

    /// `tanh(a·Wᵀ + b)` for `a: [rows, in]`.
    pub fn forward(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let (rows, cols) = matrix_dims(a)?;
        let (out, inp) = (self.out_dim(), self.in_dim());
        if cols != inp {
            return Err(Error::shape(&[rows, inp], a.shape()));
        }
        let w = self.weight.x.data();
        let b = self.bias.x.data();
        let ad = a.data();
        let mut y = Vec::with_capacity(rows * out);
        for r in 0..rows {
            for o in 0..out {
                let mut z = b[o];
                for i in 0..inp {
                    z += ad[r * inp + i] * w[o * inp + i];
                }
                y.push(z.tanh());
            }
        }
        Tensor::new(vec![rows, out], y)?.ensure_finite("forward")
    }

    /// Returns `(grad wrt input, grad wrt weight, grad wrt bias)` given the
    /// layer input `a`, its output `y` and the output gradient `dy`.
    pub fn backward(
        &self,
        a: &Tensor<S>,
        y: &Tensor<S>,
        dy: &Tensor<S>,
    ) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
        y.ensure_same_shape(dy)?;
        let (rows, _) = matrix_dims(a)?;
        let (out, inp) = (self.out_dim(), self.in_dim());
        let w = self.weight.x.data();
        let ad = a.data();
        let dz: Vec<S> = y
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&yv, &g)| g * (S::one() - yv * yv))
            .collect();

        let mut dw = vec![S::zero(); out * inp];
        for o in 0..out {
            for i in 0..inp {
                let mut acc = S::zero();
                for r in 0..rows {
                    acc += dz[r * out + o] * ad[r * inp + i];
                }
                dw[o * inp + i] = acc;
            }
        }
        let mut db = vec![S::zero(); out];
        for (o, slot) in db.iter_mut().enumerate() {
            let mut acc = S::zero();
            for r in 0..rows {
                acc += dz[r * out + o];
            }
            *slot = acc;
        }
        let mut da = vec![S::zero(); rows * inp];
        for r in 0..rows {
            for i in 0..inp {
                let mut acc = S::zero();
                for o in 0..out {
                    acc += dz[r * out + o] * w[o * inp + i];
                }
                da[r * inp + i] = acc;
            }
        }
        Ok((
            Tensor::new(vec![rows, inp], da)?.ensure_finite("backward")?,
            Tensor::new(vec![out, inp], dw)?.ensure_finite("backward")?,
            Tensor::new(vec![out], db)?.ensure_finite("backward")?,
        ))
    }
}

fn matrix_dims<S: Scalar>(t: &Tensor<S>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(&[0, 0], other)),
    }
}

/// Per-micro-batch forward activations: the input of every layer followed by
/// the stage output.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivationCache<S> {
    entries: BTreeMap<usize, Vec<Tensor<S>>>,
}

impl<S: Scalar> ActivationCache<S> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn contains(&self, mb: usize) -> bool {
        self.entries.contains_key(&mb)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mbs(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn output(&self, mb: usize) -> Option<&Tensor<S>> {
        self.entries.get(&mb).and_then(|v| v.last())
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage<S> {
    pub stage_id: usize,
    pub layers: Vec<Layer<S>>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl<S: Scalar> Stage<S> {
    /// Seeded initialisation; every replica of a stage starts identical.
    pub fn init(stage_id: usize, p: usize, dims: &ModelDims, seed: u64) -> Result<Self> {
        let (input_dim, output_dim) = dims.stage_io(stage_id, p);
        let l = dims.layers_per_stage;
        let mut layers = Vec::with_capacity(l);
        for j in 0..l {
            let inp = if j == 0 { input_dim } else { dims.hidden_dim };
            let out = if j + 1 == l { output_dim } else { dims.hidden_dim };
            let ids = [stage_id as u64, j as u64];
            let scale = S::lit(10.0 / (inp as f64).sqrt());
            let w = Tensor::seeded_fill(&[out, inp], derive_seed(seed, &[TAG_WEIGHT, ids[0], ids[1]]))?
                .scale(scale);
            let b = Tensor::seeded_fill(&[out], derive_seed(seed, &[TAG_BIAS, ids[0], ids[1]]))?;
            layers.push(Layer::new(w, b)?);
        }
        Ok(Self {
            stage_id,
            layers,
            input_dim,
            output_dim,
        })
    }

    /// Same topology with all state zeroed, as on a freshly started machine.
    pub fn zeroed_like(&self) -> Self {
        let zero = |b: &ParamBlock<S>| ParamBlock::new(Tensor::zeros_like(&b.x));
        Self {
            stage_id: self.stage_id,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: zero(&l.weight),
                    bias: zero(&l.bias),
                })
                .collect(),
            input_dim: self.input_dim,
            output_dim: self.output_dim,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Blocks in layer order: weight then bias.
    pub fn blocks(&self) -> impl Iterator<Item = &ParamBlock<S>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ParamBlock<S>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len() && self.blocks().zip(other.blocks()).all(|(a, b)| a.bit_eq(b))
    }

    pub fn max_rel_diff(&self, other: &Self) -> Result<S> {
        let mut worst = S::zero();
        for (a, b) in self.blocks().zip(other.blocks()) {
            worst = worst.max(a.max_rel_diff(b)?);
        }
        Ok(worst)
    }

    /// Per-layer updated flags, layer order.
    pub fn updated_flags(&self) -> Vec<bool> {
        self.layers
            .iter()
            .map(|l| l.weight.updated && l.bias.updated)
            .collect()
    }

    pub fn commit(&mut self) {
        for b in self.blocks_mut() {
            b.commit();
        }
    }
}

pub fn forward_stage<S: Scalar>(
    stage: &Stage<S>,
    activation_in: &Tensor<S>,
    mb: usize,
    cache: &mut ActivationCache<S>,
) -> Result<Tensor<S>> {
    let (_, cols) = matrix_dims(activation_in)?;
    if cols != stage.input_dim {
        return Err(Error::shape(&[activation_in.shape()[0], stage.input_dim], activation_in.shape()));
    }
    let mut saved = Vec::with_capacity(stage.layers.len() + 1);
    let mut a = activation_in.clone();
    for layer in &stage.layers {
        let y = layer.forward(&a)?;
        saved.push(a);
        a = y;
    }
    saved.push(a.clone());
    cache.entries.insert(mb, saved);
    Ok(a)
}

/// Consumes the cached forward of `mb`. Parameter gradients come back in
/// [`Stage::blocks`] order.
pub fn backward_stage<S: Scalar>(
    stage: &Stage<S>,
    grad_in: &Tensor<S>,
    mb: usize,
    cache: &mut ActivationCache<S>,
) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
    let saved = cache.entries.remove(&mb).ok_or(Error::MissingActivation(mb))?;
    let n = stage.layers.len();
    let mut grads: Vec<Option<Tensor<S>>> = vec![None; 2 * n];
    let mut dy = grad_in.clone();
    for j in (0..n).rev() {
        let (da, dw, db) = stage.layers[j].backward(&saved[j], &saved[j + 1], &dy)?;
        grads[2 * j] = Some(dw);
        grads[2 * j + 1] = Some(db);
        dy = da;
    }
    Ok((dy, grads.into_iter().map(|g| g.expect("filled")).collect()))
}

/// Element-wise sums of per-micro-batch gradient lists, ascending micro-batch
/// order.
pub fn accumulate_grads<S: Scalar>(partials: &BTreeMap<usize, Vec<Tensor<S>>>) -> Result<Vec<Tensor<S>>> {
    let lists: Vec<&Vec<Tensor<S>>> = partials.values().collect();
    let first = lists.first().ok_or(Error::EmptyInput)?;
    let mut out = Vec::with_capacity(first.len());
    for k in 0..first.len() {
        let mut column = Vec::with_capacity(lists.len());
        for l in &lists {
            column.push(l.get(k).ok_or(Error::shape(&[first.len()], &[l.len()]))?);
        }
        out.push(ordered_sum(&column)?);
    }
    Ok(out)
}

/// Mean squared error scaled by `scale`; returns the loss and its gradient.
pub fn mse_loss<S: Scalar>(output: &Tensor<S>, target: &Tensor<S>, scale: S) -> Result<(S, Tensor<S>)> {
    output.ensure_same_shape(target)?;
    let mut loss = S::zero();
    let mut grad = Vec::with_capacity(output.len());
    let two = S::lit(2.0);
    for (&y, &t) in output.data().iter().zip(target.data()) {
        let d = y - t;
        loss += d * d * scale;
        grad.push(two * d * scale);
    }
    Ok((loss, Tensor::new(output.shape().to_vec(), grad)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroBatch<S> {
    pub mb_id: usize,
    pub inputs: Tensor<S>,
    pub targets: Tensor<S>,
}

/// Synthetic data for `(iteration, replica, mb)`; a pure function of the seed.
pub fn micro_batch<S: Scalar>(
    dims: &ModelDims,
    seed: u64,
    iteration: u64,
    replica: usize,
    mb: usize,
) -> Result<MicroBatch<S>> {
    let key = [iteration, replica as u64, mb as u64];
    let inputs = Tensor::seeded_fill(
        &[dims.batch_rows, dims.input_dim],
        derive_seed(seed, &[TAG_INPUT, key[0], key[1], key[2]]),
    )?
    .scale(S::lit(10.0));
    let targets = Tensor::seeded_fill(
        &[dims.batch_rows, dims.output_dim],
        derive_seed(seed, &[TAG_TARGET, key[0], key[1], key[2]]),
    )?
    .scale(S::lit(5.0));
    Ok(MicroBatch {
        mb_id: mb,
        inputs,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn dims4() -> ModelDims {
        ModelDims {
            input_dim: 4,
            hidden_dim: 4,
            output_dim: 4,
            layers_per_stage: 2,
            batch_rows: 3,
        }
    }

    fn scalar_stage(w: f64, b: f64) -> Stage<f64> {
        let layer = Layer::new(
            Tensor::new(vec![1, 1], vec![w]).unwrap(),
            Tensor::new(vec![1], vec![b]).unwrap(),
        )
        .unwrap();
        Stage {
            stage_id: 0,
            layers: vec![layer],
            input_dim: 1,
            output_dim: 1,
        }
    }

    #[test]
    fn zero_params_give_zero_output() {
        let s = Stage::<f64>::init(0, 1, &dims4(), 1).unwrap().zeroed_like();
        let mut c = ActivationCache::new();
        let a = Tensor::seeded_fill(&[3, 4], 2).unwrap();
        let y = forward_stage(&s, &a, 0, &mut c).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_forward_and_backward() {
        let s = scalar_stage(1.0, 0.0);
        let mut c = ActivationCache::new();
        let x = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        let y = forward_stage(&s, &x, 0, &mut c).unwrap();
        assert!((y.data()[0] - 0.462_117_157_260_009_8).abs() < 1e-15);
        let one = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let (_, grads) = backward_stage(&s, &one, 0, &mut c).unwrap();
        let th = 0.5f64.tanh();
        assert!((grads[0].data()[0] - 0.5 * (1.0 - th * th)).abs() < 1e-15);
        assert!(matches!(
            backward_stage(&s, &one, 0, &mut c),
            Err(Error::MissingActivation(0))
        ));
    }

    #[test]
    fn zero_upstream_gradient() {
        let s = Stage::<f64>::init(1, 3, &dims4(), 3).unwrap();
        let mut c = ActivationCache::new();
        let a = Tensor::seeded_fill(&[3, 4], 4).unwrap();
        forward_stage(&s, &a, 5, &mut c).unwrap();
        let (gi, gp) = backward_stage(&s, &Tensor::zeros(&[3, 4]).unwrap(), 5, &mut c).unwrap();
        assert!(gi.data().iter().chain(gp.iter().flat_map(|t| t.data())).all(|&v| v == 0.0));
    }

    #[test]
    fn input_width_checked() {
        let s = Stage::<f64>::init(0, 1, &dims4(), 1).unwrap();
        let mut c = ActivationCache::new();
        let a = Tensor::seeded_fill(&[3, 5], 2).unwrap();
        assert!(matches!(
            forward_stage(&s, &a, 0, &mut c),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    fn probe_loss(stage: &Stage<f64>, a: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
        let mut c = ActivationCache::new();
        let y = forward_stage(stage, a, 0, &mut c).unwrap();
        y.data().iter().zip(r.data()).map(|(p, q)| p * q).sum()
    }

    #[test]
    fn finite_difference_agrees() {
        let dims = dims4();
        let stage = Stage::<f64>::init(0, 2, &dims, 9).unwrap();
        let a = Tensor::seeded_fill(&[3, 4], 10).unwrap().scale(10.0);
        let r = Tensor::seeded_fill(&[3, 4], 11).unwrap().scale(10.0);
        let mut c = ActivationCache::new();
        forward_stage(&stage, &a, 0, &mut c).unwrap();
        let (da, grads) = backward_stage(&stage, &r, 0, &mut c).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (bi, g) in grads.iter().enumerate() {
            for e in 0..g.len() {
                let mut plus = stage.clone();
                let mut minus = stage.clone();
                plus.blocks_mut().nth(bi).unwrap().x.data_mut()[e] += h;
                minus.blocks_mut().nth(bi).unwrap().x.data_mut()[e] -= h;
                let fd = (probe_loss(&plus, &a, &r) - probe_loss(&minus, &a, &r)) / (2.0 * h);
                worst = worst.max((fd - g.data()[e]).abs());
            }
        }
        for e in 0..a.len() {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap.data_mut()[e] += h;
            am.data_mut()[e] -= h;
            let fd = (probe_loss(&stage, &ap, &r) - probe_loss(&stage, &am, &r)) / (2.0 * h);
            worst = worst.max((fd - da.data()[e]).abs());
        }
        assert!(worst <= 1e-6, "worst fd error {worst}");
    }

    #[test]
    fn accumulate_matches_serial_loop() {
        let mut partials = BTreeMap::new();
        let mut rng = Rng::new(3);
        for mb in [2usize, 0, 1] {
            let seed = rng.next_u64();
            partials.insert(mb, vec![Tensor::<f64>::seeded_fill(&[5], seed).unwrap()]);
        }
        let sum = accumulate_grads(&partials).unwrap();
        let mut serial = partials[&0][0].clone();
        for mb in 1..3 {
            for (a, b) in serial.data_mut().iter_mut().zip(partials[&mb][0].data()) {
                *a += *b;
            }
        }
        assert!(sum[0].bit_eq(&serial));

        let one: BTreeMap<_, _> = [(0usize, vec![serial.clone()])].into();
        assert!(accumulate_grads(&one).unwrap()[0].bit_eq(&serial));
        let two: BTreeMap<_, _> = [(0usize, vec![serial.clone()]), (1, vec![serial.clone()])].into();
        assert!(accumulate_grads(&two).unwrap()[0].bit_eq(&serial.scale(2.0)));
    }

    #[test]
    fn data_is_pure() {
        let d = dims4();
        let a = micro_batch::<f64>(&d, 1, 7, 0, 2).unwrap();
        let b = micro_batch::<f64>(&d, 1, 7, 0, 2).unwrap();
        assert!(a.inputs.bit_eq(&b.inputs) && a.targets.bit_eq(&b.targets));
        let c = micro_batch::<f64>(&d, 1, 7, 1, 2).unwrap();
        assert!(!a.inputs.bit_eq(&c.inputs));
    }
}
