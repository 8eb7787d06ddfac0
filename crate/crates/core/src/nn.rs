//! Parameter storage, initialization, and the layer primitives the
//! segmentation network is assembled from.

use crate::autodiff::{Graph, Var};
use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use std::cell::RefCell;
use std::collections::BTreeMap;

/// Index of a named tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Trainable parameters receive gradients; state entries (e.g. batch-norm
    /// running statistics) are updated out-of-band and never differentiated.
    pub trainable: bool,
}

/// Flat, name-addressable storage for every parameter and state tensor of a
/// model. Iteration order is insertion order, which is deterministic because
/// model construction is.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        self.insert(name, tensor, true)
    }

    pub fn add_state(&mut self, name: &str, tensor: Tensor) -> ParamId {
        self.insert(name, tensor, false)
    }

    fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor,
            trainable,
        });
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    /// Number of trainable scalar parameters.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }
}

/// Forward-pass mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, feature dropout active.
    Train,
    /// Batch statistics, dropout disabled (weak-branch passes).
    TrainNoDropout,
    /// Running statistics, dropout disabled, no state updates.
    Eval,
}

impl Mode {
    pub fn is_training(self) -> bool {
        !matches!(self, Mode::Eval)
    }

    pub fn dropout_active(self) -> bool {
        matches!(self, Mode::Train)
    }
}

/// One step's binding of a parameter store onto a computation record:
/// trainable entries become gradient leaves, state entries constants.
pub struct Ctx<'a> {
    pub graph: Graph,
    pub mode: Mode,
    bound: Vec<Var>,
    store: &'a ParamStore,
    state_updates: RefCell<Vec<(ParamId, Vec<f64>)>>,
}

impl<'a> Ctx<'a> {
    pub fn new(graph: Graph, store: &'a ParamStore, mode: Mode) -> Self {
        let bound = store
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    graph.leaf(e.tensor.clone().with_grad())
                } else {
                    graph.constant(e.tensor.clone())
                }
            })
            .collect();
        Ctx {
            graph,
            mode,
            bound,
            store,
            state_updates: RefCell::new(Vec::new()),
        }
    }

    /// The bound variable for a parameter.
    pub fn p(&self, id: ParamId) -> Var {
        self.bound[id.0].clone()
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Gradient of a trainable parameter after backward (zeros if untouched).
    pub fn grad(&self, id: ParamId) -> Vec<f64> {
        let n = self.store.get(id).tensor.numel();
        self.bound[id.0].grad().unwrap_or_else(|| vec![0.0; n])
    }

    pub(crate) fn push_state_update(&self, id: ParamId, value: Vec<f64>) {
        self.state_updates.borrow_mut().push((id, value));
    }

    /// Fold recorded batch statistics into the store's running statistics:
    /// running <- (1 - momentum) * running + momentum * batch, in call order.
    pub fn apply_state_updates(&self, store: &mut ParamStore, momentum: f64) {
        for (id, batch) in self.state_updates.borrow().iter() {
            let t = &mut store.get_mut(*id).tensor;
            for (r, b) in t.data.iter_mut().zip(batch) {
                *r = (1.0 - momentum) * *r + momentum * *b;
            }
        }
    }
}

fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// 2-D convolution layer (square odd kernel, zero padding).
#[derive(Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut RngStream,
    ) -> Self {
        let mut r = rng.child(name);
        let weight = store.add(
            &format!("{name}.weight"),
            kaiming_uniform(&[c_out, c_in, k, k], c_in * k * k, &mut r),
        );
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Conv2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        x.conv2d(&ctx.p(self.weight), self.stride, self.pad)?
            .add_along(&ctx.p(self.bias), 0)
    }
}

/// Dense layer on token matrices: [L, in] -> [L, out].
#[derive(Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut RngStream,
    ) -> Self {
        let mut r = rng.child(name);
        let weight = store.add(
            &format!("{name}.weight"),
            kaiming_uniform(&[d_in, d_out], d_in, &mut r),
        );
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Linear { weight, bias }
    }

    /// Zero-initialized variant, used for residual branches that must start
    /// as the identity.
    pub fn init_zero(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.add(&format!("{name}.weight"), Tensor::zeros(&[d_in, d_out]));
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Linear { weight, bias }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        x.matmul(&ctx.p(self.weight))?
            .add_along(&ctx.p(self.bias), 1)
    }
}

/// Layer normalization over the last axis of [L, D] token matrices.
#[derive(Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]));
        LayerNorm {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let shape = x.shape();
        if shape.len() != 2 {
            return Err(CoreError::dim(
                "layer_norm",
                format!("rank-2 required, got {shape:?}"),
            ));
        }
        let d = shape[1];
        let mean = x.mean_axis(1)?;
        let centered = x.sub(&mean.expand_axis(1, d)?)?;
        let var = centered.mul(&centered)?.mean_axis(1)?;
        let inv = var.add_scalar(self.eps).rsqrt();
        let xhat = centered.mul(&inv.expand_axis(1, d)?)?;
        xhat.mul_along(&ctx.p(self.gamma), 1)?
            .add_along(&ctx.p(self.beta), 1)
    }
}

/// Batch normalization over the spatial grid of a [C,H,W] map, with running
/// statistics for evaluation.
#[derive(Clone, Copy)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn init(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[channels]));
        let running_mean = store.add_state(
            &format!("{name}.running_mean"),
            Tensor::zeros(&[channels]),
        );
        let running_var = store.add_state(
            &format!("{name}.running_var"),
            Tensor::full(&[channels], 1.0),
        );
        BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let shape = x.shape();
        if shape.len() != 3 {
            return Err(CoreError::dim(
                "batch_norm",
                format!("rank-3 required, got {shape:?}"),
            ));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let flat = x.reshape(&[c, h * w])?;
        let y = if ctx.mode.is_training() {
            let mean = flat.mean_axis(1)?;
            let centered = flat.sub(&mean.expand_axis(1, h * w)?)?;
            let var = centered.mul(&centered)?.mean_axis(1)?;
            ctx.push_state_update(self.running_mean, mean.data());
            ctx.push_state_update(self.running_var, var.data());
            let inv = var.add_scalar(self.eps).rsqrt();
            centered.mul(&inv.expand_axis(1, h * w)?)?
        } else {
            let rm = ctx.p(self.running_mean);
            let rv = ctx.p(self.running_var);
            let inv = rv.add_scalar(self.eps).rsqrt();
            flat.add_along(&rm.scale(-1.0), 0)?.mul_along(&inv, 0)?
        };
        y.mul_along(&ctx.p(self.gamma), 0)?
            .add_along(&ctx.p(self.beta), 0)?
            .reshape(&[c, h, w])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::init(&mut store, "ln", 4);
        let ctx = Ctx::new(Graph::new(), &store, Mode::Eval);
        let x = ctx
            .graph
            .constant(Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0]));
        let y = ln.forward(&ctx, &x).unwrap().data();
        for row in y.chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_running_stats_update_and_eval() {
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::init(&mut store, "bn", 2);
        {
            let ctx = Ctx::new(Graph::new(), &store, Mode::Train);
            let x = ctx.graph.constant(Tensor::new(
                vec![2, 2, 2],
                vec![1.0, 3.0, 5.0, 7.0, -2.0, 0.0, 2.0, 4.0],
            ));
            bn.forward(&ctx, &x).unwrap();
            let mut updated = store.clone();
            ctx.apply_state_updates(&mut updated, bn.momentum);
            // channel means: 4 and 1; running = 0.9*0 + 0.1*batch
            let rm = &updated.get(bn.running_mean).tensor.data;
            assert!((rm[0] - 0.4).abs() < 1e-12 && (rm[1] - 0.1).abs() < 1e-12);
            store = updated;
        }
        // Eval mode is pure: running stats untouched, output uses them.
        let before = store.get(bn.running_mean).tensor.data.clone();
        let ctx = Ctx::new(Graph::new(), &store, Mode::Eval);
        let x = ctx
            .graph
            .constant(Tensor::new(vec![2, 1, 1], vec![0.4, 0.1]));
        let y = bn.forward(&ctx, &x).unwrap().data();
        ctx.apply_state_updates(&mut store, bn.momentum);
        assert_eq!(store.get(bn.running_mean).tensor.data, before);
        // (x - running_mean) = 0 at both channels
        assert!(y.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn conv_linear_norm_gradients() {
        let mut rng = RngStream::from_seed(5);
        let mut store = ParamStore::new();
        let conv = Conv2d::init(&mut store, "c", 2, 3, 3, 1, 1, &mut rng);
        let lin = Linear::init(&mut store, "l", 3, 2, &mut rng);
        let ln = LayerNorm::init(&mut store, "ln", 2);
        let bn = BatchNorm2d::init(&mut store, "bn", 3, );

        let xdata: Vec<f64> = (0..2 * 4 * 4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let eval_loss = |store: &ParamStore| -> f64 {
            let ctx = Ctx::new(Graph::new(), store, Mode::Train);
            let x = ctx
                .graph
                .constant(Tensor::new(vec![2, 4, 4], xdata.clone()));
            let h = conv.forward(&ctx, &x).unwrap();
            let h = bn.forward(&ctx, &h).unwrap().relu();
            let t = h.reshape(&[3, 16]).unwrap().transpose2().unwrap();
            let t = lin.forward(&ctx, &t).unwrap();
            let t = ln.forward(&ctx, &t).unwrap();
            t.mul(&t).unwrap().mean_all().item()
        };

        let ctx = Ctx::new(Graph::new(), &store, Mode::Train);
        let x = ctx
            .graph
            .constant(Tensor::new(vec![2, 4, 4], xdata.clone()));
        let h = conv.forward(&ctx, &x).unwrap();
        let h = bn.forward(&ctx, &h).unwrap().relu();
        let t = h.reshape(&[3, 16]).unwrap().transpose2().unwrap();
        let t = lin.forward(&ctx, &t).unwrap();
        let t = ln.forward(&ctx, &t).unwrap();
        let loss = t.mul(&t).unwrap().mean_all();
        ctx.graph.backward(&loss).unwrap();

        for (id, entry) in store.iter() {
            if !entry.trainable {
                continue;
            }
            let analytic = ctx.grad(id);
            let n = entry.tensor.numel();
            let coords: Vec<usize> = (0..n).step_by(1 + n / 7).collect();
            let numeric = gradcheck::finite_diff_coords(
                |blocks: &[Vec<f64>]| {
                    let mut s = store.clone();
                    s.get_mut(id).tensor.data = blocks[0].clone();
                    eval_loss(&s)
                },
                &[entry.tensor.data.clone()],
                0,
                &coords,
                1e-5,
            );
            for (i, fd) in numeric {
                let err = gradcheck::rel_err(analytic[i], fd, 1e-8);
                assert!(
                    err <= 1e-3,
                    "{} coord {i}: analytic {} vs fd {fd}, rel {err:.2e}",
                    entry.name,
                    analytic[i]
                );
            }
        }
    }
}
