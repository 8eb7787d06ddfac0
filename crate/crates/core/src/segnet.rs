//! The segmentation backbone: a four-stage UNet encoder/decoder pair and the
//! transformer block used by the fusion module.
//!
//! Stage i of the encoder runs at 1/2^(i-1) of the input resolution; the
//! decoder mirrors it with a bilinear up-path and skip connections and ends
//! in a class-axis softmax, so its output is a probability field.

use crate::autodiff::Var;
use crate::error::{CoreError, Result};
use crate::nn::{Conv2d, Ctx, LayerNorm, Linear, ParamStore};
use crate::rng::RngStream;

/// Architecture of the desk backbone.
#[derive(Clone, Debug)]
pub struct NetConfig {
    pub in_channels: usize,
    pub classes: usize,
    /// Encoder channel ladder, one entry per stage.
    pub ladder: [usize; 4],
    /// Channel-dropout probability applied to the deepest encoder stage in
    /// training mode (the feature-level perturbation).
    pub feature_dropout: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 1,
            classes: 4,
            ladder: [8, 16, 32, 64],
            feature_dropout: 0.5,
        }
    }
}

/// The four per-stage feature maps of one encoder pass.
pub struct EncoderOutput {
    /// stages[i] has shape [ladder[i], H/2^i, W/2^i].
    pub stages: Vec<Var>,
}

struct ConvBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ConvBlock {
    fn init(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut RngStream,
    ) -> Self {
        ConvBlock {
            conv1: Conv2d::init(store, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1, rng),
            conv2: Conv2d::init(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, rng),
        }
    }

    fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let h = self.conv1.forward(ctx, x)?.relu();
        Ok(self.conv2.forward(ctx, &h)?.relu())
    }
}

/// Encoder h and decoder d of the segmentation network.
pub struct UNet {
    pub cfg: NetConfig,
    enc: Vec<ConvBlock>,
    dec: Vec<ConvBlock>,
    head: Conv2d,
}

impl UNet {
    pub fn init(store: &mut ParamStore, cfg: NetConfig, rng: &mut RngStream) -> Self {
        let mut rng = rng.child("unet");
        let l = cfg.ladder;
        let enc = vec![
            ConvBlock::init(store, "enc1", cfg.in_channels, l[0], &mut rng),
            ConvBlock::init(store, "enc2", l[0], l[1], &mut rng),
            ConvBlock::init(store, "enc3", l[1], l[2], &mut rng),
            ConvBlock::init(store, "enc4", l[2], l[3], &mut rng),
        ];
        let dec = vec![
            ConvBlock::init(store, "dec3", l[3] + l[2], l[2], &mut rng),
            ConvBlock::init(store, "dec2", l[2] + l[1], l[1], &mut rng),
            ConvBlock::init(store, "dec1", l[1] + l[0], l[0], &mut rng),
        ];
        let head = Conv2d::init(store, "head", l[0], cfg.classes, 1, 1, 0, &mut rng);
        UNet {
            cfg,
            enc,
            dec,
            head,
        }
    }

    /// Stage features for one [1,H,W] image. H and W must be divisible by 8.
    /// In `Mode::Train` the deepest stage receives channel dropout.
    pub fn encode(&self, ctx: &Ctx, image: &Var, rng: &mut RngStream) -> Result<EncoderOutput> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != self.cfg.in_channels {
            return Err(CoreError::dim(
                "encode",
                format!(
                    "expected [{}, H, W], got {shape:?}",
                    self.cfg.in_channels
                ),
            ));
        }
        let (h, w) = (shape[1], shape[2]);
        if h % 8 != 0 || w % 8 != 0 {
            return Err(CoreError::dim(
                "encode",
                format!("spatial dims {h}x{w} not divisible by 8"),
            ));
        }
        let f1 = self.enc[0].forward(ctx, image)?;
        let f2 = self.enc[1].forward(ctx, &f1.max_pool2()?)?;
        let f3 = self.enc[2].forward(ctx, &f2.max_pool2()?)?;
        let f4 = self.enc[3].forward(ctx, &f3.max_pool2()?)?;
        let f4 = f4.channel_dropout(
            self.cfg.feature_dropout,
            ctx.mode.dropout_active(),
            &mut rng.child("feature_dropout"),
        )?;
        Ok(EncoderOutput {
            stages: vec![f1, f2, f3, f4],
        })
    }

    /// Per-pixel class probabilities [C,H,W] from encoder features.
    pub fn decode(&self, ctx: &Ctx, features: &EncoderOutput) -> Result<Var> {
        let [f1, f2, f3, f4] = match features.stages.as_slice() {
            [a, b, c, d] => [a, b, c, d],
            other => {
                return Err(CoreError::dim(
                    "decode",
                    format!("expected 4 stages, got {}", other.len()),
                ))
            }
        };
        let up = |x: &Var, target: &Var| -> Result<Var> {
            let t = target.shape();
            x.bilinear_resize(t[1], t[2])
        };
        let d3 = self.dec[0].forward(ctx, &Var::concat(&[up(f4, f3)?, f3.clone()], 0)?)?;
        let d2 = self.dec[1].forward(ctx, &Var::concat(&[up(&d3, f2)?, f2.clone()], 0)?)?;
        let d1 = self.dec[2].forward(ctx, &Var::concat(&[up(&d2, f1)?, f1.clone()], 0)?)?;
        let logits = self.head.forward(ctx, &d1)?;
        logits.softmax(0)
    }
}

/// Pre-norm transformer block: attention and MLP residuals around layer norm.
pub struct MsaBlock {
    pub dim: usize,
    pub heads: usize,
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl MsaBlock {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(CoreError::param(
                "msa_block",
                format!("token dim {dim} not divisible by {heads} heads"),
            ));
        }
        let mut rng = rng.child(name);
        Ok(MsaBlock {
            dim,
            heads,
            ln1: LayerNorm::init(store, &format!("{name}.ln1"), dim),
            wq: Linear::init(store, &format!("{name}.wq"), dim, dim, &mut rng),
            wk: Linear::init(store, &format!("{name}.wk"), dim, dim, &mut rng),
            wv: Linear::init(store, &format!("{name}.wv"), dim, dim, &mut rng),
            wo: Linear::init(store, &format!("{name}.wo"), dim, dim, &mut rng),
            ln2: LayerNorm::init(store, &format!("{name}.ln2"), dim),
            fc1: Linear::init(store, &format!("{name}.fc1"), dim, hidden, &mut rng),
            fc2: Linear::init(store, &format!("{name}.fc2"), hidden, dim, &mut rng),
        })
    }

    pub fn forward(&self, ctx: &Ctx, tokens: &Var) -> Result<Var> {
        Ok(self.forward_with_attn(ctx, tokens)?.0)
    }

    /// Forward pass returning the per-head attention matrices as well.
    pub fn forward_with_attn(&self, ctx: &Ctx, tokens: &Var) -> Result<(Var, Vec<Var>)> {
        let shape = tokens.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(CoreError::dim(
                "msa_block",
                format!("expected [L, {}], got {shape:?}", self.dim),
            ));
        }
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let normed = self.ln1.forward(ctx, tokens)?;
        let q = self.wq.forward(ctx, &normed)?;
        let k = self.wk.forward(ctx, &normed)?;
        let v = self.wv.forward(ctx, &normed)?;

        let mut heads_out = Vec::with_capacity(self.heads);
        let mut attns = Vec::with_capacity(self.heads);
        for hidx in 0..self.heads {
            let (c0, c1) = (hidx * dh, (hidx + 1) * dh);
            let qh = q.col_slice(c0, c1)?;
            let kh = k.col_slice(c0, c1)?;
            let vh = v.col_slice(c0, c1)?;
            let scores = qh.matmul(&kh.transpose2()?)?.scale(scale);
            let attn = scores.softmax(1)?;
            heads_out.push(attn.matmul(&vh)?);
            attns.push(attn);
        }
        let merged = Var::concat(&heads_out, 1)?;
        let attended = self.wo.forward(ctx, &merged)?.add(tokens)?;

        let normed2 = self.ln2.forward(ctx, &attended)?;
        let mlp = self.fc2.forward(ctx, &self.fc1.forward(ctx, &normed2)?.relu())?;
        Ok((mlp.add(&attended)?, attns))
    }

    /// Zero the attention output projection and the MLP's second layer so the
    /// block is exactly the identity (used by tests and ablations).
    pub fn zero_residual_paths(&self, store: &mut ParamStore) {
        for id in [self.wo.weight, self.wo.bias, self.fc2.weight, self.fc2.bias] {
            let t = &mut store.get_mut(id).tensor;
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::Tensor;
    use crate::Graph;

    fn small_net() -> (ParamStore, UNet) {
        let mut store = ParamStore::new();
        let mut rng = RngStream::from_seed(3);
        let net = UNet::init(&mut store, NetConfig::default(), &mut rng);
        (store, net)
    }

    #[test]
    fn encode_shapes_follow_the_ladder() {
        let (store, net) = small_net();
        let ctx = Ctx::new(Graph::new(), &store, Mode::Eval);
        let img = ctx.graph.constant(Tensor::zeros(&[1, 32, 32]));
        let out = net.encode(&ctx, &img, &mut RngStream::from_seed(0)).unwrap();
        let shapes: Vec<Vec<usize>> = out.stages.iter().map(|s| s.shape()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![8, 32, 32],
                vec![16, 16, 16],
                vec![32, 8, 8],
                vec![64, 4, 4]
            ]
        );
    }

    #[test]
    fn encode_rejects_indivisible_dims() {
        let (store, net) = small_net();
        let ctx = Ctx::new(Graph::new(), &store, Mode::Eval);
        let img = ctx.graph.constant(Tensor::zeros(&[1, 20, 32]));
        assert!(net
            .encode(&ctx, &img, &mut RngStream::from_seed(0))
            .is_err());
    }

    #[test]
    fn zero_input_zero_biases_gives_zero_stage1_preactivations() {
        let (store, net) = small_net();
        let ctx = Ctx::new(Graph::new(), &store, Mode::Eval);
        let img = ctx.graph.constant(Tensor::zeros(&[1, 32, 32]));
        // Biases are zero-initialized, so stage-1 activations are relu(0) = 0.
        let out = net.encode(&ctx, &img, &mut RngStream::from_seed(0)).unwrap();
        assert!(out.stages[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let (store, net) = small_net();
        let mut rng = RngStream::from_seed(9);
        let data: Vec<f64> = (0..1024).map(|_| rng.uniform(0.0, 1.0)).collect();
        let run = || {
            let ctx = Ctx::new(Graph::new(), &store, Mode::Eval);
            let img = ctx
                .graph
                .constant(Tensor::new(vec![1, 32, 32], data.clone()));
            let f = net.encode(&ctx, &img, &mut RngStream::from_seed(1)).unwrap();
            net.decode(&ctx, &f).unwrap().data()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn decode_outputs_class_simplices() {
        let (store, net) = small_net();
        let ctx = Ctx::new(Graph::new(), &store, Mode::Eval);
        let mut rng = RngStream::from_seed(4);
        let data: Vec<f64> = (0..1024).map(|_| rng.uniform(0.0, 1.0)).collect();
        let img = ctx.graph.constant(Tensor::new(vec![1, 32, 32], data));
        let f = net.encode(&ctx, &img, &mut rng).unwrap();
        let p = net.decode(&ctx, &f).unwrap();
        assert_eq!(p.shape(), vec![4, 32, 32]);
        let d = p.data();
        for pos in 0..1024 {
            let s: f64 = (0..4).map(|c| d[c * 1024 + pos]).sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!((0..4).all(|c| d[c * 1024 + pos] >= 0.0));
        }
    }

    #[test]
    fn gradient_reaches_stage1_kernels_from_decoder_loss() {
        let (store, net) = small_net();
        let ctx = Ctx::new(Graph::new(), &store, Mode::TrainNoDropout);
        let mut rng = RngStream::from_seed(6);
        let data: Vec<f64> = (0..1024).map(|_| rng.uniform(0.0, 1.0)).collect();
        let img = ctx.graph.constant(Tensor::new(vec![1, 32, 32], data));
        let f = net.encode(&ctx, &img, &mut rng).unwrap();
        let p = net.decode(&ctx, &f).unwrap();
        let loss = p.mul(&p).unwrap().mean_all();
        ctx.graph.backward(&loss).unwrap();
        let id = store.by_name("enc1.conv1.weight").unwrap();
        let g = ctx.grad(id);
        assert!(g.iter().any(|&v| v != 0.0), "no gradient reached stage 1");
    }

    #[test]
    fn parameter_budget_under_desk_limit() {
        let (store, _) = small_net();
        let mut store = store;
        let mut rng = RngStream::from_seed(0);
        // Include the fusion-module parameters in the budget too.
        let _ = MsaBlock::init(&mut store, "sfm.msa", 32, 4, 128, &mut rng).unwrap();
        assert!(
            store.trainable_count() <= 300_000,
            "parameter count {} exceeds 0.3M",
            store.trainable_count()
        );
    }

    #[test]
    fn msa_rejects_bad_head_count() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::from_seed(0);
        assert!(MsaBlock::init(&mut store, "m", 10, 4, 20, &mut rng).is_err());
    }

    #[test]
    fn msa_zero_residual_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::from_seed(2);
        let block = MsaBlock::init(&mut store, "m", 8, 2, 16, &mut rng).unwrap();
        block.zero_residual_paths(&mut store);
        let ctx = Ctx::new(Graph::new(), &store, Mode::Eval);
        let data: Vec<f64> = (0..40).map(|i| (i as f64) * 0.1 - 2.0).collect();
        let x = ctx.graph.constant(Tensor::new(vec![5, 8], data.clone()));
        let y = block.forward(&ctx, &x).unwrap().data();
        assert_eq!(y, data);
    }

    #[test]
    fn msa_single_token_attention_is_one() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::from_seed(2);
        let block = MsaBlock::init(&mut store, "m", 8, 2, 16, &mut rng).unwrap();
        let ctx = Ctx::new(Graph::new(), &store, Mode::Eval);
        let x = ctx
            .graph
            .constant(Tensor::new(vec![1, 8], (0..8).map(|v| v as f64).collect()));
        let (_, attns) = block.forward_with_attn(&ctx, &x).unwrap();
        for a in attns {
            assert_eq!(a.data(), vec![1.0]);
        }
    }

    #[test]
    fn msa_attention_rows_are_simplices() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::from_seed(8);
        let block = MsaBlock::init(&mut store, "m", 8, 4, 16, &mut rng).unwrap();
        let ctx = Ctx::new(Graph::new(), &store, Mode::Eval);
        let data: Vec<f64> = (0..48).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let x = ctx.graph.constant(Tensor::new(vec![6, 8], data));
        let (_, attns) = block.forward_with_attn(&ctx, &x).unwrap();
        for a in attns {
            for row in a.data().chunks(6) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn msa_is_permutation_equivariant() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::from_seed(10);
        let block = MsaBlock::init(&mut store, "m", 8, 2, 16, &mut rng).unwrap();
        let ctx = Ctx::new(Graph::new(), &store, Mode::Eval);
        let data: Vec<f64> = (0..40).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let x = ctx.graph.constant(Tensor::new(vec![5, 8], data.clone()));
        let y = block.forward(&ctx, &x).unwrap().data();

        let perm = [3usize, 0, 4, 1, 2];
        let permuted: Vec<f64> = perm
            .iter()
            .flat_map(|&r| data[r * 8..(r + 1) * 8].to_vec())
            .collect();
        let xp = ctx.graph.constant(Tensor::new(vec![5, 8], permuted));
        let yp = block.forward(&ctx, &xp).unwrap().data();
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..8 {
                let a = yp[new_row * 8 + c];
                let b = y[old_row * 8 + c];
                assert!((a - b).abs() < 1e-9, "row {old_row}->{new_row} col {c}");
            }
        }
    }
}
