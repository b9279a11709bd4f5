//! The four-head ResNet50-transfer regression network.
//!
//! Four 3-channel stems (natural colour, false colour, indices, NTL) share
//! the pretrained first convolution, their outputs are concatenated and
//! merged by a fresh 1x1 convolution back to the stem width, max-pooled,
//! then passed through the standard bottleneck backbone, global average
//! pooling and two fully-connected layers with a final rectifier. Global
//! average pooling makes the same parameters work for any square input of
//! at least 64 pixels.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array1, Array2, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::archive::TensorArchive;
use crate::nn::{
    conv_out_size as nn_conv_out_size, global_avg_pool, global_avg_pool_backward, BatchNorm2d,
    BnCache, Conv2d, Dropout, GradStore, Linear, MaxPool2d, PoolCache, Scalar,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("weight load error: tensor {name}: {reason}")]
    WeightLoad { name: String, reason: String },
}

/// Output size of a convolution or pooling layer:
/// n_out = floor((n_in + 2p - k) / s) + 1.
///
/// ```
/// assert_eq!(meshpop::model::conv_out_size(334, 3, 7, 2).unwrap(), 167);
/// ```
pub fn conv_out_size(n_in: usize, p: usize, k: usize, s: usize) -> Result<usize, ModelError> {
    nn_conv_out_size(n_in, p, k, s).ok_or_else(|| {
        ModelError::Domain(format!(
            "conv_out_size requires s >= 1, k >= 1 and n_in + 2p >= k; got n_in={n_in} p={p} k={k} s={s}"
        ))
    })
}

/// Where a tensor's initial value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Pretrained,
    Random,
}

/// Width/depth configuration. [`ModelConfig::resnet50`] is the production
/// network; reduced variants back the desk-scale tests.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub stem_width: usize,
    pub stage_blocks: Vec<usize>,
    pub stage_mid_widths: Vec<usize>,
    pub fc_hidden: usize,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelConfig {
    pub fn resnet50() -> Self {
        ModelConfig {
            stem_width: 64,
            stage_blocks: vec![3, 4, 6, 3],
            stage_mid_widths: vec![64, 128, 256, 512],
            fc_hidden: 1000,
            dropout: 0.25,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// A width- and depth-reduced variant for CPU-scale tests.
    pub fn reduced(stem_width: usize, mids: &[usize], blocks: &[usize], fc_hidden: usize) -> Self {
        assert_eq!(mids.len(), blocks.len());
        ModelConfig {
            stem_width,
            stage_blocks: blocks.to_vec(),
            stage_mid_widths: mids.to_vec(),
            fc_hidden,
            dropout: 0.0,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn backbone_out(&self) -> usize {
        4 * self.stage_mid_widths.last().expect("at least one stage")
    }

    fn stage_in(&self, stage: usize) -> usize {
        if stage == 0 {
            self.stem_width
        } else {
            4 * self.stage_mid_widths[stage - 1]
        }
    }

    fn stage_stride(stage: usize) -> usize {
        if stage == 0 {
            1
        } else {
            2
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.stage_blocks.len() != self.stage_mid_widths.len() || self.stage_blocks.is_empty() {
            return Err(ModelError::Domain(
                "stage_blocks and stage_mid_widths must be equal-length and non-empty".into(),
            ));
        }
        if self.stage_blocks.iter().any(|b| *b == 0) || self.stem_width == 0 || self.fc_hidden == 0
        {
            return Err(ModelError::Domain("zero-sized model dimension".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Domain(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Head order; head k reads input channels 3k..3k+3.
pub const HEAD_NAMES: [&str; 4] = ["b432", "b765", "idx", "ntl"];

#[derive(Debug, Clone)]
struct ConvBnUnit<F> {
    conv: Conv2d<F>,
    bn: BatchNorm2d<F>,
}

impl<F: Scalar> ConvBnUnit<F> {
    fn new(
        rng: &mut ChaCha8Rng,
        out_c: usize,
        in_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        momentum: F,
        eps: F,
    ) -> Self {
        ConvBnUnit {
            conv: Conv2d::new(kaiming_conv(rng, out_c, in_c, k), stride, padding),
            bn: BatchNorm2d::identity(out_c, momentum, eps),
        }
    }

    /// Post-BN, pre-ReLU output.
    fn forward_train(&mut self, x: &Array4<F>) -> (Array4<F>, BnCache<F>) {
        let z = self.conv.forward(x);
        self.bn.forward_train(&z)
    }

    fn forward_eval(&self, x: &Array4<F>) -> Array4<F> {
        self.bn.forward_eval(&self.conv.forward(x))
    }

    /// Backward through BN then conv; inserts this unit's gradients and
    /// returns the gradient w.r.t. the conv input.
    fn backward(
        &self,
        input: &Array4<F>,
        bn_cache: &BnCache<F>,
        grad_bn_out: &Array4<F>,
        prefix: &str,
        grads: &mut GradStore<F>,
    ) -> Array4<F> {
        let (grad_conv_out, grad_gamma, grad_beta) = self.bn.backward(bn_cache, grad_bn_out);
        let (grad_x, grad_w) = self.conv.backward(input, &grad_conv_out);
        grads.insert(format!("{prefix}.conv.weight"), grad_w.into_dyn());
        grads.insert(format!("{prefix}.bn.weight"), grad_gamma.into_dyn());
        grads.insert(format!("{prefix}.bn.bias"), grad_beta.into_dyn());
        grad_x
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f(&format!("{prefix}.conv.weight"), self.conv.weight.view().into_dyn());
        f(&format!("{prefix}.bn.weight"), self.bn.gamma.view().into_dyn());
        f(&format!("{prefix}.bn.bias"), self.bn.beta.view().into_dyn());
        f(&format!("{prefix}.bn.running_mean"), self.bn.running_mean.view().into_dyn());
        f(&format!("{prefix}.bn.running_var"), self.bn.running_var.view().into_dyn());
    }

    fn visit_mut(
        &mut self,
        prefix: &str,
        trainable_only: bool,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>),
    ) {
        f(&format!("{prefix}.conv.weight"), self.conv.weight.view_mut().into_dyn());
        f(&format!("{prefix}.bn.weight"), self.bn.gamma.view_mut().into_dyn());
        f(&format!("{prefix}.bn.bias"), self.bn.beta.view_mut().into_dyn());
        if !trainable_only {
            f(
                &format!("{prefix}.bn.running_mean"),
                self.bn.running_mean.view_mut().into_dyn(),
            );
            f(
                &format!("{prefix}.bn.running_var"),
                self.bn.running_var.view_mut().into_dyn(),
            );
        }
    }
}

#[derive(Debug, Clone)]
struct Bottleneck<F> {
    conv1: ConvBnUnit<F>,
    conv2: ConvBnUnit<F>,
    conv3: ConvBnUnit<F>,
    downsample: Option<ConvBnUnit<F>>,
}

struct BlockCache<F> {
    x: Array4<F>,
    bn1: BnCache<F>,
    a1: Array4<F>,
    bn2: BnCache<F>,
    a2: Array4<F>,
    bn3: BnCache<F>,
    ds_bn: Option<BnCache<F>>,
    out: Array4<F>,
}

impl<F: Scalar> Bottleneck<F> {
    fn new(rng: &mut ChaCha8Rng, in_c: usize, mid: usize, stride: usize, momentum: F, eps: F) -> Self {
        let out_c = 4 * mid;
        let downsample = (stride != 1 || in_c != out_c)
            .then(|| ConvBnUnit::new(rng, out_c, in_c, 1, stride, 0, momentum, eps));
        Bottleneck {
            conv1: ConvBnUnit::new(rng, mid, in_c, 1, 1, 0, momentum, eps),
            conv2: ConvBnUnit::new(rng, mid, mid, 3, stride, 1, momentum, eps),
            conv3: ConvBnUnit::new(rng, out_c, mid, 1, 1, 0, momentum, eps),
            downsample,
        }
    }

    fn forward_train(&mut self, x: Array4<F>) -> (Array4<F>, BlockCache<F>) {
        let (z1, bn1) = self.conv1.forward_train(&x);
        let a1 = relu4(z1);
        let (z2, bn2) = self.conv2.forward_train(&a1);
        let a2 = relu4(z2);
        let (z3, bn3) = self.conv3.forward_train(&a2);
        let (skip, ds_bn) = match &mut self.downsample {
            Some(ds) => {
                let (zs, c) = ds.forward_train(&x);
                (zs, Some(c))
            }
            None => (x.clone(), None),
        };
        let out = relu4(z3 + &skip);
        let cache = BlockCache {
            x,
            bn1,
            a1,
            bn2,
            a2,
            bn3,
            ds_bn,
            out: out.clone(),
        };
        (out, cache)
    }

    fn forward_eval(&self, x: &Array4<F>) -> Array4<F> {
        let a1 = relu4(self.conv1.forward_eval(x));
        let a2 = relu4(self.conv2.forward_eval(&a1));
        let z3 = self.conv3.forward_eval(&a2);
        let skip = match &self.downsample {
            Some(ds) => ds.forward_eval(x),
            None => x.clone(),
        };
        relu4(z3 + &skip)
    }

    /// Returns the gradient w.r.t. the block input.
    fn backward(
        &self,
        cache: &BlockCache<F>,
        grad_out: &Array4<F>,
        prefix: &str,
        grads: &mut GradStore<F>,
    ) -> Array4<F> {
        // Through the post-add ReLU.
        let mut dz = grad_out.clone();
        mask_mul4(&mut dz, &cache.out);

        // Residual branch.
        let mut d_a2 = self.conv3.backward(&cache.a2, &cache.bn3, &dz, &format!("{prefix}.conv3"), grads);
        mask_mul4(&mut d_a2, &cache.a2);
        let mut d_a1 = self.conv2.backward(&cache.a1, &cache.bn2, &d_a2, &format!("{prefix}.conv2"), grads);
        mask_mul4(&mut d_a1, &cache.a1);
        let d_x_branch =
            self.conv1.backward(&cache.x, &cache.bn1, &d_a1, &format!("{prefix}.conv1"), grads);

        // Skip path.
        let d_x_skip = match (&self.downsample, &cache.ds_bn) {
            (Some(ds), Some(ds_cache)) => {
                ds.backward(&cache.x, ds_cache, &dz, &format!("{prefix}.downsample"), grads)
            }
            _ => dz,
        };
        d_x_branch + &d_x_skip
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.conv3.visit(&format!("{prefix}.conv3"), f);
        if let Some(ds) = &self.downsample {
            ds.visit(&format!("{prefix}.downsample"), f);
        }
    }

    fn visit_mut(
        &mut self,
        prefix: &str,
        trainable_only: bool,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>),
    ) {
        self.conv1.visit_mut(&format!("{prefix}.conv1"), trainable_only, f);
        self.conv2.visit_mut(&format!("{prefix}.conv2"), trainable_only, f);
        self.conv3.visit_mut(&format!("{prefix}.conv3"), trainable_only, f);
        if let Some(ds) = &mut self.downsample {
            ds.visit_mut(&format!("{prefix}.downsample"), trainable_only, f);
        }
    }
}

/// Intermediate state a training forward pass keeps for backprop.
pub struct ForwardCache<F> {
    input: Array4<F>,
    head_bn: Vec<BnCache<F>>,
    concat: Array4<F>,
    merge_bn: BnCache<F>,
    merge_out: Array4<F>,
    pool: PoolCache,
    stages: Vec<Vec<BlockCache<F>>>,
    gap_hw: (usize, usize),
    mask1: Option<Array2<F>>,
    fc1_in: Array2<F>,
    h_relu: Array2<F>,
    mask2: Option<Array2<F>>,
    fc2_in: Array2<F>,
    output: Array2<F>,
}

#[derive(Clone)]
pub struct Model<F: Scalar> {
    config: ModelConfig,
    heads: Vec<ConvBnUnit<F>>,
    merge: ConvBnUnit<F>,
    pool: MaxPool2d,
    stages: Vec<Vec<Bottleneck<F>>>,
    fc1: Linear<F>,
    fc2: Linear<F>,
    dropout: Dropout,
    provenance: BTreeMap<String, Provenance>,
}

impl<F: Scalar> Model<F> {
    /// Build a model with seeded Kaiming-initialized convolutions and
    /// identity batch norms; every tensor is flagged `Random`.
    pub fn new_random(config: ModelConfig, seed: u64) -> Result<Model<F>, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let momentum = F::from_f64_c(config.bn_momentum);
        let eps = F::from_f64_c(config.bn_eps);
        let stem = config.stem_width;

        let heads: Vec<ConvBnUnit<F>> = (0..4)
            .map(|_| ConvBnUnit::new(&mut rng, stem, 3, 7, 2, 3, momentum, eps))
            .collect();
        let merge = ConvBnUnit::new(&mut rng, stem, 4 * stem, 1, 1, 0, momentum, eps);
        let mut stages = Vec::new();
        for (i, (&blocks, &mid)) in config
            .stage_blocks
            .iter()
            .zip(&config.stage_mid_widths)
            .enumerate()
        {
            let mut stage = Vec::new();
            for j in 0..blocks {
                let in_c = if j == 0 { config.stage_in(i) } else { 4 * mid };
                let stride = if j == 0 { ModelConfig::stage_stride(i) } else { 1 };
                stage.push(Bottleneck::new(&mut rng, in_c, mid, stride, momentum, eps));
            }
            stages.push(stage);
        }
        let fc1 = kaiming_linear(&mut rng, config.fc_hidden, config.backbone_out());
        let fc2 = kaiming_linear(&mut rng, 3, config.fc_hidden);

        let dropout = Dropout { rate: config.dropout };
        let mut model = Model {
            config,
            heads,
            merge,
            pool: MaxPool2d { kernel: 3, stride: 2, padding: 1 },
            stages,
            fc1,
            fc2,
            dropout,
            provenance: BTreeMap::new(),
        };
        let mut names = Vec::new();
        model.visit_tensors(&mut |name, _| names.push(name.to_string()));
        model.provenance = names.into_iter().map(|n| (n, Provenance::Random)).collect();
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn provenance(&self) -> &BTreeMap<String, Provenance> {
        &self.provenance
    }

    /// Spatial sizes through the network for a square input: input, head
    /// output, pooled stem, one entry per stage, then the pooled 1.
    pub fn spatial_chain(&self, input_hw: usize) -> Result<Vec<usize>, ModelError> {
        let mut sizes = vec![input_hw];
        let head = &self.heads[0].conv;
        let (_, _, k, _) = head.weight.dim();
        sizes.push(conv_out_size(input_hw, head.padding, k, head.stride)?);
        sizes.push(conv_out_size(
            *sizes.last().unwrap(),
            self.pool.padding,
            self.pool.kernel,
            self.pool.stride,
        )?);
        for stage in &self.stages {
            let mut s = *sizes.last().unwrap();
            for block in stage {
                let conv2 = &block.conv2.conv;
                s = conv_out_size(s, conv2.padding, 3, conv2.stride)?;
            }
            sizes.push(s);
        }
        sizes.push(1);
        Ok(sizes)
    }

    fn check_input(&self, x: &Array4<F>) -> Result<(), ModelError> {
        let (_, c, h, w) = x.dim();
        if c != 12 {
            return Err(ModelError::Shape(format!("input must have 12 channels, got {c}")));
        }
        if h != w || h < 64 {
            return Err(ModelError::Shape(format!(
                "input must be square with side >= 64, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Training forward pass: batch-norm batch statistics (running stats
    /// updated), dropout driven by `rng`. Returns outputs (N x 3, >= 0) and
    /// the cache for [`Model::backward`].
    pub fn forward_train(
        &mut self,
        x: &Array4<F>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array2<F>, ForwardCache<F>), ModelError> {
        self.check_input(x)?;
        let stem = self.config.stem_width;

        let mut head_outs = Vec::with_capacity(4);
        let mut head_bn = Vec::with_capacity(4);
        for (k, head) in self.heads.iter_mut().enumerate() {
            let xk = x.slice(s![.., 3 * k..3 * k + 3, .., ..]).to_owned();
            let (z, c) = head.forward_train(&xk);
            head_outs.push(relu4(z));
            head_bn.push(c);
        }
        let concat = concat_channels(&head_outs);
        drop(head_outs);

        let (merge_z, merge_bn) = self.merge.forward_train(&concat);
        let merge_out = relu4(merge_z);
        let (pooled, pool_cache) = self.pool.forward(&merge_out);
        debug_assert_eq!(pooled.dim().1, stem);

        let mut stages_cache = Vec::with_capacity(self.stages.len());
        let mut act = pooled;
        for stage in self.stages.iter_mut() {
            let mut stage_cache = Vec::with_capacity(stage.len());
            for block in stage.iter_mut() {
                let (next, cache) = block.forward_train(act);
                stage_cache.push(cache);
                act = next;
            }
            stages_cache.push(stage_cache);
        }

        let (_, _, gh, gw) = act.dim();
        let flat = global_avg_pool(&act);
        drop(act); // kept alive as the last block cache's `out`

        let (fc1_in, mask1) = self.dropout.forward_train(&flat, rng);
        let h_relu = relu2(self.fc1.forward(&fc1_in));
        let (fc2_in, mask2) = self.dropout.forward_train(&h_relu, rng);
        let output = relu2(self.fc2.forward(&fc2_in));

        let cache = ForwardCache {
            input: x.clone(),
            head_bn,
            concat,
            merge_bn,
            merge_out,
            pool: pool_cache,
            stages: stages_cache,
            gap_hw: (gh, gw),
            mask1,
            fc1_in,
            h_relu,
            mask2,
            fc2_in,
            output: output.clone(),
        };
        Ok((output, cache))
    }

    /// Deterministic eval forward: running statistics, no dropout.
    pub fn forward_eval(&self, x: &Array4<F>) -> Result<Array2<F>, ModelError> {
        self.check_input(x)?;
        let mut head_outs = Vec::with_capacity(4);
        for (k, head) in self.heads.iter().enumerate() {
            let xk = x.slice(s![.., 3 * k..3 * k + 3, .., ..]).to_owned();
            head_outs.push(relu4(head.forward_eval(&xk)));
        }
        let concat = concat_channels(&head_outs);
        drop(head_outs);

        let merge_out = relu4(self.merge.forward_eval(&concat));
        let (mut act, _) = self.pool.forward(&merge_out);
        for stage in &self.stages {
            for block in stage {
                act = block.forward_eval(&act);
            }
        }
        let flat = global_avg_pool(&act);
        let h = relu2(self.fc1.forward(&flat));
        Ok(relu2(self.fc2.forward(&h)))
    }

    /// Backward pass for a training forward; returns one gradient per
    /// trainable tensor.
    pub fn backward(&self, cache: &ForwardCache<F>, grad_output: &Array2<F>) -> GradStore<F> {
        let mut grads = GradStore::new();
        let stem = self.config.stem_width;

        let mut d_fc2_out = grad_output.clone();
        mask_mul2(&mut d_fc2_out, &cache.output);
        let (d_fc2_in, dw2, db2) = self.fc2.backward(&cache.fc2_in, &d_fc2_out);
        grads.insert("fc2.weight", dw2.into_dyn());
        grads.insert("fc2.bias", db2.into_dyn());

        let mut d_h = self.dropout.backward(&cache.mask2, &d_fc2_in);
        mask_mul2(&mut d_h, &cache.h_relu);
        let (d_fc1_in, dw1, db1) = self.fc1.backward(&cache.fc1_in, &d_h);
        grads.insert("fc1.weight", dw1.into_dyn());
        grads.insert("fc1.bias", db1.into_dyn());

        let d_flat = self.dropout.backward(&cache.mask1, &d_fc1_in);
        let mut d_act = global_avg_pool_backward(&d_flat, cache.gap_hw);

        for (i, stage) in self.stages.iter().enumerate().rev() {
            for (j, block) in stage.iter().enumerate().rev() {
                let prefix = format!("backbone.layer{}.block{}", i + 1, j);
                d_act = block.backward(&cache.stages[i][j], &d_act, &prefix, &mut grads);
            }
        }

        let d_merge_out = self.pool.backward(&cache.pool, &d_act);
        let mut d_merge_z = d_merge_out;
        mask_mul4(&mut d_merge_z, &cache.merge_out);
        let mut d_concat =
            self.merge
                .backward(&cache.concat, &cache.merge_bn, &d_merge_z, "merge", &mut grads);
        mask_mul4(&mut d_concat, &cache.concat);

        for (k, head) in self.heads.iter().enumerate() {
            let d_head = d_concat
                .slice(s![.., k * stem..(k + 1) * stem, .., ..])
                .to_owned();
            let xk = cache.input.slice(s![.., 3 * k..3 * k + 3, .., ..]).to_owned();
            let prefix = format!("head.{}", HEAD_NAMES[k]);
            // Gradients w.r.t. the input tensor are discarded.
            let _ = head.backward(&xk, &cache.head_bn[k], &d_head, &prefix, &mut grads);
        }
        grads
    }

    /// Visit every tensor (weights, biases and batch-norm running stats).
    pub fn visit_tensors(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        for (k, head) in self.heads.iter().enumerate() {
            head.visit(&format!("head.{}", HEAD_NAMES[k]), f);
        }
        self.merge.visit("merge", f);
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, block) in stage.iter().enumerate() {
                block.visit(&format!("backbone.layer{}.block{}", i + 1, j), f);
            }
        }
        f("fc1.weight", self.fc1.weight.view().into_dyn());
        f("fc1.bias", self.fc1.bias.view().into_dyn());
        f("fc2.weight", self.fc2.weight.view().into_dyn());
        f("fc2.bias", self.fc2.bias.view().into_dyn());
    }

    /// Visit tensors mutably; with `trainable_only` the batch-norm running
    /// statistics are skipped (they carry no gradients).
    pub fn visit_tensors_mut(
        &mut self,
        trainable_only: bool,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>),
    ) {
        for (k, head) in self.heads.iter_mut().enumerate() {
            head.visit_mut(&format!("head.{}", HEAD_NAMES[k]), trainable_only, f);
        }
        self.merge.visit_mut("merge", trainable_only, f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, block) in stage.iter_mut().enumerate() {
                block.visit_mut(&format!("backbone.layer{}.block{}", i + 1, j), trainable_only, f);
            }
        }
        f("fc1.weight", self.fc1.weight.view_mut().into_dyn());
        f("fc1.bias", self.fc1.bias.view_mut().into_dyn());
        f("fc2.weight", self.fc2.weight.view_mut().into_dyn());
        f("fc2.bias", self.fc2.bias.view_mut().into_dyn());
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_tensors(&mut |n, _| names.push(n.to_string()));
        names
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensor_names()
            .into_iter()
            .filter(|n| !n.ends_with(".running_mean") && !n.ends_with(".running_var"))
            .collect()
    }

    /// Replace the provenance map; names must exactly cover the tensor set.
    pub fn set_provenance(
        &mut self,
        provenance: BTreeMap<String, Provenance>,
    ) -> Result<(), ModelError> {
        let names: std::collections::BTreeSet<String> = self.tensor_names().into_iter().collect();
        let given: std::collections::BTreeSet<String> = provenance.keys().cloned().collect();
        if names != given {
            return Err(ModelError::Domain(
                "provenance names do not match model tensor names".into(),
            ));
        }
        self.provenance = provenance;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let mut count = 0usize;
        self.visit_tensors(&mut |_, v| count += v.len());
        count
    }
}

/// Channel-axis concatenation with a guaranteed standard memory layout.
fn concat_channels<F: Scalar>(parts: &[Array4<F>]) -> Array4<F> {
    let stacked = concatenate(
        Axis(1),
        &parts.iter().map(|a| a.view()).collect::<Vec<_>>(),
    )
    .expect("parts share batch and spatial dims");
    stacked.as_standard_layout().into_owned()
}

fn relu4<F: Scalar>(mut a: Array4<F>) -> Array4<F> {
    a.mapv_inplace(|v| v.max(F::zero()));
    a
}

fn relu2<F: Scalar>(mut a: Array2<F>) -> Array2<F> {
    a.mapv_inplace(|v| v.max(F::zero()));
    a
}

/// grad *= (activation > 0), elementwise.
fn mask_mul4<F: Scalar>(grad: &mut Array4<F>, activation: &Array4<F>) {
    ndarray::Zip::from(grad).and(activation).for_each(|g, &a| {
        if a <= F::zero() {
            *g = F::zero();
        }
    });
}

fn mask_mul2<F: Scalar>(grad: &mut Array2<F>, activation: &Array2<F>) {
    ndarray::Zip::from(grad).and(activation).for_each(|g, &a| {
        if a <= F::zero() {
            *g = F::zero();
        }
    });
}

/// Fan-in Kaiming normal for conv weights.
fn kaiming_conv<F: Scalar>(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize, k: usize) -> Array4<F> {
    let fan_in = in_c * k * k;
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid sigma");
    Array4::from_shape_simple_fn((out_c, in_c, k, k), || F::from_f64_c(normal.sample(rng)))
}

/// Fan-in Kaiming normal weights with zero bias.
fn kaiming_linear<F: Scalar>(rng: &mut ChaCha8Rng, out_f: usize, in_f: usize) -> Linear<F> {
    let normal = Normal::new(0.0, (2.0 / in_f as f64).sqrt()).expect("valid sigma");
    Linear::new(
        Array2::from_shape_simple_fn((out_f, in_f), || F::from_f64_c(normal.sample(rng))),
        Array1::zeros(out_f),
    )
}

// ---------------------------------------------------------------------------
// Pretrained-weight loading
// ---------------------------------------------------------------------------

/// Canonical ResNet50 tensor names and shapes (torch state-dict layout,
/// without the batch counters): 267 tensors.
pub fn resnet50_tensor_specs() -> Vec<(String, Vec<usize>)> {
    let mut specs = Vec::new();
    let bn = |specs: &mut Vec<(String, Vec<usize>)>, prefix: &str, c: usize| {
        for t in ["weight", "bias", "running_mean", "running_var"] {
            specs.push((format!("{prefix}.{t}"), vec![c]));
        }
    };
    specs.push(("conv1.weight".into(), vec![64, 3, 7, 7]));
    bn(&mut specs, "bn1", 64);
    let blocks = [3usize, 4, 6, 3];
    let mids = [64usize, 128, 256, 512];
    for (i, (&nblocks, &mid)) in blocks.iter().zip(&mids).enumerate() {
        let stage_in = if i == 0 { 64 } else { 2 * mid };
        let out_c = 4 * mid;
        for j in 0..nblocks {
            let in_c = if j == 0 { stage_in } else { out_c };
            let p = format!("layer{}.{}", i + 1, j);
            specs.push((format!("{p}.conv1.weight"), vec![mid, in_c, 1, 1]));
            bn(&mut specs, &format!("{p}.bn1"), mid);
            specs.push((format!("{p}.conv2.weight"), vec![mid, mid, 3, 3]));
            bn(&mut specs, &format!("{p}.bn2"), mid);
            specs.push((format!("{p}.conv3.weight"), vec![out_c, mid, 1, 1]));
            bn(&mut specs, &format!("{p}.bn3"), out_c);
            if j == 0 {
                specs.push((format!("{p}.downsample.0.weight"), vec![out_c, in_c, 1, 1]));
                bn(&mut specs, &format!("{p}.downsample.1"), out_c);
            }
        }
    }
    specs.push(("fc.weight".into(), vec![1000, 2048]));
    specs.push(("fc.bias".into(), vec![1000]));
    specs
}

/// Mapping from canonical archive names to this model's tensor names. The
/// first convolution and its batch norm fan out to all four heads.
pub fn resnet50_name_map() -> Vec<(String, Vec<String>)> {
    let mut map = Vec::new();
    for (name, _) in resnet50_tensor_specs() {
        let targets: Vec<String> = if let Some(rest) = name.strip_prefix("conv1.") {
            HEAD_NAMES.iter().map(|h| format!("head.{h}.conv.{rest}")).collect()
        } else if let Some(rest) = name.strip_prefix("bn1.") {
            HEAD_NAMES.iter().map(|h| format!("head.{h}.bn.{rest}")).collect()
        } else if name == "fc.weight" {
            vec!["fc1.weight".into()]
        } else if name == "fc.bias" {
            vec!["fc1.bias".into()]
        } else if let Some(rest) = name.strip_prefix("layer") {
            // layer{i}.{j}.<tail>; the model groups each conv with its batch
            // norm, so conv{k}.weight -> conv{k}.conv.weight and
            // bn{k}.<t> -> conv{k}.bn.<t>.
            let mut parts = rest.splitn(3, '.');
            let (i, j, tail) = (
                parts.next().expect("layer index"),
                parts.next().expect("block index"),
                parts.next().expect("tensor tail"),
            );
            let tail = if let Some(k) = tail.strip_prefix("conv").and_then(|r| r.strip_suffix(".weight")) {
                format!("conv{k}.conv.weight")
            } else if let Some(rest) = tail.strip_prefix("bn") {
                let (k, t) = rest.split_once('.').expect("bn tensor name");
                format!("conv{k}.bn.{t}")
            } else if tail == "downsample.0.weight" {
                "downsample.conv.weight".to_string()
            } else if let Some(t) = tail.strip_prefix("downsample.1.") {
                format!("downsample.bn.{t}")
            } else {
                unreachable!("unhandled bottleneck tensor {name}")
            };
            vec![format!("backbone.layer{i}.block{j}.{tail}")]
        } else {
            unreachable!("unhandled canonical tensor {name}")
        };
        map.push((name, targets));
    }
    map
}

/// Build the production model from a canonical pretrained ResNet50 archive
/// with default regularization knobs.
pub fn init_from_archive(archive: &TensorArchive, seed: u64) -> Result<Model<f32>, ModelError> {
    init_from_archive_with(archive, ModelConfig::resnet50(), seed)
}

/// [`init_from_archive`] with caller-supplied dropout/batch-norm settings.
/// The width and depth fields must stay canonical.
///
/// Every archive tensor is copied in (the first conv and bn into all four
/// heads); the merge convolution and the final fully-connected layer keep
/// their seeded random initialization and are flagged `Random`.
pub fn init_from_archive_with(
    archive: &TensorArchive,
    config: ModelConfig,
    seed: u64,
) -> Result<Model<f32>, ModelError> {
    let canonical = ModelConfig::resnet50();
    if config.stem_width != canonical.stem_width
        || config.stage_blocks != canonical.stage_blocks
        || config.stage_mid_widths != canonical.stage_mid_widths
        || config.fc_hidden != canonical.fc_hidden
    {
        return Err(ModelError::Domain(
            "pretrained weights require the canonical ResNet50 widths and depths".into(),
        ));
    }
    let mut model: Model<f32> = Model::new_random(config, seed)?;

    let mut incoming: BTreeMap<String, ndarray::ArrayD<f32>> = BTreeMap::new();
    for (name, shape) in resnet50_tensor_specs() {
        let tensor = archive.get_f32(&name).ok_or_else(|| ModelError::WeightLoad {
            name: name.clone(),
            reason: "missing from archive (or not float32)".into(),
        })?;
        if tensor.shape() != shape.as_slice() {
            return Err(ModelError::WeightLoad {
                name,
                reason: format!("expected shape {:?}, got {:?}", shape, tensor.shape()),
            });
        }
        incoming.insert(name, tensor.clone());
    }

    let map = resnet50_name_map();
    let mut target_source: BTreeMap<String, String> = BTreeMap::new();
    for (src, targets) in &map {
        for t in targets {
            target_source.insert(t.clone(), src.clone());
        }
    }

    let mut load_error: Option<ModelError> = None;
    let mut loaded: Vec<String> = Vec::new();
    model.visit_tensors_mut(false, &mut |name, mut view| {
        if load_error.is_some() {
            return;
        }
        if let Some(src) = target_source.get(name) {
            let tensor = &incoming[src];
            if view.shape() != tensor.shape() {
                load_error = Some(ModelError::WeightLoad {
                    name: name.to_string(),
                    reason: format!(
                        "model expects {:?}, archive {src} has {:?}",
                        view.shape(),
                        tensor.shape()
                    ),
                });
                return;
            }
            view.assign(tensor);
            loaded.push(name.to_string());
        }
    });
    if let Some(e) = load_error {
        return Err(e);
    }

    // Every mapped target must exist in the model.
    if loaded.len() != target_source.len() {
        let loaded_set: std::collections::BTreeSet<_> = loaded.iter().cloned().collect();
        let missing: Vec<_> = target_source
            .keys()
            .filter(|t| !loaded_set.contains(*t))
            .cloned()
            .collect();
        return Err(ModelError::WeightLoad {
            name: missing.join(", "),
            reason: "mapped target tensor absent from model".into(),
        });
    }

    for name in model.tensor_names() {
        let p = if target_source.contains_key(&name) {
            Provenance::Pretrained
        } else {
            Provenance::Random
        };
        model.provenance.insert(name, p);
    }
    Ok(model)
}

/// Generate a synthetic archive with the canonical ResNet50 tensor set:
/// Kaiming-style convolutions, identity batch norms, small random fc. Useful
/// for smoke tests and desk-scale runs where real ImageNet weights are not
/// available.
pub fn synthetic_resnet50_archive(seed: u64) -> TensorArchive {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut archive = TensorArchive::new();
    for (name, shape) in resnet50_tensor_specs() {
        let tensor: ndarray::ArrayD<f32> = if shape.len() == 4 {
            let fan_out = shape[0] * shape[2] * shape[3];
            let normal = Normal::new(0.0, (2.0 / fan_out as f64).sqrt()).unwrap();
            ndarray::ArrayD::from_shape_simple_fn(shape.clone(), || normal.sample(&mut rng) as f32)
        } else if shape.len() == 2 {
            let normal = Normal::new(0.0, (1.0 / shape[1] as f64).sqrt()).unwrap();
            ndarray::ArrayD::from_shape_simple_fn(shape.clone(), || normal.sample(&mut rng) as f32)
        } else if name.ends_with(".weight") || name.ends_with(".running_var") {
            ndarray::ArrayD::ones(shape.clone())
        } else {
            // bn bias, bn running_mean, fc bias
            ndarray::ArrayD::zeros(shape.clone())
        };
        archive.insert_f32(name, tensor);
    }
    archive.meta = serde_json::json!({"kind": "synthetic-resnet50", "seed": seed});
    archive
}
