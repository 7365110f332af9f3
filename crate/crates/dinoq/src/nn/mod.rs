//! From-scratch convolutional Q-network with manual backpropagation.
//!
//! The architecture is a fixed stack: valid convolutions with ReLU, a flatten,
//! one ReLU dense layer, and a linear output head with one Q-value per action.
//! The backward pass is derived by hand for exactly this stack, trained with a
//! masked mean-squared-error loss (gradient flows only through the chosen
//! action's output) and Adam. A finite-difference gradient check over a small
//! f64 instance verifies the whole backward path.
//!
//! Matrix products go through matrixmultiply; everything else, including
//! im2col lowering, the backward pass, initialization, Adam, and the weight
//! file format, is implemented here.

pub(crate) mod io;
mod tensor;

pub use io::{load_weights, save_weights};
pub use tensor::{matmul, matmul_nt, matmul_tn, Scalar, Tensor};

use crate::rng::SplitMix64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite {what} in layer {layer}")]
    NumericFault { layer: String, what: &'static str },
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("weight file error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One convolution stage: `filters` kernels of size `kernel` x `kernel`,
/// applied with the given stride and no padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Architecture description. `full()` is the training network; smaller
/// variants exist for cheap end-to-end runs and for gradient checking.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub input_c: usize,
    pub convs: Vec<ConvSpec>,
    pub hidden: usize,
    pub outputs: usize,
}

impl NetConfig {
    /// 80x80x4 input, conv 32x8x8/4, 64x4x4/2, 64x3x3/1, dense 512, 2 outputs.
    pub fn full() -> Self {
        Self {
            input_h: 80,
            input_w: 80,
            input_c: 4,
            convs: vec![
                ConvSpec { filters: 32, kernel: 8, stride: 4 },
                ConvSpec { filters: 64, kernel: 4, stride: 2 },
                ConvSpec { filters: 64, kernel: 3, stride: 1 },
            ],
            hidden: 512,
            outputs: 2,
        }
    }

    /// Same shape family with 8/16/16 filters and a 64-unit dense layer.
    pub fn reduced() -> Self {
        Self {
            convs: vec![
                ConvSpec { filters: 8, kernel: 8, stride: 4 },
                ConvSpec { filters: 16, kernel: 4, stride: 2 },
                ConvSpec { filters: 16, kernel: 3, stride: 1 },
            ],
            hidden: 64,
            ..Self::full()
        }
    }

    /// Spatial output sizes of each conv stage, validating the valid-conv
    /// arithmetic `out = floor((in - kernel) / stride) + 1` along the way.
    pub fn conv_dims(&self) -> Result<Vec<(usize, usize, usize)>, NnError> {
        if self.convs.is_empty() {
            return Err(NnError::InvalidConfig("at least one conv layer required".into()));
        }
        if self.hidden == 0 || self.outputs == 0 {
            return Err(NnError::InvalidConfig("dense sizes must be positive".into()));
        }
        let mut h = self.input_h;
        let mut w = self.input_w;
        let mut dims = Vec::with_capacity(self.convs.len());
        for (i, spec) in self.convs.iter().enumerate() {
            if spec.filters == 0 || spec.kernel == 0 || spec.stride == 0 {
                return Err(NnError::InvalidConfig(format!(
                    "conv{} has a zero dimension",
                    i + 1
                )));
            }
            if h < spec.kernel || w < spec.kernel {
                return Err(NnError::InvalidConfig(format!(
                    "conv{} kernel {} exceeds its {}x{} input",
                    i + 1,
                    spec.kernel,
                    h,
                    w
                )));
            }
            h = (h - spec.kernel) / spec.stride + 1;
            w = (w - spec.kernel) / spec.stride + 1;
            dims.push((h, w, spec.filters));
        }
        Ok(dims)
    }

    /// Flattened feature count entering the dense stage.
    pub fn flatten_len(&self) -> Result<usize, NnError> {
        let dims = self.conv_dims()?;
        let (h, w, f) = *dims.last().expect("at least one conv");
        Ok(h * w * f)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer<T> {
    /// `[filters, kernel, kernel, in_channels]`, row-major.
    w: Tensor<T>,
    /// `[filters]`.
    b: Tensor<T>,
    stride: usize,
    in_h: usize,
    in_w: usize,
    in_c: usize,
    out_h: usize,
    out_w: usize,
}

impl<T: Scalar> ConvLayer<T> {
    fn filters(&self) -> usize {
        self.w.shape()[0]
    }

    fn kernel(&self) -> usize {
        self.w.shape()[1]
    }

    /// Rows of the lowered input matrix for batch size `bsz`.
    fn rows(&self, bsz: usize) -> usize {
        bsz * self.out_h * self.out_w
    }

    /// Columns of the lowered input matrix.
    fn patch_len(&self) -> usize {
        self.kernel() * self.kernel() * self.in_c
    }
}

#[derive(Clone, Debug, PartialEq)]
struct DenseLayer<T> {
    /// `[inputs, outputs]`, row-major.
    w: Tensor<T>,
    /// `[outputs]`.
    b: Tensor<T>,
}

impl<T: Scalar> DenseLayer<T> {
    fn inputs(&self) -> usize {
        self.w.shape()[0]
    }

    fn outputs(&self) -> usize {
        self.w.shape()[1]
    }

    /// `out[bsz x outputs] = x * W + b`.
    fn forward(&self, x: &[T], bsz: usize, out: &mut [T]) {
        matmul(x, self.w.data(), bsz, self.inputs(), self.outputs(), out);
        add_bias(out, self.b.data());
    }
}

/// Lower `[B, H, W, C]` input into the patch matrix `[B*OH*OW, K*K*C]`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    input: &[T],
    bsz: usize,
    ih: usize,
    iw: usize,
    c: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let patch = k * k * c;
    let row_copy = k * c;
    for bi in 0..bsz {
        let in_base = bi * ih * iw * c;
        for oy in 0..oh {
            for ox in 0..ow {
                let dst_base = (((bi * oh) + oy) * ow + ox) * patch;
                let iy0 = oy * stride;
                let ix0 = ox * stride;
                for ky in 0..k {
                    let src = in_base + ((iy0 + ky) * iw + ix0) * c;
                    let dst = dst_base + ky * row_copy;
                    cols[dst..dst + row_copy].copy_from_slice(&input[src..src + row_copy]);
                }
            }
        }
    }
}

/// Scatter-add the patch-matrix gradient back onto the input gradient.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cols: &[T],
    bsz: usize,
    ih: usize,
    iw: usize,
    c: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    dinput: &mut [T],
) {
    let patch = k * k * c;
    let row_copy = k * c;
    for bi in 0..bsz {
        let in_base = bi * ih * iw * c;
        for oy in 0..oh {
            for ox in 0..ow {
                let src_base = (((bi * oh) + oy) * ow + ox) * patch;
                let iy0 = oy * stride;
                let ix0 = ox * stride;
                for ky in 0..k {
                    let dst = in_base + ((iy0 + ky) * iw + ix0) * c;
                    let src = src_base + ky * row_copy;
                    for i in 0..row_copy {
                        dinput[dst + i] += cols[src + i];
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    let n = bias.len();
    for row in out.chunks_exact_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn relu_inplace<T: Scalar>(data: &mut [T]) {
    for v in data.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zero the gradient wherever the cached post-activation is zero.
/// ReLU's subgradient at exactly zero is taken as zero.
fn relu_backward<T: Scalar>(grad: &mut [T], post: &[T]) {
    for (g, &a) in grad.iter_mut().zip(post) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Activations and lowered inputs kept by the forward pass for backprop.
struct ForwardCache<T> {
    /// Patch matrix per conv layer.
    conv_cols: Vec<Tensor<T>>,
    /// Post-ReLU output per conv layer, stored as `[rows x filters]`.
    conv_post: Vec<Tensor<T>>,
    /// Post-ReLU dense hidden activations `[B x hidden]`.
    hidden_post: Tensor<T>,
    /// Linear outputs `[B x outputs]`.
    output: Tensor<T>,
}

/// The Q-function approximator.
#[derive(Clone, Debug, PartialEq)]
pub struct QNetwork<T: Scalar> {
    cfg: NetConfig,
    convs: Vec<ConvLayer<T>>,
    dense1: DenseLayer<T>,
    dense_out: DenseLayer<T>,
}

impl<T: Scalar> QNetwork<T> {
    fn build(
        cfg: NetConfig,
        mut init: impl FnMut(usize, &[usize]) -> Tensor<T>,
    ) -> Result<Self, NnError> {
        let dims = cfg.conv_dims()?;
        let mut convs = Vec::with_capacity(cfg.convs.len());
        let mut in_h = cfg.input_h;
        let mut in_w = cfg.input_w;
        let mut in_c = cfg.input_c;
        for (spec, &(out_h, out_w, _)) in cfg.convs.iter().zip(&dims) {
            let fan_in = spec.kernel * spec.kernel * in_c;
            let w = init(fan_in, &[spec.filters, spec.kernel, spec.kernel, in_c]);
            convs.push(ConvLayer {
                w,
                b: Tensor::zeros(&[spec.filters]),
                stride: spec.stride,
                in_h,
                in_w,
                in_c,
                out_h,
                out_w,
            });
            in_h = out_h;
            in_w = out_w;
            in_c = spec.filters;
        }
        let flat = cfg.flatten_len()?;
        let dense1 = DenseLayer {
            w: init(flat, &[flat, cfg.hidden]),
            b: Tensor::zeros(&[cfg.hidden]),
        };
        let dense_out = DenseLayer {
            w: init(cfg.hidden, &[cfg.hidden, cfg.outputs]),
            b: Tensor::zeros(&[cfg.outputs]),
        };
        Ok(Self { cfg, convs, dense1, dense_out })
    }

    /// Fresh network with weights drawn uniformly from
    /// `(-sqrt(6 / fan_in), +sqrt(6 / fan_in))` per layer and zero biases.
    /// All draws come from a SplitMix64 stream seeded with `seed`.
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self, NnError> {
        let mut rng = SplitMix64::new(seed);
        Self::build(cfg, |fan_in, shape| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let len: usize = shape.iter().product();
            let data = (0..len)
                .map(|_| T::from_f64((rng.next_f64() * 2.0 - 1.0) * bound))
                .collect();
            Tensor::from_vec(shape, data).expect("length matches shape")
        })
    }

    /// All-zero weights and biases.
    pub fn zeros(cfg: NetConfig) -> Result<Self, NnError> {
        Self::build(cfg, |_, shape| Tensor::zeros(shape))
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// Deep copy of the weights. Training the original afterwards leaves the
    /// copy untouched.
    pub fn clone_weights(&self) -> Self {
        self.clone()
    }

    /// Parameter tensors in serialization order: weights then bias per layer.
    pub(crate) fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::with_capacity(2 * (self.convs.len() + 2));
        for c in &self.convs {
            out.push(&c.w);
            out.push(&c.b);
        }
        out.push(&self.dense1.w);
        out.push(&self.dense1.b);
        out.push(&self.dense_out.w);
        out.push(&self.dense_out.b);
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::with_capacity(2 * (self.convs.len() + 2));
        for c in &mut self.convs {
            out.push(&mut c.w);
            out.push(&mut c.b);
        }
        out.push(&mut self.dense1.w);
        out.push(&mut self.dense1.b);
        out.push(&mut self.dense_out.w);
        out.push(&mut self.dense_out.b);
        out
    }

    /// Layer name per parameter tensor, parallel to `params()`.
    pub(crate) fn param_layer_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(2 * (self.convs.len() + 2));
        for i in 0..self.convs.len() {
            out.push(format!("conv{}", i + 1));
            out.push(format!("conv{}", i + 1));
        }
        out.push("dense1".into());
        out.push("dense1".into());
        out.push("dense_out".into());
        out.push("dense_out".into());
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<usize, NnError> {
        let s = batch.shape();
        let ok = s.len() == 4
            && s[1] == self.cfg.input_h
            && s[2] == self.cfg.input_w
            && s[3] == self.cfg.input_c
            && s[0] > 0;
        if !ok {
            let b = if s.len() == 4 { s[0] } else { 1 };
            return Err(NnError::ShapeMismatch {
                expected: vec![b, self.cfg.input_h, self.cfg.input_w, self.cfg.input_c],
                got: s.to_vec(),
            });
        }
        Ok(s[0])
    }

    fn forward_cached(&self, batch: &Tensor<T>) -> Result<(usize, ForwardCache<T>), NnError> {
        let bsz = self.check_input(batch)?;
        let mut conv_cols = Vec::with_capacity(self.convs.len());
        let mut conv_post = Vec::with_capacity(self.convs.len());
        let mut cur: &[T] = batch.data();
        for layer in &self.convs {
            let rows = layer.rows(bsz);
            let patch = layer.patch_len();
            let mut cols = Tensor::zeros(&[rows, patch]);
            im2col(
                cur,
                bsz,
                layer.in_h,
                layer.in_w,
                layer.in_c,
                layer.kernel(),
                layer.stride,
                layer.out_h,
                layer.out_w,
                cols.data_mut(),
            );
            let mut post = Tensor::zeros(&[rows, layer.filters()]);
            // [rows x patch] * [filters x patch]^T
            matmul_nt(cols.data(), layer.w.data(), rows, patch, layer.filters(), post.data_mut());
            add_bias(post.data_mut(), layer.b.data());
            relu_inplace(post.data_mut());
            conv_cols.push(cols);
            conv_post.push(post);
            cur = conv_post.last().expect("just pushed").data();
        }

        let mut hidden_post = Tensor::zeros(&[bsz, self.cfg.hidden]);
        self.dense1.forward(cur, bsz, hidden_post.data_mut());
        relu_inplace(hidden_post.data_mut());

        let mut output = Tensor::zeros(&[bsz, self.cfg.outputs]);
        self.dense_out.forward(hidden_post.data(), bsz, output.data_mut());

        Ok((bsz, ForwardCache { conv_cols, conv_post, hidden_post, output }))
    }

    /// Batched forward pass: `[B, H, W, C]` in, `[B, outputs]` out, with
    /// output column a holding Q(s, a).
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (_, cache) = self.forward_cached(batch)?;
        Ok(cache.output)
    }

    /// Forward pass over a single flattened input.
    pub fn forward_one(&self, input: &[T]) -> Result<Vec<T>, NnError> {
        let t = Tensor::from_vec(
            &[1, self.cfg.input_h, self.cfg.input_w, self.cfg.input_c],
            input.to_vec(),
        )?;
        Ok(self.forward(&t)?.data().to_vec())
    }

    /// Masked MSE loss and its gradients with respect to every parameter.
    ///
    /// `loss = (1/B) * sum_b (Q(s_b, a_b) - y_b)^2`; only the chosen action's
    /// output receives gradient.
    fn loss_and_grads(
        &self,
        batch: &Tensor<T>,
        targets: &[T],
        actions: &[usize],
    ) -> Result<(T, Vec<Tensor<T>>), NnError> {
        let (bsz, cache) = self.forward_cached(batch)?;
        if targets.len() != bsz || actions.len() != bsz {
            return Err(NnError::ShapeMismatch {
                expected: vec![bsz],
                got: vec![targets.len(), actions.len()],
            });
        }
        let outputs = self.cfg.outputs;
        if let Some(&a) = actions.iter().find(|&&a| a >= outputs) {
            return Err(NnError::ShapeMismatch {
                expected: vec![outputs],
                got: vec![a],
            });
        }

        let inv_b = T::one() / T::from_f64(bsz as f64);
        let mut loss = T::zero();
        let mut dout = cache.output.zeros_like();
        for b in 0..bsz {
            let q = cache.output.data()[b * outputs + actions[b]];
            let diff = q - targets[b];
            loss = loss + diff * diff * inv_b;
            dout.data_mut()[b * outputs + actions[b]] = (diff + diff) * inv_b;
        }

        let mut grads: Vec<Tensor<T>> = self.params().iter().map(|p| p.zeros_like()).collect();
        let n_conv = self.convs.len();
        let g_dense1_w = 2 * n_conv;
        let g_out_w = 2 * n_conv + 2;

        // Output head.
        let hidden = self.cfg.hidden;
        matmul_tn(
            cache.hidden_post.data(),
            dout.data(),
            hidden,
            bsz,
            outputs,
            grads[g_out_w].data_mut(),
        );
        column_sums(dout.data(), outputs, grads[g_out_w + 1].data_mut());

        // Hidden dense layer.
        let mut dhidden = Tensor::zeros(&[bsz, hidden]);
        matmul_nt(
            dout.data(),
            self.dense_out.w.data(),
            bsz,
            outputs,
            hidden,
            dhidden.data_mut(),
        );
        relu_backward(dhidden.data_mut(), cache.hidden_post.data());

        let flat = self.dense1.inputs();
        let flat_acts = cache.conv_post.last().expect("conv stack").data();
        matmul_tn(flat_acts, dhidden.data(), flat, bsz, hidden, grads[g_dense1_w].data_mut());
        column_sums(dhidden.data(), hidden, grads[g_dense1_w + 1].data_mut());

        let mut dflat = Tensor::zeros(&[bsz, flat]);
        matmul_nt(dhidden.data(), self.dense1.w.data(), bsz, hidden, flat, dflat.data_mut());

        // Conv stack, newest to oldest. `dcur` is the gradient at the current
        // layer's post-ReLU output, flattened as [rows x filters].
        let mut dcur = dflat;
        for (li, layer) in self.convs.iter().enumerate().rev() {
            relu_backward(dcur.data_mut(), cache.conv_post[li].data());
            let rows = layer.rows(bsz);
            let patch = layer.patch_len();
            let filters = layer.filters();

            matmul_tn(
                dcur.data(),
                cache.conv_cols[li].data(),
                filters,
                rows,
                patch,
                grads[2 * li].data_mut(),
            );
            column_sums(dcur.data(), filters, grads[2 * li + 1].data_mut());

            // The input gradient of the first conv layer is never used.
            if li > 0 {
                let mut dcols = Tensor::zeros(&[rows, patch]);
                matmul(dcur.data(), layer.w.data(), rows, filters, patch, dcols.data_mut());
                let mut dinput = Tensor::zeros(&[bsz, layer.in_h, layer.in_w, layer.in_c]);
                col2im_add(
                    dcols.data(),
                    bsz,
                    layer.in_h,
                    layer.in_w,
                    layer.in_c,
                    layer.kernel(),
                    layer.stride,
                    layer.out_h,
                    layer.out_w,
                    dinput.data_mut(),
                );
                dcur = dinput;
            }
        }

        Ok((loss, grads))
    }
}

/// `out[j] += column sums of data[., j]` for a row-major `[rows x n]` matrix.
fn column_sums<T: Scalar>(data: &[T], n: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), n);
    for row in data.chunks_exact(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Adam optimizer state: first and second moments per parameter tensor plus
/// the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(net: &QNetwork<T>) -> Self {
        let m: Vec<Tensor<T>> = net.params().iter().map(|p| p.zeros_like()).collect();
        let v = m.clone();
        Self {
            m,
            v,
            step: 0,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            epsilon: T::from_f64(1e-8),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    pub(crate) fn from_parts(m: Vec<Tensor<T>>, v: Vec<Tensor<T>>, step: u64) -> Self {
        Self {
            m,
            v,
            step,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            epsilon: T::from_f64(1e-8),
        }
    }

    /// One bias-corrected Adam update over all parameters.
    fn apply(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: T) {
        self.step += 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.step as i32);
        let bc2 = one - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = gd[i];
                md[i] = self.beta1 * md[i] + (one - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (one - self.beta2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] = pd[i] - lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// One optimization step: masked MSE over the chosen actions, backprop, one
/// Adam update. Returns the pre-update loss.
pub fn train_step<T: Scalar>(
    net: &mut QNetwork<T>,
    adam: &mut AdamState<T>,
    batch: &Tensor<T>,
    targets: &[T],
    actions: &[usize],
    lr: T,
) -> Result<T, NnError> {
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(NnError::NumericFault {
            layer: "targets".into(),
            what: "target value",
        });
    }
    let (loss, grads) = net.loss_and_grads(batch, targets, actions)?;
    if !loss.is_finite() {
        return Err(NnError::NumericFault {
            layer: "loss".into(),
            what: "loss",
        });
    }
    let names = net.param_layer_names();
    for (g, name) in grads.iter().zip(&names) {
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(NnError::NumericFault {
                layer: name.clone(),
                what: "gradient",
            });
        }
    }
    let mut params = net.params_mut();
    adam.apply(&mut params, &grads, lr);
    Ok(loss)
}

/// Forward-only masked MSE loss, used by the finite-difference check.
pub fn loss_only<T: Scalar>(
    net: &QNetwork<T>,
    batch: &Tensor<T>,
    targets: &[T],
    actions: &[usize],
) -> Result<T, NnError> {
    let out = net.forward(batch)?;
    let outputs = net.config().outputs;
    let bsz = batch.shape()[0];
    let inv_b = T::one() / T::from_f64(bsz as f64);
    let mut loss = T::zero();
    for b in 0..bsz {
        let diff = out.data()[b * outputs + actions[b]] - targets[b];
        loss = loss + diff * diff * inv_b;
    }
    Ok(loss)
}

/// Compare every analytic gradient against the central finite difference
/// `(L(p + h) - L(p - h)) / 2h` and return the worst relative error
/// `|a - n| / max(1e-8, |a| + |n|)`. Meant for small f64 networks; the cost
/// is two forward passes per parameter.
pub fn grad_check(
    net: &QNetwork<f64>,
    batch: &Tensor<f64>,
    targets: &[f64],
    actions: &[usize],
    h: f64,
) -> Result<f64, NnError> {
    grad_check_impl(net, batch, targets, actions, h, None)
}

/// Tampering hook for the mutation test: scales one analytic gradient entry
/// before comparing, which must blow up the reported error.
fn grad_check_impl(
    net: &QNetwork<f64>,
    batch: &Tensor<f64>,
    targets: &[f64],
    actions: &[usize],
    h: f64,
    tamper: Option<(usize, usize, f64)>,
) -> Result<f64, NnError> {
    let (_, mut grads) = net.loss_and_grads(batch, targets, actions)?;
    if let Some((pi, ei, factor)) = tamper {
        grads[pi].data_mut()[ei] *= factor;
    }
    let mut work = net.clone();
    let mut max_rel = 0.0f64;
    let n_params = grads.len();
    for pi in 0..n_params {
        for ei in 0..grads[pi].len() {
            let orig = work.params()[pi].data()[ei];
            work.params_mut()[pi].data_mut()[ei] = orig + h;
            let lp = loss_only(&work, batch, targets, actions)?;
            work.params_mut()[pi].data_mut()[ei] = orig - h;
            let lm = loss_only(&work, batch, targets, actions)?;
            work.params_mut()[pi].data_mut()[ei] = orig;

            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grads[pi].data()[ei];
            let rel = (analytic - numeric).abs() / 1e-8f64.max(analytic.abs() + numeric.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
