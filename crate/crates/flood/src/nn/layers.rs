//! Network layers with hand-written backward passes: convolution (via
//! im2col + matmul), transposed convolution, parametric ReLU, batch
//! normalization, and residual blocks.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::tensor::{
    col2im_acc, conv_out_dim, im2col, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, NnError,
    Tensor,
};

/// A differentiable layer operating on (B, C, H, W) tensors. `forward` caches
/// what `backward` needs; `backward` accumulates parameter gradients and
/// returns the gradient with respect to the input.
pub trait Layer {
    fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor, NnError>;
    fn backward(&mut self, grad_out: &Tensor) -> Tensor;
    /// Trainable parameters as (name, tensor-with-grad) pairs.
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;
    /// Non-trainable state (batch-norm running statistics).
    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        Vec::new()
    }
    /// Output (C, H, W) for a given input (C, H, W); errors on geometry
    /// mismatch.
    fn out_shape(&self, c: usize, h: usize, w: usize) -> Result<(usize, usize, usize), NnError>;
}

fn check_input(x: &Tensor, want_c: usize) -> Result<(usize, usize, usize, usize), NnError> {
    if x.shape.len() != 4 {
        return Err(NnError::ShapeMismatch(format!(
            "expected 4-d input, got {:?}",
            x.shape
        )));
    }
    let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    if c != want_c {
        return Err(NnError::ShapeMismatch(format!(
            "expected {want_c} input channels, got {c}"
        )));
    }
    Ok((b, c, h, w))
}

// ---------------------------------------------------------------------------

pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    /// (cout, cin*k*k)
    pub weight: Tensor,
    /// (cout)
    pub bias: Tensor,
    cached_x: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w: Vec<f64> = (0..cout * cin * k * k)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            cin,
            cout,
            k,
            stride,
            padding,
            weight: Tensor::from_vec(&[cout, cin * k * k], w).with_grad(),
            bias: Tensor::zeros(&[cout]).with_grad(),
            cached_x: None,
        }
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor, _training: bool) -> Result<Tensor, NnError> {
        let (b, _, h, w) = check_input(x, self.cin)?;
        let (_, oh, ow) = self.out_shape(self.cin, h, w)?;
        let ck2 = self.cin * self.k * self.k;
        let ohow = oh * ow;
        let mut cols = vec![0.0; ck2 * ohow];
        let mut out = Tensor::zeros(&[b, self.cout, oh, ow]);
        for bi in 0..b {
            let xb = &x.data[bi * self.cin * h * w..(bi + 1) * self.cin * h * w];
            im2col(xb, self.cin, h, w, self.k, self.stride, self.padding, &mut cols);
            let yb = &mut out.data[bi * self.cout * ohow..(bi + 1) * self.cout * ohow];
            matmul_acc(yb, &self.weight.data, &cols, self.cout, ck2, ohow);
            for oc in 0..self.cout {
                let bv = self.bias.data[oc];
                for v in &mut yb[oc * ohow..(oc + 1) * ohow] {
                    *v += bv;
                }
            }
        }
        self.cached_x = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let x = self.cached_x.as_ref().expect("forward before backward");
        let (b, _, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let oh = grad_out.shape[2];
        let ow = grad_out.shape[3];
        let ck2 = self.cin * self.k * self.k;
        let ohow = oh * ow;
        let mut cols = vec![0.0; ck2 * ohow];
        let mut dcols = vec![0.0; ck2 * ohow];
        let mut dx = Tensor::zeros(&x.shape);
        let weight = self.weight.data.clone();
        let dw = self.weight.grad_mut();
        for bi in 0..b {
            let xb = &x.data[bi * self.cin * h * w..(bi + 1) * self.cin * h * w];
            im2col(xb, self.cin, h, w, self.k, self.stride, self.padding, &mut cols);
            let dyb = &grad_out.data[bi * self.cout * ohow..(bi + 1) * self.cout * ohow];
            // dW += dy * colsᵀ
            matmul_a_bt_acc(dw, dyb, &cols, self.cout, ohow, ck2);
            // dcols = Wᵀ * dy
            dcols.iter_mut().for_each(|v| *v = 0.0);
            matmul_at_b_acc(&mut dcols, &weight, dyb, self.cout, ck2, ohow);
            let dxb = &mut dx.data[bi * self.cin * h * w..(bi + 1) * self.cin * h * w];
            col2im_acc(&dcols, self.cin, h, w, self.k, self.stride, self.padding, dxb);
        }
        let db = self.bias.grad_mut();
        for bi in 0..b {
            for oc in 0..self.cout {
                let row = &grad_out.data[(bi * self.cout + oc) * ohow..(bi * self.cout + oc + 1) * ohow];
                db[oc] += row.iter().sum::<f64>();
            }
        }
        dx
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }

    fn out_shape(&self, c: usize, h: usize, w: usize) -> Result<(usize, usize, usize), NnError> {
        if c != self.cin {
            return Err(NnError::BadConfig(format!(
                "conv expects {} channels, got {c}",
                self.cin
            )));
        }
        // Require the kernel to tile the input exactly; a flooring stride
        // would silently change the spatial size through an encoder-decoder.
        let fits = |dim: usize| {
            (dim + 2 * self.padding)
                .checked_sub(self.k)
                .is_some_and(|r| r % self.stride == 0)
        };
        let oh = conv_out_dim(h, self.k, self.stride, self.padding);
        let ow = conv_out_dim(w, self.k, self.stride, self.padding);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 && fits(h) && fits(w) => {
                Ok((self.cout, oh, ow))
            }
            _ => Err(NnError::BadConfig(format!(
                "conv k={} s={} p={} does not fit {h}x{w}",
                self.k, self.stride, self.padding
            ))),
        }
    }
}

// ---------------------------------------------------------------------------

pub struct ConvTranspose2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    /// (cin, cout*k*k)
    pub weight: Tensor,
    /// (cout)
    pub bias: Tensor,
    cached_x: Option<Tensor>,
}

impl ConvTranspose2d {
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w: Vec<f64> = (0..cin * cout * k * k)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            cin,
            cout,
            k,
            stride,
            padding,
            weight: Tensor::from_vec(&[cin, cout * k * k], w).with_grad(),
            bias: Tensor::zeros(&[cout]).with_grad(),
            cached_x: None,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.k - 2 * self.padding,
            (w - 1) * self.stride + self.k - 2 * self.padding,
        )
    }
}

impl Layer for ConvTranspose2d {
    fn forward(&mut self, x: &Tensor, _training: bool) -> Result<Tensor, NnError> {
        let (b, _, h, w) = check_input(x, self.cin)?;
        let (oh, ow) = self.out_hw(h, w);
        let ck2 = self.cout * self.k * self.k;
        let hw = h * w;
        let mut cols = vec![0.0; ck2 * hw];
        let mut out = Tensor::zeros(&[b, self.cout, oh, ow]);
        for bi in 0..b {
            let xb = &x.data[bi * self.cin * hw..(bi + 1) * self.cin * hw];
            // cols = Wᵀ * x  (the adjoint of the equivalent conv's matmul)
            cols.iter_mut().for_each(|v| *v = 0.0);
            matmul_at_b_acc(&mut cols, &self.weight.data, xb, self.cin, ck2, hw);
            let yb = &mut out.data[bi * self.cout * oh * ow..(bi + 1) * self.cout * oh * ow];
            col2im_acc(&cols, self.cout, oh, ow, self.k, self.stride, self.padding, yb);
            for oc in 0..self.cout {
                let bv = self.bias.data[oc];
                for v in &mut yb[oc * oh * ow..(oc + 1) * oh * ow] {
                    *v += bv;
                }
            }
        }
        self.cached_x = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let x = self.cached_x.as_ref().expect("forward before backward");
        let (b, _, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (oh, ow) = (grad_out.shape[2], grad_out.shape[3]);
        let ck2 = self.cout * self.k * self.k;
        let hw = h * w;
        let mut dyc = vec![0.0; ck2 * hw];
        let mut dx = Tensor::zeros(&x.shape);
        {
            let dw = self.weight.grad_mut();
            for bi in 0..b {
                let dyb = &grad_out.data[bi * self.cout * oh * ow..(bi + 1) * self.cout * oh * ow];
                im2col(dyb, self.cout, oh, ow, self.k, self.stride, self.padding, &mut dyc);
                // dW += x * im2col(dy)ᵀ
                let xb = &x.data[bi * self.cin * hw..(bi + 1) * self.cin * hw];
                matmul_a_bt_acc(dw, xb, &dyc, self.cin, hw, ck2);
            }
        }
        for bi in 0..b {
            let dyb = &grad_out.data[bi * self.cout * oh * ow..(bi + 1) * self.cout * oh * ow];
            im2col(dyb, self.cout, oh, ow, self.k, self.stride, self.padding, &mut dyc);
            // dx = W * im2col(dy)
            let dxb = &mut dx.data[bi * self.cin * hw..(bi + 1) * self.cin * hw];
            matmul_acc(dxb, &self.weight.data, &dyc, self.cin, ck2, hw);
        }
        let db = self.bias.grad_mut();
        for bi in 0..b {
            for oc in 0..self.cout {
                let row = &grad_out.data
                    [(bi * self.cout + oc) * oh * ow..(bi * self.cout + oc + 1) * oh * ow];
                db[oc] += row.iter().sum::<f64>();
            }
        }
        dx
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }

    fn out_shape(&self, c: usize, h: usize, w: usize) -> Result<(usize, usize, usize), NnError> {
        if c != self.cin {
            return Err(NnError::BadConfig(format!(
                "conv_transpose expects {} channels, got {c}",
                self.cin
            )));
        }
        if self.k + h.saturating_sub(1) * self.stride < 2 * self.padding + 1 {
            return Err(NnError::BadConfig("conv_transpose geometry underflow".into()));
        }
        let (oh, ow) = self.out_hw(h, w);
        // The adjoint conv must map (oh, ow) back to (h, w) exactly.
        if conv_out_dim(oh, self.k, self.stride, self.padding) != Some(h)
            || conv_out_dim(ow, self.k, self.stride, self.padding) != Some(w)
        {
            return Err(NnError::BadConfig(format!(
                "conv_transpose k={} s={} p={} inconsistent at {h}x{w}",
                self.k, self.stride, self.padding
            )));
        }
        Ok((self.cout, oh, ow))
    }
}

// ---------------------------------------------------------------------------

pub struct PRelu {
    pub channels: usize,
    /// Per-channel negative slope, initialized to 0.25.
    pub slope: Tensor,
    cached_x: Option<Tensor>,
}

impl PRelu {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            slope: Tensor::from_vec(&[channels], vec![0.25; channels]).with_grad(),
            cached_x: None,
        }
    }
}

impl Layer for PRelu {
    fn forward(&mut self, x: &Tensor, _training: bool) -> Result<Tensor, NnError> {
        let (b, c, h, w) = check_input(x, self.channels)?;
        let mut out = Tensor::zeros(&x.shape);
        let hw = h * w;
        for bi in 0..b {
            for ch in 0..c {
                let a = self.slope.data[ch];
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    let v = x.data[i];
                    out.data[i] = if v >= 0.0 { v } else { a * v };
                }
            }
        }
        self.cached_x = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let x = self.cached_x.as_ref().expect("forward before backward");
        let (b, c) = (x.shape[0], x.shape[1]);
        let hw = x.shape[2] * x.shape[3];
        let mut dx = Tensor::zeros(&x.shape);
        let slope = self.slope.data.clone();
        let da = self.slope.grad_mut();
        for bi in 0..b {
            for ch in 0..c {
                let a = slope[ch];
                let base = (bi * c + ch) * hw;
                let mut acc = 0.0;
                for i in base..base + hw {
                    let v = x.data[i];
                    let g = grad_out.data[i];
                    if v >= 0.0 {
                        dx.data[i] = g;
                    } else {
                        dx.data[i] = a * g;
                        acc += g * v;
                    }
                }
                da[ch] += acc;
            }
        }
        dx
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("slope".into(), &mut self.slope)]
    }

    fn out_shape(&self, c: usize, h: usize, w: usize) -> Result<(usize, usize, usize), NnError> {
        if c != self.channels {
            return Err(NnError::BadConfig(format!(
                "prelu expects {} channels, got {c}",
                self.channels
            )));
        }
        Ok((c, h, w))
    }
}

// ---------------------------------------------------------------------------

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    cached: Option<BnCache>,
}

struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
    training: bool,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Tensor::from_vec(&[channels], vec![1.0; channels]).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::from_vec(&[channels], vec![1.0; channels]),
            cached: None,
        }
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor, NnError> {
        let (b, c, h, w) = check_input(x, self.channels)?;
        let hw = h * w;
        let m = (b * hw) as f64;
        let mut out = Tensor::zeros(&x.shape);
        let mut xhat = vec![0.0; x.data.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let (mean, var) = if training {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for bi in 0..b {
                    let base = (bi * c + ch) * hw;
                    for &v in &x.data[base..base + hw] {
                        sum += v;
                        sq += v * v;
                    }
                }
                let mean = sum / m;
                let var = (sq / m - mean * mean).max(0.0);
                self.running_mean.data[ch] =
                    (1.0 - BN_MOMENTUM) * self.running_mean.data[ch] + BN_MOMENTUM * mean;
                self.running_var.data[ch] =
                    (1.0 - BN_MOMENTUM) * self.running_var.data[ch] + BN_MOMENTUM * var;
                (mean, var)
            } else {
                (self.running_mean.data[ch], self.running_var.data[ch])
            };
            let istd = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = istd;
            let g = self.gamma.data[ch];
            let bt = self.beta.data[ch];
            for bi in 0..b {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (x.data[i] - mean) * istd;
                    xhat[i] = xh;
                    out.data[i] = g * xh + bt;
                }
            }
        }
        self.cached = Some(BnCache {
            xhat,
            inv_std,
            shape: x.shape.clone(),
            training,
        });
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let cache = self.cached.as_ref().expect("forward before backward");
        let (b, c) = (cache.shape[0], cache.shape[1]);
        let hw = cache.shape[2] * cache.shape[3];
        let m = (b * hw) as f64;
        let mut dx = Tensor::zeros(&cache.shape);
        let gamma = self.gamma.data.clone();
        for ch in 0..c {
            let istd = cache.inv_std[ch];
            let g = gamma[ch];
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for bi in 0..b {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    sum_dy += grad_out.data[i];
                    sum_dy_xhat += grad_out.data[i] * cache.xhat[i];
                }
            }
            self.gamma.grad_mut()[ch] += sum_dy_xhat;
            self.beta.grad_mut()[ch] += sum_dy;
            if cache.training {
                let mean_dy = sum_dy / m;
                let mean_dy_xhat = sum_dy_xhat / m;
                for bi in 0..b {
                    let base = (bi * c + ch) * hw;
                    for i in base..base + hw {
                        dx.data[i] = g
                            * istd
                            * (grad_out.data[i] - mean_dy - cache.xhat[i] * mean_dy_xhat);
                    }
                }
            } else {
                for bi in 0..b {
                    let base = (bi * c + ch) * hw;
                    for i in base..base + hw {
                        dx.data[i] = g * istd * grad_out.data[i];
                    }
                }
            }
        }
        dx
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("gamma".into(), &mut self.gamma),
            ("beta".into(), &mut self.beta),
        ]
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("running_mean".into(), &mut self.running_mean),
            ("running_var".into(), &mut self.running_var),
        ]
    }

    fn out_shape(&self, c: usize, h: usize, w: usize) -> Result<(usize, usize, usize), NnError> {
        if c != self.channels {
            return Err(NnError::BadConfig(format!(
                "batch_norm expects {} channels, got {c}",
                self.channels
            )));
        }
        Ok((c, h, w))
    }
}

// ---------------------------------------------------------------------------

/// Two conv(3x3, pad 1) + batch-norm stages with a PReLU between them and an
/// identity skip connection: `y = x + f(x)`. Channel-preserving.
pub struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    act: PRelu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    pub channels: usize,
}

impl ResidualBlock {
    pub fn new(channels: usize, rng: &mut ChaCha12Rng) -> Self {
        Self {
            conv1: Conv2d::new(channels, channels, 3, 1, 1, rng),
            bn1: BatchNorm2d::new(channels),
            act: PRelu::new(channels),
            conv2: Conv2d::new(channels, channels, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(channels),
            channels,
        }
    }
}

impl Layer for ResidualBlock {
    fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor, NnError> {
        let t = self.conv1.forward(x, training)?;
        let t = self.bn1.forward(&t, training)?;
        let t = self.act.forward(&t, training)?;
        let t = self.conv2.forward(&t, training)?;
        let mut t = self.bn2.forward(&t, training)?;
        for (o, &i) in t.data.iter_mut().zip(&x.data) {
            *o += i;
        }
        Ok(t)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let g = self.bn2.backward(grad_out);
        let g = self.conv2.backward(&g);
        let g = self.act.backward(&g);
        let g = self.bn1.backward(&g);
        let mut dx = self.conv1.backward(&g);
        for (d, &go) in dx.data.iter_mut().zip(&grad_out.data) {
            *d += go;
        }
        dx
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (prefix, layer) in [
            ("conv1", &mut self.conv1 as &mut dyn Layer),
            ("bn1", &mut self.bn1),
            ("act", &mut self.act),
            ("conv2", &mut self.conv2),
            ("bn2", &mut self.bn2),
        ] {
            for (name, t) in layer.params_mut() {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        out
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (prefix, layer) in [
            ("bn1", &mut self.bn1 as &mut dyn Layer),
            ("bn2", &mut self.bn2),
        ] {
            for (name, t) in layer.buffers_mut() {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        out
    }

    fn out_shape(&self, c: usize, h: usize, w: usize) -> Result<(usize, usize, usize), NnError> {
        if c != self.channels {
            return Err(NnError::BadConfig(format!(
                "residual_block expects {} channels, got {c}",
                self.channels
            )));
        }
        Ok((c, h, w))
    }
}

// ---------------------------------------------------------------------------

/// Maximum relative finite-difference gradient error of a layer at a random
/// input. Checks the input gradient and every parameter gradient of a scalar
/// loss `sum(weights * forward(x))` against central differences.
pub fn finite_diff_check(layer: &mut dyn Layer, x: &Tensor, rng: &mut ChaCha12Rng) -> f64 {
    const EPS: f64 = 1e-5;
    let y0 = layer.forward(x, true).expect("forward");
    let loss_w: Vec<f64> = (0..y0.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |y: &Tensor| -> f64 { y.data.iter().zip(&loss_w).map(|(a, b)| a * b).sum() };

    for (_, p) in layer.params_mut() {
        p.zero_grad();
    }
    let grad = Tensor::from_vec(&y0.shape, loss_w.clone());
    let dx = layer.backward(&grad);

    // The denominator floor turns the comparison absolute for entries whose
    // true gradient is at or below it. It must sit well above the central-
    // difference noise floor (ulp(loss)/EPS, ~1e-10 here), otherwise pure
    // roundoff on analytically-zero gradients — e.g. the bias of a conv
    // feeding a batch norm — registers as relative error.
    let mut max_rel: f64 = 0.0;
    let mut check = |analytic: f64, numeric: f64| {
        let denom = analytic.abs().max(numeric.abs()).max(1e-3);
        max_rel = max_rel.max((analytic - numeric).abs() / denom);
    };

    // Input gradient.
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data[i];
        xp.data[i] = orig + EPS;
        let lp = loss(&layer.forward(&xp, true).unwrap());
        xp.data[i] = orig - EPS;
        let lm = loss(&layer.forward(&xp, true).unwrap());
        xp.data[i] = orig;
        check(dx.data[i], (lp - lm) / (2.0 * EPS));
    }

    // Parameter gradients: perturb each parameter entry in place.
    let n_params = layer.params_mut().len();
    for pi in 0..n_params {
        let plen = layer.params_mut()[pi].1.len();
        for i in 0..plen {
            let analytic = layer.params_mut()[pi].1.grad.as_ref().unwrap()[i];
            let orig = layer.params_mut()[pi].1.data[i];
            layer.params_mut()[pi].1.data[i] = orig + EPS;
            let lp = loss(&layer.forward(x, true).unwrap());
            layer.params_mut()[pi].1.data[i] = orig - EPS;
            let lm = loss(&layer.forward(x, true).unwrap());
            layer.params_mut()[pi].1.data[i] = orig;
            check(analytic, (lp - lm) / (2.0 * EPS));
        }
    }
    max_rel
}
