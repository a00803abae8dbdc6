//! Operation tape: forward ops record what backward needs, and a single
//! reverse sweep produces gradients.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Clamp floor for the logarithmic activation.
pub const SAFELOG_FLOOR: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Train/eval switch for batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Elementwise / rowwise activation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActKind {
    Elu,
    Relu,
    Square,
    SafeLog,
    Softmax,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Running batch-norm statistics, owned by the layer that uses them.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

/// Recorded operation. Saved buffers hold exactly what backward needs.
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        groups: usize,
        pad: (usize, usize),
    },
    Dense {
        input: usize,
        weight: usize,
        bias: usize,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Pool {
        input: usize,
        kind: PoolKind,
        kernel: (usize, usize),
        stride: (usize, usize),
        argmax: Vec<usize>,
    },
    Act {
        input: usize,
        kind: ActKind,
        saved: Vec<f64>,
    },
    Dropout {
        input: usize,
        mask: Vec<f64>,
    },
    Wce {
        logits: usize,
        labels: Vec<u8>,
        weights: (f64, f64),
        probs: Vec<f64>,
    },
    Passthrough {
        input: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        input: usize,
        factor: f64,
    },
    Sum {
        input: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient map returned by [`Tape::backward`], indexed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the given node, if it was
    /// tracked. Requires-grad leaves always have an entry (zeros when the
    /// loss never touched them).
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Define-by-run operation tape.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Tape that records values only; backward is unavailable and ops skip
    /// their saved buffers. Used for inference.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    /// Register an input or parameter tensor.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let requires = self.grad_enabled && t.requires_grad();
        self.push(t, Op::Leaf, requires)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn requires(&self, ids: &[usize]) -> bool {
        self.grad_enabled && ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced by tape op (node {})",
            self.nodes.len()
        );
        // Drop saved buffers when nothing downstream needs gradients.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    // ── Layer operations ─────────────────────────────────────────────

    /// 2-D convolution, stride 1, symmetric zero padding, grouped.
    ///
    /// Input `[N, Cin, H, W]`, kernel `[Cout, Cin/groups, kh, kw]`, optional
    /// bias `[Cout]`. Output `[N, Cout, H+2ph-kh+1, W+2pw-kw+1]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        groups: usize,
        pad: (usize, usize),
    ) -> Result<NodeId> {
        let x = self.value(input);
        let k = self.value(kernel);
        let (n, cin, h, w) = x.dims4()?;
        let (cout, kcin, kh, kw) = k.dims4()?;
        let (ph, pw) = pad;
        if groups == 0 || cin % groups != 0 {
            return Err(Error::Config(format!(
                "groups={groups} does not divide input channels {cin}"
            )));
        }
        if cout % groups != 0 {
            return Err(Error::Config(format!(
                "groups={groups} does not divide output channels {cout}"
            )));
        }
        if kcin != cin / groups {
            return Err(Error::Dim {
                axis: "kernel.in_channels",
                detail: format!("kernel has {} input channels, expected {}", kcin, cin / groups),
            });
        }
        if kh > h + 2 * ph {
            return Err(Error::Dim {
                axis: "kernel.height",
                detail: format!("kernel height {kh} exceeds padded input height {}", h + 2 * ph),
            });
        }
        if kw > w + 2 * pw {
            return Err(Error::Dim {
                axis: "kernel.width",
                detail: format!("kernel width {kw} exceeds padded input width {}", w + 2 * pw),
            });
        }
        if let Some(b) = bias {
            let bt = self.value(b);
            if bt.shape() != [cout] {
                return Err(Error::Dim {
                    axis: "bias",
                    detail: format!("bias shape {:?}, expected [{cout}]", bt.shape()),
                });
            }
        }

        let ho = h + 2 * ph - kh + 1;
        let wo = w + 2 * pw - kw + 1;
        let cpg = cin / groups; // channels per group
        let opg = cout / groups; // output maps per group

        let xd = self.value(input).data();
        let kd = self.value(kernel).data();
        let bd = bias.map(|b| self.value(b).data());
        let mut out = vec![0.0; n * cout * ho * wo];

        for ni in 0..n {
            for co in 0..cout {
                let gi = co / opg;
                let obase = (ni * cout + co) * ho * wo;
                if let Some(bd) = bd {
                    out[obase..obase + ho * wo].fill(bd[co]);
                }
                for cl in 0..cpg {
                    let ci = gi * cpg + cl;
                    let xbase = (ni * cin + ci) * h * w;
                    for ki in 0..kh {
                        let (i0, i1) = row_range(ho, h, ph, ki);
                        if i1 <= i0 {
                            continue;
                        }
                        for kj in 0..kw {
                            let (j0, j1) = row_range(wo, w, pw, kj);
                            if j1 <= j0 {
                                continue;
                            }
                            let wk = kd[((co * cpg + cl) * kh + ki) * kw + kj];
                            let xoff = j0 + kj - pw;
                            for i in i0..i1 {
                                let xrow = xbase + (i + ki - ph) * w + xoff;
                                let orow = obase + i * wo + j0;
                                let len = j1 - j0;
                                let (xs, os) = (&xd[xrow..xrow + len], &mut out[orow..orow + len]);
                                for (o, xv) in os.iter_mut().zip(xs) {
                                    *o += wk * xv;
                                }
                            }
                        }
                    }
                }
            }
        }

        let value = Tensor::new(vec![n, cout, ho, wo], out)?;
        let mut ids = vec![input.0, kernel.0];
        if let Some(b) = bias {
            ids.push(b.0);
        }
        let req = self.requires(&ids);
        Ok(self.push(
            value,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.map(|b| b.0),
                groups,
                pad,
            },
            req,
        ))
    }

    /// Affine map `[N, F] x [F, K] + [K] -> [N, K]`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, f) = self.value(input).dims2()?;
        let (fw, k) = self.value(weight).dims2()?;
        if f != fw {
            return Err(Error::Dim {
                axis: "features",
                detail: format!("input has {f} features, weight expects {fw}"),
            });
        }
        if self.value(bias).shape() != [k] {
            return Err(Error::Dim {
                axis: "bias",
                detail: format!("bias shape {:?}, expected [{k}]", self.value(bias).shape()),
            });
        }
        let xd = self.value(input).data();
        let wd = self.value(weight).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; n * k];
        for ni in 0..n {
            let orow = &mut out[ni * k..(ni + 1) * k];
            orow.copy_from_slice(bd);
            for fi in 0..f {
                let xv = xd[ni * f + fi];
                let wrow = &wd[fi * k..(fi + 1) * k];
                for (o, wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        let value = Tensor::new(vec![n, k], out)?;
        let req = self.requires(&[input.0, weight.0, bias.0]);
        Ok(self.push(
            value,
            Op::Dense {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
            },
            req,
        ))
    }

    /// Per-channel batch normalization over `[N, C, H, W]`.
    ///
    /// Train mode normalizes by batch statistics (population variance) and
    /// folds them into `state` with the given momentum; eval mode uses
    /// `state` as-is.
    pub fn batchnorm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BnState,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<NodeId> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if eps <= 0.0 {
            return Err(Error::Config(format!("batchnorm epsilon must be > 0, got {eps}")));
        }
        if n * h * w == 0 {
            return Err(Error::Empty("batchnorm over an empty batch".into()));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Dim {
                axis: "channels",
                detail: format!(
                    "gamma/beta shapes {:?}/{:?}, expected [{c}]",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            });
        }
        if state.running_mean.len() != c || state.running_var.len() != c {
            return Err(Error::Dim {
                axis: "running_stats",
                detail: format!("state holds {} channels, expected {c}", state.running_mean.len()),
            });
        }

        let xd = self.value(input).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let plane = h * w;
        let m = (n * plane) as f64;

        let mut x_hat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c];
        for ci in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        sum += xd[base..base + plane].iter().sum::<f64>();
                    }
                    let mean = sum / m;
                    let mut ss = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        ss += xd[base..base + plane]
                            .iter()
                            .map(|x| (x - mean) * (x - mean))
                            .sum::<f64>();
                    }
                    let var = ss / m;
                    state.running_mean[ci] = (1.0 - momentum) * state.running_mean[ci] + momentum * mean;
                    state.running_var[ci] = (1.0 - momentum) * state.running_var[ci] + momentum * var;
                    (mean, var)
                }
                Mode::Eval => (state.running_mean[ci], state.running_var[ci]),
            };
            let is = 1.0 / (var + eps).sqrt();
            inv_std[ci] = is;
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for idx in base..base + plane {
                    x_hat[idx] = (xd[idx] - mean) * is;
                }
            }
        }

        let mut out = vec![0.0; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let (g, b) = (gd[ci], bd[ci]);
                for idx in base..base + plane {
                    out[idx] = g * x_hat[idx] + b;
                }
            }
        }

        let value = Tensor::new(vec![n, c, h, w], out)?;
        let req = self.requires(&[input.0, gamma.0, beta.0]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                input: input.0,
                gamma: gamma.0,
                beta: beta.0,
                x_hat,
                inv_std,
                train: mode == Mode::Train,
            },
            req,
        ))
    }

    /// Average or max pooling with explicit kernel and stride.
    pub fn pool2d(
        &mut self,
        input: NodeId,
        kind: PoolKind,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<NodeId> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (kh, kw) = kernel;
        let (sh, sw) = stride;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(Error::Config("pool kernel and stride must be positive".into()));
        }
        if kh > h || kw > w {
            return Err(Error::Dim {
                axis: "pool.kernel",
                detail: format!("pool kernel ({kh},{kw}) larger than input ({h},{w})"),
            });
        }
        let ho = (h - kh) / sh + 1;
        let wo = (w - kw) / sw + 1;
        let xd = self.value(input).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax = vec![0usize; out.len()];
        }
        let inv_area = 1.0 / (kh * kw) as f64;
        for nc in 0..n * c {
            let xbase = nc * h * w;
            let obase = nc * ho * wo;
            for i in 0..ho {
                for j in 0..wo {
                    let (r0, c0) = (i * sh, j * sw);
                    match kind {
                        PoolKind::Avg => {
                            let mut s = 0.0;
                            for ki in 0..kh {
                                let row = xbase + (r0 + ki) * w + c0;
                                s += xd[row..row + kw].iter().sum::<f64>();
                            }
                            out[obase + i * wo + j] = s * inv_area;
                        }
                        PoolKind::Max => {
                            // First occurrence in row-major order wins ties.
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = 0;
                            for ki in 0..kh {
                                let row = xbase + (r0 + ki) * w + c0;
                                for kj in 0..kw {
                                    let v = xd[row + kj];
                                    if v > best {
                                        best = v;
                                        best_idx = row + kj;
                                    }
                                }
                            }
                            out[obase + i * wo + j] = best;
                            argmax[obase + i * wo + j] = best_idx;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        let req = self.requires(&[input.0]);
        Ok(self.push(
            value,
            Op::Pool {
                input: input.0,
                kind,
                kernel,
                stride,
                argmax,
            },
            req,
        ))
    }

    /// Elementwise activation; softmax applies over the final axis.
    pub fn activate(&mut self, input: NodeId, kind: ActKind) -> Result<NodeId> {
        let x = self.value(input);
        let xd = x.data();
        let shape = x.shape().to_vec();
        let mut out = vec![0.0; xd.len()];
        // `saved` is whichever of input/output the backward formula reads.
        let saved: Vec<f64>;
        match kind {
            ActKind::Elu => {
                for (o, &v) in out.iter_mut().zip(xd) {
                    *o = if v >= 0.0 { v } else { v.exp() - 1.0 };
                }
                saved = out.clone();
            }
            ActKind::Relu => {
                for (o, &v) in out.iter_mut().zip(xd) {
                    *o = v.max(0.0);
                }
                saved = out.clone();
            }
            ActKind::Square => {
                for (o, &v) in out.iter_mut().zip(xd) {
                    *o = v * v;
                }
                saved = xd.to_vec();
            }
            ActKind::SafeLog => {
                for (o, &v) in out.iter_mut().zip(xd) {
                    *o = v.max(SAFELOG_FLOOR).ln();
                }
                saved = xd.to_vec();
            }
            ActKind::Sigmoid => {
                for (o, &v) in out.iter_mut().zip(xd) {
                    *o = 1.0 / (1.0 + (-v).exp());
                }
                saved = out.clone();
            }
            ActKind::Softmax => {
                let cols = *shape.last().ok_or(Error::Dim {
                    axis: "rank",
                    detail: "softmax on 0-D tensor".into(),
                })?;
                for (orow, xrow) in out.chunks_mut(cols).zip(xd.chunks(cols)) {
                    let mx = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for (o, &v) in orow.iter_mut().zip(xrow) {
                        *o = (v - mx).exp();
                        z += *o;
                    }
                    for o in orow.iter_mut() {
                        *o /= z;
                    }
                }
                saved = out.clone();
            }
        }
        let value = Tensor::new(shape, out)?;
        let req = self.requires(&[input.0]);
        Ok(self.push(
            value,
            Op::Act {
                input: input.0,
                kind,
                saved,
            },
            req,
        ))
    }

    /// Inverted dropout: train mode zeroes with probability `p` and scales
    /// survivors by `1/(1-p)`; eval mode is the identity.
    pub fn dropout(
        &mut self,
        input: NodeId,
        p: f64,
        mode: Mode,
        rng: &mut SplitMix64,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {p}")));
        }
        if mode == Mode::Eval || p == 0.0 {
            // Identity; consumes no randomness.
            let value = self.value(input).clone();
            let req = self.requires(&[input.0]);
            return Ok(self.push(value, Op::Passthrough { input: input.0 }, req));
        }
        let xd = self.value(input).data();
        let scale = 1.0 / (1.0 - p);
        let mut mask = vec![0.0; xd.len()];
        for m in mask.iter_mut() {
            if rng.next_f64() >= p {
                *m = scale;
            }
        }
        let out: Vec<f64> = xd.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(self.value(input).shape().to_vec(), out)?;
        let req = self.requires(&[input.0]);
        Ok(self.push(
            value,
            Op::Dropout {
                input: input.0,
                mask,
            },
            req,
        ))
    }

    /// Class-weighted softmax cross-entropy over two classes.
    ///
    /// `loss = mean_i w[y_i] * (-ln softmax(logits_i)[y_i])`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[u8],
        weights: (f64, f64),
    ) -> Result<NodeId> {
        let (n, k) = self.value(logits).dims2()?;
        if k != 2 {
            return Err(Error::Dim {
                axis: "classes",
                detail: format!("expected 2 logit columns, got {k}"),
            });
        }
        if labels.len() != n {
            return Err(Error::Dim {
                axis: "labels",
                detail: format!("{} labels for {n} rows", labels.len()),
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::Label(format!("label {bad} outside {{0, 1}}")));
        }
        if weights.0 <= 0.0 || weights.1 <= 0.0 {
            return Err(Error::Config(format!("class weights must be positive, got {weights:?}")));
        }
        let xd = self.value(logits).data();
        if !xd.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite logits in cross-entropy".into()));
        }
        let mut probs = vec![0.0; xd.len()];
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let (a, b) = (xd[2 * i], xd[2 * i + 1]);
            let mx = a.max(b);
            let (ea, eb) = ((a - mx).exp(), (b - mx).exp());
            let z = ea + eb;
            probs[2 * i] = ea / z;
            probs[2 * i + 1] = eb / z;
            let w = if y == 0 { weights.0 } else { weights.1 };
            loss += w * -(probs[2 * i + y as usize].max(f64::MIN_POSITIVE).ln());
        }
        loss /= n as f64;
        let value = Tensor::scalar(loss);
        let req = self.requires(&[logits.0]);
        Ok(self.push(
            value,
            Op::Wce {
                logits: logits.0,
                labels: labels.to_vec(),
                weights,
                probs,
            },
            req,
        ))
    }

    // ── Plumbing operations ──────────────────────────────────────────

    /// Same data, new shape; gradient reshapes back.
    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(input).reshaped(shape)?;
        let req = self.requires(&[input.0]);
        Ok(self.push(value, Op::Passthrough { input: input.0 }, req))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dim {
                axis: "shape",
                detail: format!("add of {:?} and {:?}", ta.shape(), tb.shape()),
            });
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let req = self.requires(&[a.0, b.0]);
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, req))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dim {
                axis: "shape",
                detail: format!("mul of {:?} and {:?}", ta.shape(), tb.shape()),
            });
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let req = self.requires(&[a.0, b.0]);
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, req))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId> {
        let t = self.value(input);
        let out: Vec<f64> = t.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let req = self.requires(&[input.0]);
        Ok(self.push(
            value,
            Op::Scale {
                input: input.0,
                factor,
            },
            req,
        ))
    }

    /// Sum of every element, as a scalar node.
    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.value(input).data().iter().sum();
        let req = self.requires(&[input.0]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { input: input.0 }, req))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns gradients for every tracked
    /// node; requires-grad leaves the loss never reached get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::Usage("backward on a no-grad tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = (match self.nodes[id].op {
                // Leaf gradients are results; keep them in place.
                Op::Leaf => grads[id].clone(),
                _ => grads[id].take(),
            }) else {
                continue;
            };
            self.backprop_node(id, &g, &mut grads);
        }

        let grad_tensors = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, node)| {
                if !node.requires_grad {
                    return None;
                }
                match &node.op {
                    Op::Leaf => {
                        let data = grads[id]
                            .take()
                            .unwrap_or_else(|| vec![0.0; node.value.len()]);
                        Some(Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients {
            grads: grad_tensors,
        })
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let acc = |grads: &mut Vec<Option<Vec<f64>>>, target: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[target].requires_grad {
                return;
            }
            let buf = grads[target]
                .get_or_insert_with(|| vec![0.0; self.nodes[target].value.len()]);
            f(buf);
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Passthrough { input } => {
                acc(grads, *input, &mut |gx| {
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += b;
                    }
                });
            }
            Op::Add { a, b } => {
                for &t in [a, b].iter() {
                    acc(grads, *t, &mut |gx| {
                        for (x, y) in gx.iter_mut().zip(g) {
                            *x += y;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                acc(grads, *a, &mut |gx| {
                    for ((x, y), z) in gx.iter_mut().zip(g).zip(bv) {
                        *x += y * z;
                    }
                });
                acc(grads, *b, &mut |gx| {
                    for ((x, y), z) in gx.iter_mut().zip(g).zip(av) {
                        *x += y * z;
                    }
                });
            }
            Op::Scale { input, factor } => {
                let f = *factor;
                acc(grads, *input, &mut |gx| {
                    for (x, y) in gx.iter_mut().zip(g) {
                        *x += y * f;
                    }
                });
            }
            Op::Sum { input } => {
                let gs = g[0];
                acc(grads, *input, &mut |gx| {
                    for x in gx.iter_mut() {
                        *x += gs;
                    }
                });
            }
            Op::Act { input, kind, saved } => {
                match kind {
                    ActKind::Softmax => {
                        let cols = *self.nodes[id].value.shape().last().unwrap();
                        acc(grads, *input, &mut |gx| {
                            for ((gxrow, grow), yrow) in gx
                                .chunks_mut(cols)
                                .zip(g.chunks(cols))
                                .zip(saved.chunks(cols))
                            {
                                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                                for ((dx, &gv), &yv) in gxrow.iter_mut().zip(grow).zip(yrow) {
                                    *dx += yv * (gv - dot);
                                }
                            }
                        });
                    }
                    _ => {
                        acc(grads, *input, &mut |gx| {
                            for ((dx, &gv), &s) in gx.iter_mut().zip(g).zip(saved) {
                                let d = match kind {
                                    ActKind::Elu => {
                                        if s >= 0.0 {
                                            1.0
                                        } else {
                                            s + 1.0 // saved output; d elu = e^x = y + 1
                                        }
                                    }
                                    ActKind::Relu => {
                                        if s > 0.0 {
                                            1.0
                                        } else {
                                            0.0
                                        }
                                    }
                                    ActKind::Square => 2.0 * s,
                                    ActKind::SafeLog => {
                                        if s >= SAFELOG_FLOOR {
                                            1.0 / s
                                        } else {
                                            0.0 // clamped region is flat
                                        }
                                    }
                                    ActKind::Sigmoid => s * (1.0 - s),
                                    ActKind::Softmax => unreachable!(),
                                };
                                *dx += gv * d;
                            }
                        });
                    }
                }
            }
            Op::Dropout { input, mask } => {
                acc(grads, *input, &mut |gx| {
                    for ((dx, &gv), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *dx += gv * m;
                    }
                });
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (n, f) = self.nodes[*input].value.dims2().unwrap();
                let k = self.nodes[*weight].value.shape()[1];
                let xd = self.nodes[*input].value.data();
                let wd = self.nodes[*weight].value.data();
                acc(grads, *input, &mut |gx| {
                    for ni in 0..n {
                        let grow = &g[ni * k..(ni + 1) * k];
                        for fi in 0..f {
                            let wrow = &wd[fi * k..(fi + 1) * k];
                            let dot: f64 = grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                            gx[ni * f + fi] += dot;
                        }
                    }
                });
                acc(grads, *weight, &mut |gw| {
                    for ni in 0..n {
                        let grow = &g[ni * k..(ni + 1) * k];
                        for fi in 0..f {
                            let xv = xd[ni * f + fi];
                            let gwrow = &mut gw[fi * k..(fi + 1) * k];
                            for (w, &gv) in gwrow.iter_mut().zip(grow) {
                                *w += xv * gv;
                            }
                        }
                    }
                });
                acc(grads, *bias, &mut |gb| {
                    for ni in 0..n {
                        for (b, &gv) in gb.iter_mut().zip(&g[ni * k..(ni + 1) * k]) {
                            *b += gv;
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                groups,
                pad,
            } => {
                let (n, cin, h, w) = self.nodes[*input].value.dims4().unwrap();
                let (cout, cpg, kh, kw) = self.nodes[*kernel].value.dims4().unwrap();
                let (_, _, ho, wo) = self.nodes[id].value.dims4().unwrap();
                let (ph, pw) = *pad;
                let opg = cout / groups;
                let xd = self.nodes[*input].value.data();
                let kd = self.nodes[*kernel].value.data();

                acc(grads, *input, &mut |gx| {
                    for ni in 0..n {
                        for co in 0..cout {
                            let gi = co / opg;
                            let obase = (ni * cout + co) * ho * wo;
                            for cl in 0..cpg {
                                let ci = gi * cpg + cl;
                                let xbase = (ni * cin + ci) * h * w;
                                for ki in 0..kh {
                                    let (i0, i1) = row_range(ho, h, ph, ki);
                                    if i1 <= i0 {
                                        continue;
                                    }
                                    for kj in 0..kw {
                                        let (j0, j1) = row_range(wo, w, pw, kj);
                                        if j1 <= j0 {
                                            continue;
                                        }
                                        let wk = kd[((co * cpg + cl) * kh + ki) * kw + kj];
                                        let xoff = j0 + kj - pw;
                                        for i in i0..i1 {
                                            let xrow = xbase + (i + ki - ph) * w + xoff;
                                            let orow = obase + i * wo + j0;
                                            let len = j1 - j0;
                                            let (gs, xs) =
                                                (&g[orow..orow + len], &mut gx[xrow..xrow + len]);
                                            for (x, gv) in xs.iter_mut().zip(gs) {
                                                *x += wk * gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                acc(grads, *kernel, &mut |gk| {
                    for ni in 0..n {
                        for co in 0..cout {
                            let gi = co / opg;
                            let obase = (ni * cout + co) * ho * wo;
                            for cl in 0..cpg {
                                let ci = gi * cpg + cl;
                                let xbase = (ni * cin + ci) * h * w;
                                for ki in 0..kh {
                                    let (i0, i1) = row_range(ho, h, ph, ki);
                                    if i1 <= i0 {
                                        continue;
                                    }
                                    for kj in 0..kw {
                                        let (j0, j1) = row_range(wo, w, pw, kj);
                                        if j1 <= j0 {
                                            continue;
                                        }
                                        let xoff = j0 + kj - pw;
                                        let mut s = 0.0;
                                        for i in i0..i1 {
                                            let xrow = xbase + (i + ki - ph) * w + xoff;
                                            let orow = obase + i * wo + j0;
                                            let len = j1 - j0;
                                            s += g[orow..orow + len]
                                                .iter()
                                                .zip(&xd[xrow..xrow + len])
                                                .map(|(a, b)| a * b)
                                                .sum::<f64>();
                                        }
                                        gk[((co * cpg + cl) * kh + ki) * kw + kj] += s;
                                    }
                                }
                            }
                        }
                    }
                });
                if let Some(b) = bias {
                    acc(grads, *b, &mut |gb| {
                        for ni in 0..n {
                            for co in 0..cout {
                                let obase = (ni * cout + co) * ho * wo;
                                gb[co] += g[obase..obase + ho * wo].iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::Pool {
                input,
                kind,
                kernel,
                stride,
                argmax,
            } => {
                let (n, c, h, w) = self.nodes[*input].value.dims4().unwrap();
                let (_, _, ho, wo) = self.nodes[id].value.dims4().unwrap();
                let (kh, kw) = *kernel;
                let (sh, sw) = *stride;
                match kind {
                    PoolKind::Avg => {
                        let share = 1.0 / (kh * kw) as f64;
                        acc(grads, *input, &mut |gx| {
                            for nc in 0..n * c {
                                let xbase = nc * h * w;
                                let obase = nc * ho * wo;
                                for i in 0..ho {
                                    for j in 0..wo {
                                        let gv = g[obase + i * wo + j] * share;
                                        for ki in 0..kh {
                                            let row = xbase + (i * sh + ki) * w + j * sw;
                                            for x in gx[row..row + kw].iter_mut() {
                                                *x += gv;
                                            }
                                        }
                                    }
                                }
                            }
                        });
                    }
                    PoolKind::Max => {
                        acc(grads, *input, &mut |gx| {
                            for (o, &src) in argmax.iter().enumerate() {
                                gx[src] += g[o];
                            }
                        });
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = self.nodes[*input].value.dims4().unwrap();
                let plane = h * w;
                let m = (n * plane) as f64;
                let gd = self.nodes[*gamma].value.data();

                acc(grads, *gamma, &mut |gg| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            gg[ci] += g[base..base + plane]
                                .iter()
                                .zip(&x_hat[base..base + plane])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                    }
                });
                acc(grads, *beta, &mut |gb| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            gb[ci] += g[base..base + plane].iter().sum::<f64>();
                        }
                    }
                });
                acc(grads, *input, &mut |gx| {
                    if *train {
                        // Backprop through the batch statistics.
                        for ci in 0..c {
                            let mut sum_dxh = 0.0;
                            let mut sum_dxh_xh = 0.0;
                            for ni in 0..n {
                                let base = (ni * c + ci) * plane;
                                for idx in base..base + plane {
                                    let dxh = g[idx] * gd[ci];
                                    sum_dxh += dxh;
                                    sum_dxh_xh += dxh * x_hat[idx];
                                }
                            }
                            let is = inv_std[ci];
                            for ni in 0..n {
                                let base = (ni * c + ci) * plane;
                                for idx in base..base + plane {
                                    let dxh = g[idx] * gd[ci];
                                    gx[idx] +=
                                        is / m * (m * dxh - sum_dxh - x_hat[idx] * sum_dxh_xh);
                                }
                            }
                        }
                    } else {
                        // Running stats are constants in eval mode.
                        for ni in 0..n {
                            for ci in 0..c {
                                let scale = gd[ci] * inv_std[ci];
                                let base = (ni * c + ci) * plane;
                                for idx in base..base + plane {
                                    gx[idx] += g[idx] * scale;
                                }
                            }
                        }
                    }
                });
            }
            Op::Wce {
                logits,
                labels,
                weights,
                probs,
            } => {
                let n = labels.len() as f64;
                let gs = g[0];
                acc(grads, *logits, &mut |gl| {
                    for (i, &y) in labels.iter().enumerate() {
                        let wy = if y == 0 { weights.0 } else { weights.1 };
                        for k in 0..2 {
                            let target = if k == y as usize { 1.0 } else { 0.0 };
                            gl[2 * i + k] += gs * wy / n * (probs[2 * i + k] - target);
                        }
                    }
                });
            }
        }
    }
}

/// Valid output-row interval [i0, i1) for a kernel offset under symmetric
/// zero padding: output index i reads input index i + k - pad.
#[inline]
fn row_range(out_len: usize, in_len: usize, pad: usize, k: usize) -> (usize, usize) {
    let i0 = (pad as isize - k as isize).max(0) as usize;
    let i1 = ((in_len + pad) as isize - k as isize)
        .min(out_len as isize)
        .max(0) as usize;
    (i0, i1)
}
