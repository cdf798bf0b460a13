use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{self, BatchNorm, BatchStats};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.03;

/// What a parameter is, which decides regularization and weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Convolution, linear and attention weights.
    Weight,
    Bias,
    Norm,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub var: Var,
    pub group: usize,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(c: usize) -> Self {
        RunningStats {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        }
    }

    /// Exponential update with the unbiased batch variance.
    fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], count: usize) {
        let corr = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.mean.len() {
            self.mean[c] += BN_MOMENTUM * (batch_mean[c] - self.mean[c]);
            self.var[c] += BN_MOMENTUM * (batch_var[c] * corr - self.var[c]);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Buffer {
    pub name: String,
    pub group: usize,
    pub stats: Arc<Mutex<RunningStats>>,
}

/// Owns every trainable tensor and normalization buffer of a network, in
/// construction order, tagged with the layer group that created it.
#[derive(Debug)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<Buffer>,
    dtype: DType,
    rng: ChaCha8Rng,
    group: usize,
    prefix: Vec<String>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
            group: 0,
            prefix: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn set_group(&mut self, g: usize) {
        self.group = g;
    }

    pub fn group(&self) -> usize {
        self.group
    }

    pub fn push(&mut self, name: &str) {
        self.prefix.push(name.to_string());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    fn add(&mut self, name: &str, data: Vec<f64>, shape: &[usize], kind: ParamKind) -> Result<Var> {
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.params.push(Param {
            name: self.full_name(name),
            var: var.clone(),
            group: self.group,
            kind,
        });
        Ok(var)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, kind: ParamKind) -> Result<Var> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.add(name, data, shape, kind)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, kind: ParamKind) -> Result<Var> {
        let n = shape.iter().product();
        let dist = rand_distr::Normal::new(0.0, std).expect("std is finite");
        let data = (0..n).map(|_| self.rng.sample(dist)).collect();
        self.add(name, data, shape, kind)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64, kind: ParamKind) -> Result<Var> {
        self.add(name, vec![v; shape.iter().product()], shape, kind)
    }

    pub fn running_stats(&mut self, name: &str, c: usize) -> Arc<Mutex<RunningStats>> {
        let stats = Arc::new(Mutex::new(RunningStats::new(c)));
        self.buffers.push(Buffer {
            name: self.full_name(name),
            group: self.group,
            stats: stats.clone(),
        });
        stats
    }
}

/// Per-call switches: training mode and the number of frozen leading groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ctx {
    pub train: bool,
    pub frozen: usize,
}

impl Ctx {
    pub fn eval() -> Self {
        Ctx {
            train: false,
            frozen: 0,
        }
    }

    pub fn train(frozen: usize) -> Self {
        Ctx { train: true, frozen }
    }

    pub fn trains(&self, group: usize) -> bool {
        self.train && group >= self.frozen
    }

    /// The parameter tensor, cut off from the tape when its group is frozen.
    pub fn p(&self, v: &Var, group: usize) -> Tensor {
        if group < self.frozen {
            v.as_tensor().detach()
        } else {
            v.as_tensor().clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Var,
    pub beta: Var,
    pub stats: Arc<Mutex<RunningStats>>,
    pub group: usize,
}

impl BatchNorm2d {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        ps.push(name);
        let gamma = ps.constant("weight", &[c], 1.0, ParamKind::Norm)?;
        let beta = ps.constant("bias", &[c], 0.0, ParamKind::Norm)?;
        let stats = ps.running_stats("running", c);
        ps.pop();
        Ok(BatchNorm2d {
            gamma,
            beta,
            stats,
            group: ps.group(),
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let gamma = ctx.p(&self.gamma, self.group);
        let beta = ctx.p(&self.beta, self.group);
        self.forward_with(x, &gamma, &beta, ctx)
    }

    /// Normalizes with caller-provided affine tensors (used where the scale
    /// factors also feed other expressions).
    pub fn forward_with(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor, ctx: Ctx) -> Result<Tensor> {
        if ctx.trains(self.group) {
            let record: BatchStats = Default::default();
            let op = BatchNorm {
                eps: BN_EPS,
                running: None,
                record: Some(record.clone()),
            };
            let y = ops::batch_norm(x, gamma, beta, op)?;
            if let Some((m, v)) = record.lock().expect("stats lock").take() {
                let dims = x.dims();
                let count = dims[0] * dims[2..].iter().product::<usize>();
                self.stats.lock().expect("stats lock").update(&m, &v, count);
            }
            Ok(y)
        } else {
            let s = self.stats.lock().expect("stats lock").clone();
            let op = BatchNorm {
                eps: BN_EPS,
                running: Some((s.mean, s.var)),
                record: None,
            };
            ops::batch_norm(x, gamma, beta, op)
        }
    }
}

/// Convolution, batch norm, SiLU.
#[derive(Debug, Clone)]
pub struct ConvBnAct {
    pub weight: Var,
    pub bn: BatchNorm2d,
    pub stride: usize,
    pub pad: usize,
    pub group: usize,
}

impl ConvBnAct {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        ps.push(name);
        let fan_in = (c_in * k * k) as f64;
        let weight = ps.uniform("conv.weight", &[c_out, c_in, k, k], 1.0 / fan_in.sqrt(), ParamKind::Weight)?;
        let bn = BatchNorm2d::new(ps, "bn", c_out)?;
        ps.pop();
        Ok(ConvBnAct {
            weight,
            bn,
            stride,
            pad: k / 2,
            group: ps.group(),
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let y = ops::conv2d(x, &ctx.p(&self.weight, self.group), self.stride, self.pad)?;
        ops::silu(&self.bn.forward(&y, ctx)?)
    }
}

#[derive(Debug, Clone)]
pub struct Bottleneck {
    cv1: ConvBnAct,
    cv2: ConvBnAct,
    add: bool,
}

impl Bottleneck {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize, shortcut: bool) -> Result<Self> {
        ps.push(name);
        let cv1 = ConvBnAct::new(ps, "cv1", c, c, 1, 1)?;
        let cv2 = ConvBnAct::new(ps, "cv2", c, c, 3, 1)?;
        ps.pop();
        Ok(Bottleneck { cv1, cv2, add: shortcut })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let y = self.cv2.forward(&self.cv1.forward(x, ctx)?, ctx)?;
        if self.add {
            x + y
        } else {
            Ok(y)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
    group: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, bias: bool) -> Result<Self> {
        ps.push(name);
        let bound = 1.0 / (c_in as f64).sqrt();
        let weight = ps.uniform("weight", &[c_out, c_in], bound, ParamKind::Weight)?;
        let bias = if bias {
            Some(ps.uniform("bias", &[c_out], bound, ParamKind::Bias)?)
        } else {
            None
        };
        ps.pop();
        Ok(Linear {
            weight,
            bias,
            group: ps.group(),
        })
    }

    /// `x` is `(batch, tokens, c_in)`.
    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let y = x.broadcast_matmul(&ctx.p(&self.weight, self.group).t()?)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&ctx.p(b, self.group)),
            None => Ok(y),
        }
    }
}

/// Self-attention encoder layer without layer norm: attention plus a two-layer
/// linear MLP, each with a residual connection.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl TransformerLayer {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize, heads: usize) -> Result<Self> {
        ps.push(name);
        let layer = TransformerLayer {
            q: Linear::new(ps, "q", c, c, true)?,
            k: Linear::new(ps, "k", c, c, true)?,
            v: Linear::new(ps, "v", c, c, true)?,
            out: Linear::new(ps, "out_proj", c, c, true)?,
            fc1: Linear::new(ps, "fc1", c, c, false)?,
            fc2: Linear::new(ps, "fc2", c, c, false)?,
            heads,
        };
        ps.pop();
        Ok(layer)
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let (b, l, c) = x.dims3()?;
        let d = c / self.heads;
        let split = |t: Tensor| -> Result<Tensor> {
            t.reshape((b, l, self.heads, d))?.transpose(1, 2)?.contiguous()
        };
        let q = split(self.q.forward(x, ctx)?)?;
        let k = split(self.k.forward(x, ctx)?)?;
        let v = split(self.v.forward(x, ctx)?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (d as f64).sqrt())?;
        let attn = ops::softmax_last(&scores)?.matmul(&v)?;
        let attn = attn.transpose(1, 2)?.contiguous()?.reshape((b, l, c))?;
        let x = (self.out.forward(&attn, ctx)? + x)?;
        let mlp = self.fc2.forward(&self.fc1.forward(&x, ctx)?, ctx)?;
        mlp + x
    }
}

/// Flattens a feature map to tokens, adds a learned linear position term and
/// runs one transformer layer.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pos: Linear,
    layer: TransformerLayer,
}

impl TransformerBlock {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize, heads: usize) -> Result<Self> {
        ps.push(name);
        let block = TransformerBlock {
            pos: Linear::new(ps, "linear", c, c, true)?,
            layer: TransformerLayer::new(ps, "tr.0", c, heads)?,
        };
        ps.pop();
        Ok(block)
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let p = x.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let p = (self.pos.forward(&p, ctx)? + &p)?;
        let y = self.layer.forward(&p, ctx)?;
        y.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))
    }
}

#[derive(Debug, Clone)]
enum C3Inner {
    Bottlenecks(Vec<Bottleneck>),
    Transformer(TransformerBlock),
}

/// Cross-stage block: two 1x1 branches, one through a stack of bottlenecks (or
/// a transformer block), concatenated and merged by a 1x1 convolution.
#[derive(Debug, Clone)]
pub struct C3 {
    cv1: ConvBnAct,
    cv2: ConvBnAct,
    cv3: ConvBnAct,
    inner: C3Inner,
}

impl C3 {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, n: usize, shortcut: bool) -> Result<Self> {
        ps.push(name);
        let hidden = c_out / 2;
        let cv1 = ConvBnAct::new(ps, "cv1", c_in, hidden, 1, 1)?;
        let cv2 = ConvBnAct::new(ps, "cv2", c_in, hidden, 1, 1)?;
        let cv3 = ConvBnAct::new(ps, "cv3", 2 * hidden, c_out, 1, 1)?;
        let m = (0..n.max(1))
            .map(|i| Bottleneck::new(ps, &format!("m.{i}"), hidden, shortcut))
            .collect::<Result<_>>()?;
        ps.pop();
        Ok(C3 {
            cv1,
            cv2,
            cv3,
            inner: C3Inner::Bottlenecks(m),
        })
    }

    /// The transformer variant used at the deepest backbone stage.
    pub fn with_transformer(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, heads: usize) -> Result<Self> {
        ps.push(name);
        let hidden = c_out / 2;
        if hidden % heads != 0 {
            return Err(candle_core::Error::Msg(format!(
                "transformer width {hidden} not divisible by {heads} heads"
            )));
        }
        let cv1 = ConvBnAct::new(ps, "cv1", c_in, hidden, 1, 1)?;
        let cv2 = ConvBnAct::new(ps, "cv2", c_in, hidden, 1, 1)?;
        let cv3 = ConvBnAct::new(ps, "cv3", 2 * hidden, c_out, 1, 1)?;
        let tr = TransformerBlock::new(ps, "m", hidden, heads)?;
        ps.pop();
        Ok(C3 {
            cv1,
            cv2,
            cv3,
            inner: C3Inner::Transformer(tr),
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let mut a = self.cv1.forward(x, ctx)?;
        match &self.inner {
            C3Inner::Bottlenecks(m) => {
                for b in m {
                    a = b.forward(&a, ctx)?;
                }
            }
            C3Inner::Transformer(t) => a = t.forward(&a, ctx)?,
        }
        let b = self.cv2.forward(x, ctx)?;
        self.cv3.forward(&Tensor::cat(&[a, b], 1)?, ctx)
    }
}

/// Spatial pyramid pooling with three chained 5x5 max pools.
#[derive(Debug, Clone)]
pub struct Sppf {
    cv1: ConvBnAct,
    cv2: ConvBnAct,
}

impl Sppf {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        ps.push(name);
        let hidden = c_in / 2;
        let cv1 = ConvBnAct::new(ps, "cv1", c_in, hidden, 1, 1)?;
        let cv2 = ConvBnAct::new(ps, "cv2", 4 * hidden, c_out, 1, 1)?;
        ps.pop();
        Ok(Sppf { cv1, cv2 })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let x = self.cv1.forward(x, ctx)?;
        let y1 = ops::max_pool2d(&x, 5, 1, 2)?;
        let y2 = ops::max_pool2d(&y1, 5, 1, 2)?;
        let y3 = ops::max_pool2d(&y2, 5, 1, 2)?;
        self.cv2.forward(&Tensor::cat(&[x, y1, y2, y3], 1)?, ctx)
    }
}

/// Space-to-depth (2x2 pixel blocks into channels) followed by a 3x3 conv.
#[derive(Debug, Clone)]
pub struct Focus {
    conv: ConvBnAct,
}

impl Focus {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        ps.push(name);
        let conv = ConvBnAct::new(ps, "conv", 4 * c_in, c_out, 3, 1)?;
        ps.pop();
        Ok(Focus { conv })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        self.conv.forward(&space_to_depth(x)?, ctx)
    }
}

/// `(n, c, h, w)` to `(n, 4c, h/2, w/2)`, channel blocks ordered as the
/// (even row, even col), (odd, even), (even, odd), (odd, odd) sub-grids.
pub fn space_to_depth(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let t = x.reshape((n, c, h / 2, 2, w / 2, 2))?;
    // (n, dx, dy, c, h/2, w/2)
    let t = t.permute((0, 5, 3, 1, 2, 4))?.contiguous()?;
    t.reshape((n, 4 * c, h / 2, w / 2))
}

/// 1x1 convolution with bias and no normalization, used for prediction heads.
#[derive(Debug, Clone)]
pub struct HeadConv {
    pub weight: Var,
    pub bias: Var,
    pub group: usize,
}

impl HeadConv {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        ps.push(name);
        let weight = ps.normal("weight", &[c_out, c_in, 1, 1], 0.01, ParamKind::Weight)?;
        let bias = ps.constant("bias", &[c_out], 0.0, ParamKind::Bias)?;
        ps.pop();
        Ok(HeadConv {
            weight,
            bias,
            group: ps.group(),
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let y = ops::conv2d(x, &ctx.p(&self.weight, self.group), 1, 0)?;
        let b = ctx.p(&self.bias, self.group).reshape((1, (), 1, 1))?;
        y.broadcast_add(&b)
    }
}
