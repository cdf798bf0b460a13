use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::config::{Anchor, DetectorConfig};
use crate::error::{Error, Result};
use crate::nam::Nam;
use crate::nn::layers::{Buffer, ConvBnAct, Focus, HeadConv, Sppf, C3};
use crate::nn::{ops, Ctx, Param, ParamKind, ParamStore};

/// Number of leading layer groups that make up the backbone.
pub const BACKBONE_GROUPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Focus,
    Conv,
    C3,
    C3Tr,
    Sppf,
    Nam,
    Fuse,
    Head,
}

/// One top-level module of the graph; its index is its layer group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
}

#[derive(Debug, Clone)]
struct Asaf {
    nams: [Nam; 3],
    backbone_fuse: [ConvBnAct; 3],
    neck_fuse: [ConvBnAct; 3],
    inject: [C3; 3],
}

#[derive(Debug, Clone)]
struct P2Branch {
    lateral: ConvBnAct,
    td: C3,
    down: ConvBnAct,
    bu: C3,
}

/// Per-scale head output on the host, laid out `[batch][anchor][y][x][k]`
/// with `k` over `(tx, ty, tw, th, objectness, class logits...)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleGrid {
    pub stride: usize,
    pub anchors: Vec<Anchor>,
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub data: Vec<f64>,
}

impl ScaleGrid {
    pub fn na(&self) -> usize {
        self.anchors.len()
    }

    pub fn index(&self, b: usize, a: usize, y: usize, x: usize) -> usize {
        (((b * self.na() + a) * self.h + y) * self.w + x) * self.k
    }

    pub fn cell(&self, b: usize, a: usize, y: usize, x: usize) -> &[f64] {
        let i = self.index(b, a, y, x);
        &self.data[i..i + self.k]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOutput {
    pub input_size: usize,
    pub scales: Vec<ScaleGrid>,
}

impl DetectionOutput {
    pub fn batch(&self) -> usize {
        self.scales.first().map_or(0, |s| s.batch)
    }
}

/// The detector graph: focus/C3 backbone with a transformer stage, FPN+PAN
/// neck (optionally extended to stride 4), optional attention fusion of the
/// shallow stages, and 1x1 anchor heads.
#[derive(Debug)]
pub struct Detector {
    cfg: DetectorConfig,
    store: ParamStore,
    nodes: Vec<Node>,
    frozen: usize,
    focus: Focus,
    down1: ConvBnAct,
    stage2: C3,
    down3: ConvBnAct,
    stage3: C3,
    down5: ConvBnAct,
    stage4: C3,
    down7: ConvBnAct,
    stage5: C3,
    sppf: Sppf,
    asaf: Option<Asaf>,
    lat5: ConvBnAct,
    td4: C3,
    lat4: ConvBnAct,
    td3: C3,
    p2: Option<P2Branch>,
    down_p3: ConvBnAct,
    bu4: C3,
    down_p4: ConvBnAct,
    bu5: C3,
    heads: Vec<HeadConv>,
}

fn arr<T>(v: Vec<T>) -> [T; 3] {
    v.try_into().unwrap_or_else(|_| unreachable!("three fusion levels"))
}

struct Builder {
    ps: ParamStore,
    nodes: Vec<Node>,
}

impl Builder {
    fn node<T>(&mut self, name: &str, kind: NodeKind, f: impl FnOnce(&mut ParamStore, &str) -> Result<T>) -> Result<T> {
        self.ps.set_group(self.nodes.len());
        self.nodes.push(Node {
            name: name.to_string(),
            kind,
        });
        f(&mut self.ps, name)
    }

    fn conv(&mut self, name: &str, c1: usize, c2: usize, k: usize, s: usize) -> Result<ConvBnAct> {
        self.node(name, NodeKind::Conv, |ps, n| Ok(ConvBnAct::new(ps, n, c1, c2, k, s)?))
    }

    fn c3(&mut self, name: &str, c1: usize, c2: usize, n: usize, shortcut: bool) -> Result<C3> {
        self.node(name, NodeKind::C3, |ps, nm| Ok(C3::new(ps, nm, c1, c2, n, shortcut)?))
    }
}

pub fn build_model(cfg: &DetectorConfig, dtype: DType, seed: u64) -> Result<Detector> {
    Detector::new(cfg.clone(), dtype, seed)
}

impl Detector {
    pub fn new(cfg: DetectorConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.base_channels;
        let (c1, c2, c3, c4, c5) = (b, 2 * b, 4 * b, 8 * b, 16 * b);
        let mut bd = Builder {
            ps: ParamStore::new(dtype, seed),
            nodes: Vec::new(),
        };

        let focus = bd.node("backbone.0", NodeKind::Focus, |ps, n| Ok(Focus::new(ps, n, 1, c1)?))?;
        let down1 = bd.conv("backbone.1", c1, c2, 3, 2)?;
        let stage2 = bd.c3("backbone.2", c2, c2, cfg.repeats(3), true)?;
        let down3 = bd.conv("backbone.3", c2, c3, 3, 2)?;
        let stage3 = bd.c3("backbone.4", c3, c3, cfg.repeats(6), true)?;
        let down5 = bd.conv("backbone.5", c3, c4, 3, 2)?;
        let stage4 = bd.c3("backbone.6", c4, c4, cfg.repeats(9), true)?;
        let down7 = bd.conv("backbone.7", c4, c5, 3, 2)?;
        let heads_n = cfg.transformer_heads;
        let stage5 = bd.node("backbone.8", NodeKind::C3Tr, |ps, n| {
            Ok(C3::with_transformer(ps, n, c5, c5, heads_n)?)
        })?;
        let sppf = bd.node("backbone.9", NodeKind::Sppf, |ps, n| Ok(Sppf::new(ps, n, c5, c5)?))?;
        debug_assert_eq!(bd.nodes.len(), BACKBONE_GROUPS);

        let asaf = if cfg.asaf_enabled {
            let shallow = [c2, c3, c4];
            let deep = [c3, c4, c5];
            let mut nams = Vec::new();
            for (i, &c) in shallow.iter().enumerate() {
                nams.push(bd.node(&format!("asaf.nam{}", i + 2), NodeKind::Nam, |ps, n| Nam::new(ps, n, c))?);
            }
            let mut backbone_fuse = Vec::new();
            for i in 0..3 {
                backbone_fuse.push(bd.node(&format!("asaf.fuse_backbone{}", i + 3), NodeKind::Fuse, |ps, n| {
                    Ok(ConvBnAct::new(ps, n, deep[i] + shallow[i], deep[i], 1, 1)?)
                })?);
            }
            let mut neck_fuse = Vec::new();
            let mut inject = Vec::new();
            for i in 0..3 {
                neck_fuse.push(bd.node(&format!("asaf.fuse_neck{}", i + 3), NodeKind::Fuse, |ps, n| {
                    Ok(ConvBnAct::new(ps, n, deep[i] + shallow[i], deep[i], 1, 1)?)
                })?);
                inject.push(bd.c3(&format!("asaf.inject{}", i + 3), deep[i], deep[i], cfg.repeats(3), false)?);
            }
            Some(Asaf {
                nams: arr(nams),
                backbone_fuse: arr(backbone_fuse),
                neck_fuse: arr(neck_fuse),
                inject: arr(inject),
            })
        } else {
            None
        };

        let rn = cfg.repeats(3);
        let lat5 = bd.conv("neck.lat5", c5, c4, 1, 1)?;
        let td4 = bd.c3("neck.td4", 2 * c4, c4, rn, false)?;
        let lat4 = bd.conv("neck.lat4", c4, c3, 1, 1)?;
        let td3 = bd.c3("neck.td3", 2 * c3, c3, rn, false)?;
        let p2 = if cfg.num_scales == 4 {
            Some(P2Branch {
                lateral: bd.conv("neck.lat3", c3, c2, 1, 1)?,
                td: bd.c3("neck.td2", 2 * c2, c2, rn, false)?,
                down: bd.conv("neck.down2", c2, c2, 3, 2)?,
                bu: bd.c3("neck.bu3", 2 * c2, c3, rn, false)?,
            })
        } else {
            None
        };
        let down_p3 = bd.conv("neck.down3", c3, c3, 3, 2)?;
        let bu4 = bd.c3("neck.bu4", 2 * c3, c4, rn, false)?;
        let down_p4 = bd.conv("neck.down4", c4, c4, 3, 2)?;
        let bu5 = bd.c3("neck.bu5", 2 * c4, c5, rn, false)?;

        let out_c = cfg.anchors_per_scale() * cfg.outputs_per_anchor();
        let head_in: Vec<usize> = if cfg.num_scales == 4 {
            vec![c2, c3, c4, c5]
        } else {
            vec![c3, c4, c5]
        };
        let mut heads = Vec::new();
        for (i, &c) in head_in.iter().enumerate() {
            heads.push(bd.node(&format!("head.{i}"), NodeKind::Head, |ps, n| Ok(HeadConv::new(ps, n, c, out_c)?))?);
        }

        Ok(Detector {
            cfg,
            store: bd.ps,
            nodes: bd.nodes,
            frozen: 0,
            focus,
            down1,
            stage2,
            down3,
            stage3,
            down5,
            stage4,
            down7,
            stage5,
            sppf,
            asaf,
            lat5,
            td4,
            lat4,
            td3,
            p2,
            down_p3,
            bu4,
            down_p4,
            bu5,
            heads,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn nam_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Nam).count()
    }

    pub fn params(&self) -> &[Param] {
        self.store.params()
    }

    pub fn buffers(&self) -> &[Buffer] {
        self.store.buffers()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.var.elem_count()).sum()
    }

    pub fn group_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn frozen(&self) -> usize {
        self.frozen
    }

    /// Excludes the first `n` layer groups from gradient updates and keeps
    /// their normalization statistics fixed.
    pub fn freeze_layers(&mut self, n: usize) -> Result<()> {
        if n > self.group_count() {
            return Err(Error::Config(format!(
                "cannot freeze {n} of {} layer groups",
                self.group_count()
            )));
        }
        self.frozen = n;
        Ok(())
    }

    /// Parameters that receive updates under the current freeze setting.
    pub fn trainable(&self) -> impl Iterator<Item = &Param> {
        self.params().iter().filter(move |p| p.group >= self.frozen)
    }

    /// Convolution and attention weight tensors (the regularized set).
    pub fn weight_params(&self) -> impl Iterator<Item = &Param> {
        self.params().iter().filter(|p| p.kind == ParamKind::Weight)
    }

    pub fn ctx(&self, train: bool) -> Ctx {
        if train {
            Ctx::train(self.frozen)
        } else {
            Ctx::eval()
        }
    }

    /// Raw head tensors, one per scale, shaped `(n, anchors, h, w, 5 + classes)`.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.cfg.input_size;
        if c != 1 || h != s || w != s {
            return Err(Error::Shape(format!("expected (n, 1, {s}, {s}) input, got {:?}", x.dims())));
        }
        let ctx = self.ctx(train);
        let x = x.to_dtype(self.dtype())?;

        let x = self.focus.forward(&x, ctx)?;
        let x = self.down1.forward(&x, ctx)?;
        let s2 = self.stage2.forward(&x, ctx)?;
        let x = self.down3.forward(&s2, ctx)?;
        let s3 = self.stage3.forward(&x, ctx)?;
        let x = self.down5.forward(&s3, ctx)?;
        let s4 = self.stage4.forward(&x, ctx)?;
        let x = self.down7.forward(&s4, ctx)?;
        let x = self.stage5.forward(&x, ctx)?;
        let p5 = self.sppf.forward(&x, ctx)?;

        let attended = match &self.asaf {
            Some(a) => {
                let mut out = Vec::with_capacity(3);
                for (nam, f) in a.nams.iter().zip([&s2, &s3, &s4]) {
                    out.push(ops::max_pool2d(&nam.forward(f, ctx)?, 2, 2, 0)?);
                }
                Some(out)
            }
            None => None,
        };
        let fuse = |conv: &ConvBnAct, deep: &Tensor, shallow: &Tensor| -> Result<Tensor> {
            Ok(conv.forward(&Tensor::cat(&[deep, shallow], 1)?, ctx)?)
        };
        let (b3, b4, b5) = match (&self.asaf, &attended) {
            (Some(a), Some(att)) => (
                fuse(&a.backbone_fuse[0], &s3, &att[0])?,
                fuse(&a.backbone_fuse[1], &s4, &att[1])?,
                fuse(&a.backbone_fuse[2], &p5, &att[2])?,
            ),
            _ => (s3.clone(), s4.clone(), p5.clone()),
        };
        let neck_level = |i: usize, t: Tensor| -> Result<Tensor> {
            match (&self.asaf, &attended) {
                (Some(a), Some(att)) => Ok(a.inject[i].forward(&fuse(&a.neck_fuse[i], &t, &att[i])?, ctx)?),
                _ => Ok(t),
            }
        };

        let h10 = self.lat5.forward(&b5, ctx)?;
        let x = Tensor::cat(&[&ops::upsample2x(&h10)?, &b4], 1)?;
        let x = self.td4.forward(&x, ctx)?;
        let h14 = self.lat4.forward(&x, ctx)?;
        let x = Tensor::cat(&[&ops::upsample2x(&h14)?, &b3], 1)?;
        let mut p3 = self.td3.forward(&x, ctx)?;
        let mut outs = Vec::with_capacity(4);
        if let Some(p2b) = &self.p2 {
            let h18 = p2b.lateral.forward(&p3, ctx)?;
            let x = Tensor::cat(&[&ops::upsample2x(&h18)?, &s2], 1)?;
            let p2 = p2b.td.forward(&x, ctx)?;
            let x = Tensor::cat(&[&p2b.down.forward(&p2, ctx)?, &h18], 1)?;
            p3 = p2b.bu.forward(&x, ctx)?;
            outs.push(p2);
        }
        let p3 = neck_level(0, p3)?;
        let x = Tensor::cat(&[&self.down_p3.forward(&p3, ctx)?, &h14], 1)?;
        let p4 = neck_level(1, self.bu4.forward(&x, ctx)?)?;
        let x = Tensor::cat(&[&self.down_p4.forward(&p4, ctx)?, &h10], 1)?;
        let p5 = neck_level(2, self.bu5.forward(&x, ctx)?)?;
        outs.extend([p3, p4, p5]);

        let na = self.cfg.anchors_per_scale();
        let k = self.cfg.outputs_per_anchor();
        outs.iter()
            .zip(&self.heads)
            .map(|(f, head)| {
                let y = head.forward(f, ctx)?;
                let (n, _, h, w) = y.dims4()?;
                Ok(y.reshape((n, na, k, h, w))?.permute((0, 1, 3, 4, 2))?.contiguous()?)
            })
            .collect()
    }

    pub fn to_output(&self, raw: &[Tensor]) -> Result<DetectionOutput> {
        let strides = self.cfg.strides();
        let scales = raw
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let (batch, _, h, w, k) = t.dims5()?;
                Ok(ScaleGrid {
                    stride: strides[i],
                    anchors: self.cfg.anchors[i].clone(),
                    batch,
                    h,
                    w,
                    k,
                    data: t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(DetectionOutput {
            input_size: self.cfg.input_size,
            scales,
        })
    }

    /// Inference-mode forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<DetectionOutput> {
        let raw = self.forward_t(x, false)?;
        self.to_output(&raw)
    }

    /// Copies every parameter and running statistic from `other`, which must
    /// have the same architecture.
    pub fn load_from(&self, other: &Detector) -> Result<()> {
        if self.params().len() != other.params().len() || self.buffers().len() != other.buffers().len() {
            return Err(Error::Checkpoint("architectures differ".into()));
        }
        for (a, b) in self.params().iter().zip(other.params()) {
            if a.name != b.name || a.var.shape() != b.var.shape() {
                return Err(Error::Checkpoint(format!("parameter {} vs {}", a.name, b.name)));
            }
            a.var.set(&b.var.as_tensor().to_dtype(self.dtype())?)?;
        }
        for (a, b) in self.buffers().iter().zip(other.buffers()) {
            *a.stats.lock().expect("stats lock") = b.stats.lock().expect("stats lock").clone();
        }
        Ok(())
    }

    pub fn device(&self) -> Device {
        Device::Cpu
    }
}
