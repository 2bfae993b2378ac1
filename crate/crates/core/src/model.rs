//! Encoder, processors and decoder, plus the multi-source encoder set.

use std::cell::Cell;
use std::rc::Rc;

use wm_tensor::{AxisPad, PadMode, Segment, Tensor};

use crate::attention::{AttentionContext, BlockStack};
use crate::config::ModelConfig;
use crate::error::{config, CoreError, Result};
use crate::grid::{static_fields, STATIC_CHANNELS};
use crate::module::{join, module, Init, Module};

/// Hidden representation on the coarse token grid, `[tokens, hidden]`.
#[derive(Clone, Debug)]
pub struct LatentState {
    /// Valid time in hours since the epoch.
    pub time: i64,
    pub tokens: Tensor,
}

/// Model-space input: normalized surface inputs `[surface_in, H, W]` and
/// atmosphere `[atmos, levels, H, W]`.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub time: i64,
    pub surface: Tensor,
    pub atmos: Tensor,
}

/// Decoder output in model (normalized) space.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub time: i64,
    /// `[surface_out, H, W]`
    pub surface: Tensor,
    /// `[atmos, levels, H, W]`
    pub atmos: Tensor,
}

fn bias(c: usize, init: &mut Init) -> Tensor {
    init.constant(&[c], 0.0)
}

/// `x + conv(gelu(conv(gelu(x))))` with 3 × 3 horizontal kernels, periodic
/// in longitude and zero-padded in latitude.
#[derive(Clone)]
struct ResBlock {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

module!(ResBlock { w1, b1, w2, b2 });

const HORIZONTAL_PAD: [AxisPad; 4] = [
    AxisPad::NONE,
    AxisPad::NONE,
    AxisPad {
        before: 1,
        after: 1,
        mode: PadMode::Zero,
    },
    AxisPad {
        before: 1,
        after: 1,
        mode: PadMode::Circular,
    },
];

impl ResBlock {
    fn new(c: usize, init: &mut Init) -> Self {
        ResBlock {
            w1: init.fan_in(&[c, c, 1, 3, 3], c * 9),
            b1: bias(c, init),
            w2: init.normal(&[c, c, 1, 3, 3], 0.5 / ((c * 9) as f64).sqrt()),
            b2: bias(c, init),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = x.gelu()?.pad(&HORIZONTAL_PAD)?.conv3d(&self.w1, [1, 1, 1])?.bias_add(&self.b1, 0)?;
        let h = h.gelu()?.pad(&HORIZONTAL_PAD)?.conv3d(&self.w2, [1, 1, 1])?.bias_add(&self.b2, 0)?;
        Ok(x.add(&h)?)
    }
}

#[derive(Clone)]
struct DownStage {
    w: Tensor,
    b: Tensor,
    res: Vec<ResBlock>,
}

module!(DownStage { w, b } children { res });

#[derive(Clone)]
struct UpStage {
    res: Vec<ResBlock>,
    w: Tensor,
    b: Tensor,
}

module!(UpStage { w, b } children { res });

/// Physical state to latent tokens.
#[derive(Clone)]
pub struct Encoder {
    stem_sfc_w: Tensor,
    stem_sfc_b: Tensor,
    stem_atm_w: Tensor,
    stem_atm_b: Tensor,
    stages: Vec<DownStage>,
    proj_w: Tensor,
    proj_b: Tensor,
    blocks: BlockStack,
}

module!(Encoder { stem_sfc_w, stem_sfc_b, stem_atm_w, stem_atm_b, proj_w, proj_b } children { stages, blocks });

impl Encoder {
    pub fn new(cfg: &ModelConfig, init: &mut Init) -> Self {
        let w = &cfg.conv_widths;
        let cin = cfg.encoder_channels();
        let stages = (0..cfg.stages())
            .map(|s| DownStage {
                w: init.fan_in(&[w[s + 1], w[s], 1, 2, 2], w[s] * 4),
                b: bias(w[s + 1], init),
                res: (0..cfg.resnet_blocks).map(|_| ResBlock::new(w[s + 1], init)).collect(),
            })
            .collect();
        let last = w[cfg.stages()];
        Encoder {
            stem_sfc_w: init.fan_in(&[w[0], cin, 1, 1, 1], cin),
            stem_sfc_b: bias(w[0], init),
            stem_atm_w: init.fan_in(&[w[0], cfg.atmos, cfg.level_patch, 1, 1], cfg.atmos * cfg.level_patch),
            stem_atm_b: bias(w[0], init),
            stages,
            proj_w: init.fan_in(&[cfg.hidden, last, 1, 1, 1], last),
            proj_b: bias(cfg.hidden, init),
            blocks: BlockStack::new(cfg.codec_blocks, &cfg.natten(), init, cfg.zero_init_outputs),
        }
    }

    /// `statics`: `[8, H, W]`.
    pub fn forward(
        &self,
        cfg: &ModelConfig,
        x: &ModelInput,
        statics: &Tensor,
        ctx: &AttentionContext,
    ) -> Result<Tensor> {
        let g = &cfg.grid;
        let (h, w) = (g.rows, g.cols);
        let want_sfc = [cfg.surface_in, h, w];
        let want_atm = [cfg.atmos, cfg.levels, h, w];
        if x.surface.shape() != want_sfc || x.atmos.shape() != want_atm {
            return Err(CoreError::Shape(format!(
                "encoder expects surface {want_sfc:?} and atmosphere {want_atm:?}, got {:?} and {:?}",
                x.surface.shape(),
                x.atmos.shape()
            )));
        }
        if statics.shape() != [STATIC_CHANNELS, h, w] {
            return Err(CoreError::Shape(format!("static fields {:?}", statics.shape())));
        }
        let sfc = Tensor::concat(&[&x.surface, statics], 0)?
            .reshape(&[cfg.encoder_channels(), 1, h, w])?
            .conv3d(&self.stem_sfc_w, [1, 1, 1])?
            .bias_add(&self.stem_sfc_b, 0)?;
        let atm = x
            .atmos
            .conv3d(&self.stem_atm_w, [cfg.level_patch, 1, 1])?
            .bias_add(&self.stem_atm_b, 0)?;
        let mut v = Tensor::concat(&[&sfc, &atm], 1)?;
        for st in &self.stages {
            v = v.conv3d(&st.w, [1, 2, 2])?.bias_add(&st.b, 0)?;
            for r in &st.res {
                v = r.forward(&v)?;
            }
        }
        let v = v.conv3d(&self.proj_w, [1, 1, 1])?.bias_add(&self.proj_b, 0)?;
        let tokens = v.reshape(&[cfg.hidden, cfg.tokens()])?.permute(&[1, 0])?;
        self.blocks.forward(&tokens, ctx)
    }
}

/// Latent tokens to physical state.
#[derive(Clone)]
pub struct Decoder {
    blocks: BlockStack,
    proj_w: Tensor,
    proj_b: Tensor,
    stages: Vec<UpStage>,
    head_sfc_w: Tensor,
    head_sfc_b: Tensor,
    head_atm_w: Tensor,
    head_atm_b: Tensor,
}

module!(Decoder { proj_w, proj_b, head_sfc_w, head_sfc_b, head_atm_w, head_atm_b } children { blocks, stages });

impl Decoder {
    pub fn new(cfg: &ModelConfig, init: &mut Init) -> Self {
        let w = &cfg.conv_widths;
        let last = w[cfg.stages()];
        let stages = (0..cfg.stages())
            .map(|s| UpStage {
                res: (0..cfg.resnet_blocks).map(|_| ResBlock::new(w[s + 1], init)).collect(),
                w: init.fan_in(&[w[s + 1], w[s], 1, 2, 2], w[s + 1]),
                b: bias(w[s], init),
            })
            .collect();
        Decoder {
            blocks: BlockStack::new(cfg.codec_blocks, &cfg.natten(), init, cfg.zero_init_outputs),
            proj_w: init.fan_in(&[last, cfg.hidden, 1, 1, 1], cfg.hidden),
            proj_b: bias(last, init),
            stages,
            head_sfc_w: init.fan_in(&[cfg.surface_out, w[0], 1, 1, 1], w[0]),
            head_sfc_b: bias(cfg.surface_out, init),
            head_atm_w: init.fan_in(&[w[0], cfg.atmos, cfg.level_patch, 1, 1], w[0]),
            head_atm_b: bias(cfg.atmos, init),
        }
    }

    pub fn forward(&self, cfg: &ModelConfig, z: &Tensor, ctx: &AttentionContext) -> Result<(Tensor, Tensor)> {
        let [dp, hp, wp] = cfg.latent_extents();
        let v = self.blocks.forward(z, ctx)?;
        let mut v = v
            .permute(&[1, 0])?
            .reshape(&[cfg.hidden, dp, hp, wp])?
            .conv3d(&self.proj_w, [1, 1, 1])?
            .bias_add(&self.proj_b, 0)?;
        for st in self.stages.iter().rev() {
            for r in &st.res {
                v = r.forward(&v)?;
            }
            v = v.conv_transpose3d(&st.w, [1, 2, 2])?.bias_add(&st.b, 0)?;
        }
        let (h, w) = (cfg.grid.rows, cfg.grid.cols);
        let surface = v
            .narrow(1, 0, 1)?
            .conv3d(&self.head_sfc_w, [1, 1, 1])?
            .bias_add(&self.head_sfc_b, 0)?
            .reshape(&[cfg.surface_out, h, w])?;
        let atmos = v
            .narrow(1, 1, dp - 1)?
            .conv_transpose3d(&self.head_atm_w, [cfg.level_patch, 1, 1])?
            .bias_add(&self.head_atm_b, 0)?;
        Ok((surface, atmos))
    }
}

/// A stack of blocks that advances the latent by a fixed number of hours.
#[derive(Clone)]
pub struct Processor {
    pub horizon: u32,
    pub blocks: BlockStack,
}

module!(Processor {} children { blocks });

impl Processor {
    pub fn new(horizon: u32, cfg: &ModelConfig, init: &mut Init) -> Self {
        Processor {
            horizon,
            blocks: BlockStack::new(cfg.processor_blocks, &cfg.natten(), init, cfg.zero_init_outputs),
        }
    }

    /// The token map as a checkpointable segment.
    pub fn segment(&self, ctx: &Rc<AttentionContext>) -> Segment {
        let blocks = self.blocks.clone();
        let ctx = Rc::clone(ctx);
        Rc::new(move |x: &Tensor| Ok(blocks.forward(x, &ctx)?))
    }
}

/// Named encoders sharing one latent space, with blend weights.
#[derive(Clone)]
pub struct EncoderSet {
    names: Vec<String>,
    encoders: Vec<Encoder>,
    weights: Vec<Tensor>,
    pub learnable_blend: bool,
}

impl Module for EncoderSet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for ((n, e), w) in self.names.iter().zip(&self.encoders).zip(&self.weights) {
            e.visit(&join(&join(prefix, "enc"), n), f);
            f(&join(&join(prefix, "blend"), n), w);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for ((n, e), w) in self.names.iter().zip(&mut self.encoders).zip(&mut self.weights) {
            e.visit_mut(&join(&join(prefix, "enc"), n), f);
            f(&join(&join(prefix, "blend"), n), w);
        }
    }
}

pub const DEFAULT_SOURCE: &str = "era5";

impl EncoderSet {
    pub fn single(name: &str, encoder: Encoder) -> Self {
        EncoderSet {
            names: vec![name.to_string()],
            encoders: vec![encoder],
            weights: vec![Tensor::param(vec![1.0], &[1]).expect("scalar")],
            learnable_blend: false,
        }
    }

    /// Replaces all encoders by freshly initialized ones with uniform weights.
    pub fn replace(&mut self, names: &[&str], cfg: &ModelConfig, init: &mut Init) {
        let w = 1.0 / names.len() as f64;
        self.names = names.iter().map(|s| s.to_string()).collect();
        self.encoders = names.iter().map(|_| Encoder::new(cfg, init)).collect();
        self.weights = names.iter().map(|_| Tensor::param(vec![w], &[1]).expect("scalar")).collect();
    }

    /// Adds or overwrites one encoder; weights are reset to uniform.
    pub fn insert(&mut self, name: &str, encoder: Encoder) {
        match self.names.iter().position(|n| n == name) {
            Some(i) => self.encoders[i] = encoder,
            None => {
                self.names.push(name.to_string());
                self.encoders.push(encoder);
                self.weights.push(Tensor::param(vec![0.0], &[1]).expect("scalar"));
            }
        }
        let w = 1.0 / self.names.len() as f64;
        for t in &mut self.weights {
            *t = Tensor::param(vec![w], &[1]).expect("scalar");
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Result<&Encoder> {
        self.index(name).map(|i| &self.encoders[i])
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| config(format!("unknown source {name:?}; known: {:?}", self.names)))
    }

    pub fn weights(&self) -> Vec<f64> {
        self.weights.iter().map(|t| t.item()).collect()
    }

    /// Sets blend weights, projecting them onto the simplex: negatives are
    /// clipped to zero and the rest rescaled to sum to one (uniform if all
    /// were non-positive).
    pub fn set_weights(&mut self, raw: &[f64]) -> Result<()> {
        if raw.len() != self.names.len() || raw.iter().any(|w| !w.is_finite()) {
            return Err(config(format!("{} blend weights for {} sources", raw.len(), self.names.len())));
        }
        for (t, w) in self.weights.iter_mut().zip(project_simplex(raw)) {
            *t = Tensor::param(vec![w], &[1]).expect("scalar");
        }
        Ok(())
    }
}

/// Clip-and-renormalize projection onto the probability simplex.
pub fn project_simplex(raw: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = raw.iter().map(|w| w.max(0.0)).collect();
    let sum: f64 = clipped.iter().sum();
    if sum > 0.0 {
        clipped.iter().map(|w| w / sum).collect()
    } else {
        vec![1.0 / raw.len() as f64; raw.len()]
    }
}

/// Call counts of the model's stages.
#[derive(Debug, Default, Clone)]
pub struct CallCounts {
    pub encode: Cell<usize>,
    pub decode: Cell<usize>,
    pub process: Cell<usize>,
}

impl CallCounts {
    fn bump(c: &Cell<usize>) {
        c.set(c.get() + 1);
    }

    pub fn snapshot(&self) -> (usize, usize, usize) {
        (self.encode.get(), self.decode.get(), self.process.get())
    }
}

/// The full forecast model.
#[derive(Clone)]
pub struct WeatherMesh {
    pub cfg: ModelConfig,
    pub encoders: EncoderSet,
    pub decoder: Decoder,
    pub p6: Processor,
    pub p1: Option<Processor>,
    ctx: Rc<AttentionContext>,
    statics: Tensor,
    pub calls: Rc<CallCounts>,
    /// Training stages completed, in order.
    pub trained_stages: Vec<String>,
}

impl Module for WeatherMesh {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoders.visit(prefix, f);
        self.decoder.visit(&join(prefix, "dec"), f);
        self.p6.visit(&join(prefix, "p6"), f);
        self.p1.visit(&join(prefix, "p1"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoders.visit_mut(prefix, f);
        self.decoder.visit_mut(&join(prefix, "dec"), f);
        self.p6.visit_mut(&join(prefix, "p6"), f);
        self.p1.visit_mut(&join(prefix, "p1"), f);
    }
}

impl WeatherMesh {
    /// Random model with a single default encoder, both processors.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let encoder = Encoder::new(&cfg, &mut init);
        let decoder = Decoder::new(&cfg, &mut init);
        let p6 = Processor::new(6, &cfg, &mut init);
        let p1 = Processor::new(1, &cfg, &mut init);
        let ctx = AttentionContext::new(cfg.latent_extents(), cfg.natten())?;
        let g = cfg.grid;
        let statics = Tensor::new(static_fields(&g), &[STATIC_CHANNELS, g.rows, g.cols])?;
        Ok(WeatherMesh {
            encoders: EncoderSet::single(DEFAULT_SOURCE, encoder),
            decoder,
            p6,
            p1: Some(p1),
            ctx,
            statics,
            cfg,
            calls: Rc::new(CallCounts::default()),
            trained_stages: Vec::new(),
        })
    }

    pub fn context(&self) -> &Rc<AttentionContext> {
        &self.ctx
    }

    pub fn statics(&self) -> &Tensor {
        &self.statics
    }

    pub fn processor(&self, horizon: u32) -> Result<&Processor> {
        match horizon {
            6 => Ok(&self.p6),
            1 => self
                .p1
                .as_ref()
                .ok_or_else(|| CoreError::Plan("plan needs the 1h processor, which this model lacks".into())),
            h => Err(CoreError::Plan(format!("no {h}h processor"))),
        }
    }

    /// Encodes with the first encoder of the set.
    pub fn encode(&self, x: &ModelInput) -> Result<LatentState> {
        let name = self.encoders.names()[0].clone();
        self.encode_source(&name, x, None)
    }

    /// Encodes with a named encoder, optionally with substitute static fields.
    pub fn encode_source(&self, name: &str, x: &ModelInput, statics: Option<&Tensor>) -> Result<LatentState> {
        CallCounts::bump(&self.calls.encode);
        let enc = self.encoders.get(name)?;
        let tokens = enc.forward(&self.cfg, x, statics.unwrap_or(&self.statics), &self.ctx)?;
        Ok(LatentState { time: x.time, tokens })
    }

    /// Blend of per-source latents by the set's weights, renormalized over
    /// the sources present. A single source is encoded directly.
    pub fn blend_encode(&self, sources: &[(&str, &ModelInput)]) -> Result<LatentState> {
        let Some((_, first)) = sources.first() else {
            return Err(config("blend needs at least one source"));
        };
        if let Some((n, s)) = sources.iter().find(|(_, s)| s.time != first.time) {
            return Err(CoreError::Data(format!(
                "source {n} valid at hour {} but {} at {}",
                s.time, sources[0].0, first.time
            )));
        }
        let idx: Vec<usize> = sources.iter().map(|(n, _)| self.encoders.index(n)).collect::<Result<_>>()?;
        for (i, a) in idx.iter().enumerate() {
            if idx[..i].contains(a) {
                return Err(config(format!("source {} given twice", sources[i].0)));
            }
        }
        if sources.len() == 1 {
            return self.encode_source(sources[0].0, sources[0].1, None);
        }
        let total: f64 = idx.iter().map(|&i| self.encoders.weights[i].item()).sum();
        if total <= 0.0 {
            return Err(config("blend weights of the given sources sum to zero"));
        }
        let mut acc: Option<Tensor> = None;
        for (&i, (name, x)) in idx.iter().zip(sources) {
            let z = self.encode_source(name, x, None)?.tokens;
            let mut term = z.scale_by(&self.encoders.weights[i])?;
            if total != 1.0 {
                term = term.scale(1.0 / total)?;
            }
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(&term)?,
            });
        }
        Ok(LatentState {
            time: first.time,
            tokens: acc.expect("at least two sources"),
        })
    }

    /// One processor application.
    pub fn process(&self, z: &LatentState, horizon: u32) -> Result<LatentState> {
        let p = self.processor(horizon)?;
        CallCounts::bump(&self.calls.process);
        Ok(LatentState {
            time: z.time + horizon as i64,
            tokens: p.blocks.forward(&z.tokens, &self.ctx)?,
        })
    }

    pub fn decode(&self, z: &LatentState) -> Result<Prediction> {
        CallCounts::bump(&self.calls.decode);
        let want = [self.cfg.tokens(), self.cfg.hidden];
        if z.tokens.shape() != want {
            return Err(CoreError::Shape(format!("latent {:?}, expected {want:?}", z.tokens.shape())));
        }
        let (surface, atmos) = self.decoder.forward(&self.cfg, &z.tokens, &self.ctx)?;
        Ok(Prediction {
            time: z.time,
            surface,
            atmos,
        })
    }

    pub(crate) fn count_process(&self) {
        CallCounts::bump(&self.calls.process);
    }
}
