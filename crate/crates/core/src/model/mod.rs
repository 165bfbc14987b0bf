//! CNN8 / ResNet encoders with optional dilation and two classification heads.

mod checkpoint;
pub mod ops;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::N_CLASSES;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
use ops::{BnCache, BnStats, ConvGeom, Tensor};

/// Channel progression of the four encoder blocks at full width.
pub const PAPER_CHANNELS: [usize; 4] = [64, 128, 256, 512];
/// Dilation rate of each block in the dilated variants.
pub const DILATIONS: [usize; 4] = [1, 2, 4, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoder {
    Cnn8,
    Resnet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    MaxpoolFc,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: Encoder,
    pub dilated: bool,
    pub head: HeadKind,
    /// Output channels per block; always `[c, 2c, 4c, 8c]`.
    pub channels: [usize; 4],
    pub n_classes: usize,
    /// Expected `(n_mels, n_frames)` of every input feature.
    pub input_shape: (usize, usize),
}

impl ModelSpec {
    pub fn new(encoder: Encoder, dilated: bool, head: HeadKind) -> Self {
        ModelSpec {
            encoder,
            dilated,
            head,
            channels: PAPER_CHANNELS,
            n_classes: N_CLASSES,
            input_shape: (128, 126),
        }
    }

    /// Same topology with the channel progression rescaled to start at `base`.
    pub fn with_base_channels(mut self, base: usize) -> Self {
        self.channels = [base, 2 * base, 4 * base, 8 * base];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels[0];
        if c == 0 || self.channels != [c, 2 * c, 4 * c, 8 * c] {
            return Err(Error::Config(format!(
                "channels {:?} must double per block",
                self.channels
            )));
        }
        if self.n_classes != N_CLASSES {
            return Err(Error::Config(format!("n_classes must be {N_CLASSES}")));
        }
        if self.input_shape.0 < 16 || self.input_shape.1 < 16 {
            return Err(Error::Config("input must be at least 16x16".into()));
        }
        Ok(())
    }

    /// Spatial size after the four 2×2 poolings.
    pub fn encoder_output_shape(&self) -> [usize; 3] {
        let (h, w) = self.input_shape;
        [self.channels[3], h / 16, w / 16]
    }

    /// Short variant label, e.g. `ResNet-Dila-Att`.
    pub fn label(&self) -> String {
        let mut s = match self.encoder {
            Encoder::Cnn8 => "CNN8".to_string(),
            Encoder::Resnet => "ResNet".to_string(),
        };
        if self.dilated {
            s.push_str("-Dila");
        }
        if self.head == HeadKind::Attention {
            s.push_str("-Att");
        }
        s
    }

    /// The eight encoder × dilation × head combinations, in ablation-table order.
    pub fn all_variants() -> Vec<ModelSpec> {
        let mut out = Vec::new();
        for encoder in [Encoder::Cnn8, Encoder::Resnet] {
            for (dilated, head) in [
                (false, HeadKind::MaxpoolFc),
                (false, HeadKind::Attention),
                (true, HeadKind::MaxpoolFc),
                (true, HeadKind::Attention),
            ] {
                out.push(ModelSpec::new(encoder, dilated, head));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct ConvRef {
    weight: usize,
    geom: ConvGeom,
}

#[derive(Clone, Copy, Debug)]
struct BnRef {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug)]
struct StageRef {
    conv_a: ConvRef,
    bn_a: BnRef,
    conv_b: ConvRef,
    bn_b: BnRef,
    /// `Some` only for residual stages; `None` inside means identity shortcut.
    shortcut: Option<Option<ConvRef>>,
}

#[derive(Clone, Debug)]
enum HeadRef {
    MaxFc { weight: usize, bias: usize },
    Attention { score_w: usize, score_b: usize, att_w: usize, att_b: usize },
}

#[derive(Clone, Debug)]
struct Layout {
    stages: Vec<StageRef>,
    head: HeadRef,
}

/// Learned parameters and batch-norm statistics of one encoder + head.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub seed: u64,
    params: Vec<NamedTensor>,
    buffers: Vec<NamedTensor>,
    layout: Layout,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.seed == other.seed
            && self.params == other.params
            && self.buffers == other.buffers
    }
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    params: Vec<NamedTensor>,
    buffers: Vec<NamedTensor>,
}

impl Builder<'_> {
    fn param(&mut self, name: String, shape: Vec<usize>, bound: f64) -> usize {
        let n = shape.iter().product();
        let data = if bound > 0.0 {
            (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect()
        } else {
            vec![0.0; n]
        };
        self.params.push(NamedTensor { name, shape, data });
        self.params.len() - 1
    }

    fn constant(&mut self, name: String, n: usize, value: f64) -> usize {
        self.params.push(NamedTensor {
            name,
            shape: vec![n],
            data: vec![value; n],
        });
        self.params.len() - 1
    }

    fn buffer(&mut self, name: String, n: usize, value: f64) -> usize {
        self.buffers.push(NamedTensor {
            name,
            shape: vec![n],
            data: vec![value; n],
        });
        self.buffers.len() - 1
    }

    fn conv(&mut self, name: String, geom: ConvGeom) -> ConvRef {
        let fan_in = (geom.cin * geom.kernel * geom.kernel) as f64;
        let weight = self.param(
            name,
            vec![geom.cout, geom.cin, geom.kernel, geom.kernel],
            (6.0 / fan_in).sqrt(),
        );
        ConvRef { weight, geom }
    }

    fn bn(&mut self, prefix: &str, c: usize) -> BnRef {
        BnRef {
            gamma: self.constant(format!("{prefix}.weight"), c, 1.0),
            beta: self.constant(format!("{prefix}.bias"), c, 0.0),
            mean: self.buffer(format!("{prefix}.running_mean"), c, 0.0),
            var: self.buffer(format!("{prefix}.running_var"), c, 1.0),
        }
    }
}

/// Constructs a freshly initialized model (fan-in scaled uniform weights).
pub fn build(spec: &ModelSpec, seed: u64) -> Result<ModelState> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        rng: &mut rng,
        params: Vec::new(),
        buffers: Vec::new(),
    };
    let mut stages = Vec::new();
    let mut cin = 1;
    for (k, &cout) in spec.channels.iter().enumerate() {
        let dilation = if spec.dilated { DILATIONS[k] } else { 1 };
        let p = format!("block{}", k + 1);
        let conv_a = b.conv(
            format!("{p}.conv1.weight"),
            ConvGeom { cin, cout, kernel: 3, dilation },
        );
        let bn_a = b.bn(&format!("{p}.bn1"), cout);
        let conv_b = b.conv(
            format!("{p}.conv2.weight"),
            ConvGeom { cin: cout, cout, kernel: 3, dilation },
        );
        let bn_b = b.bn(&format!("{p}.bn2"), cout);
        let shortcut = match spec.encoder {
            Encoder::Cnn8 => None,
            Encoder::Resnet => Some((cin != cout).then(|| {
                b.conv(
                    format!("{p}.shortcut.weight"),
                    ConvGeom { cin, cout, kernel: 1, dilation: 1 },
                )
            })),
        };
        stages.push(StageRef { conv_a, bn_a, conv_b, bn_b, shortcut });
        cin = cout;
    }
    let k = spec.n_classes;
    let bound = 1.0 / (cin as f64).sqrt();
    let head = match spec.head {
        HeadKind::MaxpoolFc => HeadRef::MaxFc {
            weight: b.param("head.fc.weight".into(), vec![k, cin], bound),
            bias: b.param("head.fc.bias".into(), vec![k], 0.0),
        },
        HeadKind::Attention => HeadRef::Attention {
            score_w: b.param("head.score.weight".into(), vec![k, cin, 1, 1], bound),
            score_b: b.param("head.score.bias".into(), vec![k], 0.0),
            att_w: b.param("head.attention.weight".into(), vec![k, cin, 1, 1], bound),
            att_b: b.param("head.attention.bias".into(), vec![k], 0.0),
        },
    };
    let (params, buffers) = (b.params, b.buffers);
    Ok(ModelState {
        spec: spec.clone(),
        seed,
        params,
        buffers,
        layout: Layout { stages, head },
    })
}

/// Output of one forward pass for one item.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// `[n_classes, h, w]` softmax-normalized attention, attention head only.
    pub attention_map: Option<Array3<f64>>,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probabilities = ops::softmax(&logits);
        Prediction {
            logits,
            probabilities,
            attention_map: None,
        }
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy of a batch of predictions against integer labels.
pub fn loss(predictions: &[Prediction], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch(labels.len(), predictions.len()));
    }
    if predictions.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    let mut total = 0.0;
    for (p, &y) in predictions.iter().zip(labels) {
        if y >= p.logits.len() {
            return Err(Error::LabelOutOfRange(y));
        }
        total += log_sum_exp(&p.logits) - p.logits[y];
    }
    Ok(total / labels.len() as f64)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Mode {
    Train,
    Eval,
}

struct StageTape {
    input: Tensor,
    bn_a: BnCache,
    r1: Tensor,
    bn_b: BnCache,
    r2: Tensor,
    pool_arg: Vec<u32>,
}

enum HeadTape {
    MaxFc {
        in_shape: [usize; 4],
        pooled: Vec<f64>,
        arg: Vec<usize>,
    },
    Attention {
        input: Tensor,
        score: Vec<f64>,
        att: Vec<f64>,
    },
}

pub(crate) struct Tape {
    stages: Vec<StageTape>,
    head: HeadTape,
    pub logits: Vec<f64>,
    /// Per-stage batch statistics `(bn_a, bn_b)` in training mode.
    bn_stats: Vec<(Option<BnStats>, Option<BnStats>)>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.logits.len() / N_CLASSES
    }

    pub fn predictions(&self) -> Vec<Prediction> {
        let k = N_CLASSES;
        (0..self.batch())
            .map(|b| {
                let mut p = Prediction::from_logits(self.logits[b * k..(b + 1) * k].to_vec());
                if let HeadTape::Attention { input, att, .. } = &self.head {
                    let (h, w) = (input.shape[2], input.shape[3]);
                    let slice = att[b * k * h * w..(b + 1) * k * h * w].to_vec();
                    p.attention_map = Some(Array3::from_shape_vec((k, h, w), slice).unwrap());
                }
                p
            })
            .collect()
    }
}

pub(crate) struct Gradients {
    pub params: Vec<Vec<f64>>,
    pub input: Option<Tensor>,
}

impl ModelState {
    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn buffers(&self) -> &[NamedTensor] {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&NamedTensor> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut NamedTensor> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub(crate) fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    fn p(&self, i: usize) -> &[f64] {
        &self.params[i].data
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (h, w) = self.spec.input_shape;
        if x.shape[1] != 1 || x.shape[2] != h || x.shape[3] != w || x.shape[0] == 0 {
            return Err(Error::Shape {
                expected: format!("[B x 1 x {h} x {w}]"),
                got: format!("{:?}", x.shape),
            });
        }
        Ok(())
    }

    /// Runs the encoder only, in evaluation mode.
    pub fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for stage in &self.layout.stages {
            let (out, _, _) = self.stage_forward(stage, x, Mode::Eval);
            x = out;
        }
        Ok(x)
    }

    /// Evaluation-mode forward pass (frozen batch-norm statistics).
    pub fn forward(&self, batch: &Tensor) -> Result<Vec<Prediction>> {
        Ok(self.forward_tape(batch, Mode::Eval)?.predictions())
    }

    /// Predictions for single features, processed in chunks.
    pub fn predict(&self, features: &[Array2<f64>]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(features.len());
        for chunk in features.chunks(32) {
            out.extend(self.forward(&stack(chunk)?)?);
        }
        Ok(out)
    }

    fn stage_forward(&self, s: &StageRef, input: Tensor, mode: Mode) -> (Tensor, StageTape, (Option<BnStats>, Option<BnStats>)) {
        let training = mode == Mode::Train;
        let bn = |x: &Tensor, r: &BnRef| {
            ops::bn_forward(
                x,
                self.p(r.gamma),
                self.p(r.beta),
                &self.buffers[r.mean].data,
                &self.buffers[r.var].data,
                training,
            )
        };
        let a1 = ops::conv_forward(&input, self.p(s.conv_a.weight), s.conv_a.geom);
        let (mut r1, bn_a, st_a) = bn(&a1, &s.bn_a);
        drop(a1);
        ops::relu_inplace(&mut r1);
        let a2 = ops::conv_forward(&r1, self.p(s.conv_b.weight), s.conv_b.geom);
        let (mut r2, bn_b, st_b) = bn(&a2, &s.bn_b);
        drop(a2);
        if let Some(shortcut) = &s.shortcut {
            let sc = match shortcut {
                Some(c) => ops::conv_forward(&input, self.p(c.weight), c.geom),
                None => input.clone(),
            };
            for (v, s) in r2.data.iter_mut().zip(&sc.data) {
                *v += s;
            }
        }
        ops::relu_inplace(&mut r2);
        let (out, pool_arg) = ops::maxpool_forward(&r2);
        (
            out,
            StageTape { input, bn_a, r1, bn_b, r2, pool_arg },
            (st_a, st_b),
        )
    }

    pub(crate) fn forward_tape(&self, batch: &Tensor, mode: Mode) -> Result<Tape> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        let mut stages = Vec::with_capacity(4);
        let mut bn_stats = Vec::with_capacity(4);
        for stage in &self.layout.stages {
            let (out, tape, stats) = self.stage_forward(stage, x, mode);
            stages.push(tape);
            bn_stats.push(stats);
            x = out;
        }
        let k = self.spec.n_classes;
        let [b, c, h, w] = x.shape;
        let hw = h * w;
        let (head, logits) = match self.layout.head {
            HeadRef::MaxFc { weight, bias } => {
                let mut pooled = vec![0.0; b * c];
                let mut arg = vec![0usize; b * c];
                for plane in 0..b * c {
                    let src = &x.data[plane * hw..(plane + 1) * hw];
                    let i = argmax(src);
                    pooled[plane] = src[i];
                    arg[plane] = i;
                }
                let (wt, bs) = (self.p(weight), self.p(bias));
                let mut logits = vec![0.0; b * k];
                for bi in 0..b {
                    for kk in 0..k {
                        logits[bi * k + kk] = bs[kk]
                            + (0..c).map(|ci| wt[kk * c + ci] * pooled[bi * c + ci]).sum::<f64>();
                    }
                }
                (HeadTape::MaxFc { in_shape: x.shape, pooled, arg }, logits)
            }
            HeadRef::Attention { score_w, score_b, att_w, att_b } => {
                let geom = ConvGeom { cin: c, cout: k, kernel: 1, dilation: 1 };
                let mut score = ops::conv_forward(&x, self.p(score_w), geom).data;
                let mut att = ops::conv_forward(&x, self.p(att_w), geom).data;
                let mut logits = vec![0.0; b * k];
                for bi in 0..b {
                    for kk in 0..k {
                        let off = (bi * k + kk) * hw;
                        let sc = &mut score[off..off + hw];
                        sc.iter_mut().for_each(|v| *v += self.p(score_b)[kk]);
                        let al: Vec<f64> = att[off..off + hw]
                            .iter()
                            .map(|v| v + self.p(att_b)[kk])
                            .collect();
                        let a = ops::softmax(&al);
                        logits[bi * k + kk] = a.iter().zip(sc.iter()).map(|(a, s)| a * s).sum();
                        att[off..off + hw].copy_from_slice(&a);
                    }
                }
                (HeadTape::Attention { input: x, score, att }, logits)
            }
        };
        Ok(Tape { stages, head, logits, bn_stats })
    }

    /// Reverse pass for `d_logits` (`[B × n_classes]`, gradient of the scalar loss).
    pub(crate) fn backward(&self, tape: &Tape, d_logits: &[f64], need_input: bool) -> Gradients {
        let mut grads: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        let k = self.spec.n_classes;
        let b = tape.batch();
        let mut dx = match (&self.layout.head, &tape.head) {
            (HeadRef::MaxFc { weight, bias }, HeadTape::MaxFc { in_shape, pooled, arg }) => {
                let c = in_shape[1];
                let hw = in_shape[2] * in_shape[3];
                let wt = self.p(*weight);
                let mut dx = Tensor::zeros(*in_shape);
                for bi in 0..b {
                    for kk in 0..k {
                        let dl = d_logits[bi * k + kk];
                        grads[*bias][kk] += dl;
                        for ci in 0..c {
                            grads[*weight][kk * c + ci] += dl * pooled[bi * c + ci];
                        }
                    }
                    for ci in 0..c {
                        let d: f64 = (0..k).map(|kk| wt[kk * c + ci] * d_logits[bi * k + kk]).sum();
                        dx.data[(bi * c + ci) * hw + arg[bi * c + ci]] += d;
                    }
                }
                dx
            }
            (HeadRef::Attention { score_w, score_b, att_w, att_b }, HeadTape::Attention { input, score, att }) => {
                let [_, c, h, w] = input.shape;
                let hw = h * w;
                let mut d_score = Tensor::zeros([b, k, h, w]);
                let mut d_att = Tensor::zeros([b, k, h, w]);
                for bi in 0..b {
                    for kk in 0..k {
                        let dl = d_logits[bi * k + kk];
                        let logit = tape.logits[bi * k + kk];
                        let off = (bi * k + kk) * hw;
                        for p in off..off + hw {
                            d_score.data[p] = dl * att[p];
                            d_att.data[p] = dl * att[p] * (score[p] - logit);
                        }
                        grads[*score_b][kk] += d_score.data[off..off + hw].iter().sum::<f64>();
                        grads[*att_b][kk] += d_att.data[off..off + hw].iter().sum::<f64>();
                    }
                }
                let geom = ConvGeom { cin: c, cout: k, kernel: 1, dilation: 1 };
                let (gs, dx_s) = ops::conv_backward(input, self.p(*score_w), geom, &d_score, true);
                let (ga, dx_a) = ops::conv_backward(input, self.p(*att_w), geom, &d_att, true);
                grads[*score_w] = gs;
                grads[*att_w] = ga;
                let mut dx = dx_s.unwrap();
                for (a, v) in dx.data.iter_mut().zip(&dx_a.unwrap().data) {
                    *a += v;
                }
                dx
            }
            _ => unreachable!("tape does not match layout"),
        };
        let n_stages = self.layout.stages.len();
        for (si, (s, t)) in self.layout.stages.iter().zip(&tape.stages).enumerate().rev() {
            let first = si == 0;
            let mut d = ops::maxpool_backward(&dx, &t.pool_arg, t.r2.shape);
            ops::relu_backward_inplace(&mut d, &t.r2);
            let d_sum = d;
            let (d_a2, dg, db) = ops::bn_backward(&d_sum, &t.bn_b, self.p(s.bn_b.gamma));
            add_into(&mut grads[s.bn_b.gamma], &dg);
            add_into(&mut grads[s.bn_b.beta], &db);
            let (dw, d_r1) = ops::conv_backward(&t.r1, self.p(s.conv_b.weight), s.conv_b.geom, &d_a2, true);
            add_into(&mut grads[s.conv_b.weight], &dw);
            let mut d_r1 = d_r1.unwrap();
            ops::relu_backward_inplace(&mut d_r1, &t.r1);
            let (d_a1, dg, db) = ops::bn_backward(&d_r1, &t.bn_a, self.p(s.bn_a.gamma));
            add_into(&mut grads[s.bn_a.gamma], &dg);
            add_into(&mut grads[s.bn_a.beta], &db);
            let want_dx = !first || need_input;
            let (dw, d_in) = ops::conv_backward(&t.input, self.p(s.conv_a.weight), s.conv_a.geom, &d_a1, want_dx);
            add_into(&mut grads[s.conv_a.weight], &dw);
            let mut d_in = d_in;
            if let Some(shortcut) = &s.shortcut {
                let d_sc = match shortcut {
                    Some(c) => {
                        let (dw, d) = ops::conv_backward(&t.input, self.p(c.weight), c.geom, &d_sum, want_dx);
                        add_into(&mut grads[c.weight], &dw);
                        d
                    }
                    None => want_dx.then(|| d_sum.clone()),
                };
                if let (Some(a), Some(b)) = (d_in.as_mut(), d_sc) {
                    add_into(&mut a.data, &b.data);
                }
            }
            if first {
                return Gradients { params: grads, input: d_in };
            }
            dx = d_in.expect("interior stages always propagate");
            debug_assert!(si < n_stages);
        }
        unreachable!("model has at least one stage")
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub(crate) fn update_running_stats(&mut self, tape: &Tape) {
        let m = ops::BN_MOMENTUM;
        for (s, (a, b)) in self.layout.stages.clone().iter().zip(&tape.bn_stats) {
            for (r, st) in [(&s.bn_a, a), (&s.bn_b, b)] {
                if let Some(st) = st {
                    for (v, x) in self.buffers[r.mean].data.iter_mut().zip(&st.mean) {
                        *v = (1.0 - m) * *v + m * x;
                    }
                    for (v, x) in self.buffers[r.var].data.iter_mut().zip(&st.var) {
                        *v = (1.0 - m) * *v + m * x;
                    }
                }
            }
        }
    }

    /// Gradient of the cross-entropy loss at `label` with respect to one input feature,
    /// evaluated in evaluation mode. Also returns the prediction at `feature`.
    pub fn input_gradient(&self, feature: &Array2<f64>, label: usize) -> Result<Array2<f64>> {
        Ok(self.gradient_with(feature, |_| label)?.1)
    }

    /// One forward/backward pass where the loss label is chosen from the clean prediction.
    pub(crate) fn gradient_with(
        &self,
        feature: &Array2<f64>,
        choose_label: impl FnOnce(&Prediction) -> usize,
    ) -> Result<(Prediction, Array2<f64>)> {
        let batch = stack(std::slice::from_ref(feature))?;
        let tape = self.forward_tape(&batch, Mode::Eval)?;
        let pred = tape.predictions().pop().unwrap();
        let label = choose_label(&pred);
        if label >= self.spec.n_classes {
            return Err(Error::LabelOutOfRange(label));
        }
        let d_logits: Vec<f64> = pred
            .probabilities
            .iter()
            .enumerate()
            .map(|(i, p)| p - if i == label { 1.0 } else { 0.0 })
            .collect();
        let g = self.backward(&tape, &d_logits, true);
        let data = g.input.expect("input gradient requested").data;
        let grad = Array2::from_shape_vec(feature.raw_dim(), data).unwrap();
        Ok((pred, grad))
    }

    pub(crate) fn from_parts(
        spec: ModelSpec,
        seed: u64,
        params: Vec<NamedTensor>,
        buffers: Vec<NamedTensor>,
    ) -> Result<Self> {
        let mut state = build(&spec, seed)?;
        let check = |have: &[NamedTensor], want: &[NamedTensor]| -> Result<()> {
            if have.len() != want.len() {
                return Err(Error::Checkpoint(format!("expected {} tensors, found {}", want.len(), have.len())));
            }
            for (h, w) in have.iter().zip(want) {
                if h.name != w.name || h.shape != w.shape {
                    return Err(Error::Checkpoint(format!(
                        "tensor {} {:?} does not match expected {} {:?}",
                        h.name, h.shape, w.name, w.shape
                    )));
                }
            }
            Ok(())
        };
        check(&params, &state.params)?;
        check(&buffers, &state.buffers)?;
        if params.iter().chain(&buffers).any(|t| t.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        state.params = params;
        state.buffers = buffers;
        Ok(state)
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Stacks `[H × W]` features into a `[B × 1 × H × W]` batch.
pub fn stack(features: &[Array2<f64>]) -> Result<Tensor> {
    let first = features.first().ok_or(Error::Empty("feature batch"))?;
    let (h, w) = first.dim();
    let mut data = Vec::with_capacity(features.len() * h * w);
    for f in features {
        if f.dim() != (h, w) {
            return Err(Error::Shape {
                expected: format!("[{h} x {w}]"),
                got: format!("{:?}", f.dim()),
            });
        }
        data.extend(f.iter());
    }
    Ok(Tensor::from_vec([features.len(), 1, h, w], data))
}
