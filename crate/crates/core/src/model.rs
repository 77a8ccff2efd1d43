//! MLP feature extractor with a linear classifier head, hand-written
//! backpropagation, momentum SGD, an optional LWS scaling vector, parameter
//! freezing and a binary checkpoint format.

use std::collections::BTreeMap;
use std::hash::Hasher;
use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::angular::angular_backward;
use crate::error::{Error, Result};
use crate::numeric::{Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Architecture of the extractor plus head options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    /// Hidden widths; the last one is the feature dimension.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub classifier_bias: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            hidden: vec![32, 16],
            activation: Activation::Relu,
            classifier_bias: false,
        }
    }
}

/// One fully connected layer: `a = act(x Wᵀ + b)` with `W` stored out × in.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    layers: Vec<Layer>,
    classifier: Matrix,
    classifier_bias: Option<Vec<f64>>,
    lws_scale: Option<Vec<f64>>,
    frozen: Vec<bool>,
    generation: u64,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.classifier == other.classifier
            && self.classifier_bias == other.classifier_bias
            && self.lws_scale == other.lws_scale
            && self.frozen == other.frozen
    }
}

impl ModelParams {
    /// He-normal extractor weights, `U(±1/√fan_in)` classifier, zero biases.
    pub fn init(spec: &ModelSpec, input_dim: usize, classes: usize, rng: &mut RngStream) -> Result<Self> {
        if spec.hidden.is_empty() || spec.hidden.contains(&0) {
            return Err(Error::Invalid(format!("bad hidden widths {:?}", spec.hidden)));
        }
        if input_dim == 0 || classes < 2 {
            return Err(Error::Invalid(format!(
                "input dim {input_dim} / classes {classes} out of range"
            )));
        }
        let mut layers = Vec::with_capacity(spec.hidden.len());
        let mut fan_in = input_dim;
        for &width in &spec.hidden {
            let sd = (2.0 / fan_in as f64).sqrt();
            let data = (0..width * fan_in)
                .map(|_| { let z: f64 = StandardNormal.sample(rng); sd * z })
                .collect::<Vec<f64>>();
            layers.push(Layer {
                weight: Matrix::from_vec(width, fan_in, data)?,
                bias: vec![0.0; width],
                activation: spec.activation,
            });
            fan_in = width;
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..classes * fan_in)
            .map(|_| (2.0 * rng.uniform() - 1.0) * bound)
            .collect();
        let classifier = Matrix::from_vec(classes, fan_in, data)?;
        let classifier_bias = spec.classifier_bias.then(|| vec![0.0; classes]);
        ModelParams::from_parts(layers, classifier, classifier_bias, None)
    }

    pub fn from_parts(
        layers: Vec<Layer>,
        classifier: Matrix,
        classifier_bias: Option<Vec<f64>>,
        lws_scale: Option<Vec<f64>>,
    ) -> Result<Self> {
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].weight.cols() != pair[0].weight.rows() {
                return Err(Error::shape(
                    "ModelParams layers",
                    format!("layer {} input {}", i + 1, pair[0].weight.rows()),
                    pair[1].weight.cols(),
                ));
            }
        }
        for l in &layers {
            if l.bias.len() != l.weight.rows() {
                return Err(Error::shape("layer bias", l.weight.rows(), l.bias.len()));
            }
        }
        let feat = layers.last().map_or(classifier.cols(), |l| l.weight.rows());
        if classifier.cols() != feat {
            return Err(Error::shape("classifier", format!("{feat} columns"), classifier.cols()));
        }
        let m = classifier.rows();
        for v in [&classifier_bias, &lws_scale].into_iter().flatten() {
            if v.len() != m {
                return Err(Error::shape("classifier vector", m, v.len()));
            }
        }
        let mut p = ModelParams {
            layers,
            classifier,
            classifier_bias,
            lws_scale,
            frozen: Vec::new(),
            generation: 0,
        };
        p.frozen = vec![false; p.tensor_count()];
        Ok(p)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn classifier(&self) -> &Matrix {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut Matrix {
        self.generation += 1;
        &mut self.classifier
    }

    pub fn classifier_bias(&self) -> Option<&[f64]> {
        self.classifier_bias.as_deref()
    }

    pub fn lws_scale(&self) -> Option<&[f64]> {
        self.lws_scale.as_deref()
    }

    /// Adds (all ones) or removes the LWS vector. Resets the freeze mask to
    /// match the new tensor list, carrying over existing flags.
    pub fn set_lws_scale(&mut self, scale: Option<Vec<f64>>) -> Result<()> {
        if let Some(s) = &scale {
            if s.len() != self.num_classes() {
                return Err(Error::shape("lws_scale", self.num_classes(), s.len()));
            }
        }
        let had = self.lws_scale.is_some();
        self.lws_scale = scale;
        match (had, self.lws_scale.is_some()) {
            (false, true) => self.frozen.push(false),
            (true, false) => {
                self.frozen.pop();
            }
            _ => {}
        }
        self.generation += 1;
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(self.classifier.cols(), |l| l.weight.cols())
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.rows()
    }

    /// Names of all parameter tensors, in checkpoint/optimizer order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.tensor_count());
        for i in 0..self.layers.len() {
            names.push(format!("layers.{i}.weight"));
            names.push(format!("layers.{i}.bias"));
        }
        names.push("classifier.weight".into());
        if self.classifier_bias.is_some() {
            names.push("classifier.bias".into());
        }
        if self.lws_scale.is_some() {
            names.push("lws.scale".into());
        }
        names
    }

    pub fn tensor_count(&self) -> usize {
        2 * self.layers.len()
            + 1
            + usize::from(self.classifier_bias.is_some())
            + usize::from(self.lws_scale.is_some())
    }

    /// Number of leading tensors that belong to the feature extractor.
    pub fn extractor_tensor_count(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(self.tensor_count());
        for l in &self.layers {
            out.push(l.weight.as_slice());
            out.push(&l.bias);
        }
        out.push(self.classifier.as_slice());
        if let Some(b) = &self.classifier_bias {
            out.push(b);
        }
        if let Some(s) = &self.lws_scale {
            out.push(s);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(self.frozen.len());
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(&mut l.bias);
        }
        out.push(self.classifier.as_mut_slice());
        if let Some(b) = &mut self.classifier_bias {
            out.push(b);
        }
        if let Some(s) = &mut self.lws_scale {
            out.push(s);
        }
        out
    }

    pub fn frozen(&self) -> &[bool] {
        &self.frozen
    }

    /// Bytes of the extractor tensors, for freeze checks.
    pub fn extractor_bytes(&self) -> Vec<u8> {
        self.tensors()[..self.extractor_tensor_count()]
            .iter()
            .flat_map(|t| t.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    /// Stable 64-bit digest of every parameter bit.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for t in self.tensors() {
            h.write_usize(t.len());
            for v in t {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    /// Extractor output only.
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        let mut a = x.clone();
        self.check_input(x)?;
        for l in &self.layers {
            a = layer_forward(l, &a)?.1;
        }
        Ok(a)
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("forward input", self.input_dim(), x.cols()));
        }
        Ok(())
    }

    /// `P^L = φ Wᵀ (+ b)`.
    pub fn linear_logits_of(&self, features: &Matrix) -> Result<Matrix> {
        let mut logits = features.matmul_t(&self.classifier)?;
        if let Some(b) = &self.classifier_bias {
            for i in 0..logits.rows() {
                for (v, bc) in logits.row_mut(i).iter_mut().zip(b) {
                    *v += bc;
                }
            }
        }
        Ok(logits)
    }

    /// `s_c · P^L_c`, or `None` without an LWS vector.
    pub fn lws_logits_of(&self, linear: &Matrix) -> Option<Matrix> {
        let s = self.lws_scale.as_ref()?;
        let mut out = linear.clone();
        for i in 0..out.rows() {
            for (v, sc) in out.row_mut(i).iter_mut().zip(s) {
                *v *= sc;
            }
        }
        Some(out)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Forward> {
        self.check_input(x)?;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for l in &self.layers {
            let (z, out) = layer_forward(l, &a)?;
            pre.push(z);
            post.push(out.clone());
            a = out;
        }
        let linear_logits = self.linear_logits_of(&a)?;
        let lws_logits = self.lws_logits_of(&linear_logits);
        Ok(Forward {
            features: a,
            linear_logits,
            lws_logits,
            cache: ForwardCache {
                input: x.clone(),
                pre,
                post,
                generation: self.generation,
            },
        })
    }

    /// Backpropagates an upstream gradient. Frozen tensors receive zeros and
    /// the extractor pass is skipped when every extractor tensor is frozen.
    pub fn backward(&self, fwd: &Forward, upstream: Upstream<'_>) -> Result<Gradients> {
        let cache = &fwd.cache;
        if cache.generation != self.generation {
            return Err(Error::StaleCache(format!(
                "cache from generation {}, parameters at {}",
                cache.generation, self.generation
            )));
        }
        let n = cache.input.rows();
        let m = self.num_classes();
        let expect = (n, m);
        let mut grads: Vec<Vec<f64>> = self.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let cls_idx = self.extractor_tensor_count();
        let mut next = cls_idx + 1;
        let bias_idx = self.classifier_bias.as_ref().map(|_| {
            next += 1;
            next - 1
        });
        let lws_idx = self.lws_scale.as_ref().map(|_| next);

        let check = |g: &Matrix| -> Result<()> {
            if g.shape() != expect {
                return Err(Error::shape(
                    "backward upstream",
                    format!("{}x{}", expect.0, expect.1),
                    format!("{}x{}", g.rows(), g.cols()),
                ));
            }
            Ok(())
        };

        let d_features = match upstream {
            Upstream::Angular(g) => {
                check(g)?;
                let (d_phi, d_w) = angular_backward(&fwd.features, &self.classifier, g)?;
                grads[cls_idx].copy_from_slice(d_w.as_slice());
                d_phi
            }
            Upstream::Linear(g) | Upstream::Lws(g) => {
                check(g)?;
                let d_linear = if let Upstream::Lws(_) = upstream {
                    let s = self.lws_scale.as_ref().ok_or(Error::MissingLwsScale)?;
                    let gs = &mut grads[lws_idx.expect("lws index")];
                    let mut d = g.clone();
                    for i in 0..n {
                        for c in 0..m {
                            gs[c] += g[(i, c)] * fwd.linear_logits[(i, c)];
                            d[(i, c)] *= s[c];
                        }
                    }
                    d
                } else {
                    g.clone()
                };
                let d_w = d_linear.t_matmul(&fwd.features)?;
                grads[cls_idx].copy_from_slice(d_w.as_slice());
                if let Some(bi) = bias_idx {
                    for i in 0..n {
                        for (acc, v) in grads[bi].iter_mut().zip(d_linear.row(i)) {
                            *acc += v;
                        }
                    }
                }
                d_linear.matmul(&self.classifier)?
            }
        };

        let extractor_frozen = self.frozen[..cls_idx].iter().all(|&f| f);
        if !extractor_frozen {
            let mut da = d_features;
            for li in (0..self.layers.len()).rev() {
                let layer = &self.layers[li];
                let z = &cache.pre[li];
                let a = &cache.post[li];
                let mut dz = da;
                for ((d, &zv), &av) in dz.as_mut_slice().iter_mut().zip(z.as_slice()).zip(a.as_slice()) {
                    *d *= layer.activation.derivative(zv, av);
                }
                let input = if li == 0 { &cache.input } else { &cache.post[li - 1] };
                let d_weight = dz.t_matmul(input)?;
                grads[2 * li].copy_from_slice(d_weight.as_slice());
                for i in 0..n {
                    for (acc, v) in grads[2 * li + 1].iter_mut().zip(dz.row(i)) {
                        *acc += v;
                    }
                }
                if li > 0 {
                    da = dz.matmul(&layer.weight)?;
                } else {
                    break;
                }
            }
        }
        for (g, &frozen) in grads.iter_mut().zip(&self.frozen) {
            if frozen {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(Gradients { tensors: grads })
    }
}

fn layer_forward(layer: &Layer, input: &Matrix) -> Result<(Matrix, Matrix)> {
    let mut z = input.matmul_t(&layer.weight)?;
    for i in 0..z.rows() {
        for (v, b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    let act = layer.activation;
    let a = z.map(|v| act.apply(v));
    Ok((z, a))
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Matrix,
    pre: Vec<Matrix>,
    post: Vec<Matrix>,
    generation: u64,
}

#[derive(Debug, Clone)]
pub struct Forward {
    /// Last hidden activations `φ(x)`.
    pub features: Matrix,
    pub linear_logits: Matrix,
    pub lws_logits: Option<Matrix>,
    pub cache: ForwardCache,
}

/// Where the loss gradient enters the network.
#[derive(Debug, Clone, Copy)]
pub enum Upstream<'a> {
    /// d loss / d P^L
    Linear(&'a Matrix),
    /// d loss / d (s ⊙ P^L)
    Lws(&'a Matrix),
    /// d loss / d P^A on the training path
    Angular(&'a Matrix),
}

/// Per-tensor gradients aligned with [`ModelParams::tensor_names`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn is_all_zero(&self) -> bool {
        self.tensors.iter().flatten().all(|&v| v == 0.0)
    }
}

/// Boolean per parameter tensor; `true` means frozen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeMask(pub Vec<bool>);

impl FreezeMask {
    pub fn none(params: &ModelParams) -> Self {
        FreezeMask(vec![false; params.tensor_count()])
    }

    /// Freezes the extractor, leaves the classifier head trainable.
    pub fn extractor(params: &ModelParams) -> Self {
        let k = params.extractor_tensor_count();
        FreezeMask((0..params.tensor_count()).map(|i| i < k).collect())
    }
}

pub fn apply_freeze(params: &mut ModelParams, mask: &FreezeMask) -> Result<()> {
    if mask.0.len() != params.tensor_count() {
        return Err(Error::shape("freeze mask", params.tensor_count(), mask.0.len()));
    }
    params.frozen.clone_from(&mask.0);
    Ok(())
}

/// Momentum SGD with coupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl OptState {
    pub fn new(params: &ModelParams, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptState {
            lr,
            momentum,
            weight_decay,
            velocity: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

/// `g ← g + λw; v ← μv + g; w ← w − lr·v`. Frozen tensors are skipped
/// entirely.
pub fn sgd_step(params: &mut ModelParams, grads: &Gradients, opt: &mut OptState) -> Result<()> {
    if grads.tensors.len() != params.tensor_count() || opt.velocity.len() != params.tensor_count() {
        return Err(Error::shape(
            "sgd_step",
            format!("{} tensors", params.tensor_count()),
            format!("{} grads / {} velocities", grads.tensors.len(), opt.velocity.len()),
        ));
    }
    let frozen = params.frozen.clone();
    let (lr, mu, wd) = (opt.lr, opt.momentum, opt.weight_decay);
    for (((w, g), v), frozen) in params
        .tensors_mut()
        .into_iter()
        .zip(&grads.tensors)
        .zip(opt.velocity.iter_mut())
        .zip(frozen)
    {
        if frozen {
            continue;
        }
        if w.len() != g.len() || w.len() != v.len() {
            return Err(Error::shape("sgd_step tensor", w.len(), g.len()));
        }
        for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
            let step = gi + wd * *wi;
            *vi = mu * *vi + step;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &str = "format=angular-lt-checkpoint";

/// Writes a text manifest (`key=value` lines ending in `end`) followed by
/// every tensor as row-major little-endian f64, in manifest order.
pub fn checkpoint_save(params: &ModelParams, meta: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    write_checkpoint(params, meta, &mut out)?;
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_checkpoint(params: &ModelParams, meta: &BTreeMap<String, String>, out: &mut impl Write) -> Result<()> {
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    writeln!(out, "version=1")?;
    writeln!(out, "layers={}", params.layers.len())?;
    for (i, l) in params.layers.iter().enumerate() {
        writeln!(
            out,
            "layer.{i}={} {}x{}",
            l.activation.name(),
            l.weight.rows(),
            l.weight.cols()
        )?;
    }
    writeln!(out, "classifier={}x{}", params.classifier.rows(), params.classifier.cols())?;
    writeln!(out, "classifier_bias={}", params.classifier_bias.is_some())?;
    writeln!(out, "lws={}", params.lws_scale.is_some())?;
    let frozen: Vec<&str> = params.frozen.iter().map(|&f| if f { "1" } else { "0" }).collect();
    writeln!(out, "frozen={}", frozen.join(","))?;
    for (k, v) in meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Invalid(format!("checkpoint meta key `{k}` is not representable")));
        }
        writeln!(out, "meta.{k}={v}")?;
    }
    writeln!(out, "end")?;
    for t in params.tensors() {
        for v in t {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub meta: BTreeMap<String, String>,
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    parse_checkpoint(&std::fs::read(path)?)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |offset: usize, message: String| Error::Checkpoint { offset, message };
    let mut offset = 0;
    let mut kv: Vec<(usize, String, String)> = Vec::new();
    loop {
        let rest = &bytes[offset..];
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            return Err(corrupt(offset, "manifest is not terminated by `end`".into()));
        };
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| corrupt(offset, "manifest line is not UTF-8".into()))?;
        let line_start = offset;
        offset += nl + 1;
        if line == "end" {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| corrupt(line_start, format!("expected key=value, found `{line}`")))?;
        kv.push((line_start, k.to_string(), v.to_string()));
    }
    let mut it = kv.iter();
    let mut expect = |key: &str| -> Result<(usize, String)> {
        match it.next() {
            Some((off, k, v)) if k == key => Ok((*off, v.clone())),
            Some((off, k, _)) => Err(corrupt(*off, format!("expected key `{key}`, found `{k}`"))),
            None => Err(corrupt(offset, format!("missing key `{key}`"))),
        }
    };
    let (off, magic) = expect("format")?;
    if format!("format={magic}") != CHECKPOINT_MAGIC {
        return Err(corrupt(off, format!("unknown format `{magic}`")));
    }
    let (off, version) = expect("version")?;
    if version != "1" {
        return Err(corrupt(off, format!("unsupported version `{version}`")));
    }
    let parse_usize = |off: usize, s: &str| -> Result<usize> {
        s.parse().map_err(|_| corrupt(off, format!("bad integer `{s}`")))
    };
    let parse_shape = |off: usize, s: &str| -> Result<(usize, usize)> {
        let (r, c) = s
            .split_once('x')
            .ok_or_else(|| corrupt(off, format!("bad shape `{s}`")))?;
        Ok((parse_usize(off, r)?, parse_usize(off, c)?))
    };
    let parse_bool = |off: usize, s: &str| -> Result<bool> {
        match s {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(corrupt(off, format!("bad boolean `{s}`"))),
        }
    };
    let (off, n_layers) = expect("layers")?;
    let n_layers = parse_usize(off, &n_layers)?;
    let mut layer_specs = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let (off, v) = expect(&format!("layer.{i}"))?;
        let (act, shape) = v
            .split_once(' ')
            .ok_or_else(|| corrupt(off, format!("bad layer spec `{v}`")))?;
        let act = Activation::parse(act).ok_or_else(|| corrupt(off, format!("unknown activation `{act}`")))?;
        layer_specs.push((act, parse_shape(off, shape)?));
    }
    let (off, cls) = expect("classifier")?;
    let cls_shape = parse_shape(off, &cls)?;
    let (off, has_bias) = expect("classifier_bias")?;
    let has_bias = parse_bool(off, &has_bias)?;
    let (off, has_lws) = expect("lws")?;
    let has_lws = parse_bool(off, &has_lws)?;
    let (frozen_off, frozen_line) = expect("frozen")?;
    let mut meta = BTreeMap::new();
    for (off, k, v) in it {
        let key = k
            .strip_prefix("meta.")
            .ok_or_else(|| corrupt(*off, format!("unexpected key `{k}`")))?;
        meta.insert(key.to_string(), v.clone());
    }

    let mut read = |len: usize| -> Result<Vec<f64>> {
        let need = len * 8;
        if bytes.len() - offset < need {
            return Err(corrupt(
                bytes.len(),
                format!("truncated data: needed {need} bytes from offset {offset}"),
            ));
        }
        let vals = bytes[offset..offset + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect::<Vec<f64>>();
        if let Some(k) = vals.iter().position(|v| !v.is_finite()) {
            return Err(corrupt(offset + 8 * k, "non-finite value".into()));
        }
        offset += need;
        Ok(vals)
    };
    let mut layers = Vec::with_capacity(n_layers);
    for (act, (r, c)) in layer_specs {
        let weight = Matrix::from_vec(r, c, read(r * c)?)?;
        let bias = read(r)?;
        layers.push(Layer {
            weight,
            bias,
            activation: act,
        });
    }
    let classifier = Matrix::from_vec(cls_shape.0, cls_shape.1, read(cls_shape.0 * cls_shape.1)?)?;
    let classifier_bias = if has_bias { Some(read(cls_shape.0)?) } else { None };
    let lws_scale = if has_lws { Some(read(cls_shape.0)?) } else { None };
    if offset != bytes.len() {
        return Err(corrupt(offset, format!("{} trailing bytes", bytes.len() - offset)));
    }
    let mut params = ModelParams::from_parts(layers, classifier, classifier_bias, lws_scale)?;
    let frozen: Vec<bool> = if frozen_line.is_empty() {
        Vec::new()
    } else {
        frozen_line
            .split(',')
            .map(|f| match f {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(corrupt(frozen_off, format!("bad frozen flag `{f}`"))),
            })
            .collect::<Result<_>>()?
    };
    if frozen.len() != params.tensor_count() {
        return Err(corrupt(
            frozen_off,
            format!("{} frozen flags for {} tensors", frozen.len(), params.tensor_count()),
        ));
    }
    params.frozen = frozen;
    Ok(Checkpoint { params, meta })
}
