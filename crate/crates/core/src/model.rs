//! Small U-shaped encoder-decoder. Each encoder level is two 3x3 conv + relu
//! followed by 2x2 max-pooling; each decoder level upsamples, concatenates the
//! matching encoder output and applies two more 3x3 conv + relu. A 1x1 head
//! yields one logit (binary, sigmoid) or `L` logits (softmax).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::countstats::ProbabilityMap;
use crate::diff::{Graph, Tensor, Var};
use crate::error::{LsrError, Result};
use crate::seed;

const CHECKPOINT_MAGIC: &str = "lsr-checkpoint v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegModelConfig {
    pub input_side: usize,
    pub input_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub num_classes: usize,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        SegModelConfig {
            input_side: 32,
            input_channels: 3,
            base_width: 8,
            depth: 2,
            num_classes: 2,
        }
    }
}

impl SegModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth > 16 || self.input_side == 0 || !self.input_side.is_multiple_of(1 << self.depth) {
            return Err(LsrError::config("model.input_side", "must be a positive multiple of 2^depth"));
        }
        if self.input_channels == 0 {
            return Err(LsrError::config("model.input_channels", "must be at least 1"));
        }
        if self.base_width == 0 {
            return Err(LsrError::config("model.base_width", "must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(LsrError::config("model.num_classes", "must be at least 2"));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    fn head_outputs(&self) -> usize {
        if self.num_classes == 2 {
            1
        } else {
            self.num_classes
        }
    }

    /// Names and shapes in the fixed order used everywhere else.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize, k: usize| {
            specs.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            specs.push((format!("{name}.bias"), vec![cout]));
        };
        let mut cin = self.input_channels;
        for level in 0..self.depth {
            let w = self.width(level);
            conv(format!("enc{level}.conv1"), cin, w, 3);
            conv(format!("enc{level}.conv2"), w, w, 3);
            cin = w;
        }
        let w = self.width(self.depth);
        conv("mid.conv1".into(), cin, w, 3);
        conv("mid.conv2".into(), w, w, 3);
        for level in (0..self.depth).rev() {
            let w = self.width(level);
            conv(format!("dec{level}.conv1"), self.width(level + 1) + w, w, 3);
            conv(format!("dec{level}.conv2"), w, w, 3);
        }
        conv("head".into(), self.base_width, self.head_outputs(), 1);
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: SegModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn zeros(config: SegModelConfig) -> Result<Self> {
        config.validate()?;
        let (names, tensors) = config
            .param_specs()
            .into_iter()
            .map(|(n, s)| {
                let t = Tensor::zeros(&s);
                (n, t)
            })
            .unzip();
        Ok(ModelParams { config, names, tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Inserts every tensor into `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.to_text_with(&[])
    }

    /// Like [`ModelParams::to_text`] with `# key=value` lines after the version.
    pub fn to_text_with(&self, meta: &[(String, String)]) -> String {
        let c = &self.config;
        let mut s = String::new();
        writeln!(s, "{CHECKPOINT_MAGIC}").unwrap();
        for (k, v) in meta {
            writeln!(s, "# {k}={v}").unwrap();
        }
        writeln!(
            s,
            "config input_side={} input_channels={} base_width={} depth={} num_classes={}",
            c.input_side, c.input_channels, c.base_width, c.depth, c.num_classes
        )
        .unwrap();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            writeln!(s, "param {name} {}", dims.join(",")).unwrap();
            let vals: Vec<String> = t.data().iter().map(|v| v.to_string()).collect();
            writeln!(s, "{}", vals.join(" ")).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |reason: &str| LsrError::format("checkpoint", reason.to_string());
        let mut all = text.lines();
        if all.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing version header"));
        }
        let mut lines = all.filter(|l| !l.starts_with('#'));
        let cfg_line = lines.next().and_then(|l| l.strip_prefix("config ")).ok_or_else(|| bad("missing config"))?;
        let mut config = SegModelConfig::default();
        for kv in cfg_line.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad("bad config entry"))?;
            let v: usize = v.parse().map_err(|_| bad("bad config value"))?;
            match k {
                "input_side" => config.input_side = v,
                "input_channels" => config.input_channels = v,
                "base_width" => config.base_width = v,
                "depth" => config.depth = v,
                "num_classes" => config.num_classes = v,
                _ => return Err(bad("unknown config key")),
            }
        }
        let mut params = ModelParams::zeros(config)?;
        for (name, t) in params.names.iter().zip(params.tensors.iter_mut()) {
            let head = lines.next().ok_or_else(|| bad("truncated"))?;
            let mut parts = head.split_whitespace();
            if parts.next() != Some("param") || parts.next() != Some(name.as_str()) {
                return Err(LsrError::format("checkpoint", format!("expected parameter {name}")));
            }
            let dims: Vec<usize> = parts
                .next()
                .ok_or_else(|| bad("missing shape"))?
                .split(',')
                .map(|d| d.parse().map_err(|_| bad("bad shape")))
                .collect::<Result<_>>()?;
            if dims != t.shape() {
                return Err(LsrError::format("checkpoint", format!("shape of {name} disagrees with config")));
            }
            let vals: Vec<f64> = lines
                .next()
                .ok_or_else(|| bad("truncated"))?
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| bad("bad value")))
                .collect::<Result<_>>()?;
            if vals.len() != t.numel() {
                return Err(LsrError::format("checkpoint", format!("value count of {name} is wrong")));
            }
            t.data_mut().copy_from_slice(&vals);
            t.validate_finite("checkpoint")?;
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(bad("trailing content"));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| LsrError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LsrError::io(path, e))?;
        Self::from_text(&text)
    }
}

/// He-normal kernels (std `sqrt(2 / fan_in)`), zero biases.
pub fn init_params(config: &SegModelConfig, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(*config)?;
    let mut rng = seed::rng(seed);
    for (name, t) in params.names.iter().zip(params.tensors.iter_mut()) {
        if name.ends_with(".bias") {
            continue;
        }
        let s = t.shape();
        let fan_in = (s[1] * s[2] * s[3]) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        for v in t.data_mut() {
            *v = normal.sample(&mut rng);
        }
    }
    Ok(params)
}

fn conv_block(g: &mut Graph, x: Var, p: &[Var]) -> Result<Var> {
    let h = g.conv2d(x, p[0], Some(p[1]), 1)?;
    let h = g.relu(h)?;
    let h = g.conv2d(h, p[2], Some(p[3]), 1)?;
    g.relu(h)
}

/// Records the network on `g`. `input` is `(N, C, S, S)`; the result is the
/// `(N, L, S, S)` probability tensor.
pub fn forward(g: &mut Graph, config: &SegModelConfig, params: &[Var], input: Var) -> Result<Var> {
    let expected = config.param_specs().len();
    if params.len() != expected {
        return Err(LsrError::ShapeMismatch {
            op: "forward",
            lhs: vec![params.len()],
            rhs: vec![expected],
        });
    }
    let shape = g.shape(input).to_vec();
    let want = [config.input_channels, config.input_side, config.input_side];
    if shape.len() != 4 || shape[1..] != want {
        return Err(LsrError::ShapeMismatch {
            op: "forward",
            lhs: shape,
            rhs: want.to_vec(),
        });
    }
    let mut p = params.chunks(4);
    let mut skips = Vec::with_capacity(config.depth);
    let mut x = input;
    for _ in 0..config.depth {
        let h = conv_block(g, x, p.next().unwrap())?;
        skips.push(h);
        x = g.maxpool2(h)?;
    }
    x = conv_block(g, x, p.next().unwrap())?;
    for skip in skips.into_iter().rev() {
        let up = g.upsample2(x)?;
        let cat = g.concat(&[up, skip], 1)?;
        x = conv_block(g, cat, p.next().unwrap())?;
    }
    let head = &params[expected - 2..];
    let logits = g.conv2d(x, head[0], Some(head[1]), 0)?;
    if config.num_classes == 2 {
        let pos = g.sigmoid(logits)?;
        let neg = g.affine(pos, -1.0, 1.0)?;
        g.concat(&[neg, pos], 1)
    } else {
        g.softmax_channels(logits)
    }
}

/// Stacks `(C, S, S)` images into one `(N, C, S, S)` tensor.
pub fn stack_images(config: &SegModelConfig, images: &[&[f64]]) -> Result<Tensor> {
    let per = config.input_channels * config.input_side * config.input_side;
    let mut data = Vec::with_capacity(per * images.len());
    for img in images {
        if img.len() != per {
            return Err(LsrError::ShapeMismatch {
                op: "predict",
                lhs: vec![img.len()],
                rhs: vec![per],
            });
        }
        data.extend_from_slice(img);
    }
    Tensor::new(vec![images.len(), config.input_channels, config.input_side, config.input_side], data)
}

/// Probability maps for a batch of `(C, S, S)` images.
pub fn predict_batch(params: &ModelParams, images: &[&[f64]]) -> Result<Vec<ProbabilityMap>> {
    let cfg = &params.config;
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false)?;
    let x = g.constant(stack_images(cfg, images)?)?;
    let probs = forward(&mut g, cfg, &vars, x)?;
    let per = cfg.num_classes * cfg.input_side * cfg.input_side;
    g.value(probs)
        .data()
        .chunks(per)
        .map(|c| ProbabilityMap::new(cfg.num_classes, cfg.input_side, cfg.input_side, c.to_vec()))
        .collect()
}

pub fn predict(params: &ModelParams, image: &[f64]) -> Result<ProbabilityMap> {
    Ok(predict_batch(params, &[image])?.remove(0))
}
