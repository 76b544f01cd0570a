//! Image encoder, location encoder, the five projection heads and PEFT masks.
//!
//! Parameters live in one [`ParameterStore`] under prefixes `image.`,
//! `location.` and `heads.`. Normalization running averages are kept beside
//! the store in [`RunningStats`] and are baked into eval-mode tapes as
//! fixed statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodata::{TileRecord, COVARIATE_CHANNELS};
use crate::numerics::{Inputs, NodeId, NormStats, NumericsError, ParameterStore, Tape, Tensor};
use crate::seed::{rng_for, stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{what}: expected {expected}, got {got}")]
    Dim {
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error("covariates {0}")]
    Covariates(&'static str),
    #[error("unknown PEFT mode '{0}' (expected full or scale_shift)")]
    UnknownMode(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageEncoderConfig {
    pub channels: usize,
    /// Side length of the square model input.
    pub input_size: usize,
    pub kernel: usize,
    /// Output channels of each stride-2 conv stage.
    pub widths: Vec<usize>,
    pub d_img: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            input_size: 32,
            kernel: 3,
            widths: vec![16, 32],
            d_img: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocationEncoderConfig {
    pub use_covariates: bool,
    pub hidden: usize,
    /// Input layer plus `depth - 1` residual blocks.
    pub depth: usize,
    pub d_loc: usize,
}

impl Default for LocationEncoderConfig {
    fn default() -> Self {
        Self {
            use_covariates: true,
            hidden: 64,
            depth: 3,
            d_loc: 64,
        }
    }
}

impl LocationEncoderConfig {
    pub fn input_dim(&self) -> usize {
        4 + if self.use_covariates {
            COVARIATE_CHANNELS
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image: ImageEncoderConfig,
    pub location: LocationEncoderConfig,
    /// Shared embedding dimension of all five heads.
    pub d: usize,
    pub d_txt: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image: ImageEncoderConfig::default(),
            location: LocationEncoderConfig::default(),
            d: 64,
            d_txt: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        let im = &self.image;
        if im.channels == 0 || im.input_size == 0 || im.kernel == 0 {
            return bad("image channels, input_size and kernel must be positive");
        }
        if im.widths.is_empty() || im.widths.contains(&0) {
            return bad("image widths must be non-empty and positive");
        }
        if im.d_img < 8 {
            return bad("d_img must be at least 8");
        }
        if self.location.d_loc < 8 {
            return bad("d_loc must be at least 8");
        }
        if self.location.hidden == 0 || self.location.depth == 0 {
            return bad("location hidden width and depth must be positive");
        }
        if self.d == 0 || self.d_txt == 0 {
            return bad("d and d_txt must be positive");
        }
        Ok(())
    }

    /// Spatial side length after each conv stage.
    pub fn stage_sizes(&self) -> Vec<usize> {
        let pad = self.image.kernel / 2;
        let mut size = self.image.input_size;
        self.image
            .widths
            .iter()
            .map(|_| {
                size = (size + 2 * pad).saturating_sub(self.image.kernel) / 2 + 1;
                size
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeftMode {
    #[default]
    Full,
    ScaleShift,
}

impl FromStr for PeftMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(PeftMode::Full),
            "scale_shift" => Ok(PeftMode::ScaleShift),
            other => Err(ModelError::UnknownMode(other.into())),
        }
    }
}

impl fmt::Display for PeftMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeftMode::Full => "full",
            PeftMode::ScaleShift => "scale_shift",
        })
    }
}

pub const HEAD_IMAGE: &str = "heads.image";
pub const HEAD_TXT: &str = "heads.txt";
pub const HEAD_LOC: &str = "heads.loc";
pub const HEAD_E_TXT: &str = "heads.e_txt";
pub const HEAD_E_LOC: &str = "heads.e_loc";

fn is_norm_param(name: &str) -> bool {
    name.starts_with("image.norm")
}

/// Names that an optimizer may update under `mode`.
///
/// `full` covers everything. `scale_shift` keeps only the image encoder's
/// normalization scale/shift, every projection head and, unless frozen, the
/// location encoder.
pub fn trainable_mask(
    mode: PeftMode,
    freeze_location: bool,
    params: &ParameterStore,
) -> BTreeSet<String> {
    params
        .names()
        .filter(|name| {
            if name.starts_with("location.") {
                return !freeze_location;
            }
            match mode {
                PeftMode::Full => true,
                PeftMode::ScaleShift => name.starts_with("heads.") || is_norm_param(name),
            }
        })
        .map(String::from)
        .collect()
}

/// Exponential running averages for one normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub type RunningStats = BTreeMap<String, NormRunning>;

/// `[sin(pi lon/180), cos(pi lon/180), sin(pi lat/90), cos(pi lat/90)]`
pub fn location_features(lat: f64, lon: f64) -> [f64; 4] {
    let x = std::f64::consts::PI * lon / 180.0;
    let y = std::f64::consts::PI * lat / 90.0;
    [x.sin(), x.cos(), y.sin(), y.cos()]
}

/// Stacks `C x H x W` tiles into one `N x H x W x C` tensor.
pub fn tiles_to_nhwc(tiles: &[&TileRecord]) -> Result<Tensor, ModelError> {
    let first = tiles
        .first()
        .ok_or(ModelError::Config("no tiles to encode".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(tiles.len() * c * h * w);
    for t in tiles {
        if (t.channels, t.height, t.width) != (c, h, w) {
            return Err(ModelError::Dim {
                what: "tile dims",
                expected: format!("{c}x{h}x{w}"),
                got: format!("{}x{}x{}", t.channels, t.height, t.width),
            });
        }
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(t.at(ch, y, x));
                }
            }
        }
    }
    Ok(Tensor::new(vec![tiles.len(), h, w, c], data)?)
}

/// Builds the `N x F` location-encoder input from coordinates and optional
/// normalized covariates.
pub fn location_input(
    config: &LocationEncoderConfig,
    coords: &[(f64, f64)],
    covariates: Option<&[Vec<f64>]>,
) -> Result<Tensor, ModelError> {
    match (config.use_covariates, covariates) {
        (true, None) => return Err(ModelError::Covariates("required by this model but missing")),
        (false, Some(_)) => {
            return Err(ModelError::Covariates(
                "supplied but disabled in this model",
            ))
        }
        _ => {}
    }
    let width = config.input_dim();
    let mut data = Vec::with_capacity(coords.len() * width);
    for (i, &(lat, lon)) in coords.iter().enumerate() {
        data.extend_from_slice(&location_features(lat, lon));
        if let Some(cov) = covariates {
            let row = cov
                .get(i)
                .ok_or(ModelError::Covariates("fewer rows than coordinates"))?;
            if row.len() != COVARIATE_CHANNELS {
                return Err(ModelError::Dim {
                    what: "covariate vector",
                    expected: COVARIATE_CHANNELS.to_string(),
                    got: row.len().to_string(),
                });
            }
            data.extend_from_slice(row);
        }
    }
    Ok(Tensor::new(vec![coords.len(), width], data)?)
}

/// Norm nodes of one image-encoder graph, by layer name.
#[derive(Debug, Clone, Default)]
pub struct ImageGraph {
    pub feature: NodeId,
    pub norms: Vec<(String, NodeId)>,
}

/// Parameters, running statistics and configuration of the whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct WildSatModel {
    pub config: ModelConfig,
    pub params: ParameterStore,
    pub running: RunningStats,
}

/// Rows per eval-mode forward pass.
const EVAL_CHUNK: usize = 64;

impl WildSatModel {
    /// Weights uniform in `±sqrt(1/fan_in)`, biases zero, `gamma = 1`, `beta = 0`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
        let im = &config.image;
        let mut c_in = im.channels;
        for (i, &w) in im.widths.iter().enumerate() {
            specs.push((
                format!("image.conv{i}.kernel"),
                vec![im.kernel, im.kernel, c_in, w],
                Init::FanIn(im.kernel * im.kernel * c_in),
            ));
            specs.push((format!("image.norm{i}.gamma"), vec![w], Init::Const(1.0)));
            specs.push((format!("image.norm{i}.beta"), vec![w], Init::Const(0.0)));
            c_in = w;
        }
        specs.push((
            "image.fc.weight".into(),
            vec![c_in, im.d_img],
            Init::FanIn(c_in),
        ));
        specs.push(("image.fc.bias".into(), vec![im.d_img], Init::Const(0.0)));

        let loc = &config.location;
        let f = loc.input_dim();
        specs.push((
            "location.in.weight".into(),
            vec![f, loc.hidden],
            Init::FanIn(f),
        ));
        specs.push((
            "location.in.bias".into(),
            vec![loc.hidden],
            Init::Const(0.0),
        ));
        for b in 1..loc.depth {
            specs.push((
                format!("location.block{b}.weight"),
                vec![loc.hidden, loc.hidden],
                Init::FanIn(loc.hidden),
            ));
            specs.push((
                format!("location.block{b}.bias"),
                vec![loc.hidden],
                Init::Const(0.0),
            ));
        }
        specs.push((
            "location.out.weight".into(),
            vec![loc.hidden, loc.d_loc],
            Init::FanIn(loc.hidden),
        ));
        specs.push((
            "location.out.bias".into(),
            vec![loc.d_loc],
            Init::Const(0.0),
        ));

        for (name, rows) in [
            (HEAD_IMAGE, im.d_img),
            (HEAD_TXT, im.d_img),
            (HEAD_LOC, im.d_img),
            (HEAD_E_TXT, config.d_txt),
            (HEAD_E_LOC, loc.d_loc),
        ] {
            specs.push((name.into(), vec![rows, config.d], Init::FanIn(rows)));
        }

        let mut params = ParameterStore::new();
        for (idx, (name, shape, init)) in specs.into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Const(v) => vec![v; n],
                Init::FanIn(fan_in) => {
                    let bound = (1.0 / fan_in as f64).sqrt();
                    let mut rng = rng_for(seed, &[stream::INIT, idx as u64]);
                    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
                }
            };
            params.insert(name, Tensor::new(shape, data)?, true)?;
        }

        let running = im
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                (
                    format!("image.norm{i}"),
                    NormRunning {
                        mean: vec![0.0; w],
                        var: vec![1.0; w],
                    },
                )
            })
            .collect();
        Ok(Self {
            config,
            params,
            running,
        })
    }

    /// Image encoder on an `N x H x W x C` node. `train` selects batch
    /// statistics; otherwise the running averages are used.
    pub fn image_graph(&self, tape: &mut Tape, input: NodeId, train: bool) -> ImageGraph {
        let im = &self.config.image;
        let mut x = input;
        let mut norms = Vec::new();
        for i in 0..im.widths.len() {
            let kernel = tape.param(&format!("image.conv{i}.kernel"));
            x = tape.conv2d(x, kernel, 2, im.kernel / 2);
            let layer = format!("image.norm{i}");
            let stats = if train {
                NormStats::Batch
            } else {
                let r = &self.running[&layer];
                NormStats::Fixed {
                    mean: r.mean.clone(),
                    var: r.var.clone(),
                }
            };
            let gamma = tape.param(&format!("{layer}.gamma"));
            let beta = tape.param(&format!("{layer}.beta"));
            x = tape.scale_shift_norm(x, gamma, beta, stats);
            norms.push((layer, x));
            x = tape.relu(x);
        }
        let pooled = tape.global_avg_pool(x);
        let feature = linear(tape, pooled, "image.fc");
        ImageGraph { feature, norms }
    }

    /// Location encoder on an `N x F` node of sinusoid (+ covariate) features.
    pub fn location_graph(&self, tape: &mut Tape, input: NodeId) -> NodeId {
        let pre = linear(tape, input, "location.in");
        let mut h = tape.relu(pre);
        for b in 1..self.config.location.depth {
            let pre = linear(tape, h, &format!("location.block{b}"));
            let r = tape.relu(pre);
            h = tape.add(h, r);
        }
        linear(tape, h, "location.out")
    }

    /// `l2_normalize_rows(x W)` for a bias-free head.
    pub fn head_graph(&self, tape: &mut Tape, x: NodeId, head: &str) -> NodeId {
        let w = tape.param(head);
        let p = tape.matmul(x, w);
        tape.l2_normalize_rows(p)
    }

    /// Folds the batch statistics seen by `graph`'s norm nodes into the
    /// running averages with the given momentum.
    pub fn update_running_stats(&mut self, tape: &Tape, graph: &ImageGraph, momentum: f64) {
        for (layer, node) in &graph.norms {
            let Some((mean, var)) = tape.batch_stats(*node) else {
                continue;
            };
            let r = self
                .running
                .get_mut(layer)
                .expect("running stats exist for every norm layer");
            for (rm, m) in r.mean.iter_mut().zip(&mean) {
                *rm = (1.0 - momentum) * *rm + momentum * m;
            }
            for (rv, v) in r.var.iter_mut().zip(&var) {
                *rv = (1.0 - momentum) * *rv + momentum * v;
            }
        }
    }

    fn check_input_dims(&self, x: &Tensor) -> Result<(), ModelError> {
        let im = &self.config.image;
        let expected = [im.input_size, im.input_size, im.channels];
        if x.rank() != 4 || x.shape()[1..] != expected {
            return Err(ModelError::Dim {
                what: "image batch (N x H x W x C)",
                expected: format!("N x {} x {} x {}", expected[0], expected[1], expected[2]),
                got: format!("{:?}", x.shape()),
            });
        }
        Ok(())
    }

    /// Eval-mode image features, `N x d_img`.
    pub fn encode_image(&self, images: &Tensor) -> Result<Tensor, ModelError> {
        self.check_input_dims(images)?;
        let mut tape = Tape::new();
        let input = tape.input("images");
        let g = self.image_graph(&mut tape, input, false);
        tape.set_output("feature", g.feature);
        run_chunked(&mut tape, &self.params, "images", images, "feature")
    }

    pub fn encode_tiles(&self, tiles: &[&TileRecord]) -> Result<Tensor, ModelError> {
        self.encode_image(&tiles_to_nhwc(tiles)?)
    }

    /// Location embeddings, `N x d_loc`.
    pub fn encode_location(
        &self,
        coords: &[(f64, f64)],
        covariates: Option<&[Vec<f64>]>,
    ) -> Result<Tensor, ModelError> {
        for &(lat, lon) in coords {
            if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
                return Err(ModelError::Dim {
                    what: "coordinate",
                    expected: "lat in [-90, 90], lon in [-180, 180]".into(),
                    got: format!("({lat}, {lon})"),
                });
            }
        }
        let x = location_input(&self.config.location, coords, covariates)?;
        let mut tape = Tape::new();
        let input = tape.input("x");
        let out = self.location_graph(&mut tape, input);
        tape.set_output("out", out);
        run_chunked(&mut tape, &self.params, "x", &x, "out")
    }

    /// Applies one head to an `N x k` matrix.
    pub fn project(&self, head: &str, x: &Tensor) -> Result<Tensor, ModelError> {
        let w = self
            .params
            .get(head)
            .ok_or_else(|| NumericsError::UnknownParam(head.into()))?;
        let (_, k) = x
            .dims2()
            .ok_or_else(|| NumericsError::NotMatrix(x.shape().to_vec()))?;
        if k != w.shape()[0] {
            return Err(ModelError::Dim {
                what: "head input",
                expected: w.shape()[0].to_string(),
                got: k.to_string(),
            });
        }
        let mut tape = Tape::new();
        let input = tape.input("x");
        let out = self.head_graph(&mut tape, input, head);
        tape.set_output("out", out);
        run_chunked(&mut tape, &self.params, "x", x, "out")
    }

    /// `(z_I, z_txt, z_loc)` for a batch of image features.
    pub fn project_image_heads(
        &self,
        features: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor), ModelError> {
        Ok((
            self.project(HEAD_IMAGE, features)?,
            self.project(HEAD_TXT, features)?,
            self.project(HEAD_LOC, features)?,
        ))
    }

    pub fn project_text(&self, raw: &Tensor) -> Result<Tensor, ModelError> {
        self.project(HEAD_E_TXT, raw)
    }

    pub fn project_location(&self, loc_emb: &Tensor) -> Result<Tensor, ModelError> {
        self.project(HEAD_E_LOC, loc_emb)
    }

    /// Hash over the image encoder's parameters and running statistics.
    pub fn encoder_hash(&self) -> String {
        let mut store = ParameterStore::new();
        for (name, e) in self.params.iter() {
            if name.starts_with("image.") {
                store.insert(name, e.tensor.clone(), false).unwrap();
            }
        }
        for (layer, r) in &self.running {
            let n = r.mean.len();
            store
                .insert(
                    format!("{layer}.running_mean"),
                    Tensor::new(vec![n], r.mean.clone()).unwrap(),
                    false,
                )
                .unwrap();
            store
                .insert(
                    format!("{layer}.running_var"),
                    Tensor::new(vec![n], r.var.clone()).unwrap(),
                    false,
                )
                .unwrap();
        }
        store.blob_hash()
    }
}

enum Init {
    Const(f64),
    FanIn(usize),
}

fn linear(tape: &mut Tape, x: NodeId, prefix: &str) -> NodeId {
    let w = tape.param(&format!("{prefix}.weight"));
    let b = tape.param(&format!("{prefix}.bias"));
    let y = tape.matmul(x, w);
    tape.add_bias(y, b)
}

/// Eval-mode forward in row chunks; valid because fixed-statistics graphs
/// treat rows independently.
fn run_chunked(
    tape: &mut Tape,
    params: &ParameterStore,
    input: &str,
    x: &Tensor,
    output: &str,
) -> Result<Tensor, ModelError> {
    let n = x.shape()[0];
    if n == 0 {
        return Err(ModelError::Config("empty batch".into()));
    }
    let row_len = x.len() / n;
    let mut out_shape = Vec::new();
    let mut data = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let mut shape = x.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(shape, x.data()[start * row_len..end * row_len].to_vec())?;
        let mut inputs = Inputs::new();
        inputs.insert(input.into(), chunk);
        let mut outs = tape.forward_eval(params, &inputs)?;
        let y = outs.remove(output).expect("output registered");
        out_shape = y.shape().to_vec();
        data.extend_from_slice(y.data());
    }
    out_shape[0] = n;
    Ok(Tensor::new(out_shape, data)?)
}
