//! The optimization loop and checkpoint persistence.
//!
//! Every random draw in a run is addressed by `(seed, stream, epoch, step,
//! ...)`, so a run can stop after any step and resume from a checkpoint
//! without replaying earlier draws.

mod checkpoint;

pub use checkpoint::{blob_path, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use std::path::PathBuf;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contrastive::{wildsat_loss_node, LossNodes, WildSatNodes, DEFAULT_TEMPERATURE};
use crate::encoders::{
    location_input, trainable_mask, ImageEncoderConfig, ImageGraph, LocationEncoderConfig,
    ModelConfig, ModelError, PeftMode, WildSatModel, HEAD_E_LOC, HEAD_E_TXT, HEAD_IMAGE, HEAD_LOC,
    HEAD_TXT,
};
use crate::geodata::{
    apply_geometric, apply_photometric, pair_samples, GeoDataset, GeoError, GeometricParams,
    PhotometricParams, TileRecord, TrainingSample, DEFAULT_MATCH_RADIUS,
};
use crate::numerics::{
    finite_diff_check, AdamConfig, AdamState, GradCheckOptions, GradCheckReport, Inputs,
    NumericsError, Tape, Tensor,
};
use crate::seed::{derive_seed, rng_for, stream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset yields {samples} samples, fewer than one batch of {batch}")]
    DatasetTooSmall { samples: usize, batch: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("checkpoint field {field}: {detail}")]
    Checkpoint { field: String, detail: String },
    #[error("blob length mismatch: header declares {expected} bytes, file has {got}")]
    BlobLength { expected: usize, got: usize },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: f64,
    pub peft: PeftMode,
    pub freeze_location: bool,
    pub seed: u64,
    /// Random crop side applied to `tile_b` before resizing to the model input.
    pub crop: usize,
    /// Per-channel additive jitter bound.
    pub jitter: f64,
    /// Channel mixing strength.
    pub mix: f64,
    pub norm_momentum: f64,
    pub match_radius: f64,
    /// Optional cap on the total number of optimizer steps.
    pub max_steps: Option<usize>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 64,
            lr: 1e-4,
            temperature: DEFAULT_TEMPERATURE,
            peft: PeftMode::Full,
            freeze_location: false,
            seed: 0,
            crop: 24,
            jitter: 0.05,
            mix: 0.1,
            norm_momentum: 0.1,
            match_radius: DEFAULT_MATCH_RADIUS,
            max_steps: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if self.crop == 0 {
            return bad("crop must be positive");
        }
        if !(self.jitter >= 0.0 && self.mix >= 0.0) {
            return bad("augmentation scales must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.norm_momentum) {
            return bad("norm_momentum must lie in [0, 1]");
        }
        self.model.validate()?;
        Ok(())
    }
}

/// Position of the next step to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
}

/// Input images of one step: `tile_a` rows first, then `tile_b` rows.
fn prepare_tile(
    tile: &TileRecord,
    geometric: Option<(&GeometricParams, usize)>,
    photometric: &PhotometricParams,
    out_size: usize,
) -> Result<TileRecord, GeoError> {
    let full = tile.height.min(tile.width);
    let identity = GeometricParams {
        flip_h: false,
        flip_v: false,
        top: 0,
        left: 0,
    };
    let (params, crop) = geometric.unwrap_or((&identity, full));
    let shaped = apply_geometric(tile, params, crop, out_size)?;
    Ok(apply_photometric(&shaped, photometric))
}

/// Training graph with batch statistics and its named loss outputs.
pub struct LossTape {
    pub tape: Tape,
    pub image: ImageGraph,
    pub nodes: LossNodes,
    pub n: usize,
}

/// Builds the full three-term objective for batches of `n` samples.
///
/// Inputs: `images` (`2n x S x S x C`, `tile_a` rows then `tile_b` rows),
/// `location` (`n x F`) and `text` (`n x d_txt`). Outputs: `loss`, `l_img`,
/// `l_txt`, `l_loc`.
pub fn build_loss_tape(model: &WildSatModel, n: usize, tau: f64, train: bool) -> LossTape {
    let mut tape = Tape::new();
    let images = tape.input("images");
    let location = tape.input("location");
    let text = tape.input("text");

    let image = model.image_graph(&mut tape, images, train);
    let feat_a = tape.slice_rows(image.feature, 0, n);
    let feat_b = tape.slice_rows(image.feature, n, 2 * n);
    let image_t1 = model.head_graph(&mut tape, feat_a, HEAD_IMAGE);
    let image_t2 = model.head_graph(&mut tape, feat_b, HEAD_IMAGE);
    let txt_head = model.head_graph(&mut tape, feat_a, HEAD_TXT);
    let loc_head = model.head_graph(&mut tape, feat_a, HEAD_LOC);
    let e_txt = model.head_graph(&mut tape, text, HEAD_E_TXT);
    let loc_emb = model.location_graph(&mut tape, location);
    let e_loc = model.head_graph(&mut tape, loc_emb, HEAD_E_LOC);

    let nodes = wildsat_loss_node(
        &mut tape,
        &WildSatNodes {
            image_t1,
            image_t2,
            txt_head,
            e_txt,
            loc_head,
            e_loc,
        },
        n,
        tau,
    );
    tape.set_output("loss", nodes.total);
    tape.set_output("l_img", nodes.img);
    tape.set_output("l_txt", nodes.txt);
    tape.set_output("l_loc", nodes.loc);
    LossTape {
        tape,
        image,
        nodes,
        n,
    }
}

/// Assembles the input tensors of one batch, applying the seeded
/// augmentations of `(epoch, step)`.
pub fn batch_inputs(
    config: &TrainConfig,
    model_config: &ModelConfig,
    dataset: &GeoDataset,
    batch: &[&TrainingSample],
    epoch: usize,
    step: usize,
) -> Result<Inputs, TrainError> {
    let size = model_config.image.input_size;
    let mut tiles_a = Vec::with_capacity(batch.len());
    let mut tiles_b = Vec::with_capacity(batch.len());
    for (k, s) in batch.iter().enumerate() {
        let mut rng = rng_for(
            config.seed,
            &[stream::AUGMENT, epoch as u64, step as u64, k as u64],
        );
        let a = &dataset.tiles[s.tile_a];
        let b = &dataset.tiles[s.tile_b];
        if config.crop > b.height.min(b.width) {
            return Err(GeoError::CropTooLarge {
                crop: config.crop,
                height: b.height,
                width: b.width,
            }
            .into());
        }
        let geo = GeometricParams::draw(&mut rng, b.height, b.width, config.crop);
        let photo_a = PhotometricParams::draw(&mut rng, a.channels, config.jitter, config.mix);
        let photo_b = PhotometricParams::draw(&mut rng, b.channels, config.jitter, config.mix);
        tiles_a.push(prepare_tile(a, None, &photo_a, size)?);
        tiles_b.push(prepare_tile(b, Some((&geo, config.crop)), &photo_b, size)?);
    }
    let all: Vec<&TileRecord> = tiles_a.iter().chain(&tiles_b).collect();
    let images = crate::encoders::tiles_to_nhwc(&all)?;

    let coords: Vec<(f64, f64)> = batch
        .iter()
        .map(|s| (s.location.lat, s.location.lon))
        .collect();
    let covs: Vec<Vec<f64>> = batch.iter().map(|s| s.covariates.clone()).collect();
    let location = location_input(
        &model_config.location,
        &coords,
        model_config
            .location
            .use_covariates
            .then_some(covs.as_slice()),
    )?;

    let d_txt = model_config.d_txt;
    let mut text = Vec::with_capacity(batch.len() * d_txt);
    for s in batch {
        let e = &dataset.texts[s.text].embedding;
        if e.len() != d_txt {
            return Err(ModelError::Dim {
                what: "text embedding",
                expected: d_txt.to_string(),
                got: e.len().to_string(),
            }
            .into());
        }
        text.extend_from_slice(e);
    }

    let mut inputs = Inputs::new();
    inputs.insert("images".into(), images);
    inputs.insert("location".into(), location);
    inputs.insert("text".into(), Tensor::new(vec![batch.len(), d_txt], text)?);
    Ok(inputs)
}

/// Losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub img: f64,
    pub txt: f64,
    pub loc: f64,
}

/// The seeded initialization a fresh run of `config` starts from.
pub fn initial_model(config: &TrainConfig) -> Result<WildSatModel, TrainError> {
    Ok(WildSatModel::init(
        config.model.clone(),
        derive_seed(config.seed, &[stream::INIT]),
    )?)
}

/// Drives training over a paired dataset.
pub struct Trainer<'a> {
    dataset: &'a GeoDataset,
    samples: Vec<TrainingSample>,
    loss: LossTape,
    state: Checkpoint,
}

impl<'a> Trainer<'a> {
    /// Fresh run: seeded initialization, zeroed optimizer.
    pub fn new(config: TrainConfig, dataset: &'a GeoDataset) -> Result<Self, TrainError> {
        config.validate()?;
        let model = initial_model(&config)?;
        let adam = AdamState::new(AdamConfig::with_lr(config.lr));
        let state = Checkpoint {
            version: CHECKPOINT_VERSION,
            rng_state: RngState {
                seed: config.seed,
                epoch: 0,
                step: 0,
            },
            config,
            model,
            adam,
            epoch_losses: Vec::new(),
            step_losses: Vec::new(),
        };
        Self::from_checkpoint(state, dataset)
    }

    /// Continues a run from a checkpoint.
    pub fn from_checkpoint(
        mut state: Checkpoint,
        dataset: &'a GeoDataset,
    ) -> Result<Self, TrainError> {
        let config = &state.config;
        config.validate()?;
        if let Some(d) = dataset.text_dim() {
            if d != config.model.d_txt {
                return Err(TrainError::Config(format!(
                    "dataset text dim {d} differs from model d_txt {}",
                    config.model.d_txt
                )));
            }
        }
        let samples = pair_samples(dataset, config.match_radius, config.seed)?.samples;
        if samples.len() < config.batch_size {
            return Err(TrainError::DatasetTooSmall {
                samples: samples.len(),
                batch: config.batch_size,
            });
        }
        let mask = trainable_mask(config.peft, config.freeze_location, &state.model.params);
        state.model.params.apply_mask(&mask)?;
        let loss = build_loss_tape(&state.model, config.batch_size, config.temperature, true);
        Ok(Self {
            dataset,
            samples,
            loss,
            state,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples.len() / self.state.config.batch_size
    }

    /// Samples visited per epoch: the paired count rounded down to a
    /// multiple of the batch size.
    pub fn samples_per_epoch(&self) -> usize {
        self.steps_per_epoch() * self.state.config.batch_size
    }

    pub fn samples(&self) -> &[TrainingSample] {
        &self.samples
    }

    pub fn state(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }

    fn total_steps(&self) -> usize {
        let all = self.state.config.epochs * self.steps_per_epoch();
        self.state.config.max_steps.map_or(all, |m| m.min(all))
    }

    pub fn is_finished(&self) -> bool {
        self.state.step_losses.len() >= self.total_steps()
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut rng_for(
            self.state.config.seed,
            &[stream::SHUFFLE, epoch as u64],
        ));
        order
    }

    /// Runs one optimizer step at the current position.
    pub fn step(&mut self) -> Result<StepLoss, TrainError> {
        let RngState { epoch, step, .. } = self.state.rng_state;
        let n = self.state.config.batch_size;
        let order = self.epoch_order(epoch);
        let batch: Vec<&TrainingSample> = order[step * n..(step + 1) * n]
            .iter()
            .map(|&i| &self.samples[i])
            .collect();
        let inputs = batch_inputs(
            &self.state.config,
            &self.state.model.config,
            self.dataset,
            &batch,
            epoch,
            step,
        )?;

        let global = self.state.step_losses.len();
        let outs = self
            .loss
            .tape
            .forward_eval(&self.state.model.params, &inputs)?;
        let value = |k: &str| outs[k].data()[0];
        let loss = StepLoss {
            total: value("loss"),
            img: value("l_img"),
            txt: value("l_txt"),
            loc: value("l_loc"),
        };
        if !loss.total.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: global });
        }
        let grads = self.loss.tape.backward(&self.state.model.params, "loss")?;
        self.state.adam.step(&mut self.state.model.params, &grads)?;
        let momentum = self.state.config.norm_momentum;
        self.state
            .model
            .update_running_stats(&self.loss.tape, &self.loss.image, momentum);

        self.state.step_losses.push(loss.total);
        debug!(
            "epoch {epoch} step {step}: loss {:.5} (img {:.5}, txt {:.5}, loc {:.5})",
            loss.total, loss.img, loss.txt, loss.loc
        );
        let next = step + 1;
        if next == self.steps_per_epoch() {
            let steps = self.steps_per_epoch();
            let epoch_losses = &self.state.step_losses[self.state.step_losses.len() - steps..];
            let mean = epoch_losses.iter().sum::<f64>() / steps as f64;
            self.state.epoch_losses.push(mean);
            info!("epoch {epoch}: mean loss {mean:.5}");
            self.state.rng_state.epoch += 1;
            self.state.rng_state.step = 0;
        } else {
            self.state.rng_state.step = next;
        }
        Ok(loss)
    }

    /// Runs until the configured epochs (or step cap) are done, or until
    /// `stop_after` total steps when given.
    pub fn run(&mut self, stop_after: Option<usize>) -> Result<(), TrainError> {
        let end = stop_after.map_or(self.total_steps(), |s| s.min(self.total_steps()));
        while self.state.step_losses.len() < end {
            self.step()?;
        }
        Ok(())
    }
}

/// Trains from scratch and returns the final checkpoint.
pub fn train(config: TrainConfig, dataset: &GeoDataset) -> Result<Checkpoint, TrainError> {
    let mut trainer = Trainer::new(config, dataset)?;
    trainer.run(None)?;
    Ok(trainer.into_checkpoint())
}

/// Model used for finite-difference checks of the full objective: every
/// layer type of the default model, at a size where central differences
/// over all coordinates stay cheap.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        image: ImageEncoderConfig {
            channels: 3,
            input_size: 8,
            kernel: 3,
            widths: vec![4],
            d_img: 8,
        },
        location: LocationEncoderConfig {
            use_covariates: true,
            hidden: 8,
            depth: 2,
            d_loc: 8,
        },
        d: 8,
        d_txt: 6,
    }
}

/// Checks backward gradients of the full three-term loss against central
/// differences, for a seeded model and a seeded random batch of `n`.
pub fn loss_gradcheck(
    seed: u64,
    n: usize,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TrainError> {
    let config = gradcheck_model_config();
    let model = WildSatModel::init(config.clone(), derive_seed(seed, &[stream::GRADCHECK, 0]))?;
    let mut rng = rng_for(seed, &[stream::GRADCHECK, 1]);
    let mut draw = |shape: Vec<usize>| -> Result<Tensor, NumericsError> {
        let len = shape.iter().product();
        Tensor::new(
            shape,
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    };
    let s = config.image.input_size;
    let mut inputs = Inputs::new();
    inputs.insert(
        "images".into(),
        draw(vec![2 * n, s, s, config.image.channels])?,
    );
    inputs.insert(
        "location".into(),
        draw(vec![n, config.location.input_dim()])?,
    );
    inputs.insert("text".into(), draw(vec![n, config.d_txt])?);
    let mut loss = build_loss_tape(&model, n, DEFAULT_TEMPERATURE, true);
    Ok(finite_diff_check(
        &mut loss.tape,
        &model.params,
        &inputs,
        "loss",
        opts,
    )?)
}
