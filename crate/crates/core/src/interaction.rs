//! Mouse and keyboard gestures to user inputs, plus the per-session edit
//! state machine (gesture, commit, revert).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::generator::{FeatureGrid, Generator, ImageTensor};
use crate::latent::{LatentSeq, LatentW};
use crate::transformer::{apply_directions, LatentTransformer, MotionVector, PixelPosition, UserInput, UserInputSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZKey {
    #[default]
    None,
    ZoomIn,
    ZoomOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DragGesture {
    pub start: PixelPosition,
    pub end: PixelPosition,
    #[serde(default)]
    pub z_key: ZKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InteractionConfig {
    /// Edit strength per pixel of drag.
    pub beta: f64,
    pub z_in: f64,
    pub z_out: f64,
    /// α added per wheel click.
    pub wheel_alpha_step: f64,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        Self {
            beta: 0.02,
            z_in: -5.0,
            z_out: 5.0,
            wheel_alpha_step: 0.1,
        }
    }
}

impl InteractionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.wheel_alpha_step > 0.0 && self.wheel_alpha_step.is_finite()) {
            return Err(Error::Config("wheel_alpha_step must be positive".into()));
        }
        Ok(())
    }
}

/// Unit drag direction with the z-key depth, anchored at the drag start, and
/// `α = β‖e − s‖`.
pub fn drag_to_input(g: &DragGesture, cfg: &InteractionConfig) -> Result<(UserInput, f64)> {
    if g.start == g.end {
        return Err(invalid("drag start and end coincide; the direction is undefined"));
    }
    let dx = (g.end.x - g.start.x) as f64;
    let dy = (g.end.y - g.start.y) as f64;
    let len = dx.hypot(dy);
    let z = match g.z_key {
        ZKey::None => 0.0,
        ZKey::ZoomIn => cfg.z_in,
        ZKey::ZoomOut => cfg.z_out,
    };
    let input = UserInput {
        motion: MotionVector([dx / len, dy / len, z]),
        position: g.start,
    };
    Ok((input, cfg.beta * len))
}

pub fn anchor_to_input(p: PixelPosition, resolution: usize) -> Result<UserInput> {
    check_position(p, resolution)?;
    Ok(UserInput {
        motion: MotionVector::ZERO,
        position: p,
    })
}

/// Positive clicks zoom in.
pub fn wheel_to_input(p: PixelPosition, clicks: i64, cfg: &InteractionConfig) -> Result<(UserInput, f64)> {
    if clicks == 0 {
        return Err(invalid("wheel event without rotation"));
    }
    let z = if clicks > 0 { cfg.z_in } else { cfg.z_out };
    let input = UserInput {
        motion: MotionVector([0.0, 0.0, z]),
        position: p,
    };
    Ok((input, clicks.unsigned_abs() as f64 * cfg.wheel_alpha_step))
}

fn check_position(p: PixelPosition, resolution: usize) -> Result<()> {
    if p.in_bounds(resolution) {
        Ok(())
    } else {
        Err(invalid(format!(
            "position ({}, {}) outside the {resolution}x{resolution} image",
            p.x, p.y
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Gesture {
    Drag(DragGesture),
    Wheel { position: PixelPosition, clicks: i64 },
}

impl Gesture {
    pub fn to_input(&self, cfg: &InteractionConfig, resolution: usize) -> Result<(UserInput, f64)> {
        match self {
            Self::Drag(d) => {
                check_position(d.start, resolution)?;
                check_position(d.end, resolution)?;
                drag_to_input(d, cfg)
            }
            Self::Wheel { position, clicks } => {
                check_position(*position, resolution)?;
                wheel_to_input(*position, *clicks, cfg)
            }
        }
    }
}

/// Anchors (sorted, so insertion order never matters) followed by the
/// gesture input, and the gesture's α.
pub fn assemble(
    anchors: &BTreeSet<PixelPosition>,
    gesture: Option<&Gesture>,
    cfg: &InteractionConfig,
    resolution: usize,
) -> Result<(UserInputSet, f64)> {
    let gesture = gesture.ok_or_else(|| invalid("no motion specified"))?;
    let mut items = anchors
        .iter()
        .map(|&p| anchor_to_input(p, resolution))
        .collect::<Result<Vec<_>>>()?;
    let (input, alpha) = gesture.to_input(cfg, resolution)?;
    items.push(input);
    Ok((UserInputSet::new(items), alpha))
}

/// Edit computed with the average latent in place of `w` inside the
/// direction network; the directions are then added to `w` itself. Used for
/// latents inverted from real images.
pub fn transform_with_average(
    model: &LatentTransformer<f32>,
    generator: &Generator,
    w: &LatentSeq,
    w_bar: &LatentW,
    inputs: &UserInputSet,
    alpha: f64,
) -> Result<LatentSeq> {
    let avg = LatentSeq::broadcast(w_bar, generator.num_wplus());
    let features = generator.extract_feature_map(&avg)?;
    let dirs = model.estimate_directions(&avg, inputs, &features)?;
    apply_directions(w, &dirs, alpha)
}

/// Result of one gesture: the edited image and what produced it.
#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub image: ImageTensor,
    pub inputs: UserInputSet,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateChange {
    Applied,
    /// Nothing in flight; the call changed nothing.
    NoOp,
}

/// Editing state of one client.
#[derive(Debug, Clone)]
pub struct EditSession {
    pub id: String,
    w_before: LatentSeq,
    pub noise_seed: u64,
    pub use_average_direction: bool,
    pub config: InteractionConfig,
    anchors: BTreeSet<PixelPosition>,
    gesture: Option<Gesture>,
    edited: Option<LatentSeq>,
    features: Option<FeatureGrid>,
    base_frame: ImageTensor,
    last_frame: ImageTensor,
}

impl EditSession {
    pub fn new(id: impl Into<String>, w_before: LatentSeq, generator: &Generator, config: InteractionConfig) -> Result<Self> {
        config.validate()?;
        w_before.check_shape(generator.num_wplus(), generator.latent_dim())?;
        let (frame, features) = generator.synthesize_with_features(&w_before)?;
        Ok(Self {
            id: id.into(),
            w_before,
            noise_seed: generator.config().noise_seed,
            use_average_direction: false,
            config,
            anchors: BTreeSet::new(),
            gesture: None,
            edited: None,
            features: Some(features),
            base_frame: frame.clone(),
            last_frame: frame,
        })
    }

    pub fn w_before(&self) -> &LatentSeq {
        &self.w_before
    }

    pub fn edited(&self) -> Option<&LatentSeq> {
        self.edited.as_ref()
    }

    pub fn anchors(&self) -> impl Iterator<Item = &PixelPosition> {
        self.anchors.iter()
    }

    pub fn gesture(&self) -> Option<&Gesture> {
        self.gesture.as_ref()
    }

    pub fn last_frame(&self) -> &ImageTensor {
        &self.last_frame
    }

    pub fn base_frame(&self) -> &ImageTensor {
        &self.base_frame
    }

    pub fn has_cached_features(&self) -> bool {
        self.features.is_some()
    }

    /// Features of `w_before`, recomputed after a commit.
    pub fn features(&mut self, generator: &Generator) -> Result<&FeatureGrid> {
        if self.features.is_none() {
            self.features = Some(generator.extract_feature_map(&self.w_before)?);
        }
        Ok(self.features.as_ref().expect("just filled"))
    }

    pub fn add_anchor(&mut self, p: PixelPosition, resolution: usize) -> Result<bool> {
        check_position(p, resolution)?;
        Ok(self.anchors.insert(p))
    }

    pub fn remove_anchor(&mut self, p: PixelPosition) -> bool {
        self.anchors.remove(&p)
    }

    pub fn set_beta(&mut self, beta: f64) -> Result<()> {
        let cfg = InteractionConfig { beta, ..self.config };
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    /// Runs `gesture` from the session's `w_before` (edits do not stack until
    /// committed).
    pub fn apply_gesture(
        &mut self,
        gesture: Gesture,
        generator: &Generator,
        model: &LatentTransformer<f32>,
        w_bar: Option<&LatentW>,
    ) -> Result<EditOutcome> {
        let res = generator.resolution();
        let (inputs, alpha) = assemble(&self.anchors, Some(&gesture), &self.config, res)?;
        let edited = if self.use_average_direction {
            let w_bar = w_bar.ok_or_else(|| invalid("average-direction mode needs the average latent"))?;
            transform_with_average(model, generator, &self.w_before, w_bar, &inputs, alpha)?
        } else {
            let w = self.w_before.clone();
            let features = self.features(generator)?;
            model.transform(&w, &inputs, alpha, features)?
        };
        let image = generator.synthesize(&edited)?;
        self.gesture = Some(gesture);
        self.edited = Some(edited);
        self.last_frame = image.clone();
        Ok(EditOutcome { image, inputs, alpha })
    }

    /// Makes the current edit the new starting point.
    pub fn commit(&mut self) -> StateChange {
        match self.edited.take() {
            Some(w) => {
                self.w_before = w;
                self.features = None;
                self.gesture = None;
                self.base_frame = self.last_frame.clone();
                StateChange::Applied
            }
            None => StateChange::NoOp,
        }
    }

    /// Drops the in-flight edit and returns to the pre-gesture frame.
    pub fn revert(&mut self) -> StateChange {
        match self.edited.take() {
            Some(_) => {
                self.gesture = None;
                self.last_frame = self.base_frame.clone();
                StateChange::Applied
            }
            None => StateChange::NoOp,
        }
    }
}
