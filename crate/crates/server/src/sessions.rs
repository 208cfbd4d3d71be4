//! Session registry and message dispatch. Each session is locked for the
//! duration of one message, so a session's messages are handled in order.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context};
use dragedit_core::generator::{Generator, ImageTensor};
use dragedit_core::interaction::{DragGesture, EditOutcome, EditSession, Gesture, InteractionConfig, StateChange};
use dragedit_core::latent::{seeded_rng, LatentSeq, LatentW};
use dragedit_core::training::RunMetadata;
use dragedit_core::transformer::LatentTransformer;

use crate::wire::{encode_png, Frame, WireMessage};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_sessions: usize,
    pub interaction: InteractionConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_sessions: 64,
            interaction: InteractionConfig::default(),
        }
    }
}

pub struct Service {
    generator: Generator,
    model: LatentTransformer<f32>,
    w_bar: Option<LatentW>,
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, Arc<Mutex<EditSession>>>>,
    next_id: AtomicU64,
}

impl Service {
    pub fn new(generator: Generator, model: LatentTransformer<f32>, w_bar: Option<LatentW>, config: ServiceConfig) -> anyhow::Result<Self> {
        config.interaction.validate()?;
        let m = model.config();
        if m.latent_dim != generator.latent_dim()
            || m.num_wplus != generator.num_wplus()
            || m.image_resolution != generator.resolution()
        {
            bail!(
                "transformer expects {}x{} latents at {}px but the generator has {}x{} at {}px",
                m.num_wplus,
                m.latent_dim,
                m.image_resolution,
                generator.num_wplus(),
                generator.latent_dim(),
                generator.resolution()
            );
        }
        if let Some(w) = &w_bar {
            if w.dim() != generator.latent_dim() {
                bail!("average latent has dimension {}, expected {}", w.dim(), generator.latent_dim());
            }
        }
        Ok(Self {
            generator,
            model,
            w_bar,
            config,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        })
    }

    /// Loads both checkpoints; the average latent comes from the
    /// transformer's training metadata when present.
    pub fn from_checkpoints(generator: &Path, transformer: &Path, config: ServiceConfig) -> anyhow::Result<Self> {
        let g = Generator::load(generator).with_context(|| format!("loading generator {}", generator.display()))?;
        let (model, extra) = LatentTransformer::load(transformer).with_context(|| format!("loading transformer {}", transformer.display()))?;
        let w_bar = RunMetadata::from_extra(&extra).ok().map(|m| m.w_bar());
        Self::new(g, model, w_bar, config)
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map poisoned").len()
    }

    /// Answers one message with a `frame` or an `error`.
    pub fn handle(&self, msg: WireMessage) -> WireMessage {
        let session = msg.session().map(str::to_owned);
        let id = match &msg {
            WireMessage::Drag { id, .. } | WireMessage::Wheel { id, .. } => Some(*id),
            _ => None,
        };
        match self.dispatch(msg) {
            Ok(frame) => WireMessage::Frame(frame),
            Err(e) => WireMessage::error(session.as_deref(), id, format!("{e:#}")),
        }
    }

    fn dispatch(&self, msg: WireMessage) -> anyhow::Result<Frame> {
        let res = self.generator.resolution();
        match msg {
            WireMessage::CreateSession {
                seed,
                latent,
                use_average_direction,
            } => self.create(seed, latent, use_average_direction),
            WireMessage::Drag { session, id, s, e, z_key } => {
                let gesture = Gesture::Drag(DragGesture { start: s, end: e, z_key });
                self.with_session(&session, |sess| {
                    let out = sess.apply_gesture(gesture, &self.generator, &self.model, self.w_bar.as_ref())?;
                    outcome_frame(&session, Some(id), &out, None)
                })
            }
            WireMessage::Wheel { session, id, p, clicks } => {
                let gesture = Gesture::Wheel { position: p, clicks };
                self.with_session(&session, |sess| {
                    let out = sess.apply_gesture(gesture, &self.generator, &self.model, self.w_bar.as_ref())?;
                    outcome_frame(&session, Some(id), &out, None)
                })
            }
            WireMessage::AnchorAdd { session, p } => self.with_session(&session, |sess| {
                let notice = if sess.add_anchor(p, res)? { "anchor added" } else { "anchor already present" };
                self.rerun(&session, sess, notice)
            }),
            WireMessage::AnchorRemove { session, p } => self.with_session(&session, |sess| {
                let notice = if sess.remove_anchor(p) { "anchor removed" } else { "no anchor at that position" };
                self.rerun(&session, sess, notice)
            }),
            WireMessage::SetBeta { session, beta } => self.with_session(&session, |sess| {
                sess.set_beta(beta)?;
                self.rerun(&session, sess, "beta updated")
            }),
            WireMessage::Commit { session } => self.with_session(&session, |sess| {
                let notice = match sess.commit() {
                    StateChange::Applied => "committed",
                    StateChange::NoOp => "nothing to commit",
                };
                still_frame(&session, sess.last_frame(), notice)
            }),
            WireMessage::Revert { session } => self.with_session(&session, |sess| {
                let notice = match sess.revert() {
                    StateChange::Applied => "reverted",
                    StateChange::NoOp => "nothing to revert",
                };
                still_frame(&session, sess.last_frame(), notice)
            }),
            WireMessage::Frame(_) | WireMessage::Error { .. } => bail!("`frame` and `error` are server-to-client messages"),
        }
    }

    fn create(&self, seed: Option<u64>, latent: Option<Vec<Vec<f64>>>, use_average_direction: bool) -> anyhow::Result<Frame> {
        let g = &self.generator;
        let w = match (seed, latent) {
            (Some(seed), None) => LatentSeq::broadcast(&g.sample_w(&mut seeded_rng(seed, 0)), g.num_wplus()),
            (None, Some(rows)) => {
                let (l, d) = (g.num_wplus(), g.latent_dim());
                if rows.len() != l || rows.iter().any(|r| r.len() != d) {
                    bail!("latent must be {l}x{d} ({l} rows of {d} values)");
                }
                LatentSeq::from_rows(&rows)?
            }
            _ => bail!("create_session needs exactly one of `seed` or `latent`"),
        };
        if use_average_direction && self.w_bar.is_none() {
            bail!("average-direction mode needs a transformer checkpoint with training metadata");
        }
        let mut sessions = self.sessions.lock().expect("session map poisoned");
        if sessions.len() >= self.config.max_sessions {
            bail!("session limit of {} reached", self.config.max_sessions);
        }
        let id = format!("s{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let mut sess = EditSession::new(id.clone(), w, g, self.config.interaction)?;
        sess.use_average_direction = use_average_direction;
        let frame = still_frame(&id, sess.last_frame(), "session created")?;
        sessions.insert(id, Arc::new(Mutex::new(sess)));
        Ok(frame)
    }

    fn with_session<R>(&self, id: &str, f: impl FnOnce(&mut EditSession) -> anyhow::Result<R>) -> anyhow::Result<R> {
        let sess = self
            .sessions
            .lock()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .with_context(|| format!("unknown session `{id}`"))?;
        let mut guard = sess.lock().expect("session poisoned");
        f(&mut guard)
    }

    /// Re-applies the in-flight gesture after anchors or β change.
    fn rerun(&self, id: &str, sess: &mut EditSession, notice: &str) -> anyhow::Result<Frame> {
        match sess.gesture().copied() {
            Some(g) => {
                let out = sess.apply_gesture(g, &self.generator, &self.model, self.w_bar.as_ref())?;
                outcome_frame(id, None, &out, Some(notice))
            }
            None => still_frame(id, sess.last_frame(), notice),
        }
    }
}

fn still_frame(session: &str, image: &ImageTensor, notice: &str) -> anyhow::Result<Frame> {
    let n = image.resolution() as u32;
    Ok(Frame {
        session: session.to_owned(),
        id: None,
        width: n,
        height: n,
        png: encode_png(image)?,
        motion: None,
        alpha: None,
        k: None,
        notice: Some(notice.to_owned()),
    })
}

fn outcome_frame(session: &str, id: Option<u64>, out: &EditOutcome, notice: Option<&str>) -> anyhow::Result<Frame> {
    let n = out.image.resolution() as u32;
    let gesture = out.inputs.items.last().expect("assembled inputs end with the gesture");
    Ok(Frame {
        session: session.to_owned(),
        id,
        width: n,
        height: n,
        png: encode_png(&out.image)?,
        motion: Some(gesture.motion.0),
        alpha: Some(out.alpha),
        k: Some(out.inputs.len()),
        notice: notice.map(str::to_owned),
    })
}

/// Drops every gesture that a later gesture for the same session replaces
/// before any other message for that session intervenes.
pub fn coalesce(batch: Vec<WireMessage>) -> Vec<WireMessage> {
    let mut keep = vec![true; batch.len()];
    for (i, m) in batch.iter().enumerate() {
        if !m.is_gesture() {
            continue;
        }
        let next_same = batch[i + 1..].iter().find(|n| n.session() == m.session());
        if next_same.is_some_and(WireMessage::is_gesture) {
            keep[i] = false;
        }
    }
    batch.into_iter().zip(keep).filter_map(|(m, k)| k.then_some(m)).collect()
}
