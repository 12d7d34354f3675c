//! Two-phase adversarial training. Phase 1 optimises the identity costs and
//! the Wasserstein term; phase 2 adds the skeleton-overlap and endpoint-window
//! costs. The critic takes `n_critic` gradient-penalised steps per generator
//! step, and both learning rates follow a cosine schedule restarted at each
//! phase.
//!
//! All randomness for step `s` comes from a stream keyed by
//! `(seed, s)`, so a run restored from a checkpoint continues exactly.

mod checkpoint;
mod config;
mod losses;
mod optim;

pub use checkpoint::{load_checkpoint, load_generator, save_checkpoint};
pub use config::{TrainConfig, CONFIG_KEYS};
pub use losses::{
    compute_anchors, critic_loss, generator_loss, CriticTerms, GenTerms, Phase, ANCHOR_TAU,
    MSSSIM_SCALES,
};
pub use optim::{cosine_lr, Adam};

use std::io::Write;
use std::path::Path;

use crate::diffgraph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::grid::Tensor;
use crate::io::{read_image, Manifest, Role};
use crate::nets::{enhance, ConvCritic, Critic, Generator, ParamSet, ResidualGenerator, Segmenter};
use crate::rng::{self, derive_seed, uniform, uniform_int};

pub const ADAM_BETA1: f64 = 0.5;
pub const ADAM_BETA2: f64 = 0.9;

const TAG_GEN_INIT: u64 = 11;
const TAG_CRITIC_INIT: u64 = 12;
const TAG_STEP: u64 = 13;
const TAG_ANCHOR: u64 = 14;

pub const METRICS_HEADER: &str = "step\tphase\tlr\tL_D\tGP\tL_G\tC_id\tC_idy\tC_s\tC_e\tW1est";

/// Unpaired training images as `[1, H, W]` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub low: Vec<Tensor>,
    pub high: Vec<Tensor>,
}

impl Dataset {
    pub fn new(low: Vec<Tensor>, high: Vec<Tensor>) -> Result<Self> {
        if low.is_empty() || high.is_empty() {
            return Err(Error::Contract("training needs at least one low and one high image".into()));
        }
        let shape = low[0].shape().to_vec();
        let (c, h, w) = low[0].chw()?;
        if c != 1 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Dimension(format!(
                "training images must be [1, H, W] with H, W divisible by 4, got {shape:?}"
            )));
        }
        if low.iter().chain(&high).any(|t| t.shape() != shape.as_slice()) {
            return Err(Error::Dimension("training images differ in size".into()));
        }
        Ok(Self { low, high })
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let load = |role| -> Result<Vec<Tensor>> {
            m.paths(role).iter().map(|p| read_image(p).map(|g| g.to_tensor())).collect()
        };
        Self::new(load(Role::Low)?, load(Role::High)?)
    }

    pub fn image_dims(&self) -> (usize, usize) {
        let s = self.low[0].shape();
        (s[1], s[2])
    }
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed generator steps.
    pub step: u64,
    pub gen: ParamSet,
    pub critic: ParamSet,
    pub opt_gen: Adam,
    pub opt_critic: Adam,
}

/// Logged values of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub phase: Phase,
    pub lr: f64,
    /// From the last critic update of the step.
    pub critic: CriticTerms,
    pub gen: GenTerms,
}

impl StepLog {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            self.phase.number(),
            self.lr,
            self.critic.total,
            self.critic.gp,
            self.gen.total,
            self.gen.c_id,
            self.gen.c_idy,
            self.gen.c_s,
            self.gen.c_e,
            self.critic.w1
        )
    }
}

fn finite(v: f64, term: &str, step: u64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { term: term.into(), step })
    }
}

#[derive(Debug, Clone)]
pub struct Trainer<G: Generator = ResidualGenerator, C: Critic = ConvCritic> {
    pub cfg: TrainConfig,
    pub gen: G,
    pub critic: C,
    pub seg: Segmenter,
    pub data: Dataset,
    pub state: TrainState,
}

impl<G: Generator, C: Critic> Trainer<G, C> {
    pub fn new(cfg: TrainConfig, gen: G, critic: C, data: Dataset) -> Result<Self> {
        cfg.validate()?;
        let gp = gen.init_params(derive_seed(cfg.seed, TAG_GEN_INIT, 0));
        let cp = critic.init_params(derive_seed(cfg.seed, TAG_CRITIC_INIT, 0));
        let state = TrainState {
            step: 0,
            opt_gen: Adam::new(&gp, ADAM_BETA1, ADAM_BETA2),
            opt_critic: Adam::new(&cp, ADAM_BETA1, ADAM_BETA2),
            gen: gp,
            critic: cp,
        };
        Self::with_state(cfg, gen, critic, data, state)
    }

    pub fn with_state(cfg: TrainConfig, gen: G, critic: C, data: Dataset, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            gen,
            critic,
            seg: Segmenter::default(),
            data,
            state,
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.t1_steps + self.cfg.t2_steps
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    /// Phase, position within the phase and phase length for global step `s`.
    pub fn schedule(&self, s: u64) -> (Phase, u64, u64) {
        if s < self.cfg.t1_steps {
            (Phase::One, s, self.cfg.t1_steps)
        } else {
            (Phase::Two, s - self.cfg.t1_steps, self.cfg.t2_steps)
        }
    }

    fn sample(&self, r: &mut rng::Stream) -> (Vec<Tensor>, Vec<Tensor>) {
        let b = self.cfg.batch;
        let pick = |r: &mut rng::Stream, pool: &[Tensor]| -> Vec<Tensor> {
            (0..b).map(|_| pool[uniform_int(r, 0, pool.len() - 1)].clone()).collect()
        };
        let xs = pick(r, &self.data.low);
        let ys = pick(r, &self.data.high);
        (xs, ys)
    }

    fn grads(g: &Graph, ids: &[NodeId]) -> Vec<Tensor> {
        ids.iter().map(|&i| g.grad_or_zeros(i)).collect()
    }

    /// One generator update preceded by `n_critic` critic updates.
    pub fn step(&mut self) -> Result<StepLog> {
        let s = self.state.step;
        if self.is_done() {
            return Err(Error::Contract(format!("training already finished at step {s}")));
        }
        let (phase, k, len) = self.schedule(s);
        let lr = cosine_lr(k, len, self.cfg.lr0);
        let mut r = rng::stream(derive_seed(self.cfg.seed, TAG_STEP, s));

        let mut critic_terms = None;
        for _ in 0..self.cfg.n_critic {
            let (xs, ys) = self.sample(&mut r);
            let us: Vec<f64> = (0..xs.len()).map(|_| uniform(&mut r, 0.0, 1.0)).collect();
            let fakes = xs
                .iter()
                .map(|x| enhance(&self.gen, &self.state.gen, x))
                .collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new();
            let ids = self.state.critic.bind(&mut g, true);
            let (loss, terms) = critic_loss(&mut g, &self.critic, &ids, &fakes, &ys, &us, self.cfg.lambda_gp)?;
            finite(terms.gp, "GP", s)?;
            finite(terms.total, "L_D", s)?;
            g.backward(loss)?;
            let grads = Self::grads(&g, &ids);
            self.state.opt_critic.step(&mut self.state.critic, &grads, lr)?;
            critic_terms = Some(terms);
        }

        let (xs, ys) = self.sample(&mut r);
        let anchors = if phase == Phase::Two && self.cfg.lambda_e > 0.0 {
            let enhanced = xs
                .iter()
                .map(|x| enhance(&self.gen, &self.state.gen, x))
                .collect::<Result<Vec<_>>>()?;
            let base = derive_seed(self.cfg.seed, TAG_ANCHOR, s);
            let seeds: Vec<u64> = (0..xs.len() as u64).map(|i| derive_seed(base, 0, i)).collect();
            compute_anchors(&self.seg, &xs, &enhanced, &self.cfg, &seeds)?
        } else {
            Vec::new()
        };
        let mut g = Graph::new();
        let gids = self.state.gen.bind(&mut g, true);
        let cids: Vec<NodeId> = self.state.critic.tensors().iter().map(|t| g.constant(t.clone())).collect();
        let (loss, terms) = generator_loss(
            &mut g,
            &self.gen,
            &gids,
            &self.critic,
            &cids,
            &self.seg,
            &xs,
            &ys,
            &anchors,
            phase,
            &self.cfg,
        )?;
        for (name, v) in [
            ("C_id", terms.c_id),
            ("C_idy", terms.c_idy),
            ("C_s", terms.c_s),
            ("C_e", terms.c_e),
            ("L_G", terms.total),
        ] {
            finite(v, name, s)?;
        }
        g.backward(loss)?;
        let grads = Self::grads(&g, &gids);
        self.state.opt_gen.step(&mut self.state.gen, &grads, lr)?;
        if !self.state.gen.all_finite() || !self.state.critic.all_finite() {
            return Err(Error::NonFinite { term: "parameters".into(), step: s });
        }
        self.state.step += 1;
        Ok(StepLog {
            step: s,
            phase,
            lr,
            critic: critic_terms.expect("n_critic >= 1"),
            gen: terms,
        })
    }

    /// Steps until `until` steps are complete (or training ends).
    pub fn run_until(&mut self, until: u64, mut on_step: impl FnMut(&StepLog) -> Result<()>) -> Result<()> {
        while self.state.step < until.min(self.total_steps()) {
            let log = self.step()?;
            on_step(&log)?;
        }
        Ok(())
    }

    pub fn enhance(&self, x: &Tensor) -> Result<Tensor> {
        enhance(&self.gen, &self.state.gen, x)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.cfg, &self.state)
    }

    /// Continues from a checkpoint directory written by [`Trainer::save`].
    pub fn resume(dir: &Path, gen: G, critic: C, data: Dataset) -> Result<Self> {
        let gt = gen.init_params(0);
        let ct = critic.init_params(0);
        let (cfg, state) = load_checkpoint(dir, &gt, &ct)?;
        Self::with_state(cfg, gen, critic, data, state)
    }
}

/// Paths written by [`train`].
pub const METRICS_FILE: &str = "metrics.tsv";
pub const CKPT_INIT: &str = "ckpt_init";
pub const CKPT_PHASE1: &str = "ckpt_phase1";
pub const CKPT_FINAL: &str = "ckpt_final";

/// Full run: writes `ckpt_init`, `ckpt_phase1` (if phase 1 is non-empty),
/// `ckpt_final` (if any step runs) and the per-step metrics log.
pub fn train(
    cfg: &TrainConfig,
    data: Dataset,
    out_dir: &Path,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Trainer> {
    let (h, w) = data.image_dims();
    if (h, w) != (cfg.image_size, cfg.image_size) {
        return Err(Error::Config(format!(
            "image_size is {} but the data is {h}x{w}",
            cfg.image_size
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut t = Trainer::new(cfg.clone(), ResidualGenerator::default(), ConvCritic::default(), data)?;
    t.save(&out_dir.join(CKPT_INIT))?;
    let log_path = out_dir.join(METRICS_FILE);
    let file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    writeln!(log, "{METRICS_HEADER}").map_err(|e| Error::io(&log_path, e))?;
    let mut write_line = |l: &StepLog| -> Result<()> {
        writeln!(log, "{}", l.to_line()).map_err(|e| Error::io(&log_path, e))?;
        on_step(l);
        Ok(())
    };
    let result = (|| {
        t.run_until(cfg.t1_steps, &mut write_line)?;
        if cfg.t1_steps > 0 {
            t.save(&out_dir.join(CKPT_PHASE1))?;
        }
        t.run_until(t.total_steps(), &mut write_line)?;
        if t.total_steps() > 0 {
            t.save(&out_dir.join(CKPT_FINAL))?;
        }
        Ok(())
    })();
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    result.map(|_| t)
}
