//! The recurrent actor-critic used by the adaptable planner.
//!
//! Each past episode `(rho, R, C)` (scaled by `m/B`) is embedded by a
//! one-layer ReLU encoder and folded into a GRU state starting from zero.
//! Two separate two-layer heads read `[h, B_scaled]`: one gives the mean
//! of an isotropic Gaussian over plan adjustments, the other a state value.
//! The Gaussian's log standard deviation is a single free scalar.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::layers::{Dense, GruCell, Mlp2};
use super::tape::{ParamId, ParamStore, Tape, Var};
use super::tensor::Tensor;
use crate::error::{ensure_dims, Error, Result};

pub const MODEL_NAME: &str = "abplanner";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerArch {
    pub stages: usize,
    pub encoder: usize,
    pub hidden: usize,
    pub head: usize,
    pub initial_log_std: f64,
    /// Multiplier on the initial output-layer weights of the mean head, so
    /// an untrained planner starts near the zero action.
    pub mean_init_scale: f64,
}

impl Default for PlannerArch {
    fn default() -> Self {
        Self {
            stages: 6,
            encoder: 64,
            hidden: 128,
            head: 64,
            initial_log_std: 0.5f64.ln(),
            mean_init_scale: 0.01,
        }
    }
}

impl PlannerArch {
    pub fn with_stages(stages: usize) -> Self {
        Self { stages, ..Self::default() }
    }

    pub fn entry_width(&self) -> usize {
        3 * self.stages
    }
}

#[derive(Debug, Clone)]
pub struct AbPlannerNet {
    arch: PlannerArch,
    store: ParamStore,
    encoder: Dense,
    gru: GruCell,
    mean_head: Mlp2,
    value_head: Mlp2,
    log_std: ParamId,
}

/// Outputs of one incremental inference step for a batch.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub hidden: Tensor,
    pub means: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub log_std: f64,
}

impl AbPlannerNet {
    pub fn new<R: Rng + ?Sized>(arch: PlannerArch, rng: &mut R) -> Result<Self> {
        if arch.stages == 0 || arch.encoder == 0 || arch.hidden == 0 || arch.head == 0 {
            return Err(Error::invalid("network sizes must be >= 1"));
        }
        if !(arch.initial_log_std.is_finite() && arch.mean_init_scale.is_finite()) {
            return Err(Error::Config("initial_log_std and mean_init_scale must be finite".into()));
        }
        let mut store = ParamStore::new();
        let encoder = Dense::new(&mut store, "encoder", arch.entry_width(), arch.encoder, rng);
        let gru = GruCell::new(&mut store, "gru", arch.encoder, arch.hidden, rng);
        let mean_head = Mlp2::new(&mut store, "mean", arch.hidden + 1, arch.head, arch.stages, rng);
        store.get_mut(mean_head.out.w).data_mut().iter_mut().for_each(|w| *w *= arch.mean_init_scale);
        let value_head = Mlp2::new(&mut store, "value", arch.hidden + 1, arch.head, 1, rng);
        let log_std = store.add("log_std", Tensor::scalar(arch.initial_log_std));
        Ok(Self { arch, store, encoder, gru, mean_head, value_head, log_std })
    }

    pub fn arch(&self) -> &PlannerArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn log_std_id(&self) -> ParamId {
        self.log_std
    }

    pub fn log_std(&self) -> f64 {
        self.store.get(self.log_std).data()[0]
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(MODEL_NAME, &self.arch, &self.store)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_model(MODEL_NAME)?;
        let arch: PlannerArch = ckpt.meta()?;
        let mut net = Self::new(arch, &mut crate::rng::stream(0, &[]))?;
        net.store.load_from(&ckpt.to_store()?)?;
        Ok(net)
    }

    /// Runs the recurrence over `entries[0..T]` (each `n x 3m`) from a zero
    /// state and returns the hidden state after each entry.
    pub fn encode_history(&self, tape: &mut Tape<'_>, entries: &[Tensor]) -> Result<Vec<Var>> {
        let first = entries.first().ok_or_else(|| Error::invalid("history must hold at least one episode"))?;
        let n = first.rows();
        let mut h = tape.constant(n, self.arch.hidden, 0.0);
        let mut states = Vec::with_capacity(entries.len());
        for entry in entries {
            ensure_dims(self.arch.entry_width(), entry.cols())?;
            ensure_dims(n, entry.rows())?;
            let x = tape.input(entry);
            h = self.encode_step(tape, x, h)?;
            states.push(h);
        }
        Ok(states)
    }

    /// One recurrence step: `h' = GRU(h, relu(W_e x + b_e))`.
    pub fn encode_step(&self, tape: &mut Tape<'_>, entry: Var, h: Var) -> Result<Var> {
        let e = self.encoder.forward(tape, entry)?;
        let e = tape.relu(e);
        self.gru.forward(tape, e, h)
    }

    fn head_input(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
        let rows = tape.shape(h).0;
        let budget = tape.constant(rows, 1, self.arch.stages as f64);
        tape.concat_cols(&[h, budget])
    }

    /// Mean adjustment `n x m` for hidden states `h`.
    pub fn policy_forward(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
        let x = self.head_input(tape, h)?;
        self.mean_head.forward(tape, x)
    }

    /// State values `n x 1`.
    pub fn value_forward(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
        let x = self.head_input(tape, h)?;
        self.value_head.forward(tape, x)
    }

    /// Both heads from one shared encoding: `(mean, value)`.
    pub fn heads(&self, tape: &mut Tape<'_>, h: Var) -> Result<(Var, Var)> {
        let x = self.head_input(tape, h)?;
        let mean = self.mean_head.forward(tape, x)?;
        let value = self.value_head.forward(tape, x)?;
        Ok((mean, value))
    }

    pub fn zero_hidden(&self, batch: usize) -> Tensor {
        Tensor::zeros(&[batch, self.arch.hidden])
    }

    /// Advances the recurrence by one episode for every batch row and
    /// evaluates both heads, without keeping a gradient tape.
    pub fn step(&self, hidden: &Tensor, entry: &Tensor) -> Result<StepOutput> {
        ensure_dims(self.arch.hidden, hidden.cols())?;
        ensure_dims(hidden.rows(), entry.rows())?;
        ensure_dims(self.arch.entry_width(), entry.cols())?;
        let mut tape = Tape::new(&self.store);
        let h = tape.input(hidden);
        let x = tape.input(entry);
        let h = self.encode_step(&mut tape, x, h)?;
        let (mean, value) = self.heads(&mut tape, h)?;
        let m = self.arch.stages;
        Ok(StepOutput {
            hidden: tape.tensor(h),
            means: tape.value(mean).chunks(m).map(<[f64]>::to_vec).collect(),
            values: tape.value(value).to_vec(),
            log_std: self.log_std(),
        })
    }
}
