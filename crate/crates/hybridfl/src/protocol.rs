//! The round engine: client sampling, plain and corrected local training,
//! plain and corrected aggregation, server local training and per-round
//! communication accounting.
//!
//! A round of the hybrid scheme is: sample M of N clients, let each run K
//! local SGD steps from the broadcast model, average the deltas with the
//! global rate, then let the server run E SGD steps on its own freshly
//! resampled dataset. The corrected variants additionally compute a server
//! gradient at the broadcast point and use it to cancel the sampling error,
//! either inside every client step (correction `g_s - g_i` added to each
//! local gradient) or at aggregation time (each delta shifted by
//! `-K * lr * (g_s - g_i)`).

use ndarray::Array1;
use rand_chacha::ChaCha8Rng;

use crate::data::{draw_server_dataset, ClientShard, LabeledDataset, ServerDataset};
use crate::error::{Error, Result};
use crate::model::{Batch, GradientEstimate, ModelVector, Objective, ObjectiveKind};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    FedAvg,
    ServerOnly,
    ClgSgd,
    FedClgC,
    FedClgS,
    ScaffoldPlus,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::FedAvg,
        Algorithm::ServerOnly,
        Algorithm::ClgSgd,
        Algorithm::FedClgC,
        Algorithm::FedClgS,
        Algorithm::ScaffoldPlus,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::ServerOnly => "server-only",
            Algorithm::ClgSgd => "clg-sgd",
            Algorithm::FedClgC => "fedclg-c",
            Algorithm::FedClgS => "fedclg-s",
            Algorithm::ScaffoldPlus => "scaffold-plus",
        }
    }

    pub fn parse(s: &str) -> Option<Algorithm> {
        Algorithm::ALL.into_iter().find(|a| a.name() == s)
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    Full,
    Size(usize),
}

/// Every rate and count a run needs. `client_lr`, `global_lr` and
/// `server_lr` play the roles usually written eta, eta_g and gamma;
/// `client_steps`/`server_steps` are the local epoch counts K and E.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    pub client_lr: f64,
    pub global_lr: f64,
    pub server_lr: f64,
    pub client_steps: usize,
    pub server_steps: usize,
    pub rounds: usize,
    pub sampled_clients: usize,
    pub num_clients: usize,
    pub server_dataset_size: usize,
    pub client_batch: BatchSize,
    pub server_batch: BatchSize,
    /// Multiplicative per-round decay applied to the client and server
    /// local rates (not the global rate), floored at `lr_floor`.
    pub lr_decay: f64,
    pub lr_floor: f64,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.client_lr > 0.0) {
            return Err(Error::InvalidSize(format!(
                "client_lr must be positive, got {}",
                self.client_lr
            )));
        }
        if !(self.global_lr > 0.0) {
            return Err(Error::InvalidSize(format!(
                "global_lr must be positive, got {}",
                self.global_lr
            )));
        }
        if !(self.server_lr >= 0.0) {
            return Err(Error::InvalidSize(format!(
                "server_lr must be nonnegative, got {}",
                self.server_lr
            )));
        }
        if self.client_steps == 0 {
            return Err(Error::InvalidSize("client_steps must be >= 1".into()));
        }
        if self.num_clients == 0 {
            return Err(Error::InvalidSize("num_clients must be >= 1".into()));
        }
        if self.sampled_clients == 0 || self.sampled_clients > self.num_clients {
            return Err(Error::TooManyClients {
                requested: self.sampled_clients,
                available: self.num_clients,
            });
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidSize(format!(
                "lr_decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if !(self.lr_floor > 0.0) {
            return Err(Error::InvalidSize(format!(
                "lr_floor must be positive, got {}",
                self.lr_floor
            )));
        }
        if self.server_dataset_size == 0 {
            return Err(Error::InvalidSize("server_dataset_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One client's round output: the cumulative local delta plus, for the
/// aggregation-corrected variant, the anchor gradient at the broadcast
/// model.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub delta: Array1<f64>,
    pub anchor_grad: Option<Array1<f64>>,
    pub steps_taken: usize,
}

/// SCAFFOLD control variates, zero-initialized.
#[derive(Debug, Clone)]
pub struct ScaffoldState {
    pub server_variate: Array1<f64>,
    pub client_variates: Vec<Array1<f64>>,
}

impl ScaffoldState {
    fn zeros(num_clients: usize, dim: usize) -> Self {
        ScaffoldState {
            server_variate: Array1::zeros(dim),
            client_variates: vec![Array1::zeros(dim); num_clients],
        }
    }
}

/// Mutable per-round state owned by the round driver.
#[derive(Debug, Clone)]
pub struct RoundState {
    pub round: usize,
    pub model: ModelVector,
    pub master_seed: u64,
    /// Current (decayed) client local rate.
    pub client_lr: f64,
    /// Current (decayed) server local rate.
    pub server_lr: f64,
    pub scaffold: Option<ScaffoldState>,
}

impl RoundState {
    pub fn new(
        algorithm: Algorithm,
        model: ModelVector,
        master_seed: u64,
        hp: &HyperParams,
    ) -> Self {
        let scaffold = match algorithm {
            Algorithm::ScaffoldPlus => Some(ScaffoldState::zeros(hp.num_clients, model.dim())),
            _ => None,
        };
        RoundState {
            round: 0,
            model,
            master_seed,
            client_lr: hp.client_lr,
            server_lr: hp.server_lr,
            scaffold,
        }
    }

    fn advance_rates(&mut self, hp: &HyperParams) {
        self.client_lr = (self.client_lr * hp.lr_decay).max(hp.lr_floor);
        self.server_lr = (self.server_lr * hp.lr_decay).max(hp.lr_floor);
    }
}

/// Floats moved in one round, summed over participants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommRecord {
    pub floats_down: u64,
    pub floats_up: u64,
}

impl CommRecord {
    pub fn add(&mut self, other: CommRecord) {
        self.floats_down += other.floats_down;
        self.floats_up += other.floats_up;
    }
}

/// Uniform sample of `count` distinct client ids out of `num_clients`,
/// returned sorted ascending so downstream folds are order-deterministic.
pub fn sample_clients(num_clients: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(Error::InvalidSize("must sample at least one client".into()));
    }
    if count > num_clients {
        return Err(Error::TooManyClients {
            requested: count,
            available: num_clients,
        });
    }
    let mut ids = rand::seq::index::sample(rng, num_clients, count).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

fn eval_gradient(
    obj: &Objective,
    x: &ModelVector,
    data: &LabeledDataset,
    batch: BatchSize,
    rng: &mut ChaCha8Rng,
) -> Result<GradientEstimate> {
    match batch {
        BatchSize::Full => obj.gradient(x, data, Batch::Full),
        BatchSize::Size(size) => obj.gradient(x, data, Batch::Minibatch { size, rng }),
    }
}

/// K local SGD steps from the broadcast model, each step using gradient
/// plus the fixed correction vector (zero when absent). The caller's model
/// is never mutated; the returned delta is `x_final - x_start`.
#[allow(clippy::too_many_arguments)]
pub fn client_local_train(
    obj: &Objective,
    global_model: &ModelVector,
    shard: &ClientShard,
    client_lr: f64,
    steps: usize,
    batch: BatchSize,
    correction: Option<&Array1<f64>>,
    rng: &mut ChaCha8Rng,
    round: usize,
) -> Result<ClientUpdate> {
    if let Some(c) = correction {
        if c.len() != global_model.dim() {
            return Err(Error::DimensionMismatch {
                expected: global_model.dim(),
                actual: c.len(),
            });
        }
    }
    let mut x = global_model.clone();
    for _ in 0..steps {
        let grad = eval_gradient(obj, &x, &shard.data, batch, rng)?;
        if !grad.is_finite() {
            return Err(Error::NonFiniteClientGradient {
                round,
                client: shard.client_id,
            });
        }
        let mut direction = grad.vector;
        if let Some(c) = correction {
            direction = direction + c;
        }
        x = ModelVector::new(x.into_values() - &(direction * client_lr)).map_err(|_| {
            Error::NonFiniteClientGradient {
                round,
                client: shard.client_id,
            }
        })?;
    }
    Ok(ClientUpdate {
        client_id: shard.client_id,
        delta: x.into_values() - global_model.values(),
        anchor_grad: None,
        steps_taken: steps,
    })
}

/// Server gradient at the current model on the round's server dataset.
pub fn compute_server_gradient(
    obj: &Objective,
    model: &ModelVector,
    server_ds: &ServerDataset,
    batch: BatchSize,
    rng: &mut ChaCha8Rng,
) -> Result<GradientEstimate> {
    let grad = eval_gradient(obj, model, &server_ds.data, batch, rng)?;
    if !grad.is_finite() {
        return Err(Error::NonFiniteServerGradient {
            round: server_ds.round,
        });
    }
    Ok(grad)
}

fn sorted_refs(updates: &[ClientUpdate]) -> Vec<&ClientUpdate> {
    let mut refs: Vec<&ClientUpdate> = updates.iter().collect();
    refs.sort_by_key(|u| u.client_id);
    refs
}

/// `x + global_lr * mean(delta_i)`, summed in ascending client-id order.
pub fn aggregate_plain(
    model: &ModelVector,
    updates: &[ClientUpdate],
    global_lr: f64,
) -> Result<ModelVector> {
    if updates.is_empty() {
        return Err(Error::NoUpdates);
    }
    let mut acc: Array1<f64> = Array1::zeros(model.dim());
    for update in sorted_refs(updates) {
        if update.delta.len() != model.dim() {
            return Err(Error::DimensionMismatch {
                expected: model.dim(),
                actual: update.delta.len(),
            });
        }
        acc = acc + &update.delta;
    }
    let mean = acc / updates.len() as f64;
    ModelVector::new(model.values() + &(mean * global_lr))
}

/// `x + global_lr * mean(delta_i - K * client_lr * (g_s - g_i))`: each
/// delta is shifted by the server/client gradient gap before averaging.
pub fn aggregate_corrected(
    model: &ModelVector,
    updates: &[ClientUpdate],
    server_grad: &Array1<f64>,
    client_lr: f64,
    global_lr: f64,
    client_steps: usize,
) -> Result<ModelVector> {
    if updates.is_empty() {
        return Err(Error::NoUpdates);
    }
    let scale = client_steps as f64 * client_lr;
    let mut acc: Array1<f64> = Array1::zeros(model.dim());
    for update in sorted_refs(updates) {
        let anchor = update.anchor_grad.as_ref().ok_or(Error::MissingAnchor {
            client: update.client_id,
        })?;
        let correction = (server_grad - anchor) * scale;
        acc = acc + &(&update.delta - &correction);
    }
    let mean = acc / updates.len() as f64;
    ModelVector::new(model.values() + &(mean * global_lr))
}

/// E server SGD steps on the round's server dataset; E = 0 is the identity.
#[allow(clippy::too_many_arguments)]
pub fn server_local_train(
    obj: &Objective,
    model: &ModelVector,
    server_ds: &ServerDataset,
    server_lr: f64,
    steps: usize,
    batch: BatchSize,
    rng: &mut ChaCha8Rng,
) -> Result<ModelVector> {
    let mut x = model.clone();
    for _ in 0..steps {
        let grad = compute_server_gradient(obj, &x, server_ds, batch, rng)?;
        x = ModelVector::new(x.into_values() - &(grad.vector * server_lr)).map_err(|_| {
            Error::NonFiniteServerGradient {
                round: server_ds.round,
            }
        })?;
    }
    Ok(x)
}

fn client_stream(state: &RoundState, client_id: usize) -> ChaCha8Rng {
    rng::stream(
        state.master_seed,
        &[rng::STREAM_CLIENT_TRAIN, state.round as u64, client_id as u64],
    )
}

/// Executes one communication round of `algorithm` and returns the next
/// state together with the round's float counts.
pub fn run_round(
    algorithm: Algorithm,
    obj: &Objective,
    mut state: RoundState,
    shards: &[ClientShard],
    population: &LabeledDataset,
    hp: &HyperParams,
) -> Result<(RoundState, CommRecord)> {
    if shards.len() != hp.num_clients {
        return Err(Error::InvalidSize(format!(
            "{} shards for {} clients",
            shards.len(),
            hp.num_clients
        )));
    }
    let t = state.round;
    let d = obj.param_dim() as u64;
    let eta = state.client_lr;
    let gamma = state.server_lr;
    let mut comm = CommRecord::default();

    let draw = || draw_server_dataset(population, hp.server_dataset_size, t, state.master_seed);
    let mut server_rng = rng::stream(state.master_seed, &[rng::STREAM_SERVER_TRAIN, t as u64]);
    let mut grad_rng = rng::stream(state.master_seed, &[rng::STREAM_SERVER_GRAD, t as u64]);
    let mut sampling_rng =
        rng::stream(state.master_seed, &[rng::STREAM_CLIENT_SAMPLING, t as u64]);

    let next_model = match algorithm {
        Algorithm::ServerOnly => {
            let server_ds = draw()?;
            server_local_train(
                obj,
                &state.model,
                &server_ds,
                gamma,
                hp.server_steps,
                hp.server_batch,
                &mut server_rng,
            )?
        }
        Algorithm::FedAvg | Algorithm::ClgSgd => {
            let selected = sample_clients(hp.num_clients, hp.sampled_clients, &mut sampling_rng)?;
            let mut updates = Vec::with_capacity(selected.len());
            for &id in &selected {
                let mut rng = client_stream(&state, id);
                updates.push(client_local_train(
                    obj,
                    &state.model,
                    &shards[id],
                    eta,
                    hp.client_steps,
                    hp.client_batch,
                    None,
                    &mut rng,
                    t,
                )?);
            }
            comm.floats_down += selected.len() as u64 * d;
            comm.floats_up += selected.len() as u64 * d;
            let aggregated = aggregate_plain(&state.model, &updates, hp.global_lr)?;
            if algorithm == Algorithm::ClgSgd && hp.server_steps > 0 {
                let server_ds = draw()?;
                server_local_train(
                    obj,
                    &aggregated,
                    &server_ds,
                    gamma,
                    hp.server_steps,
                    hp.server_batch,
                    &mut server_rng,
                )?
            } else {
                aggregated
            }
        }
        Algorithm::FedClgC => {
            let server_ds = draw()?;
            let server_grad = compute_server_gradient(
                obj,
                &state.model,
                &server_ds,
                hp.server_batch,
                &mut grad_rng,
            )?;
            let selected = sample_clients(hp.num_clients, hp.sampled_clients, &mut sampling_rng)?;
            let mut updates = Vec::with_capacity(selected.len());
            for &id in &selected {
                // correction anchored at the broadcast model, full batch,
                // held fixed over the K local steps
                let anchor = obj.gradient(&state.model, &shards[id].data, Batch::Full)?;
                let correction = &server_grad.vector - &anchor.vector;
                let mut rng = client_stream(&state, id);
                updates.push(client_local_train(
                    obj,
                    &state.model,
                    &shards[id],
                    eta,
                    hp.client_steps,
                    hp.client_batch,
                    Some(&correction),
                    &mut rng,
                    t,
                )?);
            }
            // the server gradient rides along with the broadcast model
            comm.floats_down += selected.len() as u64 * 2 * d;
            comm.floats_up += selected.len() as u64 * d;
            let aggregated = aggregate_plain(&state.model, &updates, hp.global_lr)?;
            server_local_train(
                obj,
                &aggregated,
                &server_ds,
                gamma,
                hp.server_steps,
                hp.server_batch,
                &mut server_rng,
            )?
        }
        Algorithm::FedClgS => {
            let server_ds = draw()?;
            let server_grad = compute_server_gradient(
                obj,
                &state.model,
                &server_ds,
                hp.server_batch,
                &mut grad_rng,
            )?;
            let selected = sample_clients(hp.num_clients, hp.sampled_clients, &mut sampling_rng)?;
            let mut updates = Vec::with_capacity(selected.len());
            for &id in &selected {
                let mut rng = client_stream(&state, id);
                let mut update = client_local_train(
                    obj,
                    &state.model,
                    &shards[id],
                    eta,
                    hp.client_steps,
                    hp.client_batch,
                    None,
                    &mut rng,
                    t,
                )?;
                update.anchor_grad =
                    Some(obj.gradient(&state.model, &shards[id].data, Batch::Full)?.vector);
                updates.push(update);
            }
            // anchors ride along with the uploaded deltas
            comm.floats_down += selected.len() as u64 * d;
            comm.floats_up += selected.len() as u64 * 2 * d;
            let aggregated = aggregate_corrected(
                &state.model,
                &updates,
                &server_grad.vector,
                eta,
                hp.global_lr,
                hp.client_steps,
            )?;
            server_local_train(
                obj,
                &aggregated,
                &server_ds,
                gamma,
                hp.server_steps,
                hp.server_batch,
                &mut server_rng,
            )?
        }
        Algorithm::ScaffoldPlus => {
            let selected = sample_clients(hp.num_clients, hp.sampled_clients, &mut sampling_rng)?;
            let scaffold = state
                .scaffold
                .as_ref()
                .ok_or_else(|| Error::InvalidSize("scaffold state missing".into()))?;
            let server_variate = scaffold.server_variate.clone();
            let mut updates = Vec::with_capacity(selected.len());
            let mut new_variates = Vec::with_capacity(selected.len());
            for &id in &selected {
                let client_variate = &scaffold.client_variates[id];
                let correction = &server_variate - client_variate;
                let mut rng = client_stream(&state, id);
                let update = client_local_train(
                    obj,
                    &state.model,
                    &shards[id],
                    eta,
                    hp.client_steps,
                    hp.client_batch,
                    Some(&correction),
                    &mut rng,
                    t,
                )?;
                // control-variate refresh (option II):
                // c_i <- c_i - c + (x_t - x_final) / (K * lr)
                let refreshed = client_variate - &server_variate
                    - &(&update.delta / (hp.client_steps as f64 * eta));
                new_variates.push((id, refreshed));
                updates.push(update);
            }
            let aggregated = aggregate_plain(&state.model, &updates, hp.global_lr)?;
            comm.floats_down += selected.len() as u64 * 2 * d;
            comm.floats_up += selected.len() as u64 * 2 * d;

            let scaffold = state.scaffold.as_mut().expect("checked above");
            let mut variate_sum: Array1<f64> = Array1::zeros(obj.param_dim());
            for (id, variate) in new_variates {
                variate_sum = variate_sum + &variate;
                scaffold.client_variates[id] = variate;
            }
            scaffold.server_variate = variate_sum / selected.len() as f64;

            if hp.server_steps > 0 {
                let server_ds = draw()?;
                server_local_train(
                    obj,
                    &aggregated,
                    &server_ds,
                    gamma,
                    hp.server_steps,
                    hp.server_batch,
                    &mut server_rng,
                )?
            } else {
                aggregated
            }
        }
    };

    state.model = next_model;
    state.round += 1;
    state.advance_rates(hp);
    Ok((state, comm))
}

/// Starting model: zeros for the convex kinds, a small deterministic
/// normal init for the MLP so hidden units are not symmetric.
pub fn initial_model(obj: &Objective, master_seed: u64) -> ModelVector {
    match obj.kind {
        ObjectiveKind::LogisticRegression | ObjectiveKind::LeastSquares => {
            ModelVector::zeros(obj.param_dim())
        }
        ObjectiveKind::MlpOneHidden { hidden_width } => {
            use rand_distr::{Distribution, StandardNormal};
            let mut rng = rng::stream(master_seed, &[rng::STREAM_INIT]);
            let mut values = vec![0.0; obj.param_dim()];
            let w1_scale = 1.0 / (obj.input_dim as f64).sqrt();
            let w2_scale = 1.0 / (hidden_width as f64).sqrt();
            let w1_len = hidden_width * obj.input_dim;
            let w2_start = w1_len + hidden_width;
            for v in &mut values[..w1_len] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = z * w1_scale;
            }
            for v in &mut values[w2_start..w2_start + obj.num_classes * hidden_width] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = z * w2_scale;
            }
            ModelVector::from_vec(values).expect("finite init")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub round: usize,
    pub grad_norm_sq: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    /// Cumulative float counts up to and including this round.
    pub floats_up: u64,
    pub floats_down: u64,
    /// Rates in effect for this round index.
    pub client_lr: f64,
    pub server_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
    /// Error message when a round failed and the trace is partial.
    pub aborted: Option<String>,
}

pub struct TrainingSetup<'a> {
    pub algorithm: Algorithm,
    pub objective: &'a Objective,
    pub shards: &'a [ClientShard],
    /// Union of the client shards; used for server draws and for the
    /// full-batch metrics.
    pub population: &'a LabeledDataset,
    pub test_data: Option<&'a LabeledDataset>,
    pub hp: &'a HyperParams,
    pub master_seed: u64,
}

fn metrics_row(
    setup: &TrainingSetup,
    state: &RoundState,
    totals: CommRecord,
) -> Result<TraceRow> {
    let obj = setup.objective;
    let grad = obj
        .gradient(&state.model, setup.population, Batch::Full)?
        .vector;
    let accuracy_on = setup.test_data.unwrap_or(setup.population);
    Ok(TraceRow {
        round: state.round,
        grad_norm_sq: grad.dot(&grad),
        train_loss: obj.loss(&state.model, setup.population)?,
        test_accuracy: obj.accuracy(&state.model, accuracy_on)?,
        floats_up: totals.floats_up,
        floats_down: totals.floats_down,
        client_lr: state.client_lr,
        server_lr: state.server_lr,
    })
}

/// T rounds with per-round rate decay. Row 0 records the initial model;
/// a round error stops the run and leaves the partial trace flagged.
pub fn run_training(setup: &TrainingSetup) -> Result<TrainingTrace> {
    setup.hp.validate()?;
    let mut state = RoundState::new(
        setup.algorithm,
        initial_model(setup.objective, setup.master_seed),
        setup.master_seed,
        setup.hp,
    );
    let mut totals = CommRecord::default();
    let mut trace = TrainingTrace::default();
    trace.rows.push(metrics_row(setup, &state, totals)?);
    for _ in 0..setup.hp.rounds {
        match run_round(
            setup.algorithm,
            setup.objective,
            state.clone(),
            setup.shards,
            setup.population,
            setup.hp,
        ) {
            Ok((next, comm)) => {
                totals.add(comm);
                state = next;
                trace.rows.push(metrics_row(setup, &state, totals)?);
            }
            Err(err) => {
                trace.aborted = Some(err.to_string());
                break;
            }
        }
    }
    Ok(trace)
}
