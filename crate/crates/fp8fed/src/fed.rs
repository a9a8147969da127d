//! The federated round loop: sample clients, broadcast the quantized
//! master, train locally, quantize the uplink, and aggregate.
//!
//! Every client's randomness comes from a substream keyed by
//! `(seed, round, client, purpose)`, so execution order and thread count
//! never change results. Weight tensors cross both links as FP8 blobs
//! (stochastic by default, deterministic for the biased ablation, or not at
//! all for the full-precision baseline); biases and clips cross at binary32
//! width. Receiving a broadcast hard-resets a client's master weights to
//! grid values. Aggregation is the size-weighted average in ascending
//! client-id order, optionally refined by the server optimizer.

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;

use crate::codec::{
    encode, fp32_payload_len, ClipParam, CodecError, QuantStats, RoundingMode,
};
use crate::data::{ClientShard, Dataset, QuadProblem};
use crate::metrics::{MetricsError, RoundEntry, RoundLedger};
use crate::qat::{
    evaluate, local_update, LocalUpdateConfig, ModelSpec, OwnedTargets, ParamSet, QatError,
    QuantMode,
};
use crate::rng::{purpose, substream};
use crate::server_opt::{server_optimize, ClientUpload, ServerOptConfig, ServerOptError};

#[derive(Debug, thiserror::Error)]
pub enum FedError {
    #[error("invalid run config: {reason}")]
    BadConfig { reason: String },
    #[error("no clients registered")]
    NoClients,
    #[error("round {round}, client {client}: {source}")]
    Client {
        round: usize,
        client: usize,
        #[source]
        source: QatError,
    },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    ServerOpt(#[from] ServerOptError),
    #[error(transparent)]
    Qat(#[from] QatError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// What actually crosses the network links.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CommMode {
    /// Stochastic (unbiased) FP8 on weight tensors — the default.
    Rand,
    /// Deterministic FP8 on weight tensors — the biased ablation.
    Det,
    /// Full precision; weights pass through exactly.
    Off,
}

impl CommMode {
    pub fn quantized(self) -> bool {
        self != CommMode::Off
    }
}

/// How client uploads become the next master model.
#[derive(Clone, Debug)]
pub enum Aggregation {
    /// Size-weighted federated average.
    FedAvg,
    /// Federated average refined by the server-side MSE optimizer.
    ServerOpt(ServerOptConfig),
}

#[derive(Clone, Debug)]
pub struct FedConfig {
    pub seed: u64,
    pub rounds: usize,
    /// Participation fraction C: each round activates round(C * K) clients,
    /// at least one.
    pub participation: f64,
    pub local: LocalUpdateConfig,
    pub comm: CommMode,
    pub aggregation: Aggregation,
    /// Worker threads for the client loop; 0 uses the process default.
    pub threads: usize,
}

impl FedConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        if self.rounds == 0 {
            return Err(FedError::BadConfig { reason: "rounds must be >= 1".into() });
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(FedError::BadConfig {
                reason: format!("participation must be in (0, 1], got {}", self.participation),
            });
        }
        if self.local.steps == 0 {
            return Err(FedError::BadConfig { reason: "local steps must be >= 1".into() });
        }
        if self.local.batch_size == 0 {
            return Err(FedError::BadConfig { reason: "batch size must be >= 1".into() });
        }
        if !(self.local.lr.is_finite() && self.local.lr > 0.0) {
            return Err(FedError::BadConfig { reason: "learning rate must be positive".into() });
        }
        Ok(())
    }
}

/// One simulated device and its local shard.
#[derive(Clone, Debug)]
pub struct Client {
    pub id: usize,
    pub x: Array2<f64>,
    pub y: OwnedTargets,
}

impl Client {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }
}

/// Materialize partition shards into per-client training data.
pub fn clients_from_partition(ds: &Dataset, shards: &[ClientShard]) -> Vec<Client> {
    shards
        .iter()
        .map(|s| {
            let (x, y) = ds.subset(&s.indices);
            Client { id: s.client_id, x, y: OwnedTargets::Labels(y) }
        })
        .collect()
}

/// Clients for the least-squares family: rows of `A_k` are features, the
/// matching entries of `b_k` are regression targets.
pub fn clients_from_quadratic(qp: &QuadProblem) -> Vec<Client> {
    qp.clients
        .iter()
        .enumerate()
        .map(|(id, c)| Client { id, x: c.a.clone(), y: OwnedTargets::Values(c.targets()) })
        .collect()
}

/// The server's view of the run.
#[derive(Clone, Debug)]
pub struct GlobalState {
    pub params: ParamSet,
    pub round: usize,
}

/// Seeded initialization of the master model. When a calibration batch is
/// given, activation clips are set from a full-precision pass over it;
/// weight clips always start at each tensor's largest magnitude.
pub fn init_global(
    spec: &ModelSpec,
    seed: u64,
    calib: Option<ArrayView2<f64>>,
) -> Result<GlobalState, FedError> {
    let mut rng = substream(seed, 0, 0, purpose::INIT);
    let mut params = ParamSet::init(spec, &mut rng)?;
    if let Some(batch) = calib {
        params.calibrate_act_clips(spec, batch)?;
    }
    Ok(GlobalState { params, round: 0 })
}

/// Active-client selection for one round.
#[derive(Clone, Debug)]
pub struct RoundPlan {
    pub round: usize,
    /// Ascending client ids.
    pub active: Vec<usize>,
    /// Total examples held by the active set.
    pub m_t: usize,
}

pub fn plan_round(
    seed: u64,
    round: usize,
    clients: &[Client],
    participation: f64,
) -> Result<RoundPlan, FedError> {
    let k = clients.len();
    if k == 0 {
        return Err(FedError::NoClients);
    }
    let p = ((participation * k as f64).round() as usize).clamp(1, k);
    let mut rng = substream(seed, round as u64, 0, purpose::CLIENT_SAMPLING);
    let mut active = rand::seq::index::sample(&mut rng, k, p).into_vec();
    active.sort_unstable();
    let m_t = active.iter().map(|&id| clients[id].n()).sum();
    Ok(RoundPlan { round, active, m_t })
}

/// A parameter set as it exists after crossing one link, plus the bytes the
/// link carried.
struct Transported {
    params: ParamSet,
    bytes: u64,
    stats: QuantStats,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Push a parameter set through one communication link.
///
/// Quantized modes FP8-code every weight tensor (the clip rides each blob
/// header at binary32), round biases and activation clips through binary32,
/// and account bytes from the actual blob sizes. `Off` passes everything
/// through exactly and accounts full-precision payloads.
fn transport(
    spec: &ModelSpec,
    params: &ParamSet,
    comm: CommMode,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Transported, FedError> {
    let mut bytes = 0u64;
    let mut stats = QuantStats::default();
    let mut out = params.clone();
    match comm {
        CommMode::Off => {
            for lp in &params.layers {
                bytes += fp32_payload_len(&[lp.w.nrows(), lp.w.ncols()]) as u64;
                if let Some(b) = &lp.b {
                    bytes += fp32_payload_len(&[b.len()]) as u64;
                }
            }
            if spec.quant != QuantMode::Off {
                // QAT still needs the clips on the wire: 4 bytes each.
                bytes += 4 * (params.weight_clips.len() + params.act_clips.len()) as u64;
            }
        }
        CommMode::Rand | CommMode::Det => {
            let mode = if comm == CommMode::Rand {
                RoundingMode::Stochastic
            } else {
                RoundingMode::Deterministic
            };
            for (l, lp) in params.layers.iter().enumerate() {
                let shape = [lp.w.nrows(), lp.w.ncols()];
                let values: Vec<f64> = lp.w.iter().copied().collect();
                let qt = encode(
                    &values,
                    &shape,
                    spec.fmt,
                    params.weight_clips[l],
                    mode,
                    rng,
                    &mut stats,
                )?;
                bytes += qt.byte_len() as u64;
                let decoded = qt.decode()?;
                out.layers[l].w =
                    Array2::from_shape_vec((shape[0], shape[1]), decoded).expect("decoded shape");
                // The receiver reconstructs the clip from the blob header.
                out.weight_clips[l] = qt.clip();
                if let Some(b) = &lp.b {
                    bytes += fp32_payload_len(&[b.len()]) as u64;
                    out.layers[l].b = Some(Array1::from_iter(b.iter().map(|&v| round_f32(v))));
                }
            }
            for (i, c) in params.act_clips.iter().enumerate() {
                bytes += 4;
                out.act_clips[i] = ClipParam::new(round_f32(c.alpha())).map_err(CodecError::from)?;
            }
        }
    }
    Ok(Transported { params: out, bytes, stats })
}

/// Everything one client returns from a round.
struct ClientShare {
    id: usize,
    n_k: usize,
    /// The client's parameters as received by the server (post-uplink).
    received: ParamSet,
    bytes_down: u64,
    bytes_up: u64,
    local_loss: f64,
    max_grad_norm: f64,
    drift_sq_sum: f64,
    quant: QuantStats,
}

fn run_client(
    spec: &ModelSpec,
    master: &ParamSet,
    client: &Client,
    cfg: &FedConfig,
    t: usize,
) -> Result<ClientShare, FedError> {
    let id = client.id;
    let wrap = |source: QatError| FedError::Client { round: t, client: id, source };

    // Downlink: the broadcast hard-resets the client's master weights to
    // the decoded grid values.
    let mut rng_b = substream(cfg.seed, t as u64, id as u64, purpose::BROADCAST);
    let down = transport(spec, master, cfg.comm, &mut rng_b)?;
    let mut params = down.params;

    let mut rng_l = substream(cfg.seed, t as u64, id as u64, purpose::LOCAL_BATCHES);
    let local = local_update(spec, &mut params, client.x.view(), client.y.view(), &cfg.local, &mut rng_l)
        .map_err(wrap)?;

    // Uplink with the client's own freshly learned clips.
    let mut rng_u = substream(cfg.seed, t as u64, id as u64, purpose::UPLINK);
    let up = transport(spec, &params, cfg.comm, &mut rng_u)?;

    let mut quant = down.stats;
    quant.merge(&up.stats);
    quant.merge(&local.quant);
    Ok(ClientShare {
        id,
        n_k: client.n(),
        received: up.params,
        bytes_down: down.bytes,
        bytes_up: up.bytes,
        local_loss: local.mean_loss,
        max_grad_norm: local.max_grad_norm,
        drift_sq_sum: local.drift_sq_sum,
        quant,
    })
}

/// Size-weighted average over every scalar (tensors, biases, clips), in the
/// given order.
fn weighted_average(template: &ParamSet, shares: &[ClientShare]) -> Result<ParamSet, FedError> {
    let m: usize = shares.iter().map(|s| s.n_k).sum();
    let mut acc = vec![0.0; template.flat_len()];
    let mut buf = Vec::new();
    for s in shares {
        let mu = s.n_k as f64 / m as f64;
        s.received.write_flat(&mut buf);
        for (a, v) in acc.iter_mut().zip(&buf) {
            *a += mu * v;
        }
    }
    Ok(template.from_flat(&acc)?)
}

/// Per-round server-optimizer diagnostics (refined vs plain-average MSE).
#[derive(Clone, Copy, Debug)]
pub struct ServerOptTrace {
    pub mse: f64,
    pub baseline_mse: f64,
    pub fell_back: bool,
}

#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub round: usize,
    pub active: Vec<usize>,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    pub mean_local_loss: f64,
    pub max_grad_norm: f64,
    /// Mean over active clients and local steps of the squared distance
    /// between the quantized iterate and the received model.
    pub mean_drift_sq: f64,
    pub quant: QuantStats,
    pub server_opt: Option<ServerOptTrace>,
}

/// Execute round `t`: sample, broadcast, local training, uplink, aggregate.
/// Client work runs in the ambient thread pool; results are merged in
/// ascending client-id order regardless of completion order.
pub fn run_round(
    state: &mut GlobalState,
    spec: &ModelSpec,
    clients: &[Client],
    cfg: &FedConfig,
    t: usize,
) -> Result<RoundOutcome, FedError> {
    let plan = plan_round(cfg.seed, t, clients, cfg.participation)?;
    let master = state.params.clone();
    let shares: Vec<ClientShare> = plan
        .active
        .par_iter()
        .map(|&id| run_client(spec, &master, &clients[id], cfg, t))
        .collect::<Result<Vec<_>, _>>()?;

    let mut params = weighted_average(&state.params, &shares)?;
    let mut server_opt = None;
    if let Aggregation::ServerOpt(so_cfg) = &cfg.aggregation {
        let uploads: Vec<ClientUpload> = shares
            .iter()
            .map(|s| ClientUpload {
                client_id: s.id,
                n_k: s.n_k,
                weights: s.received.layers.iter().map(|l| l.w.clone()).collect(),
                alphas: s.received.weight_clips.iter().map(|c| c.alpha()).collect(),
            })
            .collect();
        let rng = substream(cfg.seed, t as u64, 0, purpose::SERVER_OBJECTIVE);
        let outcome =
            server_optimize(&uploads, spec.fmt, so_cfg, cfg.comm.quantized(), rng)?;
        for (lp, w) in params.layers.iter_mut().zip(outcome.weights) {
            lp.w = w;
        }
        for (c, a) in params.weight_clips.iter_mut().zip(&outcome.alphas) {
            *c = ClipParam::new(*a).map_err(CodecError::from)?;
        }
        server_opt = Some(ServerOptTrace {
            mse: outcome.mse,
            baseline_mse: outcome.baseline_mse,
            fell_back: outcome.fell_back,
        });
    }

    state.params = params;
    state.round = t;

    let mut quant = QuantStats::default();
    let mut drift = 0.0;
    for s in &shares {
        quant.merge(&s.quant);
        drift += s.drift_sq_sum;
    }
    let p = shares.len();
    Ok(RoundOutcome {
        round: t,
        active: plan.active,
        uplink_bytes: shares.iter().map(|s| s.bytes_up).sum(),
        downlink_bytes: shares.iter().map(|s| s.bytes_down).sum(),
        mean_local_loss: shares.iter().map(|s| s.local_loss).sum::<f64>() / p as f64,
        max_grad_norm: shares.iter().map(|s| s.max_grad_norm).fold(0.0, f64::max),
        mean_drift_sq: drift / (p * cfg.local.steps) as f64,
        quant,
        server_opt,
    })
}

#[derive(Clone, Debug, Default)]
pub struct SimSummary {
    pub total_wall_ms: u64,
    pub final_acc: f64,
    pub final_loss: f64,
    pub server_opt: Vec<ServerOptTrace>,
    pub max_step_seen: f64,
    pub saturated_fraction: f64,
}

/// Run the full simulation: `cfg.rounds` rounds with a post-round
/// evaluation of the deployed (deterministically quantized) server model on
/// `eval`. The ledger rows are deterministic — wall time is recorded only
/// in the returned summary.
pub fn run_simulation(
    spec: &ModelSpec,
    clients: &[Client],
    eval_set: &Dataset,
    cfg: &FedConfig,
) -> Result<(GlobalState, RoundLedger, SimSummary), FedError> {
    cfg.validate()?;
    spec.validate()?;
    if clients.is_empty() {
        return Err(FedError::NoClients);
    }
    for (i, c) in clients.iter().enumerate() {
        if c.id != i {
            return Err(FedError::BadConfig {
                reason: format!("client ids must be dense and ordered; slot {i} holds id {}", c.id),
            });
        }
        if c.n() == 0 {
            return Err(FedError::Client {
                round: 0,
                client: c.id,
                source: QatError::EmptyShard,
            });
        }
    }
    if eval_set.n() == 0 {
        return Err(FedError::BadConfig { reason: "evaluation set is empty".into() });
    }

    let body = || -> Result<(GlobalState, RoundLedger, SimSummary), FedError> {
        let started = std::time::Instant::now();
        // Activation clips calibrate on a fixed slice of the evaluation set.
        let calib_rows = eval_set.n().min(256);
        let calib = eval_set.features.slice(ndarray::s![..calib_rows, ..]);
        let mut state = init_global(spec, cfg.seed, Some(calib))?;
        let mut ledger = RoundLedger::new();
        let mut summary = SimSummary::default();
        let mut quant = QuantStats::default();
        for t in 1..=cfg.rounds {
            let outcome = run_round(&mut state, spec, clients, cfg, t)?;
            let (acc, loss) = evaluate(spec, &state.params, eval_set.features.view(), &eval_set.labels)?;
            ledger.record_round(RoundEntry {
                round: t,
                uplink_bytes: outcome.uplink_bytes,
                downlink_bytes: outcome.downlink_bytes,
                eval_acc: acc,
                eval_loss: loss,
                wall_ms: 0,
            })?;
            quant.merge(&outcome.quant);
            if let Some(trace) = outcome.server_opt {
                summary.server_opt.push(trace);
            }
            summary.final_acc = acc;
            summary.final_loss = loss;
        }
        summary.total_wall_ms = started.elapsed().as_millis() as u64;
        summary.max_step_seen = quant.max_step;
        summary.saturated_fraction = if quant.elements > 0 {
            quant.saturated as f64 / quant.elements as f64
        } else {
            0.0
        };
        Ok((state, ledger, summary))
    };

    if cfg.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| FedError::BadConfig { reason: format!("thread pool: {e}") })?;
        pool.install(body)
    } else {
        body()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{partition, synth_classification, train_test_split, PartitionSpec, Scheme};
    use crate::qat::{LayerParams, Loss};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn scalar_master(w: f64, alpha: f64) -> (ModelSpec, ParamSet) {
        let spec = ModelSpec::linear(1, 1, QuantMode::Det);
        let params = ParamSet {
            layers: vec![LayerParams { w: array![[w]], b: None }],
            weight_clips: vec![ClipParam::new(alpha).unwrap()],
            act_clips: vec![],
        };
        (spec, params)
    }

    fn blob_setup(
        seed: u64,
        clients: usize,
    ) -> (ModelSpec, Vec<Client>, Dataset) {
        let ds = synth_classification(3, 6, 600, 6.0, seed).unwrap();
        let (train, test) = train_test_split(&ds, 0.25, seed).unwrap();
        let shards = partition(
            &train,
            &PartitionSpec { scheme: Scheme::Iid, clients, seed },
        )
        .unwrap();
        let spec = ModelSpec::mlp(&[6, 8, 3], Loss::CrossEntropy, QuantMode::Det).unwrap();
        (spec, clients_from_partition(&train, &shards), test)
    }

    fn base_cfg(seed: u64) -> FedConfig {
        FedConfig {
            seed,
            rounds: 3,
            participation: 0.5,
            local: LocalUpdateConfig {
                steps: 2,
                batch_size: 16,
                lr: 0.05,
                weight_decay: 1e-3,
                clip_lr: None,
            },
            comm: CommMode::Rand,
            aggregation: Aggregation::FedAvg,
            threads: 0,
        }
    }

    #[test]
    fn plan_samples_without_replacement_and_sorts() {
        let ds = synth_classification(2, 4, 100, 2.0, 1).unwrap();
        let shards = partition(&ds, &PartitionSpec { scheme: Scheme::Iid, clients: 10, seed: 1 })
            .unwrap();
        let clients = clients_from_partition(&ds, &shards);
        let plan = plan_round(9, 1, &clients, 0.3).unwrap();
        assert_eq!(plan.active.len(), 3);
        assert!(plan.active.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(plan.m_t, plan.active.iter().map(|&i| clients[i].n()).sum::<usize>());
        // Tiny participation still activates one client.
        assert_eq!(plan_round(9, 1, &clients, 0.001).unwrap().active.len(), 1);
        // Same round, same plan; later round, fresh draw somewhere.
        assert_eq!(plan_round(9, 1, &clients, 0.3).unwrap().active, plan.active);
    }

    #[test]
    fn transport_off_is_exact_passthrough() {
        let (spec, params) = scalar_master(1.07, 480.0);
        let mut spec_off = spec.clone();
        spec_off.quant = QuantMode::Off;
        let mut rng = substream(0, 1, 0, purpose::BROADCAST);
        let t = transport(&spec_off, &params, CommMode::Off, &mut rng).unwrap();
        assert_eq!(t.params.layers[0].w[[0, 0]], 1.07);
        // One 1x1 fp32 tensor: header (2 dims) + 4 bytes, no clip bytes.
        assert_eq!(t.bytes, fp32_payload_len(&[1, 1]) as u64);
    }

    #[test]
    fn broadcast_lands_on_the_bracket_and_is_unbiased() {
        let (spec, params) = scalar_master(1.07, 480.0);
        let n = 4000u64;
        let mut sum = 0.0;
        for t in 1..=n {
            let mut rng = substream(42, t, 0, purpose::BROADCAST);
            let sent = transport(&spec, &params, CommMode::Rand, &mut rng).unwrap();
            let v = sent.params.layers[0].w[[0, 0]];
            assert!(v == 1.0 || v == 1.125, "broadcast left the bracket: {v}");
            // Blob for a 1x1 tensor plus nothing else.
            assert_eq!(sent.bytes, (crate::codec::blob_header_len(2) + 1) as u64);
            sum += v;
        }
        let mean = sum / n as f64;
        let tol = 4.0 * (0.125 / 2.0) / (n as f64).sqrt();
        assert!(
            (mean - 1.07).abs() <= tol,
            "link is biased: mean {mean} vs 1.07 (tol {tol})"
        );
    }

    #[test]
    fn det_comm_always_sends_the_nearest_point() {
        let (spec, params) = scalar_master(1.07, 480.0);
        for t in 1..=50u64 {
            let mut rng = substream(7, t, 3, purpose::BROADCAST);
            let sent = transport(&spec, &params, CommMode::Det, &mut rng).unwrap();
            assert_eq!(sent.params.layers[0].w[[0, 0]], 1.125);
        }
    }

    #[test]
    fn aggregation_is_the_size_weighted_mean() {
        let (_, params) = scalar_master(0.0, 1.0);
        let mk = |id, n_k, w| ClientShare {
            id,
            n_k,
            received: ParamSet {
                layers: vec![LayerParams { w: array![[w]], b: None }],
                weight_clips: vec![ClipParam::new(1.0).unwrap()],
                act_clips: vec![],
            },
            bytes_down: 0,
            bytes_up: 0,
            local_loss: 0.0,
            max_grad_norm: 0.0,
            drift_sq_sum: 0.0,
            quant: QuantStats::default(),
        };
        let shares = vec![mk(0, 1, 0.0), mk(1, 3, 4.0)];
        let avg = weighted_average(&params, &shares).unwrap();
        assert_abs_diff_eq!(avg.layers[0].w[[0, 0]], 3.0, epsilon = 1e-15);
        let mu_sum: f64 = shares.iter().map(|s| s.n_k as f64 / 4.0).sum();
        assert_abs_diff_eq!(mu_sum, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn single_client_no_quant_round_is_plain_local_sgd() {
        // K = 1, full participation, everything full-precision: one round
        // must equal running the local update directly on the same stream.
        let ds = synth_classification(3, 6, 120, 4.0, 33).unwrap();
        let shards =
            partition(&ds, &PartitionSpec { scheme: Scheme::Iid, clients: 1, seed: 33 }).unwrap();
        let clients = clients_from_partition(&ds, &shards);
        let spec = ModelSpec::mlp(&[6, 5, 3], Loss::CrossEntropy, QuantMode::Off).unwrap();
        let mut cfg = base_cfg(33);
        cfg.participation = 1.0;
        cfg.comm = CommMode::Off;
        cfg.rounds = 2;

        let mut state = init_global(&spec, cfg.seed, None).unwrap();
        let mut reference = state.params.clone();
        for t in 1..=cfg.rounds {
            run_round(&mut state, &spec, &clients, &cfg, t).unwrap();
            let mut rng = substream(cfg.seed, t as u64, 0, purpose::LOCAL_BATCHES);
            local_update(
                &spec,
                &mut reference,
                clients[0].x.view(),
                clients[0].y.view(),
                &cfg.local,
                &mut rng,
            )
            .unwrap();
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        state.params.write_flat(&mut a);
        reference.write_flat(&mut b);
        assert_eq!(a, b, "orchestrated round diverged from plain local SGD");
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let (spec, clients, eval) = blob_setup(5, 6);
        let mut cfg = base_cfg(5);
        cfg.rounds = 3;
        cfg.threads = 1;
        let (s1, l1, _) = run_simulation(&spec, &clients, &eval, &cfg).unwrap();
        cfg.threads = 4;
        let (s2, l2, _) = run_simulation(&spec, &clients, &eval, &cfg).unwrap();
        let mut f1 = Vec::new();
        let mut f2 = Vec::new();
        s1.params.write_flat(&mut f1);
        s2.params.write_flat(&mut f2);
        assert_eq!(f1, f2);
        assert_eq!(l1.to_csv(), l2.to_csv());
    }

    #[test]
    fn byte_accounting_matches_the_wire_format() {
        let (spec, clients, eval) = blob_setup(11, 4);
        let mut cfg = base_cfg(11);
        cfg.rounds = 1;
        cfg.participation = 0.5; // 2 of 4 clients
        let (_, ledger, _) = run_simulation(&spec, &clients, &eval, &cfg).unwrap();
        let e = &ledger.entries()[0];
        // Per client: two weight blobs (8x6, 3x8), two fp32 bias payloads
        // (8, 3), one activation clip at 4 bytes.
        let per_client = (crate::codec::blob_header_len(2) + 48)
            + (crate::codec::blob_header_len(2) + 24)
            + fp32_payload_len(&[8])
            + fp32_payload_len(&[3])
            + 4;
        assert_eq!(e.downlink_bytes, 2 * per_client as u64);
        assert_eq!(e.uplink_bytes, 2 * per_client as u64);
    }

    #[test]
    fn quantized_run_improves_while_talking_fp8(
    ) {
        let (spec, clients, eval) = blob_setup(21, 6);
        let mut cfg = base_cfg(21);
        cfg.rounds = 12;
        cfg.participation = 1.0;
        cfg.local.steps = 4;
        let (_, ledger, summary) = run_simulation(&spec, &clients, &eval, &cfg).unwrap();
        assert_eq!(ledger.len(), 12);
        let accs: Vec<f64> = ledger.entries().iter().map(|e| e.eval_acc).collect();
        assert!(accs.iter().all(|a| (0.0..=1.0).contains(a)));
        assert!(
            summary.final_acc > 0.8,
            "blob task should be learnable over fp8 links, got {}",
            summary.final_acc
        );
        assert!(summary.max_step_seen > 0.0);
    }

    #[test]
    fn server_optimizer_path_never_loses_to_the_average() {
        let (spec, clients, eval) = blob_setup(8, 5);
        let mut cfg = base_cfg(8);
        cfg.rounds = 4;
        cfg.aggregation = Aggregation::ServerOpt(ServerOptConfig::default());
        let (_, _, summary) = run_simulation(&spec, &clients, &eval, &cfg).unwrap();
        assert_eq!(summary.server_opt.len(), 4);
        for trace in &summary.server_opt {
            assert!(trace.mse <= trace.baseline_mse + 1e-12);
        }
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let mut cfg = base_cfg(0);
        cfg.participation = 0.0;
        assert!(matches!(cfg.validate(), Err(FedError::BadConfig { .. })));
        cfg.participation = 1.5;
        assert!(matches!(cfg.validate(), Err(FedError::BadConfig { .. })));
        let mut cfg = base_cfg(0);
        cfg.rounds = 0;
        assert!(matches!(cfg.validate(), Err(FedError::BadConfig { .. })));
        let mut cfg = base_cfg(0);
        cfg.local.steps = 0;
        assert!(matches!(cfg.validate(), Err(FedError::BadConfig { .. })));
    }

    #[test]
    fn client_errors_carry_round_and_id() {
        let ds = synth_classification(2, 4, 40, 2.0, 3).unwrap();
        let shards =
            partition(&ds, &PartitionSpec { scheme: Scheme::Iid, clients: 2, seed: 3 }).unwrap();
        let mut clients = clients_from_partition(&ds, &shards);
        // Sabotage client 1 with an impossible shard width.
        clients[1].x = Array2::zeros((clients[1].n(), 9));
        let spec = ModelSpec::mlp(&[4, 4, 2], Loss::CrossEntropy, QuantMode::Det).unwrap();
        let mut cfg = base_cfg(3);
        cfg.participation = 1.0;
        let mut state = init_global(&spec, 3, None).unwrap();
        let err = run_round(&mut state, &spec, &clients, &cfg, 1).unwrap_err();
        match err {
            FedError::Client { round: 1, client: 1, .. } => {}
            other => panic!("expected a client-tagged error, got {other}"),
        }
    }
}
