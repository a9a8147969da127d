//! Server-side refinement of the aggregate: alternating minimization of the
//! size-weighted quantized reconstruction error.
//!
//! After clients upload their (already quantized) weight tensors `u_k`, the
//! plain size-weighted average is only the unquantized optimum. This module
//! descends on
//!
//! ```text
//! J(w, a) = sum_k mu_k * || Q(w; a) - u_k ||^2,    mu_k = n_k / m
//! ```
//!
//! first over `w` by straight-through gradient descent with the clip fixed
//! at the weighted mean, trying every learning rate in a small grid and
//! keeping the best final iterate, then over the clip by a uniform grid
//! search per tensor. The plain average always stays in the candidate set,
//! so the outcome never scores worse than it under the same quantizer draws.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{ClipParam, CodecError, Fp8Format, Fp8Grid};

#[derive(Debug, thiserror::Error)]
pub enum ServerOptError {
    #[error("no client uploads to aggregate")]
    NoUploads,
    #[error("client {client}: upload has {got} tensors, expected {expected}")]
    LayerMismatch { client: usize, expected: usize, got: usize },
    #[error("client {client}, tensor {layer}: shape {got:?} does not match {expected:?}")]
    ShapeMismatch { client: usize, layer: usize, expected: (usize, usize), got: (usize, usize) },
    #[error("invalid optimizer config: {reason}")]
    BadConfig { reason: String },
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// How the quantizer inside the objective draws its randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveDraws {
    /// Deterministic rounding.
    Det,
    /// One uniform draw per element, frozen for the whole round, so the
    /// objective is a fixed function during the search. The default.
    RandFixedSeed,
    /// Fresh draws on every evaluation (noisy objective, ablation only).
    RandResampled,
}

/// Which weights the clip search is evaluated against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphaAt {
    /// The freshly descended weights (alternating-minimization order).
    UpdatedWeights,
    /// The plain federated average.
    FederatedAverage,
}

#[derive(Clone, Debug)]
pub struct ServerOptConfig {
    pub gd_steps: usize,
    pub lr_grid: Vec<f64>,
    pub alpha_grid_points: usize,
    pub objective: ObjectiveDraws,
    pub alpha_at: AlphaAt,
}

impl Default for ServerOptConfig {
    fn default() -> Self {
        Self {
            gd_steps: 5,
            lr_grid: vec![0.01, 0.1, 1.0],
            alpha_grid_points: 50,
            objective: ObjectiveDraws::RandFixedSeed,
            alpha_at: AlphaAt::UpdatedWeights,
        }
    }
}

impl ServerOptConfig {
    pub fn validate(&self) -> Result<(), ServerOptError> {
        if self.gd_steps == 0 {
            return Err(ServerOptError::BadConfig { reason: "gd_steps must be >= 1".into() });
        }
        if self.alpha_grid_points < 2 {
            return Err(ServerOptError::BadConfig {
                reason: "alpha_grid_points must be >= 2".into(),
            });
        }
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|&l| !(l.is_finite() && l > 0.0)) {
            return Err(ServerOptError::BadConfig {
                reason: "lr_grid must be non-empty with positive finite entries".into(),
            });
        }
        Ok(())
    }
}

/// One client's decoded uplink as the optimizer sees it.
#[derive(Clone, Debug)]
pub struct ClientUpload {
    pub client_id: usize,
    pub n_k: usize,
    /// Decoded weight tensors, one per layer; grid values, hence constants
    /// of the objective.
    pub weights: Vec<Array2<f64>>,
    /// The clip each client learned, one per layer (wire precision).
    pub alphas: Vec<f64>,
}

/// Optimization outcome plus the diagnostics the round ledger wants.
#[derive(Clone, Debug)]
pub struct ServerOptOutcome {
    pub weights: Vec<Array2<f64>>,
    pub alphas: Vec<f64>,
    /// Objective value of the returned pair under the round's draws.
    pub mse: f64,
    /// Objective value of the plain size-weighted average under the same
    /// draws — the value the safety guarantee compares against.
    pub baseline_mse: f64,
    /// True when the refined candidates were rejected (non-finite descent
    /// or no improvement) and the plain average was returned.
    pub fell_back: bool,
}

fn validate_uploads(uploads: &[ClientUpload]) -> Result<(), ServerOptError> {
    let first = uploads.first().ok_or(ServerOptError::NoUploads)?;
    for u in uploads {
        if u.weights.len() != first.weights.len() || u.alphas.len() != first.weights.len() {
            return Err(ServerOptError::LayerMismatch {
                client: u.client_id,
                expected: first.weights.len(),
                got: u.weights.len().min(u.alphas.len()),
            });
        }
        for (l, (w, w0)) in u.weights.iter().zip(&first.weights).enumerate() {
            if w.dim() != w0.dim() {
                return Err(ServerOptError::ShapeMismatch {
                    client: u.client_id,
                    layer: l,
                    expected: w0.dim(),
                    got: w.dim(),
                });
            }
        }
    }
    Ok(())
}

/// Size weights `n_k / m` in the given (ascending id) order.
fn size_weights(uploads: &[ClientUpload]) -> Vec<f64> {
    let m: usize = uploads.iter().map(|u| u.n_k).sum();
    uploads.iter().map(|u| u.n_k as f64 / m as f64).collect()
}

/// Plain size-weighted federated average of the uploads: tensors and clips.
pub fn federated_average(
    uploads: &[ClientUpload],
) -> Result<(Vec<Array2<f64>>, Vec<f64>), ServerOptError> {
    validate_uploads(uploads)?;
    let mu = size_weights(uploads);
    let layers = uploads[0].weights.len();
    let mut weights: Vec<Array2<f64>> =
        uploads[0].weights.iter().map(|w| Array2::zeros(w.dim())).collect();
    let mut alphas = vec![0.0; layers];
    for (u, &m) in uploads.iter().zip(&mu) {
        for (acc, w) in weights.iter_mut().zip(&u.weights) {
            acc.scaled_add(m, w);
        }
        for (acc, &a) in alphas.iter_mut().zip(&u.alphas) {
            *acc += m * a;
        }
    }
    Ok((weights, alphas))
}

/// The frozen objective for one round: uploads, weights, and the quantizer
/// randomness in one place.
struct Objective<'a> {
    uploads: &'a [ClientUpload],
    mu: Vec<f64>,
    fmt: Fp8Format,
    draws: ObjectiveDraws,
    /// One uniform per element, drawn once per round (fixed-seed mode).
    uniforms: Vec<Array2<f64>>,
    live: ChaCha8Rng,
}

impl<'a> Objective<'a> {
    fn new(
        uploads: &'a [ClientUpload],
        fmt: Fp8Format,
        draws: ObjectiveDraws,
        mut rng: ChaCha8Rng,
    ) -> Self {
        let uniforms = if draws == ObjectiveDraws::RandFixedSeed {
            uploads[0]
                .weights
                .iter()
                .map(|w| Array2::from_shape_fn(w.dim(), |_| rng.gen::<f64>()))
                .collect()
        } else {
            Vec::new()
        };
        Self { uploads, mu: size_weights(uploads), fmt, draws, uniforms, live: rng }
    }

    fn quantize_layer(
        &mut self,
        layer: usize,
        w: &Array2<f64>,
        alpha: f64,
    ) -> Result<Array2<f64>, ServerOptError> {
        let grid = Fp8Grid::new(self.fmt, ClipParam::new(alpha).map_err(CodecError::from)?);
        let mut q = w.clone();
        match self.draws {
            ObjectiveDraws::Det => {
                for v in q.iter_mut() {
                    *v = grid.q_det(*v)?;
                }
            }
            ObjectiveDraws::RandFixedSeed => {
                let us = &self.uniforms[layer];
                for (v, &u) in q.iter_mut().zip(us.iter()) {
                    *v = grid.q_rand_given(*v, u)?;
                }
            }
            ObjectiveDraws::RandResampled => {
                for v in q.iter_mut() {
                    *v = grid.q_rand(*v, &mut self.live)?;
                }
            }
        }
        Ok(q)
    }

    /// Weighted squared distance of one quantized tensor to the uploads'
    /// corresponding tensors.
    fn layer_mse_of_quantized(&self, layer: usize, q: &Array2<f64>) -> f64 {
        self.uploads
            .iter()
            .zip(&self.mu)
            .map(|(u, &m)| m * (q - &u.weights[layer]).mapv(|d| d * d).sum())
            .sum()
    }

    fn layer_mse(
        &mut self,
        layer: usize,
        w: &Array2<f64>,
        alpha: f64,
    ) -> Result<f64, ServerOptError> {
        let q = self.quantize_layer(layer, w, alpha)?;
        Ok(self.layer_mse_of_quantized(layer, &q))
    }

    fn total_mse(
        &mut self,
        weights: &[Array2<f64>],
        alphas: &[f64],
    ) -> Result<f64, ServerOptError> {
        let mut total = 0.0;
        for (l, (w, &a)) in weights.iter().zip(alphas).enumerate() {
            total += self.layer_mse(l, w, a)?;
        }
        Ok(total)
    }

    /// Straight-through gradient of the objective in `w` at fixed clips:
    /// `2 (Q(w) - u_bar)` on in-range elements, zero on saturated ones.
    fn grad(
        &mut self,
        weights: &[Array2<f64>],
        alphas: &[f64],
    ) -> Result<Vec<Array2<f64>>, ServerOptError> {
        let mut grads = Vec::with_capacity(weights.len());
        for (l, (w, &alpha)) in weights.iter().zip(alphas).enumerate() {
            let q = self.quantize_layer(l, w, alpha)?;
            let mut g: Array2<f64> = Array2::zeros(w.dim());
            for (u, &m) in self.uploads.iter().zip(&self.mu) {
                g.scaled_add(2.0 * m, &(&q - &u.weights[l]));
            }
            ndarray::Zip::from(&mut g).and(w).for_each(|gv, &wv| {
                if wv.abs() > alpha {
                    *gv = 0.0;
                }
            });
            grads.push(g);
        }
        Ok(grads)
    }
}

fn all_finite(weights: &[Array2<f64>]) -> bool {
    weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
}

/// Descend on the weights with clips fixed, one full run per learning rate;
/// the best final objective wins, and the starting average itself stays in
/// contention. Returns `(weights, mse, fell_back)`.
fn optimize_weights(
    obj: &mut Objective,
    start: &[Array2<f64>],
    alphas: &[f64],
    cfg: &ServerOptConfig,
) -> Result<(Vec<Array2<f64>>, f64, bool), ServerOptError> {
    let base_mse = obj.total_mse(start, alphas)?;
    let mut best: (Vec<Array2<f64>>, f64) = (start.to_vec(), base_mse);
    let mut any_candidate = false;
    for &lr in &cfg.lr_grid {
        let mut w: Vec<Array2<f64>> = start.to_vec();
        let mut ok = true;
        for _ in 0..cfg.gd_steps {
            let g = obj.grad(&w, alphas)?;
            for (wl, gl) in w.iter_mut().zip(&g) {
                wl.scaled_add(-lr, gl);
            }
            if !all_finite(&w) {
                ok = false;
                break;
            }
        }
        if !ok {
            continue;
        }
        let mse = obj.total_mse(&w, alphas)?;
        if mse.is_finite() {
            any_candidate = true;
            if mse < best.1 {
                best = (w, mse);
            }
        }
    }
    Ok((best.0, best.1, !any_candidate))
}

/// Per-tensor grid search on the clip with weights fixed. The candidate set
/// is `alpha_grid_points` uniform values spanning the clients' clip range
/// plus the weighted-mean incumbent; ties resolve toward the smaller clip.
fn optimize_alpha(
    obj: &mut Objective,
    weights: &[Array2<f64>],
    mean_alphas: &[f64],
    cfg: &ServerOptConfig,
) -> Result<Vec<f64>, ServerOptError> {
    let layers = weights.len();
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let lo = obj.uploads.iter().map(|u| u.alphas[l]).fold(f64::INFINITY, f64::min);
        let hi = obj.uploads.iter().map(|u| u.alphas[l]).fold(f64::NEG_INFINITY, f64::max);
        if lo == hi {
            out.push(lo);
            continue;
        }
        let mut candidates: Vec<f64> = (0..cfg.alpha_grid_points)
            .map(|i| lo + (hi - lo) * i as f64 / (cfg.alpha_grid_points - 1) as f64)
            .collect();
        candidates.push(mean_alphas[l]);
        candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
        candidates.dedup();
        let mut best = (f64::INFINITY, mean_alphas[l]);
        for &a in &candidates {
            let mse = obj.layer_mse(l, &weights[l], a)?;
            // Strict improvement only: the ascending scan makes ties land
            // on the smallest clip.
            if mse < best.0 {
                best = (mse, a);
            }
        }
        out.push(best.1);
    }
    Ok(out)
}

/// One alternation pass: weights first (clips at the weighted mean), then
/// clips. `quantized = false` short-circuits to the plain average, which is
/// exact there. The returned pair never scores worse than the plain average
/// under the round's quantizer draws.
pub fn server_optimize(
    uploads: &[ClientUpload],
    fmt: Fp8Format,
    cfg: &ServerOptConfig,
    quantized: bool,
    rng: ChaCha8Rng,
) -> Result<ServerOptOutcome, ServerOptError> {
    cfg.validate()?;
    let (avg_w, avg_a) = federated_average(uploads)?;
    if !quantized {
        // Without communication quantization the objective is the plain
        // squared distance, minimized in closed form by the average.
        let obj = Objective::new(uploads, fmt, ObjectiveDraws::Det, rng);
        let mse: f64 = (0..avg_w.len()).map(|l| obj.layer_mse_of_quantized(l, &avg_w[l])).sum();
        return Ok(ServerOptOutcome {
            weights: avg_w,
            alphas: avg_a,
            mse,
            baseline_mse: mse,
            fell_back: false,
        });
    }

    let mut obj = Objective::new(uploads, fmt, cfg.objective, rng);
    let baseline_mse = obj.total_mse(&avg_w, &avg_a)?;
    let (w_new, _, weights_fell_back) = optimize_weights(&mut obj, &avg_w, &avg_a, cfg)?;
    let alpha_anchor = match cfg.alpha_at {
        AlphaAt::UpdatedWeights => &w_new,
        AlphaAt::FederatedAverage => &avg_w,
    };
    let a_new = optimize_alpha(&mut obj, alpha_anchor, &avg_a, cfg)?;
    let refined_mse = obj.total_mse(&w_new, &a_new)?;

    // Safety: only ship the refinement when it actually beats the average
    // under the same draws.
    if weights_fell_back || !refined_mse.is_finite() || refined_mse > baseline_mse {
        return Ok(ServerOptOutcome {
            weights: avg_w,
            alphas: avg_a,
            mse: baseline_mse,
            baseline_mse,
            fell_back: true,
        });
    }
    Ok(ServerOptOutcome {
        weights: w_new,
        alphas: a_new,
        mse: refined_mse,
        baseline_mse,
        fell_back: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Fp8Grid;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;

    fn fmt() -> Fp8Format {
        Fp8Format::e4m3()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn scalar_upload(id: usize, n: usize, w: f64, alpha: f64) -> ClientUpload {
        ClientUpload { client_id: id, n_k: n, weights: vec![array![[w]]], alphas: vec![alpha] }
    }

    #[test]
    fn average_matches_hand_weighted_mean() {
        let ups = vec![scalar_upload(0, 1, 0.0, 1.0), scalar_upload(1, 3, 4.0, 2.0)];
        let (w, a) = federated_average(&ups).unwrap();
        assert_abs_diff_eq!(w[0][[0, 0]], 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a[0], 1.75, epsilon = 1e-15);
        let mu = size_weights(&ups);
        assert_abs_diff_eq!(mu.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn unquantized_mode_returns_the_average_exactly() {
        let ups = vec![
            scalar_upload(0, 2, 0.125, 1.0),
            scalar_upload(1, 2, 0.375, 1.5),
        ];
        let out =
            server_optimize(&ups, fmt(), &ServerOptConfig::default(), false, rng(0)).unwrap();
        assert_eq!(out.weights[0][[0, 0]], 0.25);
        assert_eq!(out.alphas[0], 1.25);
        assert!(!out.fell_back);
        assert_eq!(out.mse, out.baseline_mse);
    }

    #[test]
    fn single_client_stays_at_its_own_upload() {
        // One client's upload is a grid point; the average equals it, its
        // reconstruction error is zero, and the optimizer must not move.
        let grid = Fp8Grid::new(fmt(), ClipParam::new(1.0).unwrap());
        let u = grid.q_det(0.73).unwrap();
        let ups = vec![scalar_upload(0, 5, u, 1.0)];
        let cfg = ServerOptConfig { objective: ObjectiveDraws::Det, ..Default::default() };
        let out = server_optimize(&ups, fmt(), &cfg, true, rng(1)).unwrap();
        assert_eq!(out.baseline_mse, 0.0);
        assert_eq!(out.mse, 0.0);
        assert_eq!(out.weights[0][[0, 0]], u);
    }

    fn det_mse_scalar(ups: &[ClientUpload], w: f64, alpha: f64) -> f64 {
        let grid = Fp8Grid::new(fmt(), ClipParam::new(alpha).unwrap());
        let q = grid.q_det(w).unwrap();
        let m: usize = ups.iter().map(|u| u.n_k).sum();
        ups.iter()
            .map(|u| (u.n_k as f64 / m as f64) * (q - u.weights[0][[0, 0]]).powi(2))
            .sum()
    }

    #[test]
    fn scalar_weight_descent_matches_lattice_scan() {
        // Two clients on the alpha = 1 grid; compare against brute force
        // over a fine lattice of w at the same fixed clip.
        let grid = Fp8Grid::new(fmt(), ClipParam::new(1.0).unwrap());
        let u1 = grid.q_det(0.21).unwrap();
        let u2 = grid.q_det(0.60).unwrap();
        let ups = vec![scalar_upload(0, 1, u1, 1.0), scalar_upload(1, 3, u2, 1.0)];
        let cfg = ServerOptConfig { objective: ObjectiveDraws::Det, ..Default::default() };

        let mut obj = Objective::new(&ups, fmt(), ObjectiveDraws::Det, rng(2));
        let (avg_w, avg_a) = federated_average(&ups).unwrap();
        let (w_new, mse, fell_back) = optimize_weights(&mut obj, &avg_w, &avg_a, &cfg).unwrap();
        assert!(!fell_back);
        assert!(all_finite(&w_new));

        let best_scan = (0..=4000)
            .map(|i| -1.2 + 2.4 * i as f64 / 4000.0)
            .map(|w| det_mse_scalar(&ups, w, avg_a[0]))
            .fold(f64::INFINITY, f64::min);
        assert!(
            mse <= best_scan * 1.05 + 1e-15,
            "descent mse {mse} vs lattice optimum {best_scan}"
        );
    }

    #[test]
    fn alpha_search_agrees_with_direct_reevaluation() {
        let ups = vec![
            scalar_upload(0, 1, 0.30, 0.8),
            scalar_upload(1, 2, 0.55, 1.6),
        ];
        let cfg = ServerOptConfig { objective: ObjectiveDraws::Det, ..Default::default() };
        let (avg_w, avg_a) = federated_average(&ups).unwrap();
        let mut obj = Objective::new(&ups, fmt(), ObjectiveDraws::Det, rng(3));
        let picked = optimize_alpha(&mut obj, &avg_w, &avg_a, &cfg).unwrap();

        // Re-evaluate the same candidate set directly.
        let lo: f64 = 0.8;
        let hi: f64 = 1.6;
        let mut candidates: Vec<f64> = (0..cfg.alpha_grid_points)
            .map(|i| lo + (hi - lo) * i as f64 / (cfg.alpha_grid_points - 1) as f64)
            .collect();
        candidates.push(avg_a[0]);
        candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
        candidates.dedup();
        let (mut best_a, mut best_mse) = (f64::NAN, f64::INFINITY);
        for &a in &candidates {
            let mse = det_mse_scalar(&ups, avg_w[0][[0, 0]], a);
            if mse < best_mse {
                best_mse = mse;
                best_a = a;
            }
        }
        assert_eq!(picked[0], best_a);
        assert!(picked[0] >= lo && picked[0] <= hi);
    }

    #[test]
    fn all_equal_clips_return_immediately() {
        let ups = vec![scalar_upload(0, 1, 0.1, 1.25), scalar_upload(1, 1, 0.9, 1.25)];
        let cfg = ServerOptConfig::default();
        let out = server_optimize(&ups, fmt(), &cfg, true, rng(4)).unwrap();
        assert_eq!(out.alphas[0], 1.25);
    }

    #[test]
    fn never_worse_than_the_average_on_random_instances() {
        for seed in 0..10u64 {
            let mut r = rng(100 + seed);
            let k = 2 + (seed as usize % 3);
            let ups: Vec<ClientUpload> = (0..k)
                .map(|id| {
                    let alpha = rand::Rng::gen_range(&mut r, 0.5..2.0);
                    let grid = Fp8Grid::new(fmt(), ClipParam::new(alpha).unwrap());
                    let w = Array2::from_shape_fn((3, 2), |_| {
                        grid.q_det(rand::Rng::gen_range(&mut r, -1.5..1.5)).unwrap()
                    });
                    ClientUpload {
                        client_id: id,
                        n_k: 1 + (id % 4),
                        weights: vec![w],
                        alphas: vec![alpha],
                    }
                })
                .collect();
            for objective in [ObjectiveDraws::Det, ObjectiveDraws::RandFixedSeed] {
                for alpha_at in [AlphaAt::UpdatedWeights, AlphaAt::FederatedAverage] {
                    let cfg = ServerOptConfig { objective, alpha_at, ..Default::default() };
                    let out = server_optimize(&ups, fmt(), &cfg, true, rng(seed)).unwrap();
                    assert!(
                        out.mse <= out.baseline_mse + 1e-12,
                        "seed {seed}: mse {} above baseline {}",
                        out.mse,
                        out.baseline_mse
                    );
                }
            }
        }
    }

    #[test]
    fn joint_refinement_is_near_the_two_dimensional_lattice_optimum() {
        let ga = Fp8Grid::new(fmt(), ClipParam::new(0.8).unwrap());
        let gb = Fp8Grid::new(fmt(), ClipParam::new(1.2).unwrap());
        let ups = vec![
            scalar_upload(0, 2, ga.q_det(0.33).unwrap(), 0.8),
            scalar_upload(1, 3, gb.q_det(0.71).unwrap(), 1.2),
        ];
        let cfg = ServerOptConfig { objective: ObjectiveDraws::Det, ..Default::default() };
        let out = server_optimize(&ups, fmt(), &cfg, true, rng(5)).unwrap();

        let mut best = f64::INFINITY;
        for ai in 0..=200 {
            let alpha = 0.8 + 0.4 * ai as f64 / 200.0;
            for wi in 0..=2000 {
                let w = -1.3 + 2.6 * wi as f64 / 2000.0;
                best = best.min(det_mse_scalar(&ups, w, alpha));
            }
        }
        assert!(
            out.mse <= best * 1.05 + 1e-15,
            "refined mse {} vs joint lattice optimum {best}",
            out.mse
        );
    }

    #[test]
    fn bad_configs_and_uploads_are_rejected() {
        let cfg = ServerOptConfig { gd_steps: 0, ..Default::default() };
        assert!(matches!(
            server_optimize(&[scalar_upload(0, 1, 0.0, 1.0)], fmt(), &cfg, true, rng(0)),
            Err(ServerOptError::BadConfig { .. })
        ));
        assert!(matches!(
            server_optimize(&[], fmt(), &ServerOptConfig::default(), true, rng(0)),
            Err(ServerOptError::NoUploads)
        ));
        let mismatched = vec![
            scalar_upload(0, 1, 0.0, 1.0),
            ClientUpload {
                client_id: 1,
                n_k: 1,
                weights: vec![array![[0.0], [1.0]]],
                alphas: vec![1.0],
            },
        ];
        assert!(matches!(
            server_optimize(&mismatched, fmt(), &ServerOptConfig::default(), true, rng(0)),
            Err(ServerOptError::ShapeMismatch { client: 1, .. })
        ));
    }
}
