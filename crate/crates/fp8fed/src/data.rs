//! Desk-scale dataset generation, loading, and client partitioning.
//!
//! Two synthetic task families feed the simulator: Gaussian-blob
//! classification (one unit-covariance blob per class) and a convex
//! least-squares family with a closed-form global minimizer used by the
//! convergence studies. Partitioning is either i.i.d. or Dirichlet label
//! skew; both produce a true set partition of the example indices.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::rng::{purpose, substream};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid sizes: {reason}")]
    InvalidSizes { reason: String },
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("client {client} received no examples after {attempts} partition attempts")]
    EmptyShard { client: usize, attempts: usize },
    #[error("matrix is not positive definite (pivot {pivot} at column {col})")]
    NotSpd { pivot: f64, col: usize },
}

/// A labeled classification dataset: one feature row per example.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        if features.nrows() != labels.len() {
            return Err(DataError::InvalidSizes {
                reason: format!("{} feature rows vs {} labels", features.nrows(), labels.len()),
            });
        }
        if classes == 0 {
            return Err(DataError::InvalidSizes { reason: "zero classes".into() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::InvalidSizes {
                reason: format!("label {bad} out of range for {classes} classes"),
            });
        }
        Ok(Self { features, labels, classes })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn dims(&self) -> usize {
        self.features.ncols()
    }

    /// Materialize the rows at `indices` (in order) as a fresh dataset view.
    pub fn subset(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let x = self.features.select(Axis(0), indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Gaussian blobs: class `c` is centered at `(separation / sqrt(2)) * e_c`,
/// so every pair of class means sits exactly `separation` apart, with unit
/// covariance noise. Labels are drawn uniformly, so class counts fluctuate
/// binomially around `n / classes`.
pub fn synth_classification(
    classes: usize,
    dims: usize,
    n: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if classes < 2 {
        return Err(DataError::InvalidSizes { reason: "need at least two classes".into() });
    }
    if dims < classes {
        return Err(DataError::InvalidSizes {
            reason: format!("need dims >= classes to place {classes} means, got {dims}"),
        });
    }
    if n < classes {
        return Err(DataError::InvalidSizes {
            reason: format!("need n >= classes, got n = {n}, classes = {classes}"),
        });
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(DataError::InvalidSizes { reason: "separation must be finite and >= 0".into() });
    }
    let mut rng = substream(seed, 0, 0, purpose::DATA);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let coord = separation / std::f64::consts::SQRT_2;
    let mut features = Array2::zeros((n, dims));
    let mut labels = Vec::with_capacity(n);
    for mut row in features.axis_iter_mut(Axis(0)) {
        let label = rng.gen_range(0..classes);
        labels.push(label);
        for (j, v) in row.iter_mut().enumerate() {
            *v = noise.sample(&mut rng) + if j == label { coord } else { 0.0 };
        }
    }
    Dataset::new(features, labels, classes)
}

/// One client's share of the least-squares family: `F_k(w) = ||A w - b||^2 / (2 n_k)`.
#[derive(Clone, Debug)]
pub struct QuadClient {
    pub a: Array2<f64>,
    pub b: Array1<f64>,
}

impl QuadClient {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn objective(&self, w: ArrayView1<f64>) -> f64 {
        let r = self.a.dot(&w) - &self.b;
        r.dot(&r) / (2.0 * self.n() as f64)
    }

    pub fn grad(&self, w: ArrayView1<f64>) -> Array1<f64> {
        let r = self.a.dot(&w) - &self.b;
        self.a.t().dot(&r) / self.n() as f64
    }

    /// Targets reshaped to the `n x 1` layout the training loop consumes.
    pub fn targets(&self) -> Array2<f64> {
        let n = self.b.len();
        self.b.clone().into_shape_with_order((n, 1)).expect("column reshape")
    }
}

/// The full convex verification family with its closed-form solution.
#[derive(Clone, Debug)]
pub struct QuadProblem {
    pub clients: Vec<QuadClient>,
    pub d: usize,
    /// Minimizer of the uniform average objective.
    pub w_star: Array1<f64>,
    pub f_star: f64,
    /// Largest eigenvalue of the average Hessian (smoothness constant).
    pub lips: f64,
    /// Largest per-client smoothness constant.
    pub lips_max: f64,
    /// `max_k ||grad F_k(w*)||` — how far apart the client optima sit.
    pub grad_at_opt: f64,
}

impl QuadProblem {
    pub fn k(&self) -> usize {
        self.clients.len()
    }

    /// Uniform average of the client objectives.
    pub fn objective(&self, w: ArrayView1<f64>) -> f64 {
        self.clients.iter().map(|c| c.objective(w)).sum::<f64>() / self.k() as f64
    }

    pub fn grad(&self, w: ArrayView1<f64>) -> Array1<f64> {
        let mut g = Array1::zeros(self.d);
        for c in &self.clients {
            g += &c.grad(w);
        }
        g / self.k() as f64
    }

    /// Optimality gap `F(w) - F*` (clamped at zero against rounding).
    pub fn gap(&self, w: ArrayView1<f64>) -> f64 {
        (self.objective(w) - self.f_star).max(0.0)
    }
}

/// Build `k` clients around a shared base system: `A_k = A0 + h E_k`,
/// `b_k = b0 + h f_k` with fresh Gaussian perturbations per client, so
/// `heterogeneity = 0` collapses to identical objectives. Exports the exact
/// minimizer of the average objective and its smoothness constants.
pub fn synth_quadratic(
    k: usize,
    d: usize,
    n_per: usize,
    heterogeneity: f64,
    seed: u64,
) -> Result<QuadProblem, DataError> {
    if k == 0 || d == 0 {
        return Err(DataError::InvalidSizes { reason: "need k >= 1 and d >= 1".into() });
    }
    if n_per < d {
        return Err(DataError::InvalidSizes {
            reason: format!("need n_per >= d for well-posed clients, got {n_per} < {d}"),
        });
    }
    if !heterogeneity.is_finite() || heterogeneity < 0.0 {
        return Err(DataError::InvalidSizes {
            reason: "heterogeneity must be finite and >= 0".into(),
        });
    }
    let mut rng = substream(seed, 0, 0, purpose::DATA);
    let g = Normal::new(0.0, 1.0).expect("unit normal");
    let a0 = Array2::from_shape_fn((n_per, d), |_| g.sample(&mut rng));
    let w_base = Array1::from_shape_fn(d, |_| g.sample(&mut rng));
    // A small residual keeps F* strictly positive even at zero heterogeneity.
    let b0 = a0.dot(&w_base) + Array1::from_shape_fn(n_per, |_| 0.1 * g.sample(&mut rng));

    let h = heterogeneity;
    let clients: Vec<QuadClient> = (0..k)
        .map(|_| {
            let e = Array2::from_shape_fn((n_per, d), |_| g.sample(&mut rng));
            let f = Array1::from_shape_fn(n_per, |_| g.sample(&mut rng));
            QuadClient { a: &a0 + &(e * h), b: &b0 + &(f * h) }
        })
        .collect();

    // Average Hessian and normal equations for the exact minimizer.
    let scale = 1.0 / (k * n_per) as f64;
    let mut hessian = Array2::zeros((d, d));
    let mut rhs = Array1::zeros(d);
    for c in &clients {
        hessian += &(c.a.t().dot(&c.a) * scale);
        rhs += &(c.a.t().dot(&c.b) * scale);
    }
    let w_star = spd_solve(&hessian, rhs.view())?;
    let lips = power_iteration(&hessian);
    let lips_max = clients
        .iter()
        .map(|c| power_iteration(&(c.a.t().dot(&c.a) / c.n() as f64)))
        .fold(0.0f64, f64::max);

    let mut problem = QuadProblem {
        clients,
        d,
        w_star,
        f_star: 0.0,
        lips,
        lips_max,
        grad_at_opt: 0.0,
    };
    problem.f_star = problem.objective(problem.w_star.view());
    problem.grad_at_opt = problem
        .clients
        .iter()
        .map(|c| {
            let g = c.grad(problem.w_star.view());
            g.dot(&g).sqrt()
        })
        .fold(0.0f64, f64::max);
    Ok(problem)
}

/// Solve `M x = rhs` for symmetric positive definite `M` by Cholesky
/// factorization. Sized for desk-scale systems (d in the tens).
pub fn spd_solve(m: &Array2<f64>, rhs: ArrayView1<f64>) -> Result<Array1<f64>, DataError> {
    let d = m.nrows();
    assert_eq!(m.ncols(), d, "square matrix required");
    assert_eq!(rhs.len(), d, "rhs length must match");
    let mut l = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        let mut diag = m[[j, j]];
        for t in 0..j {
            diag -= l[[j, t]] * l[[j, t]];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(DataError::NotSpd { pivot: diag, col: j });
        }
        l[[j, j]] = diag.sqrt();
        for i in (j + 1)..d {
            let mut v = m[[i, j]];
            for t in 0..j {
                v -= l[[i, t]] * l[[j, t]];
            }
            l[[i, j]] = v / l[[j, j]];
        }
    }
    // Forward then back substitution.
    let mut y = rhs.to_owned();
    for i in 0..d {
        for t in 0..i {
            let v = y[t];
            y[i] -= l[[i, t]] * v;
        }
        y[i] /= l[[i, i]];
    }
    for i in (0..d).rev() {
        for t in (i + 1)..d {
            let v = y[t];
            y[i] -= l[[t, i]] * v;
        }
        y[i] /= l[[i, i]];
    }
    Ok(y)
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
pub fn power_iteration(m: &Array2<f64>) -> f64 {
    let d = m.nrows();
    // Deterministic, generically non-orthogonal start vector.
    let mut v = Array1::from_shape_fn(d, |i| 1.0 + (i as f64 + 1.0).sqrt());
    let mut norm = v.dot(&v).sqrt();
    v /= norm;
    let mut lambda = 0.0;
    for _ in 0..500 {
        let mv = m.dot(&v);
        norm = mv.dot(&mv).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = mv.dot(&v);
        let done = (next - lambda).abs() <= 1e-14 * next.abs().max(1.0);
        lambda = next;
        v = mv / norm;
        if done {
            break;
        }
    }
    lambda
}

/// How examples are spread across clients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scheme {
    Iid,
    /// Label-skewed: per-class client proportions drawn from a symmetric
    /// Dirichlet with the given concentration.
    Dirichlet { concentration: f64 },
}

#[derive(Clone, Copy, Debug)]
pub struct PartitionSpec {
    pub scheme: Scheme,
    pub clients: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.clients == 0 {
            return Err(DataError::InvalidSizes { reason: "need at least one client".into() });
        }
        if let Scheme::Dirichlet { concentration } = self.scheme {
            if !(concentration.is_finite() && concentration > 0.0) {
                return Err(DataError::InvalidSizes {
                    reason: "dirichlet concentration must be finite and > 0".into(),
                });
            }
        }
        Ok(())
    }
}

/// One client's slice of the dataset, as row indices.
#[derive(Clone, Debug)]
pub struct ClientShard {
    pub client_id: usize,
    pub indices: Vec<usize>,
}

const PARTITION_ATTEMPTS: usize = 100;

/// Split the dataset's example indices into disjoint per-client shards.
///
/// Extreme label skew can starve a client; the draw is retried up to 100
/// times before giving up with an error.
pub fn partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>, DataError> {
    spec.validate()?;
    let mut rng = substream(spec.seed, 0, 0, purpose::DATA);
    let mut last_empty = 0usize;
    for _ in 0..PARTITION_ATTEMPTS {
        let shards = match spec.scheme {
            Scheme::Iid => partition_iid(ds.n(), spec.clients, &mut rng),
            Scheme::Dirichlet { concentration } => {
                partition_dirichlet(ds, spec.clients, concentration, &mut rng)
            }
        };
        match shards.iter().position(|s| s.indices.is_empty()) {
            None => return Ok(shards),
            Some(k) => last_empty = k,
        }
    }
    Err(DataError::EmptyShard { client: last_empty, attempts: PARTITION_ATTEMPTS })
}

fn partition_iid<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<ClientShard> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let base = n / k;
    let extra = n % k;
    let mut at = 0usize;
    (0..k)
        .map(|client_id| {
            let take = base + usize::from(client_id < extra);
            let indices = order[at..at + take].to_vec();
            at += take;
            ClientShard { client_id, indices }
        })
        .collect()
}

/// Quota assignment: each class's examples are shuffled and dealt to clients
/// according to Dirichlet proportions, largest remainders winning the
/// leftover slots. Exactly n_c examples of each class are placed.
fn partition_dirichlet<R: Rng + ?Sized>(
    ds: &Dataset,
    k: usize,
    concentration: f64,
    rng: &mut R,
) -> Vec<ClientShard> {
    let gamma = Gamma::new(concentration, 1.0).expect("valid concentration");
    let mut shards: Vec<ClientShard> =
        (0..k).map(|client_id| ClientShard { client_id, indices: Vec::new() }).collect();
    for class in 0..ds.classes {
        let mut members: Vec<usize> =
            (0..ds.n()).filter(|&i| ds.labels[i] == class).collect();
        members.shuffle(rng);
        let n_c = members.len();
        if n_c == 0 {
            continue;
        }
        // Dirichlet draw via normalized Gamma variates.
        let mut p: Vec<f64> = (0..k).map(|_| gamma.sample(rng).max(1e-300)).collect();
        let total: f64 = p.iter().sum();
        for v in &mut p {
            *v /= total;
        }
        // Largest-remainder quotas.
        let mut counts: Vec<usize> = p.iter().map(|&q| (q * n_c as f64).floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            let ra = p[a] * n_c as f64 - counts[a] as f64;
            let rb = p[b] * n_c as f64 - counts[b] as f64;
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        for &client in order.iter().take(n_c - assigned) {
            counts[client] += 1;
        }
        let mut at = 0usize;
        for (client, &count) in counts.iter().enumerate() {
            shards[client].indices.extend_from_slice(&members[at..at + count]);
            at += count;
        }
    }
    shards
}

/// Deterministic shuffled split into train and test portions.
pub fn train_test_split(
    ds: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(DataError::InvalidSizes {
            reason: format!("test fraction must be in [0, 1), got {test_fraction}"),
        });
    }
    let mut rng = substream(seed, 0, 0, purpose::DATA);
    let mut order: Vec<usize> = (0..ds.n()).collect();
    order.shuffle(&mut rng);
    let n_test = ((ds.n() as f64) * test_fraction).round() as usize;
    let (test_idx, train_idx) = order.split_at(n_test);
    let (tx, ty) = ds.subset(test_idx);
    let (rx, ry) = ds.subset(train_idx);
    Ok((
        Dataset::new(rx, ry, ds.classes)?,
        Dataset::new(tx, ty, ds.classes)?,
    ))
}

/// Load a comma-separated dataset: UTF-8, header row, feature columns
/// followed by one integer label column.
pub fn load_csv(path: &std::path::Path) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let pathname = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| DataError::Parse {
        path: pathname.clone(),
        line: 1,
        reason: "file is empty; expected a header row".into(),
    })?;
    let width = header.split(',').count();
    if width < 2 {
        return Err(DataError::Parse {
            path: pathname,
            line: 1,
            reason: "need at least one feature column and a label column".into(),
        });
    }
    let mut rows: Vec<f64> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut n = 0usize;
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(DataError::Parse {
                path: pathname,
                line: lineno,
                reason: format!("expected {width} fields, found {}", fields.len()),
            });
        }
        for f in &fields[..width - 1] {
            let v: f64 = f.trim().parse().map_err(|_| DataError::Parse {
                path: pathname.clone(),
                line: lineno,
                reason: format!("bad numeric field {:?}", f.trim()),
            })?;
            rows.push(v);
        }
        let label: usize = fields[width - 1].trim().parse().map_err(|_| DataError::Parse {
            path: pathname.clone(),
            line: lineno,
            reason: format!("bad integer label {:?}", fields[width - 1].trim()),
        })?;
        labels.push(label);
        n += 1;
    }
    if n == 0 {
        return Err(DataError::Parse {
            path: pathname,
            line: 1,
            reason: "no data rows after the header".into(),
        });
    }
    let classes = labels.iter().max().unwrap() + 1;
    let features = Array2::from_shape_vec((n, width - 1), rows).expect("consistent row width");
    Dataset::new(features, labels, classes)
}
