//! Numerical checks of the attention decomposition identities.
//!
//! Every check here is computed along a route that does not go through the
//! attention-block graph code, so agreement between the two is meaningful.
//! Query/key embeddings are `[d, HW]` matrices whose columns are pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::attention::{self, BlockParams, Variant};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::tensor::{self, FeatureMap, Tensor};

pub const IDENTITY_TOL: f64 = 1e-10;
pub const PROP1_OBJECTIVE_TOL: f64 = 1e-9;
pub const PROP1_GRADIENT_TOL: f64 = 1e-6;
/// Perturbation radius used by the mean-optimality random search.
pub const PROP1_RADIUS: f64 = 0.1;
pub const EIGEN_TOL: f64 = 1e-8;
pub const TRACE_TOL: f64 = 1e-10;
pub const COUPLING_TOL: f64 = 1e-9;
pub const ATTENUATION_BOUND: f64 = 3e-9;
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityReport {
    pub name: String,
    pub max_abs_error: f64,
    pub instances_tested: usize,
    pub tol: f64,
    pub pass: bool,
}

impl IdentityReport {
    pub fn new(name: impl Into<String>, tol: f64) -> Self {
        IdentityReport {
            name: name.into(),
            max_abs_error: 0.0,
            instances_tested: 0,
            tol,
            pass: true,
        }
    }

    /// Folds one instance's error in. NaN errors fail the report.
    pub fn record(&mut self, err: f64) {
        self.instances_tested += 1;
        if err.is_nan() || err > self.max_abs_error {
            self.max_abs_error = err;
        }
        self.pass = self.max_abs_error <= self.tol;
    }

    /// Marks the report failed for a reason other than the error magnitude.
    pub fn fail(&mut self) {
        self.pass = false;
    }

    pub fn merge(&mut self, other: &IdentityReport) {
        self.instances_tested += other.instances_tested;
        if other.max_abs_error > self.max_abs_error || other.max_abs_error.is_nan() {
            self.max_abs_error = other.max_abs_error;
        }
        self.pass = self.pass && other.pass && self.max_abs_error <= self.tol;
    }
}

fn check_qk(q: &Tensor, k: &Tensor) -> Result<(usize, usize)> {
    let (d, hw) = q.dims2()?;
    if k.dims2()? != (d, hw) {
        return Err(Error::shape("query/key", q.shape(), k.shape()));
    }
    Ok((d, hw))
}

fn col(t: &Tensor, j: usize) -> Vec<f64> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c + j]).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn col_mean(t: &Tensor) -> Vec<f64> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r)
        .map(|i| t.data()[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
        .collect()
}

/// The four terms of `qᵢᵀkⱼ` after whitening.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenSplit {
    /// `[HW, HW]`: `(qᵢ−μq)ᵀ(kⱼ−μk)`
    pub pairwise: Tensor,
    /// `[HW]`: `μqᵀkⱼ`
    pub key_unary: Vec<f64>,
    /// `[HW]`: `qᵢᵀμk`
    pub query_bias: Vec<f64>,
    /// `μqᵀμk`, entering with a minus sign.
    pub const_bias: f64,
}

impl WhitenSplit {
    /// `pairwise + key_unary + query_bias − const_bias`, an `[HW, HW]` matrix.
    pub fn reconstruct(&self) -> Result<Tensor> {
        let hw = self.key_unary.len();
        let data = (0..hw * hw)
            .map(|idx| {
                let (i, j) = (idx / hw, idx % hw);
                self.pairwise.data()[idx] + self.key_unary[j] + self.query_bias[i] - self.const_bias
            })
            .collect();
        Tensor::new(vec![hw, hw], data)
    }
}

pub fn whiten_split(q: &Tensor, k: &Tensor) -> Result<WhitenSplit> {
    let (_, hw) = check_qk(q, k)?;
    let mu_q = col_mean(q);
    let mu_k = col_mean(k);
    let qc: Vec<Vec<f64>> = (0..hw)
        .map(|i| col(q, i).iter().zip(&mu_q).map(|(a, m)| a - m).collect())
        .collect();
    let kc: Vec<Vec<f64>> = (0..hw)
        .map(|j| col(k, j).iter().zip(&mu_k).map(|(a, m)| a - m).collect())
        .collect();
    let pairwise = Tensor::new(
        vec![hw, hw],
        (0..hw * hw)
            .map(|idx| dot(&qc[idx / hw], &kc[idx % hw]))
            .collect(),
    )?;
    Ok(WhitenSplit {
        pairwise,
        key_unary: (0..hw).map(|j| dot(&mu_q, &col(k, j))).collect(),
        query_bias: (0..hw).map(|i| dot(&col(q, i), &mu_k)).collect(),
        const_bias: dot(&mu_q, &mu_k),
    })
}

/// Raw dot products `QᵀK` evaluated directly.
fn raw_logits(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (_, hw) = check_qk(q, k)?;
    let qs: Vec<_> = (0..hw).map(|i| col(q, i)).collect();
    let ks: Vec<_> = (0..hw).map(|j| col(k, j)).collect();
    Tensor::new(
        vec![hw, hw],
        (0..hw * hw)
            .map(|idx| dot(&qs[idx / hw], &ks[idx % hw]))
            .collect(),
    )
}

/// Max elementwise error of the four-term reconstruction of `QᵀK`.
pub fn whiten_check(q: &Tensor, k: &Tensor) -> Result<IdentityReport> {
    let split = whiten_split(q, k)?;
    let err = split.reconstruct()?.max_abs_diff(&raw_logits(q, k)?);
    let mut r = IdentityReport::new("whitening", IDENTITY_TOL);
    r.record(err);
    Ok(r)
}

fn add_row_vector(m: &Tensor, v: &[f64]) -> Result<Tensor> {
    let c = m.shape()[1];
    Tensor::new(
        m.shape().to_vec(),
        m.data()
            .iter()
            .enumerate()
            .map(|(idx, x)| x + v[idx % c])
            .collect(),
    )
}

/// `σⱼ(qᵢᵀkⱼ)` against `σⱼ((qᵢ−μq)ᵀ(kⱼ−μk) + μqᵀkⱼ)`.
pub fn elimination_check(q: &Tensor, k: &Tensor) -> Result<IdentityReport> {
    let split = whiten_split(q, k)?;
    let lhs = tensor::softmax_rows(&raw_logits(q, k)?)?;
    let rhs = tensor::softmax_rows(&add_row_vector(&split.pairwise, &split.key_unary)?)?;
    let mut r = IdentityReport::new("elimination", IDENTITY_TOL);
    r.record(lhs.max_abs_diff(&rhs));
    Ok(r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizationResult {
    pub report: IdentityReport,
    /// `λᵢ = Σⱼ σ(aᵢ)ⱼ σ(b)ⱼ`
    pub lambdas: Vec<f64>,
}

/// `σ(aᵢ + b) = σ(aᵢ) ⊙ σ(b) / λᵢ` for `[HW, HW]` pairwise logits `a` and
/// `[HW]` unary logits `b`.
pub fn factorization_check_logits(a: &Tensor, b: &[f64]) -> Result<FactorizationResult> {
    let (r, c) = a.dims2()?;
    if b.len() != c {
        return Err(Error::shape("factorization", a.shape(), &[b.len()]));
    }
    let lhs = tensor::softmax_rows(&add_row_vector(a, b)?)?;
    let sa = tensor::softmax_rows(a)?;
    let sb = tensor::softmax_rows(&Tensor::new(vec![1, c], b.to_vec())?)?;
    let mut lambdas = Vec::with_capacity(r);
    let mut err = 0.0f64;
    for i in 0..r {
        let lambda = dot(sa.row(i), sb.data());
        for j in 0..c {
            let rhs = sa.at2(i, j) * sb.data()[j] / lambda;
            err = err.max((lhs.at2(i, j) - rhs).abs());
        }
        lambdas.push(lambda);
    }
    let mut report = IdentityReport::new("factorization", IDENTITY_TOL);
    report.record(err);
    Ok(FactorizationResult { report, lambdas })
}

pub fn factorization_check(q: &Tensor, k: &Tensor) -> Result<FactorizationResult> {
    let split = whiten_split(q, k)?;
    factorization_check_logits(&split.pairwise, &split.key_unary)
}

fn pair_diff_sq(t: &Tensor) -> f64 {
    let hw = t.shape()[1];
    let cols: Vec<_> = (0..hw).map(|j| col(t, j)).collect();
    let mut s = 0.0;
    for m in &cols {
        for n in &cols {
            s += m.iter().zip(n).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    s
}

/// The two-ratio objective `O(α, β)`, evaluated with its literal triple sums.
pub fn prop1_objective(q: &Tensor, k: &Tensor, alpha: &[f64], beta: &[f64]) -> Result<f64> {
    let (d, hw) = check_qk(q, k)?;
    if alpha.len() != d || beta.len() != d {
        return Err(Error::shape(
            "prop1_objective",
            &[d],
            &[alpha.len(), beta.len()],
        ));
    }
    let kk = pair_diff_sq(k);
    let qq = pair_diff_sq(q);
    if kk == 0.0 || qq == 0.0 {
        return Err(Error::Domain(
            "objective undefined: all queries or all keys identical".into(),
        ));
    }
    let qa: Vec<Vec<f64>> = (0..hw)
        .map(|i| col(q, i).iter().zip(alpha).map(|(x, a)| x - a).collect())
        .collect();
    let kb: Vec<Vec<f64>> = (0..hw)
        .map(|m| col(k, m).iter().zip(beta).map(|(x, b)| x - b).collect())
        .collect();

    let mut num1 = 0.0;
    for qi in &qa {
        for km in &kb {
            for kn in &kb {
                let t = dot(qi, km) - dot(qi, kn);
                num1 += t * t;
            }
        }
    }
    let den1: f64 = qa.iter().map(|u| dot(u, u)).sum::<f64>() * kk;

    let mut num2 = 0.0;
    for km in &kb {
        for qi in &qa {
            for qj in &qa {
                let t = dot(km, qi) - dot(km, qj);
                num2 += t * t;
            }
        }
    }
    let den2: f64 = kb.iter().map(|w| dot(w, w)).sum::<f64>() * qq;
    if den1 == 0.0 || den2 == 0.0 {
        return Err(Error::Domain("objective undefined at this (α, β)".into()));
    }
    Ok(num1 / den1 + num2 / den2)
}

#[derive(Debug, Clone, Serialize)]
pub struct Prop1Verdict {
    pub objective_at_center: f64,
    pub best_perturbed: f64,
    /// Perturbations that beat the centre by more than the tolerance.
    pub improving_trials: usize,
    pub trials: usize,
    pub gradient_norm: f64,
    /// No perturbation beat the centre.
    pub maximum_holds: bool,
    /// Finite-difference gradient at the centre within tolerance of zero.
    pub stationary: bool,
    pub pass: bool,
}

/// Central finite-difference gradient of `O` with respect to `(α, β)`.
pub fn prop1_gradient(
    q: &Tensor,
    k: &Tensor,
    alpha: &[f64],
    beta: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let d = alpha.len();
    let mut grad = Vec::with_capacity(2 * d);
    for idx in 0..2 * d {
        let eval = |delta: f64| {
            let (mut a, mut b) = (alpha.to_vec(), beta.to_vec());
            if idx < d {
                a[idx] += delta;
            } else {
                b[idx - d] += delta;
            }
            prop1_objective(q, k, &a, &b)
        };
        grad.push((eval(h)? - eval(-h)?) / (2.0 * h));
    }
    Ok(grad)
}

/// Random-search check that the embedding means maximise `O`, plus a
/// stationarity check of its finite-difference gradient there.
pub fn prop1_oracle(
    q: &Tensor,
    k: &Tensor,
    trials: usize,
    radius: f64,
    seed: u64,
) -> Result<Prop1Verdict> {
    check_qk(q, k)?;
    let alpha = col_mean(q);
    let beta = col_mean(k);
    prop1_oracle_at(q, k, &alpha, &beta, trials, radius, seed)
}

/// [`prop1_oracle`] centred on an arbitrary `(α, β)`.
pub fn prop1_oracle_at(
    q: &Tensor,
    k: &Tensor,
    alpha: &[f64],
    beta: &[f64],
    trials: usize,
    radius: f64,
    seed: u64,
) -> Result<Prop1Verdict> {
    let d = alpha.len();
    let center = prop1_objective(q, k, alpha, beta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = f64::NEG_INFINITY;
    let mut improving = 0;
    for _ in 0..trials {
        // uniform in the 2d-ball
        let mut dir: Vec<f64> = (0..2 * d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dot(&dir, &dir).sqrt();
        let r = radius * rng.random::<f64>().powf(1.0 / (2 * d) as f64);
        for v in &mut dir {
            *v *= r / norm;
        }
        let a: Vec<f64> = alpha.iter().zip(&dir[..d]).map(|(x, y)| x + y).collect();
        let b: Vec<f64> = beta.iter().zip(&dir[d..]).map(|(x, y)| x + y).collect();
        let o = match prop1_objective(q, k, &a, &b) {
            Ok(o) => o,
            Err(Error::Domain(_)) => continue,
            Err(e) => return Err(e),
        };
        best = best.max(o);
        if o > center + PROP1_OBJECTIVE_TOL {
            improving += 1;
        }
    }
    let grad = prop1_gradient(q, k, alpha, beta, 1e-5)?;
    let gradient_norm = dot(&grad, &grad).sqrt();
    let maximum_holds = improving == 0;
    let stationary = gradient_norm <= PROP1_GRADIENT_TOL;
    Ok(Prop1Verdict {
        objective_at_center: center,
        best_perturbed: best,
        improving_trials: improving,
        trials,
        gradient_norm,
        maximum_holds,
        stationary,
        pass: maximum_holds && stationary,
    })
}

/// `A = Σ (kₘ−kₙ)(kₘ−kₙ)ᵀ / Σ (kₘ−kₙ)ᵀ(kₘ−kₙ)` over all ordered pairs.
pub fn pair_scatter_matrix(points: &Tensor) -> Result<Tensor> {
    let (d, hw) = points.dims2()?;
    let cols: Vec<_> = (0..hw).map(|j| col(points, j)).collect();
    let mut a = vec![0.0; d * d];
    let mut denom = 0.0;
    for m in &cols {
        for n in &cols {
            let diff: Vec<f64> = m.iter().zip(n).map(|(x, y)| x - y).collect();
            for r in 0..d {
                for c in 0..d {
                    a[r * d + c] += diff[r] * diff[c];
                }
            }
            denom += dot(&diff, &diff);
        }
    }
    if denom == 0.0 {
        return Err(Error::Domain("all columns identical".into()));
    }
    for v in &mut a {
        *v /= denom;
    }
    Tensor::new(vec![d, d], a)
}

/// Dominant eigenvalue of a symmetric matrix by power iteration.
pub fn power_iteration(a: &Tensor, max_iter: usize, tol: f64) -> Result<f64> {
    let (n, c) = a.dims2()?;
    if n != c {
        return Err(Error::shape("power_iteration", a.shape(), &[n, n]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let w: Vec<f64> = (0..n).map(|i| dot(a.row(i), &v)).collect();
        let next = dot(&v, &w);
        let wn = dot(&w, &w).sqrt();
        if wn == 0.0 {
            return Ok(0.0);
        }
        v = w.into_iter().map(|x| x / wn).collect();
        let done = (next - lambda).abs() < tol;
        lambda = next;
        if done {
            break;
        }
    }
    Ok(lambda)
}

#[derive(Debug, Clone, Serialize)]
pub struct EigenBound {
    pub max_eigenvalue: f64,
    pub min_eigenvalue: f64,
    pub trace: f64,
    pub asymmetry: f64,
}

impl EigenBound {
    pub fn holds(&self) -> bool {
        self.max_eigenvalue <= 1.0 + EIGEN_TOL
            && (self.trace - 1.0).abs() <= TRACE_TOL
            && self.asymmetry == 0.0
            && self.min_eigenvalue >= -EIGEN_TOL
    }
}

/// Spectrum summary of the pair-scatter matrix of `points`' columns.
pub fn gram_eigen_bound(points: &Tensor) -> Result<EigenBound> {
    let a = pair_scatter_matrix(points)?;
    let n = a.shape()[0];
    let max_eigenvalue = power_iteration(&a, 200, 1e-10)?;
    // λmin(A) = λmax − λmax(λmax·I − A)
    let shifted = Tensor::new(
        vec![n, n],
        (0..n * n)
            .map(|idx| {
                let diag = if idx / n == idx % n {
                    max_eigenvalue
                } else {
                    0.0
                };
                diag - a.data()[idx]
            })
            .collect(),
    )?;
    let min_eigenvalue = max_eigenvalue - power_iteration(&shifted, 200, 1e-10)?;
    let trace = (0..n).map(|i| a.at2(i, i)).sum();
    let asymmetry = (0..n * n)
        .map(|idx| (a.data()[idx] - a.at2(idx % n, idx / n)).abs())
        .fold(0.0, f64::max);
    Ok(EigenBound {
        max_eigenvalue,
        min_eigenvalue,
        trace,
        asymmetry,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CouplingReport {
    /// `max |∂L/∂σ(ωp) − ∂L/∂σ(ω) ⊙ σ(ωu)|` in the product form.
    pub product_pairwise_error: f64,
    /// `max |∂L/∂σ(ωu)ⱼ − Σᵢ ∂L/∂σ(ω)ᵢⱼ σ(ωp)ᵢⱼ|` in the product form.
    pub product_unary_error: f64,
    /// Per key `j`: `maxᵢ |∂L/∂σ(ωp)ᵢⱼ| / max |∂L/∂σ(ω)|` in the product form.
    pub product_attenuation: Vec<f64>,
    /// Same ratio for the sum form.
    pub sum_attenuation: Vec<f64>,
    /// `∂L/∂σ(ωp) == ∂L/∂σ(ω)` bit for bit in the sum form.
    pub sum_pairwise_exact: bool,
    /// `∂L/∂σ(ωu)ⱼ == Σᵢ ∂L/∂σ(ω)ᵢⱼ` bit for bit in the sum form.
    pub sum_unary_exact: bool,
    pub unary_norm: Vec<f64>,
}

impl CouplingReport {
    pub fn relations_hold(&self) -> bool {
        self.product_pairwise_error <= COUPLING_TOL
            && self.product_unary_error <= COUPLING_TOL
            && self.sum_pairwise_exact
            && self.sum_unary_exact
    }
}

struct CouplingForm {
    d_pair: Tensor,
    d_unary: Tensor,
    d_attn: Tensor,
    sigma_pair: Tensor,
}

fn coupling_form(
    pair_logits: &Tensor,
    unary_logits: &Tensor,
    values: &Tensor,
    weights: &Tensor,
    product: bool,
) -> Result<CouplingForm> {
    let hw = pair_logits.shape()[0];
    let mut g = Graph::new();
    let a = g.param("pairwise_logits", pair_logits.clone());
    let b = g.param("unary_logits", unary_logits.reshape(&[1, hw])?);
    let sp = g.softmax_rows(a)?;
    let su = g.softmax_rows(b)?;
    let ub = g.broadcast_rows(su, hw)?;
    let (attn, total) = if product {
        let prod = g.mul(sp, ub)?;
        // λᵢ is a normaliser, held constant
        let factors = (0..hw)
            .map(|i| 1.0 / g.value(prod).row(i).iter().sum::<f64>())
            .collect();
        let total = g.scale_rows(prod, factors)?;
        (prod, total)
    } else {
        let s = g.add(sp, ub)?;
        (s, s)
    };
    let v = g.constant(values.clone());
    let agg = g.matmul_t(v, false, total, true)?;
    let r = g.constant(weights.clone());
    let weighted = g.mul(agg, r)?;
    let loss = g.sum(weighted)?;
    let grads = g.backward(loss)?;
    let get = |id| {
        grads
            .wrt(id)
            .cloned()
            .ok_or_else(|| Error::Invalid("missing adjoint".into()))
    };
    Ok(CouplingForm {
        d_pair: get(sp)?,
        d_unary: get(su)?,
        d_attn: get(attn)?,
        sigma_pair: g.value(sp).clone(),
    })
}

/// Gradient-coupling probe on explicit logits.
///
/// The product form builds `σ(ω) = σ(ωp) ⊙ σ(ωu)` (then divides each row by
/// its detached sum λᵢ); the sum form builds `σ(ωp) + σ(ωu)`. Both feed the
/// fixed loss `L = Σ (V · attnᵀ) ⊙ R`.
pub fn coupling_probe_from_logits(
    pair_logits: &Tensor,
    unary_logits: &Tensor,
    values: &Tensor,
    weights: &Tensor,
) -> Result<CouplingReport> {
    let (hw, c) = pair_logits.dims2()?;
    if hw != c || unary_logits.len() != hw {
        return Err(Error::shape(
            "coupling probe",
            pair_logits.shape(),
            unary_logits.shape(),
        ));
    }
    let su = tensor::softmax_rows(&unary_logits.reshape(&[1, hw])?)?;
    let su = su.data();

    let prod = coupling_form(pair_logits, unary_logits, values, weights, true)?;
    let mut pair_err = 0.0f64;
    let mut unary_err = 0.0f64;
    let scale = prod.d_attn.max_abs();
    let mut product_attenuation = vec![0.0f64; hw];
    for j in 0..hw {
        let mut expect_u = 0.0;
        for i in 0..hw {
            let g = prod.d_attn.at2(i, j);
            pair_err = pair_err.max((prod.d_pair.at2(i, j) - g * su[j]).abs());
            expect_u += g * prod.sigma_pair.at2(i, j);
            product_attenuation[j] = product_attenuation[j].max(prod.d_pair.at2(i, j).abs());
        }
        unary_err = unary_err.max((prod.d_unary.data()[j] - expect_u).abs());
        product_attenuation[j] /= scale;
    }

    let sum = coupling_form(pair_logits, unary_logits, values, weights, false)?;
    let sum_pairwise_exact = sum
        .d_pair
        .data()
        .iter()
        .zip(sum.d_attn.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let colsum = tensor::col_sums(&sum.d_attn)?;
    let sum_unary_exact = sum
        .d_unary
        .data()
        .iter()
        .zip(colsum.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let sscale = sum.d_attn.max_abs();
    let sum_attenuation = (0..hw)
        .map(|j| {
            (0..hw)
                .map(|i| sum.d_pair.at2(i, j).abs())
                .fold(0.0, f64::max)
                / sscale
        })
        .collect();

    Ok(CouplingReport {
        product_pairwise_error: pair_err,
        product_unary_error: unary_err,
        product_attenuation,
        sum_attenuation,
        sum_pairwise_exact,
        sum_unary_exact,
        unary_norm: su.to_vec(),
    })
}

fn probe_weights(d: usize, hw: usize) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0u64);
    Tensor::from_fn(&[d, hw], |_| rng.sample(StandardNormal))
}

/// Coupling probe on a block's NL pairwise/unary split for input `x`.
pub fn coupling_gradient_probe(x: &FeatureMap, p: &BlockParams) -> Result<CouplingReport> {
    let e = attention::compute_embeddings(x, p, Variant::NL)?;
    let split = whiten_split(&e.q, &e.k)?;
    let hw = x.pixels();
    let unary = Tensor::new(vec![hw], split.key_unary.clone())?;
    let weights = probe_weights(e.v.shape()[0], hw)?;
    coupling_probe_from_logits(&split.pairwise, &unary, &e.v, &weights)
}

/// Random `Q`, `K` with `[d, hw]` shape, rescaled so the largest raw logit
/// has magnitude `logit_scale`.
pub fn random_qk<R: Rng + ?Sized>(
    rng: &mut R,
    d: usize,
    hw: usize,
    logit_scale: f64,
) -> Result<(Tensor, Tensor)> {
    let q = Tensor::from_fn(&[d, hw], |_| rng.sample(StandardNormal))?;
    let k = Tensor::from_fn(&[d, hw], |_| rng.sample(StandardNormal))?;
    let peak = raw_logits(&q, &k)?.max_abs();
    if peak == 0.0 {
        return Ok((q, k));
    }
    let s = (logit_scale / peak).sqrt();
    Ok((tensor::scale(&q, s)?, tensor::scale(&k, s)?))
}

/// Per-instance RNG derived from a run seed and the instance index.
pub fn instance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

const EMBED_DIMS: [usize; 4] = [1, 2, 4, 8];
const PIXEL_COUNTS: [usize; 5] = [1, 2, 4, 9, 49];

/// Instance `index` of the identity-suite sweep.
pub fn identity_instance(seed: u64, index: usize) -> Result<(Tensor, Tensor)> {
    let d = EMBED_DIMS[index % EMBED_DIMS.len()];
    let hw = PIXEL_COUNTS[(index / EMBED_DIMS.len()) % PIXEL_COUNTS.len()];
    let mut rng = instance_rng(seed, index);
    let scale = rng.random_range(0.1..=50.0);
    random_qk(&mut rng, d, hw, scale)
}

/// Instance `index` of the mean-optimality sweep: `HW ∈ 3..=8`, `d ∈ {2, 3}`.
pub fn prop1_instance(seed: u64, index: usize) -> Result<(Tensor, Tensor)> {
    let mut rng = instance_rng(seed ^ 0x9e37_79b9, index);
    let hw = rng.random_range(3..=8);
    let d = rng.random_range(2..=3);
    let q = Tensor::from_fn(&[d, hw], |_| rng.sample(StandardNormal))?;
    let k = Tensor::from_fn(&[d, hw], |_| rng.sample(StandardNormal))?;
    Ok((q, k))
}

#[derive(Debug, Clone, Copy)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Overrides every suite's default instance count.
    pub instances: Option<usize>,
}

pub struct Suite {
    pub name: &'static str,
    pub default_instances: usize,
    pub run: fn(u64, usize) -> Result<IdentityReport>,
}

impl Suite {
    pub fn execute(&self, cfg: &SuiteConfig) -> Result<IdentityReport> {
        (self.run)(cfg.seed, cfg.instances.unwrap_or(self.default_instances))
    }
}

fn run_identity(
    name: &str,
    seed: u64,
    n: usize,
    f: impl Fn(&Tensor, &Tensor) -> Result<IdentityReport>,
) -> Result<IdentityReport> {
    let mut total = IdentityReport::new(name, IDENTITY_TOL);
    for i in 0..n {
        let (q, k) = identity_instance(seed, i)?;
        total.merge(&f(&q, &k)?);
    }
    Ok(total)
}

fn suite_elimination(seed: u64, n: usize) -> Result<IdentityReport> {
    run_identity("elimination", seed, n, elimination_check)
}

fn suite_whitening(seed: u64, n: usize) -> Result<IdentityReport> {
    run_identity("whitening", seed, n, whiten_check)
}

fn suite_factorization(seed: u64, n: usize) -> Result<IdentityReport> {
    run_identity("factorization", seed, n, |q, k| {
        Ok(factorization_check(q, k)?.report)
    })
}

pub const PROP1_TRIALS: usize = 1000;

fn suite_prop1_maximum(seed: u64, n: usize) -> Result<IdentityReport> {
    // error = largest improvement any perturbation achieved over the mean
    let mut r = IdentityReport::new("prop1-maximum", PROP1_OBJECTIVE_TOL);
    for i in 0..n {
        let (q, k) = prop1_instance(seed, i)?;
        let v = prop1_oracle(
            &q,
            &k,
            PROP1_TRIALS,
            PROP1_RADIUS,
            seed.wrapping_add(i as u64),
        )?;
        r.record((v.best_perturbed - v.objective_at_center).max(0.0));
        if !v.maximum_holds {
            r.fail();
        }
    }
    Ok(r)
}

fn suite_prop1_stationarity(seed: u64, n: usize) -> Result<IdentityReport> {
    let mut r = IdentityReport::new("prop1-stationarity", PROP1_GRADIENT_TOL);
    for i in 0..n {
        let (q, k) = prop1_instance(seed, i)?;
        let alpha = col_mean(&q);
        let beta = col_mean(&k);
        let g = prop1_gradient(&q, &k, &alpha, &beta, 1e-5)?;
        r.record(dot(&g, &g).sqrt());
    }
    Ok(r)
}

fn suite_eigenvalue(seed: u64, n: usize) -> Result<IdentityReport> {
    // error = how far max-eig exceeds 1 or trace departs from 1
    let mut r = IdentityReport::new("eigenvalue", EIGEN_TOL);
    for i in 0..n {
        let mut rng = instance_rng(seed ^ 0xe16e, i);
        let d = rng.random_range(2..=6);
        let hw = rng.random_range(2..=12);
        let k = Tensor::from_fn(&[d, hw], |_| rng.sample(StandardNormal))?;
        let b = gram_eigen_bound(&k)?;
        r.record((b.max_eigenvalue - 1.0).max(0.0).max((b.trace - 1.0).abs()));
        if !b.holds() {
            r.fail();
        }
    }
    Ok(r)
}

/// Random coupling-probe inputs with unary logit `j = 0` pinned at −20.
pub fn coupling_instance(seed: u64, index: usize) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let mut rng = instance_rng(seed ^ 0xc0c0, index);
    let hw = rng.random_range(2..=16);
    let d = rng.random_range(1..=4);
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::Invalid(e.to_string()))?;
    let pair = Tensor::from_fn(&[hw, hw], |_| normal.sample(&mut rng))?;
    let mut unary = Tensor::from_fn(&[hw], |_| normal.sample(&mut rng))?;
    unary.set_flat(0, -20.0);
    let values = Tensor::from_fn(&[d, hw], |_| normal.sample(&mut rng))?;
    let weights = Tensor::from_fn(&[d, hw], |_| normal.sample(&mut rng))?;
    Ok((pair, unary, values, weights))
}

fn suite_coupling(seed: u64, n: usize) -> Result<IdentityReport> {
    let mut r = IdentityReport::new("coupling", COUPLING_TOL);
    for i in 0..n {
        let (pair, unary, values, weights) = coupling_instance(seed, i)?;
        let c = coupling_probe_from_logits(&pair, &unary, &values, &weights)?;
        r.record(c.product_pairwise_error.max(c.product_unary_error));
        if !c.relations_hold() || c.product_attenuation[0] > ATTENUATION_BOUND {
            r.fail();
        }
    }
    Ok(r)
}

fn suite_row_sum(seed: u64, n: usize) -> Result<IdentityReport> {
    let mut r = IdentityReport::new("row-sum", ROW_SUM_TOL);
    for i in 0..n {
        let mut rng = instance_rng(seed ^ 0x5a5a, i);
        let c = [4, 8, 16][rng.random_range(0..3)];
        let side = [1, 2, 4, 7][rng.random_range(0..4)];
        let x = FeatureMap::new(Tensor::from_fn(&[c, side, side], |_| {
            rng.sample(StandardNormal)
        })?)?;
        for v in Variant::ALL {
            let mut p = BlockParams::init(c, v, &mut rng)?;
            if let Some(wm) = &mut p.wm {
                *wm = Tensor::from_fn(wm.shape(), |_| rng.sample(StandardNormal))?;
            }
            let (_, dec) = attention::block_forward(&x, &p, v)?;
            let (err, identical) = row_sum_error(&dec);
            r.record(err);
            if !identical {
                r.fail();
            }
        }
    }
    Ok(r)
}

/// Max deviation of attention row sums from the variant's target, and whether
/// the query-invariant unary parts are stored identically in every row.
pub fn row_sum_error(d: &attention::AttentionDecomposition) -> (f64, bool) {
    let hw = d.pixels();
    let target = d.variant.row_sum();
    let err = (0..hw)
        .map(|i| (d.total.row(i).iter().sum::<f64>() - target).abs())
        .fold(0.0, f64::max);
    let identical = match d.variant {
        Variant::UnaryNL => (0..hw).all(|i| {
            d.total
                .row(i)
                .iter()
                .zip(d.unary_norm.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
        }),
        Variant::DNL | Variant::DNLDagger => (0..hw).all(|i| {
            (0..hw).all(|j| {
                (d.pairwise_norm.at2(i, j) + d.unary_norm.data()[j]).to_bits()
                    == d.total.at2(i, j).to_bits()
            })
        }),
        _ => true,
    };
    (err, identical)
}

/// Every suite `check` runs, in reporting order.
pub fn suites() -> Vec<Suite> {
    vec![
        Suite {
            name: "elimination",
            default_instances: 500,
            run: suite_elimination,
        },
        Suite {
            name: "whitening",
            default_instances: 500,
            run: suite_whitening,
        },
        Suite {
            name: "factorization",
            default_instances: 500,
            run: suite_factorization,
        },
        Suite {
            name: "prop1-maximum",
            default_instances: 100,
            run: suite_prop1_maximum,
        },
        Suite {
            name: "prop1-stationarity",
            default_instances: 100,
            run: suite_prop1_stationarity,
        },
        Suite {
            name: "eigenvalue",
            default_instances: 50,
            run: suite_eigenvalue,
        },
        Suite {
            name: "coupling",
            default_instances: 50,
            run: suite_coupling,
        },
        Suite {
            name: "row-sum",
            default_instances: 200,
            run: suite_row_sum,
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::matrix(rows)
    }

    #[test]
    fn whiten_single_pixel() {
        let q = m(&[&[1.5], &[-2.0]]);
        let k = m(&[&[0.5], &[3.0]]);
        let s = whiten_split(&q, &k).unwrap();
        assert_eq!(s.pairwise.data(), &[0.0]);
        assert_eq!(s.key_unary[0], s.const_bias);
        assert_eq!(s.query_bias[0], s.const_bias);
        assert!((s.reconstruct().unwrap().data()[0] - (0.75 - 6.0)).abs() < 1e-12);
    }

    #[test]
    fn whiten_zero_mean_inputs() {
        let q = m(&[&[1.0, -1.0, 0.0], &[2.0, 0.5, -2.5]]);
        let k = m(&[&[-0.3, 0.3, 0.0], &[1.0, 1.0, -2.0]]);
        let s = whiten_split(&q, &k).unwrap();
        assert!(s
            .key_unary
            .iter()
            .chain(&s.query_bias)
            .all(|v| v.abs() < 1e-15));
        assert!(s.const_bias.abs() < 1e-15);
        assert!(s.pairwise.max_abs_diff(&raw_logits(&q, &k).unwrap()) < 1e-15);
    }

    #[test]
    fn whiten_random_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (q, k) = random_qk(&mut rng, 2, 3, 5.0).unwrap();
        assert!(whiten_check(&q, &k).unwrap().max_abs_error <= 1e-12);
    }

    #[test]
    fn elimination_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k) = random_qk(&mut rng, 4, 9, 3.0).unwrap();
        assert!(elimination_check(&q, &k).unwrap().pass);
        let r = elimination_check(&m(&[&[2.0]]), &m(&[&[-1.0]])).unwrap();
        assert_eq!(r.max_abs_error, 0.0);
        let (q, k) = random_qk(&mut rng, 8, 49, 50.0).unwrap();
        let r = elimination_check(&q, &k).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn factorization_hand_example() {
        let ln2 = 2f64.ln();
        let a = m(&[&[0.0, ln2], &[0.0, ln2]]);
        let f = factorization_check_logits(&a, &[0.0, 0.0]).unwrap();
        assert!(f.report.max_abs_error < 1e-15);
        assert!((f.lambdas[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn factorization_uniform_unary_lambda() {
        let a = m(&[&[0.3, -1.0, 2.0], &[1.0, 0.0, 0.5], &[-0.2, 0.2, 0.0]]);
        let f = factorization_check_logits(&a, &[4.0, 4.0, 4.0]).unwrap();
        assert!(f.lambdas.iter().all(|l| (l - 1.0 / 3.0).abs() < 1e-15));
        assert!(f.report.pass);
    }

    #[test]
    fn factorization_pairwise_free() {
        let b = [0.5, -0.5, 1.5];
        let f = factorization_check_logits(&Tensor::zeros(&[3, 3]), &b).unwrap();
        assert!(f.report.pass);
        // λ = Σ (1/HW) σ(b) = 1/HW
        assert!(f.lambdas.iter().all(|l| (l - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn prop1_degenerate_inputs() {
        let q = m(&[&[1.0, 1.0, 1.0], &[2.0, 2.0, 2.0]]);
        let k = m(&[&[0.0, 1.0, 2.0], &[1.0, 0.0, 1.0]]);
        assert!(matches!(
            prop1_objective(&q, &k, &[0.0, 0.0], &[0.0, 0.0]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            prop1_oracle(&k, &q, 10, 0.1, 0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn prop1_scalar_two_pixel() {
        // with scalar embeddings both ratios are identically 1
        let q = m(&[&[0.0, 1.0]]);
        let k = m(&[&[0.0, 1.0]]);
        let at = prop1_objective(&q, &k, &[0.5], &[0.5]).unwrap();
        assert!((at - 2.0).abs() < 1e-15);
        for delta in [-0.3, -0.01, 0.01, 0.2] {
            let o = prop1_objective(&q, &k, &[0.5 + delta], &[0.5 - delta]).unwrap();
            assert!(at >= o - 1e-9);
        }
        assert!(prop1_oracle(&q, &k, 100, 0.1, 3).unwrap().pass);
    }

    #[test]
    fn prop1_translation_covariance() {
        let (q, k) = prop1_instance(5, 0).unwrap();
        let d = q.shape()[0];
        let shift = 1.7;
        let qs = Tensor::new(
            q.shape().to_vec(),
            q.data().iter().map(|v| v + shift).collect(),
        )
        .unwrap();
        let ks = Tensor::new(
            k.shape().to_vec(),
            k.data().iter().map(|v| v - shift).collect(),
        )
        .unwrap();
        let a = vec![0.2; d];
        let b = vec![-0.4; d];
        let a2: Vec<f64> = a.iter().map(|v| v + shift).collect();
        let b2: Vec<f64> = b.iter().map(|v| v - shift).collect();
        let o1 = prop1_objective(&q, &k, &a, &b).unwrap();
        let o2 = prop1_objective(&qs, &ks, &a2, &b2).unwrap();
        assert!((o1 - o2).abs() < 1e-12);
    }

    #[test]
    fn prop1_tiny_radius_and_stationarity() {
        let (q, k) = prop1_instance(9, 3).unwrap();
        let v = prop1_oracle(&q, &k, 200, 1e-9, 1).unwrap();
        assert!(v.pass, "{v:?}");
        assert!(v.gradient_norm <= PROP1_GRADIENT_TOL);
    }

    #[test]
    fn prop1_offset_center_fails() {
        let (q, k) = prop1_instance(9, 4).unwrap();
        let mut alpha = col_mean(&q);
        let beta = col_mean(&k);
        alpha[0] += 10.0 * PROP1_RADIUS;
        let v = prop1_oracle_at(&q, &k, &alpha, &beta, 200, PROP1_RADIUS, 2).unwrap();
        assert!(!v.stationary && !v.pass, "{v:?}");
    }

    #[test]
    fn eigen_hand_example() {
        let k = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let a = pair_scatter_matrix(&k).unwrap();
        let expect = m(&[&[0.5, -0.5], &[-0.5, 0.5]]);
        assert!(a.max_abs_diff(&expect) < 1e-15);
        let b = gram_eigen_bound(&k).unwrap();
        assert!((b.max_eigenvalue - 1.0).abs() < 1e-10);
        assert!(b.min_eigenvalue.abs() < 1e-8);
        assert!(b.holds());
    }

    #[test]
    fn eigen_collinear_keys() {
        let k = m(&[&[0.0, 1.0, 3.0, -2.0], &[0.0, 2.0, 6.0, -4.0]]);
        let b = gram_eigen_bound(&k).unwrap();
        assert!((b.max_eigenvalue - 1.0).abs() < 1e-10, "{b:?}");
        assert!(b.holds());
    }

    #[test]
    fn eigen_identical_columns() {
        let k = m(&[&[1.0, 1.0], &[2.0, 2.0]]);
        assert!(matches!(gram_eigen_bound(&k), Err(Error::Domain(_))));
    }

    #[test]
    fn coupling_attenuation_example() {
        let (pair, unary, values, weights) = coupling_instance(1, 0).unwrap();
        let c = coupling_probe_from_logits(&pair, &unary, &values, &weights).unwrap();
        assert!(c.relations_hold(), "{c:?}");
        assert!(c.unary_norm[0] < 2.1e-9);
        assert!(c.product_attenuation[0] <= ATTENUATION_BOUND);
        assert!(c.sum_attenuation[0] > 1e-3);
    }

    #[test]
    fn coupling_uniform_unary_scales_by_inverse_pixels() {
        let hw = 4;
        let pair = Tensor::from_fn(&[hw, hw], |i| (i as f64 * 0.7).sin()).unwrap();
        let unary = Tensor::zeros(&[hw]);
        let values = Tensor::from_fn(&[2, hw], |i| (i as f64).cos()).unwrap();
        let weights = Tensor::from_fn(&[2, hw], |i| 1.0 - i as f64 * 0.2).unwrap();
        let prod = coupling_form(&pair, &unary, &values, &weights, true).unwrap();
        let expect = tensor::scale(&prod.d_attn, 0.25).unwrap();
        assert!(prod.d_pair.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn coupling_uniform_pairwise_scales_unary() {
        let hw = 5;
        let pair = Tensor::zeros(&[hw, hw]);
        let unary = Tensor::from_fn(&[hw], |i| i as f64 * 0.3).unwrap();
        let values = Tensor::from_fn(&[3, hw], |i| (i as f64 * 0.4).sin()).unwrap();
        let weights = Tensor::from_fn(&[3, hw], |i| (i as f64 * 0.9).cos()).unwrap();
        let prod = coupling_form(&pair, &unary, &values, &weights, true).unwrap();
        let colsum = tensor::col_sums(&prod.d_attn).unwrap();
        for j in 0..hw {
            assert!((prod.d_unary.data()[j] - colsum.data()[j] / hw as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn coupling_probe_on_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = BlockParams::init(4, Variant::NL, &mut rng).unwrap();
        let x =
            FeatureMap::new(Tensor::from_fn(&[4, 3, 3], |_| rng.sample(StandardNormal)).unwrap())
                .unwrap();
        let c = coupling_gradient_probe(&x, &p).unwrap();
        assert!(c.relations_hold(), "{c:?}");
    }

    #[test]
    fn suite_names_unique() {
        let names: Vec<_> = suites().iter().map(|s| s.name).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn small_suites_pass() {
        let cfg = SuiteConfig {
            seed: 7,
            instances: Some(12),
        };
        for s in suites() {
            if s.name == "prop1-maximum" {
                continue;
            }
            let r = s.execute(&cfg).unwrap();
            assert!(r.pass, "{r:?}");
            assert!(r.instances_tested > 0);
        }
    }
}
