//! State-space sequence primitives.
//!
//! The continuous system h'(t) = A h(t) + B x(t), y(t) = C h(t) is
//! discretised with a zero-order hold on A and an Euler rule on B:
//! Ā = exp(Δ·A) elementwise (A diagonal), B̄ = Δ·B. A is parameterised as
//! −exp(a_log), so it is strictly negative and |Ā| < 1 whenever Δ > 0.
//!
//! Three evaluation routes are provided and must agree:
//!   * the sequential recurrence ([`scan_sequential`], [`selective_scan`]),
//!   * the pre-computed LTI convolution kernel ([`lti_kernel`] + [`lti_conv`])
//!     for time-invariant systems,
//!   * the chunked associative decomposition ([`scan_chunked`]): a chunk-local
//!     scan plus prefix products of Ā applied to the inter-chunk state carry.
//!
//! [`Mamba2Layer`] assembles the selective scan into a trainable layer:
//! one input projection produces the inner stream, B, C, the gate stream, and
//! the per-head step sizes in parallel; the inner/B/C streams pass through a
//! depthwise causal short convolution and SiLU before the scan; the scan
//! output is gated by SiLU of the gate stream and projected back out.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::ops::{self, softplus_scalar};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::{Error, Real, Result};

/// One field of a discrete system: either shared across time or per-step.
#[derive(Debug, Clone)]
enum TimeParam {
    Shared(Vec<Real>),
    PerStep { data: Vec<Real> },
}

impl TimeParam {
    fn at(&self, t: usize, n: usize) -> &[Real] {
        match self {
            TimeParam::Shared(v) => v,
            TimeParam::PerStep { data } => &data[t * n..(t + 1) * n],
        }
    }
    fn is_shared(&self) -> bool {
        matches!(self, TimeParam::Shared(_))
    }
}

/// A discretised diagonal state-space system with a single input channel and
/// an n-dimensional state. Fields may be shared over time (LTI) or per-step.
#[derive(Debug, Clone)]
pub struct DiscreteSsm {
    state_dim: usize,
    a_bar: TimeParam,
    b_bar: TimeParam,
    c: TimeParam,
}

impl DiscreteSsm {
    /// Assemble a system from raw discrete parameters. Each field is either
    /// length n (shared) or length T·n (per-step).
    pub fn from_parts(
        state_dim: usize,
        a_bar: Vec<Real>,
        b_bar: Vec<Real>,
        c: Vec<Real>,
        steps: Option<usize>,
    ) -> Result<DiscreteSsm> {
        let wrap = |v: Vec<Real>, name: &str| -> Result<TimeParam> {
            if v.len() == state_dim {
                Ok(TimeParam::Shared(v))
            } else if let Some(t) = steps {
                if v.len() == t * state_dim {
                    Ok(TimeParam::PerStep { data: v })
                } else {
                    Err(Error::contract(format!(
                        "{name} must have length n or T*n, got {}",
                        v.len()
                    )))
                }
            } else {
                Err(Error::contract(format!(
                    "{name} has per-step length {} but no step count was given",
                    v.len()
                )))
            }
        };
        Ok(DiscreteSsm {
            state_dim,
            a_bar: wrap(a_bar, "a_bar")?,
            b_bar: wrap(b_bar, "b_bar")?,
            c: wrap(c, "c")?,
        })
    }

    /// Replace the readout vector C (shared across time).
    pub fn with_readout(mut self, c: Vec<Real>) -> Result<DiscreteSsm> {
        if c.len() != self.state_dim {
            return Err(Error::contract(format!(
                "readout must have length {}, got {}",
                self.state_dim,
                c.len()
            )));
        }
        self.c = TimeParam::Shared(c);
        Ok(self)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn is_time_invariant(&self) -> bool {
        self.a_bar.is_shared() && self.b_bar.is_shared() && self.c.is_shared()
    }

    pub fn a_bar_at(&self, t: usize) -> &[Real] {
        self.a_bar.at(t, self.state_dim)
    }
}

/// Discretise a_log/Δ/B into Ā = exp(Δ·A) with A = −exp(a_log), B̄ = Δ·B.
///
/// `a_log` has length n. `delta` holds one step size per time step (length 1
/// yields a shared, time-invariant system). `b` is length n (shared) or T·n
/// (per-step). The readout C defaults to ones; set it with
/// [`DiscreteSsm::with_readout`].
pub fn discretize(a_log: &[Real], delta: &[Real], b: &[Real]) -> Result<DiscreteSsm> {
    let n = a_log.len();
    if delta.iter().any(|&d| d < 0.0) {
        return Err(Error::contract("discretize requires delta >= 0"));
    }
    let a: Vec<Real> = a_log.iter().map(|&l| -l.exp()).collect();
    let steps = delta.len();
    let per_step_b = b.len() == steps * n && steps > 1;
    if b.len() != n && !per_step_b {
        return Err(Error::contract(format!(
            "b must have length n={n} or T*n={}, got {}",
            steps * n,
            b.len()
        )));
    }
    let mut a_bar = vec![0.0; steps * n];
    let mut b_bar = vec![0.0; steps * n];
    for t in 0..steps {
        for j in 0..n {
            a_bar[t * n + j] = (delta[t] * a[j]).exp();
            let bj = if per_step_b { b[t * n + j] } else { b[j] };
            b_bar[t * n + j] = delta[t] * bj;
        }
    }
    let steps = if steps == 1 { None } else { Some(steps) };
    DiscreteSsm::from_parts(n, a_bar, b_bar, vec![1.0; n], steps)
}

/// Run the recurrence h_t = Ā_t ⊙ h_{t−1} + B̄_t·x_t, y_t = ⟨C_t, h_t⟩ from
/// h₀ = 0 over a scalar input sequence.
pub fn scan_sequential(d: &DiscreteSsm, x: &[Real]) -> Vec<Real> {
    let n = d.state_dim;
    let mut h = vec![0.0; n];
    let mut y = Vec::with_capacity(x.len());
    for (t, &xt) in x.iter().enumerate() {
        let a = d.a_bar.at(t, n);
        let b = d.b_bar.at(t, n);
        let c = d.c.at(t, n);
        let mut yt = 0.0;
        for j in 0..n {
            h[j] = a[j] * h[j] + b[j] * xt;
            yt += c[j] * h[j];
        }
        y.push(yt);
    }
    y
}

/// Impulse response K̄ = (C·B̄, C·Ā·B̄, C·Ā²·B̄, …) of a time-invariant system.
pub fn lti_kernel(d: &DiscreteSsm, length: usize) -> Result<Vec<Real>> {
    if !d.is_time_invariant() {
        return Err(Error::contract("lti_kernel requires a time-invariant system"));
    }
    let n = d.state_dim;
    let a = d.a_bar.at(0, n);
    let mut state: Vec<Real> = d.b_bar.at(0, n).to_vec();
    let c = d.c.at(0, n);
    let mut kernel = Vec::with_capacity(length);
    for _ in 0..length {
        kernel.push(c.iter().zip(&state).map(|(ci, si)| ci * si).sum());
        for j in 0..n {
            state[j] *= a[j];
        }
    }
    Ok(kernel)
}

/// Causal convolution y_t = Σ_ℓ K̄_ℓ · x_{t−ℓ}; equals [`scan_sequential`]
/// when the kernel spans the sequence.
pub fn lti_conv(kernel: &[Real], x: &[Real]) -> Vec<Real> {
    let mut y = vec![0.0; x.len()];
    for t in 0..x.len() {
        let span = kernel.len().min(t + 1);
        let mut s = 0.0;
        for l in 0..span {
            s += kernel[l] * x[t - l];
        }
        y[t] = s;
    }
    y
}

/// Parameters of a selective (input-dependent) scan over p channels with an
/// n-dimensional state per channel and per-head step sizes.
///
/// B_t, C_t and Δ_t are produced from the input at each step:
/// B_t = x_tᵀ·w_b + b_bias ∈ Rⁿ, C_t likewise, and
/// Δ_t = softplus(x_tᵀ·w_delta + delta_bias) ∈ R^H, shared by the p/H
/// channels of each head.
#[derive(Debug, Clone)]
pub struct SsmCoreParams {
    pub state_dim: usize,
    pub channel_dim: usize,
    pub n_heads: usize,
    pub a_log: Vec<Real>,      // n
    pub w_delta: Vec<Real>,    // p × H
    pub delta_bias: Vec<Real>, // H, pre-softplus
    pub w_b: Vec<Real>,        // p × n
    pub b_bias: Vec<Real>,     // n
    pub w_c: Vec<Real>,        // p × n
    pub c_bias: Vec<Real>,     // n
}

impl SsmCoreParams {
    pub fn validate(&self) -> Result<()> {
        let (n, p, h) = (self.state_dim, self.channel_dim, self.n_heads);
        if h == 0 || p % h != 0 {
            return Err(Error::config(format!(
                "channels {p} not divisible by {h} heads"
            )));
        }
        let checks = [
            (self.a_log.len(), n, "a_log"),
            (self.w_delta.len(), p * h, "w_delta"),
            (self.delta_bias.len(), h, "delta_bias"),
            (self.w_b.len(), p * n, "w_b"),
            (self.b_bias.len(), n, "b_bias"),
            (self.w_c.len(), p * n, "w_c"),
            (self.c_bias.len(), n, "c_bias"),
        ];
        for (got, want, name) in checks {
            if got != want {
                return Err(Error::config(format!(
                    "{name}: expected {want} values, got {got}"
                )));
            }
        }
        Ok(())
    }

    /// Random small parameters for tests and demos.
    pub fn random(
        rng: &mut ChaCha8Rng,
        state_dim: usize,
        channel_dim: usize,
        n_heads: usize,
    ) -> SsmCoreParams {
        let mut gen = |len: usize, scale: Real| -> Vec<Real> {
            (0..len)
                .map(|_| (rng.gen::<f64>() as Real * 2.0 - 1.0) * scale)
                .collect()
        };
        SsmCoreParams {
            state_dim,
            channel_dim,
            n_heads,
            a_log: a_log_init(state_dim),
            w_delta: gen(channel_dim * n_heads, 0.2),
            delta_bias: gen(n_heads, 0.5),
            w_b: gen(channel_dim * state_dim, 0.3),
            b_bias: gen(state_dim, 0.3),
            w_c: gen(channel_dim * state_dim, 0.3),
            c_bias: gen(state_dim, 0.3),
        }
    }

    /// Per-step Δ (T×H, post-softplus), B (T×n), C (T×n) from inputs x (T×p).
    pub fn project(&self, x: &[Real], t_len: usize) -> (Vec<Real>, Vec<Real>, Vec<Real>) {
        let (n, p, hh) = (self.state_dim, self.channel_dim, self.n_heads);
        let mut delta = vec![0.0; t_len * hh];
        let mut b = vec![0.0; t_len * n];
        let mut c = vec![0.0; t_len * n];
        for t in 0..t_len {
            let xt = &x[t * p..(t + 1) * p];
            for e in 0..hh {
                let mut s = self.delta_bias[e];
                for (i, &xi) in xt.iter().enumerate() {
                    s += xi * self.w_delta[i * hh + e];
                }
                delta[t * hh + e] = softplus_scalar(s);
            }
            for j in 0..n {
                let mut sb = self.b_bias[j];
                let mut sc = self.c_bias[j];
                for (i, &xi) in xt.iter().enumerate() {
                    sb += xi * self.w_b[i * n + j];
                    sc += xi * self.w_c[i * n + j];
                }
                b[t * n + j] = sb;
                c[t * n + j] = sc;
            }
        }
        (delta, b, c)
    }
}

/// Log-uniform a_log so that −A spans [1, n].
pub fn a_log_init(n: usize) -> Vec<Real> {
    (0..n)
        .map(|j| {
            if n == 1 {
                0.0
            } else {
                (j as Real / (n - 1) as Real) * (n as Real).ln()
            }
        })
        .collect()
}

/// Core time-varying recurrence shared by every scan route.
///
/// delta: T×H (post-softplus), b/c: T×n, x: T×p, a: n (negative diagonal).
/// Returns y (T×p) and, when `keep_states` is set, the state history
/// h (T×p×n).
#[allow(clippy::too_many_arguments)]
fn scan_core(
    a: &[Real],
    delta: &[Real],
    b: &[Real],
    c: &[Real],
    x: &[Real],
    t_len: usize,
    p: usize,
    n: usize,
    n_heads: usize,
    keep_states: bool,
) -> (Vec<Real>, Vec<Real>) {
    let per_head = p / n_heads;
    let mut h = vec![0.0; p * n];
    let mut states = if keep_states {
        vec![0.0; t_len * p * n]
    } else {
        Vec::new()
    };
    let mut y = vec![0.0; t_len * p];
    let mut a_bar = vec![0.0; n_heads * n];
    for t in 0..t_len {
        for e in 0..n_heads {
            let dt = delta[t * n_heads + e];
            for j in 0..n {
                a_bar[e * n + j] = (dt * a[j]).exp();
            }
        }
        let bt = &b[t * n..(t + 1) * n];
        let ct = &c[t * n..(t + 1) * n];
        for i in 0..p {
            let e = i / per_head;
            let dt = delta[t * n_heads + e];
            let xi = x[t * p + i];
            let hi = &mut h[i * n..(i + 1) * n];
            let ab = &a_bar[e * n..(e + 1) * n];
            let mut yt = 0.0;
            for j in 0..n {
                hi[j] = ab[j] * hi[j] + dt * bt[j] * xi;
                yt += ct[j] * hi[j];
            }
            y[t * p + i] = yt;
        }
        if keep_states {
            states[t * p * n..(t + 1) * p * n].copy_from_slice(&h);
        }
    }
    (y, states)
}

/// Time-varying selective scan: B_t, C_t, Δ_t computed from the input via the
/// parameter projections, then the per-step recurrence. x is T×p row-major.
pub fn selective_scan(params: &SsmCoreParams, x: &[Real], t_len: usize) -> Result<Vec<Real>> {
    Ok(selective_scan_with_states(params, x, t_len)?.0)
}

/// Selective scan that also returns the state history (T×p×n), for stability
/// analysis and tests.
pub fn selective_scan_with_states(
    params: &SsmCoreParams,
    x: &[Real],
    t_len: usize,
) -> Result<(Vec<Real>, Vec<Real>)> {
    params.validate()?;
    let (n, p) = (params.state_dim, params.channel_dim);
    if x.len() != t_len * p {
        return Err(Error::contract(format!(
            "x must be T*p = {} values, got {}",
            t_len * p,
            x.len()
        )));
    }
    let (delta, b, c) = params.project(x, t_len);
    let a: Vec<Real> = params.a_log.iter().map(|&l| -l.exp()).collect();
    Ok(scan_core(
        &a, &delta, &b, &c, x, t_len, p, n, params.n_heads, true,
    ))
}

/// Blockwise associative evaluation of the selective scan.
///
/// Each chunk is scanned locally from a zero state; the inter-chunk carry is
/// applied through the chunk's running prefix product of Ā. Agrees with
/// [`selective_scan`] to ~1e-10 for every chunk size.
pub fn scan_chunked(
    params: &SsmCoreParams,
    x: &[Real],
    t_len: usize,
    chunk: usize,
) -> Result<Vec<Real>> {
    params.validate()?;
    if chunk == 0 {
        return Err(Error::contract("chunk size must be >= 1"));
    }
    let (n, p) = (params.state_dim, params.channel_dim);
    if x.len() != t_len * p {
        return Err(Error::contract(format!(
            "x must be T*p = {} values, got {}",
            t_len * p,
            x.len()
        )));
    }
    let n_heads = params.n_heads;
    let per_head = p / n_heads;
    let (delta, b, c) = params.project(x, t_len);
    let a: Vec<Real> = params.a_log.iter().map(|&l| -l.exp()).collect();

    let mut carry = vec![0.0; p * n]; // state entering the current chunk
    let mut y = vec![0.0; t_len * p];
    let mut local = vec![0.0; p * n]; // chunk-local scan from zero state
    let mut prefix = vec![0.0; n_heads * n]; // running ∏ Ā within the chunk
    let mut a_bar = vec![0.0; n_heads * n];

    let mut start = 0;
    while start < t_len {
        let end = (start + chunk).min(t_len);
        local.iter_mut().for_each(|v| *v = 0.0);
        prefix.iter_mut().for_each(|v| *v = 1.0);
        for t in start..end {
            for e in 0..n_heads {
                let dt = delta[t * n_heads + e];
                for j in 0..n {
                    let ab = (dt * a[j]).exp();
                    a_bar[e * n + j] = ab;
                    prefix[e * n + j] *= ab;
                }
            }
            let bt = &b[t * n..(t + 1) * n];
            let ct = &c[t * n..(t + 1) * n];
            for i in 0..p {
                let e = i / per_head;
                let dt = delta[t * n_heads + e];
                let xi = x[t * p + i];
                let li = &mut local[i * n..(i + 1) * n];
                let ab = &a_bar[e * n..(e + 1) * n];
                let pf = &prefix[e * n..(e + 1) * n];
                let cy = &carry[i * n..(i + 1) * n];
                let mut yt = 0.0;
                for j in 0..n {
                    li[j] = ab[j] * li[j] + dt * bt[j] * xi;
                    // carried prefix term + chunk-local term
                    yt += ct[j] * (pf[j] * cy[j] + li[j]);
                }
                y[t * p + i] = yt;
            }
        }
        // Merge: carry ← prefix·carry + local.
        for i in 0..p {
            let e = i / per_head;
            for j in 0..n {
                carry[i * n + j] = prefix[e * n + j] * carry[i * n + j] + local[i * n + j];
            }
        }
        start = end;
    }
    Ok(y)
}

fn grad_or_zeros(t: &Tensor) -> Vec<Real> {
    t.grad().unwrap_or_else(|| vec![0.0; t.numel()])
}

/// Differentiable selective scan over a batch.
///
/// a_log: (n), delta: (B,T,H) post-softplus, b/c: (B,T,n), x: (B,T,p).
/// Output y: (B,T,p). The backward pass replays the recurrence adjoints from
/// the saved state history.
pub fn ssd_scan(
    tape: &Tape,
    a_log: &Tensor,
    delta: &Tensor,
    b: &Tensor,
    c: &Tensor,
    x: &Tensor,
) -> crate::tensor::Result<Tensor> {
    let xs = x.shape();
    let ds = delta.shape();
    let bs = b.shape();
    if xs.len() != 3 || ds.len() != 3 || bs.len() != 3 || c.shape() != bs {
        return Err(TensorError::ShapeMismatch {
            op: "ssd_scan",
            detail: format!("x {xs:?}, delta {ds:?}, b {bs:?}, c {:?}", c.shape()),
        });
    }
    let (batch, t_len, p) = (xs[0], xs[1], xs[2]);
    let n = bs[2];
    let n_heads = ds[2];
    if ds[0] != batch || ds[1] != t_len || bs[0] != batch || bs[1] != t_len {
        return Err(TensorError::ShapeMismatch {
            op: "ssd_scan",
            detail: format!("batch/time disagree: x {xs:?}, delta {ds:?}, b {bs:?}"),
        });
    }
    if a_log.shape() != [n] || n_heads == 0 || p % n_heads != 0 {
        return Err(TensorError::InvalidArgument {
            op: "ssd_scan",
            detail: format!(
                "a_log {:?} vs n={n}; channels {p} must divide into {n_heads} heads",
                a_log.shape()
            ),
        });
    }
    let per_head = p / n_heads;
    let a: Vec<Real> = a_log.data().iter().map(|&l| -l.exp()).collect();
    let needs_grad =
        tape.is_active() && [a_log, delta, b, c, x].iter().any(|t| t.requires_grad());

    let mut y = vec![0.0; batch * t_len * p];
    let mut states = if needs_grad {
        vec![0.0; batch * t_len * p * n]
    } else {
        Vec::new()
    };
    {
        let dd = delta.data();
        let bd = b.data();
        let cd = c.data();
        let xd = x.data();
        for bi in 0..batch {
            let (yb, sb) = scan_core(
                &a,
                &dd[bi * t_len * n_heads..(bi + 1) * t_len * n_heads],
                &bd[bi * t_len * n..(bi + 1) * t_len * n],
                &cd[bi * t_len * n..(bi + 1) * t_len * n],
                &xd[bi * t_len * p..(bi + 1) * t_len * p],
                t_len,
                p,
                n,
                n_heads,
                needs_grad,
            );
            y[bi * t_len * p..(bi + 1) * t_len * p].copy_from_slice(&yb);
            if needs_grad {
                states[bi * t_len * p * n..(bi + 1) * t_len * p * n].copy_from_slice(&sb);
            }
        }
    }
    let out = Tensor::from_vec(&[batch, t_len, p], y)?;
    if needs_grad {
        out.set_requires_grad(true);
        let (a_log_t, delta_t, b_t, c_t, x_t, out_t) = (
            a_log.clone(),
            delta.clone(),
            b.clone(),
            c.clone(),
            x.clone(),
            out.clone(),
        );
        tape.record("ssd_scan", move || {
            let dy = grad_or_zeros(&out_t);
            let dd = delta_t.to_vec();
            let bd = b_t.to_vec();
            let cd = c_t.to_vec();
            let xd = x_t.to_vec();
            let mut d_delta = vec![0.0; dd.len()];
            let mut d_b = vec![0.0; bd.len()];
            let mut d_c = vec![0.0; cd.len()];
            let mut d_x = vec![0.0; xd.len()];
            let mut d_a = vec![0.0; n];
            let mut a_bar = vec![0.0; n_heads * n];
            let mut abar_next = vec![0.0; n_heads * n];
            let mut d_abar = vec![0.0; n_heads * n];
            let mut dh = vec![0.0; p * n];
            let mut dh_next = vec![0.0; p * n];
            for bi in 0..batch {
                let st = &states[bi * t_len * p * n..(bi + 1) * t_len * p * n];
                dh_next.iter_mut().for_each(|v| *v = 0.0);
                abar_next.iter_mut().for_each(|v| *v = 0.0);
                for t in (0..t_len).rev() {
                    let base = bi * t_len + t;
                    for e in 0..n_heads {
                        let dt = dd[base * n_heads + e];
                        for j in 0..n {
                            a_bar[e * n + j] = (dt * a[j]).exp();
                        }
                    }
                    let bt = &bd[base * n..(base + 1) * n];
                    let ct = &cd[base * n..(base + 1) * n];
                    d_abar.iter_mut().for_each(|v| *v = 0.0);
                    for i in 0..p {
                        let e = i / per_head;
                        let dt = dd[base * n_heads + e];
                        let g = dy[base * p + i];
                        let xi = xd[base * p + i];
                        let h_t = &st[(t * p + i) * n..(t * p + i + 1) * n];
                        let dhi = &mut dh[i * n..(i + 1) * n];
                        let dhn = &dh_next[i * n..(i + 1) * n];
                        let abn = &abar_next[e * n..(e + 1) * n];
                        let mut d_dt = 0.0;
                        let mut d_xi = 0.0;
                        for j in 0..n {
                            // adjoint of h[t,i,j]
                            let v = g * ct[j] + abn[j] * dhn[j];
                            dhi[j] = v;
                            d_c[base * n + j] += g * h_t[j];
                            d_b[base * n + j] += v * dt * xi;
                            d_dt += v * bt[j] * xi;
                            d_xi += v * dt * bt[j];
                            if t > 0 {
                                d_abar[e * n + j] += v * st[((t - 1) * p + i) * n + j];
                            }
                        }
                        d_delta[base * n_heads + e] += d_dt;
                        d_x[base * p + i] += d_xi;
                    }
                    for e in 0..n_heads {
                        let dt = dd[base * n_heads + e];
                        for j in 0..n {
                            let g_ab = d_abar[e * n + j];
                            if g_ab != 0.0 {
                                let ab = a_bar[e * n + j];
                                d_delta[base * n_heads + e] += g_ab * a[j] * ab;
                                d_a[j] += g_ab * dt * ab;
                            }
                        }
                    }
                    std::mem::swap(&mut dh, &mut dh_next);
                    abar_next.copy_from_slice(&a_bar);
                }
            }
            if delta_t.requires_grad() {
                delta_t.accumulate_grad(&d_delta);
            }
            if b_t.requires_grad() {
                b_t.accumulate_grad(&d_b);
            }
            if c_t.requires_grad() {
                c_t.accumulate_grad(&d_c);
            }
            if x_t.requires_grad() {
                x_t.accumulate_grad(&d_x);
            }
            if a_log_t.requires_grad() {
                // dA/da_log = −exp(a_log) = A
                let da_log: Vec<Real> = d_a.iter().zip(&a).map(|(g, &aj)| g * aj).collect();
                a_log_t.accumulate_grad(&da_log);
            }
        });
    }
    Ok(out)
}

/// Depthwise causal 1-d convolution over (batch, T, channels) with kernel
/// (channels, width) and per-channel bias. The input is zero-padded on the
/// left, so position t never sees the future.
pub fn conv1d_causal(
    tape: &Tape,
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
) -> crate::tensor::Result<Tensor> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 3 || ws.len() != 2 || ws[0] != xs[2] || bias.shape() != [xs[2]] {
        return Err(TensorError::ShapeMismatch {
            op: "conv1d_causal",
            detail: format!("x {xs:?}, weight {ws:?}, bias {:?}", bias.shape()),
        });
    }
    let (batch, t_len, ch) = (xs[0], xs[1], xs[2]);
    let width = ws[1];
    let mut out = vec![0.0; batch * t_len * ch];
    {
        let xd = x.data();
        let wd = weight.data();
        let bd = bias.data();
        for bi in 0..batch {
            for t in 0..t_len {
                for ci in 0..ch {
                    let mut s = bd[ci];
                    for u in 0..width {
                        // weight index u reads input offset t−(width−1)+u
                        if t + u + 1 >= width {
                            let src = t + u + 1 - width;
                            s += wd[ci * width + u] * xd[(bi * t_len + src) * ch + ci];
                        }
                    }
                    out[(bi * t_len + t) * ch + ci] = s;
                }
            }
        }
    }
    let needs_grad = tape.is_active()
        && (x.requires_grad() || weight.requires_grad() || bias.requires_grad());
    let y = Tensor::from_vec(&[batch, t_len, ch], out)?;
    if needs_grad {
        y.set_requires_grad(true);
        let (x, weight, bias, y2) = (x.clone(), weight.clone(), bias.clone(), y.clone());
        tape.record("conv1d_causal", move || {
            let dy = grad_or_zeros(&y2);
            let (dx, dw, db) = {
                let xd = x.data();
                let wd = weight.data();
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wd.len()];
                let mut db = vec![0.0; ch];
                for bi in 0..batch {
                    for t in 0..t_len {
                        for ci in 0..ch {
                            let g = dy[(bi * t_len + t) * ch + ci];
                            if g == 0.0 {
                                continue;
                            }
                            db[ci] += g;
                            for u in 0..width {
                                if t + u + 1 >= width {
                                    let src = t + u + 1 - width;
                                    dw[ci * width + u] += g * xd[(bi * t_len + src) * ch + ci];
                                    dx[(bi * t_len + src) * ch + ci] += g * wd[ci * width + u];
                                }
                            }
                        }
                    }
                }
                (dx, dw, db)
            };
            if x.requires_grad() {
                x.accumulate_grad(&dx);
            }
            if weight.requires_grad() {
                weight.accumulate_grad(&dw);
            }
            if bias.requires_grad() {
                bias.accumulate_grad(&db);
            }
        });
    }
    Ok(y)
}

pub const DEFAULT_CONV_WIDTH: usize = 4;

/// Trainable Mamba-2 layer, public layout.
///
/// Per step, one input projection emits [inner, B, C, gate, Δ-heads]; the
/// [inner, B, C] streams take a depthwise causal conv and SiLU; Δ gets a
/// learned bias and softplus; the scan output picks up the per-channel skip
/// D ⊙ u, is gated by SiLU(gate), RMS-normalised, and projected back to
/// `hidden`. The residual connection belongs to the caller.
#[derive(Debug, Clone)]
pub struct Mamba2Layer {
    pub hidden: usize,
    pub inner: usize,
    pub state_dim: usize,
    pub n_heads: usize,
    pub conv_width: usize,
    pub in_proj: Tensor,
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub a_log: Tensor,
    pub delta_bias: Tensor,
    pub d_skip: Tensor,
    pub norm_gain: Tensor,
    pub out_proj: Tensor,
}

impl Mamba2Layer {
    /// Width of the in-projection output: inner + gate + 2n + Δ-heads.
    pub fn proj_width(inner: usize, state_dim: usize, n_heads: usize) -> usize {
        2 * inner + 2 * state_dim + n_heads
    }

    pub fn param_shapes(
        hidden: usize,
        inner: usize,
        state_dim: usize,
        n_heads: usize,
        conv_width: usize,
    ) -> Vec<(&'static str, Vec<usize>)> {
        let conv_ch = inner + 2 * state_dim;
        vec![
            (
                "in_proj",
                vec![hidden, Self::proj_width(inner, state_dim, n_heads)],
            ),
            ("conv_w", vec![conv_ch, conv_width]),
            ("conv_b", vec![conv_ch]),
            ("a_log", vec![state_dim]),
            ("delta_bias", vec![n_heads]),
            ("d_skip", vec![inner]),
            ("norm_gain", vec![inner]),
            ("out_proj", vec![inner, hidden]),
        ]
    }

    pub fn init(
        rng: &mut ChaCha8Rng,
        hidden: usize,
        inner: usize,
        state_dim: usize,
        n_heads: usize,
        conv_width: usize,
        init_std: Real,
    ) -> Result<Mamba2Layer> {
        if n_heads == 0 || inner % n_heads != 0 {
            return Err(Error::config(format!(
                "inner width {inner} not divisible by {n_heads} delta heads"
            )));
        }
        let conv_ch = inner + 2 * state_dim;
        let in_proj = Tensor::randn_param(
            rng,
            &[hidden, Self::proj_width(inner, state_dim, n_heads)],
            init_std,
        );
        let conv_w = Tensor::randn_param(rng, &[conv_ch, conv_width], init_std);
        let conv_b = Tensor::param(&[conv_ch], vec![0.0; conv_ch])?;
        let a_log = Tensor::param(&[state_dim], a_log_init(state_dim))?;
        // softplus(delta_bias) lands log-uniformly in [0.001, 0.1]
        let db: Vec<Real> = (0..n_heads)
            .map(|_| {
                let lo: Real = (0.001 as Real).ln();
                let hi: Real = (0.1 as Real).ln();
                let d = (lo + (hi - lo) * rng.gen::<f64>() as Real).exp();
                inverse_softplus(d)
            })
            .collect();
        let delta_bias = Tensor::param(&[n_heads], db)?;
        let d_skip = Tensor::param(&[inner], vec![1.0; inner])?;
        let norm_gain = Tensor::param(&[inner], vec![1.0; inner])?;
        let out_proj = Tensor::randn_param(rng, &[inner, hidden], init_std);
        Ok(Mamba2Layer {
            hidden,
            inner,
            state_dim,
            n_heads,
            conv_width,
            in_proj,
            conv_w,
            conv_b,
            a_log,
            delta_bias,
            d_skip,
            norm_gain,
            out_proj,
        })
    }

    pub fn named_params(&self) -> Vec<(&'static str, Tensor)> {
        vec![
            ("in_proj", self.in_proj.clone()),
            ("conv_w", self.conv_w.clone()),
            ("conv_b", self.conv_b.clone()),
            ("a_log", self.a_log.clone()),
            ("delta_bias", self.delta_bias.clone()),
            ("d_skip", self.d_skip.clone()),
            ("norm_gain", self.norm_gain.clone()),
            ("out_proj", self.out_proj.clone()),
        ]
    }

    /// x: (batch, T, hidden) → (batch, T, hidden).
    pub fn forward(&self, tape: &Tape, x: &Tensor) -> crate::tensor::Result<Tensor> {
        let (inner, n, heads) = (self.inner, self.state_dim, self.n_heads);
        let z = ops::matmul(tape, x, &self.in_proj)?;
        let conv_in = ops::slice_last(tape, &z, 0, inner + 2 * n)?;
        let gate = ops::slice_last(tape, &z, inner + 2 * n, inner)?;
        let delta_raw = ops::slice_last(tape, &z, 2 * inner + 2 * n, heads)?;
        let conv_out = conv1d_causal(tape, &conv_in, &self.conv_w, &self.conv_b)?;
        let conv_act = ops::silu(tape, &conv_out)?;
        let u = ops::slice_last(tape, &conv_act, 0, inner)?;
        let b = ops::slice_last(tape, &conv_act, inner, n)?;
        let c = ops::slice_last(tape, &conv_act, inner + n, n)?;
        let delta = ops::softplus(tape, &ops::add_bias(tape, &delta_raw, &self.delta_bias)?)?;
        let scanned = ssd_scan(tape, &self.a_log, &delta, &b, &c, &u)?;
        let skipped = ops::add(tape, &scanned, &ops::scale_channels(tape, &u, &self.d_skip)?)?;
        let gated = ops::mul(tape, &skipped, &ops::silu(tape, &gate)?)?;
        let normed = ops::rms_norm(tape, &gated, &self.norm_gain, 1e-5)?;
        ops::matmul(tape, &normed, &self.out_proj)
    }
}

/// Inverse of softplus: x such that ln(1+eˣ) = y.
pub fn inverse_softplus(y: Real) -> Real {
    // exp(y) − 1 underflows for small y; expm1 keeps it accurate.
    (y.exp_m1()).ln()
}
