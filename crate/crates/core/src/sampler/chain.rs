//! One Metropolis-within-Gibbs chain.
//!
//! The kernel keeps a few caches so that a sweep never re-evaluates the full
//! posterior:
//!
//! * per-virus sums `Σ E·exp(φ)` make an intercept update O(1);
//! * a change to one virus column of one year's residual changes that year's
//!   quadratic form by `2 dᵀ Ω (R Λ)_{·v} + Λ_vv dᵀ Ω d`, which covers the φ
//!   blocks, `s_v` and the intercept/level shift move;
//! * with the residuals fixed, the prior quadratic form is `tr(Ω M)` with
//!   `M = Σ_t R_t Λ R_tᵀ` for the λ and ρ updates, and `tr(Λ S)` with
//!   `S = Σ_t R_tᵀ Ω R_t` for the Σ and Γ updates.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{cholesky_factor, DenseMatrix, LowerTriangularMatrix};
use crate::model::{
    build_omega, cell_index, log_posterior, proximity_matrix, Bounds, CountPanel, HyperParams,
    ModelState, ProximityKind, ProximitySpec, MONTHS,
};

use super::ChainConfig;

/// A random-walk block with its own adaptive scale.
#[derive(Clone, Debug)]
struct Block {
    name: String,
    log_scale: f64,
    target: f64,
    window_accepted: usize,
    window_proposed: usize,
    accepted: usize,
    proposed: usize,
}

impl Block {
    fn new(name: String, scale: f64, target: f64) -> Self {
        Self {
            name,
            log_scale: scale.ln(),
            target,
            window_accepted: 0,
            window_proposed: 0,
            accepted: 0,
            proposed: 0,
        }
    }

    fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    fn record(&mut self, accepted: bool, retained_phase: bool) {
        self.window_proposed += 1;
        self.window_accepted += accepted as usize;
        if retained_phase {
            self.proposed += 1;
            self.accepted += accepted as usize;
        }
    }

    /// Robbins–Monro step on the log scale toward the target acceptance rate.
    fn adapt(&mut self, round: usize) {
        if self.window_proposed > 0 {
            let rate = self.window_accepted as f64 / self.window_proposed as f64;
            let gain = 2.0 / (round as f64).sqrt();
            self.log_scale = (self.log_scale + gain * (rate - self.target)).clamp(-12.0, 4.0);
        }
        self.window_accepted = 0;
        self.window_proposed = 0;
    }
}

#[derive(Clone, Copy)]
struct BlockIds {
    alpha: usize,
    shift: usize,
    phi: usize,
    s: usize,
    lambda: usize,
    rho: usize,
    sigma: usize,
    gamma: usize,
}

/// Output of one chain.
#[derive(Clone, Debug)]
pub(crate) struct ChainOutput {
    pub draws: Vec<(usize, ModelState)>,
    pub accept_rates: Vec<(String, f64)>,
}

pub(crate) struct Chain<'a> {
    panel: &'a CountPanel,
    spec: ProximitySpec,
    hyper: HyperParams,
    config: &'a ChainConfig,
    update_rho: bool,
    state: ModelState,
    years: usize,
    viruses: usize,
    omega: DenseMatrix,
    omega_log_det: f64,
    cov_factor: LowerTriangularMatrix,
    precision: DenseMatrix,
    exp_sums: Vec<f64>,
    y_sums: Vec<f64>,
    precond: Vec<f64>,
    blocks: Vec<Block>,
    ids: BlockIds,
    rng: ChaCha8Rng,
}

fn logit_to_bounds(x: f64, b: Bounds) -> f64 {
    b.lo + (b.hi - b.lo) * crate::expected::logistic(x)
}

fn bounds_to_logit(u: f64, b: Bounds) -> f64 {
    let p = (u - b.lo) / (b.hi - b.lo);
    (p / (1.0 - p)).ln()
}

/// `log |du/dx|` for `u = lo + (hi − lo)·logistic(x)`.
fn logit_jacobian(u: f64, b: Bounds) -> f64 {
    ((u - b.lo) * (b.hi - u) / (b.hi - b.lo)).ln()
}

fn gamma_log_kernel(x: f64, shape: f64, rate: f64) -> f64 {
    (shape - 1.0) * x.ln() - rate * x
}

/// `tr((L Lᵀ)⁻¹ S)` for symmetric `S`.
fn trace_inverse_product(l: &LowerTriangularMatrix, s: &DenseMatrix) -> f64 {
    let n = l.dim();
    // X = L⁻¹ S column by column, then tr(L⁻ᵀ X) = Σ_j (L⁻ᵀ x_j)_j
    let mut trace = 0.0;
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| s[(i, j)]).collect();
        let x = l.solve(&col);
        trace += l.solve_transpose(&x)[j];
    }
    trace
}

fn precision_from_factor(l: &LowerTriangularMatrix) -> DenseMatrix {
    let n = l.dim();
    let mut p = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = l.gram_solve(&e);
        for i in 0..n {
            p[(i, j)] = col[i];
        }
    }
    DenseMatrix::from_fn(n, n, |i, j| 0.5 * (p[(i, j)] + p[(j, i)]))
}

impl<'a> Chain<'a> {
    pub fn new(
        panel: &'a CountPanel,
        spec: &ProximitySpec,
        hyper: &HyperParams,
        config: &'a ChainConfig,
        seed: u64,
    ) -> Result<Self> {
        use rand::SeedableRng;
        let mut state = ModelState::initial(panel);
        if let Some(rho) = config.fixed_rho {
            state.rho = rho;
        }
        let initial = log_posterior(&state, panel, spec, hyper);
        if !initial.is_finite() {
            return Err(Error::NonFiniteDensity(initial));
        }
        let (years, viruses) = (panel.years(), panel.viruses());
        let w = proximity_matrix(spec, state.rho)?;
        let omega = build_omega(&w, state.lambda)?;
        let omega_log_det = cholesky_factor(&omega)?.gram_log_det();
        let cov_factor = state.covariance_factor();
        let precision = precision_from_factor(&cov_factor);

        let mut y_sums = vec![0.0; viruses];
        for (i, &y) in panel.observed().iter().enumerate() {
            y_sums[i % viruses] += y as f64;
        }
        // data-only preconditioning keeps the φ proposal symmetric
        let precond = panel.observed().iter().map(|&y| 1.0 / (y as f64 + 5.0).sqrt()).collect();

        let scalar = config.target_accept;
        let vector = config.target_accept_vector;
        let mut blocks = Vec::new();
        let group = |blocks: &mut Vec<Block>, names: Vec<String>, scale: f64, target: f64| {
            let first = blocks.len();
            blocks.extend(names.into_iter().map(|n| Block::new(n, scale, target)));
            first
        };
        let per_virus = |prefix: &str| (0..viruses).map(|v| format!("{prefix}[{}]", v + 1)).collect::<Vec<_>>();
        let phi_names = (0..years)
            .flat_map(|t| (0..viruses).map(move |v| format!("phi[{},{}]", t + 1, v + 1)))
            .collect();
        let gamma_names = (1..viruses)
            .flat_map(|i| (0..i).map(move |j| format!("gamma[{},{}]", i + 1, j + 1)))
            .collect();
        let ids = BlockIds {
            alpha: group(&mut blocks, per_virus("alpha"), 0.05, scalar),
            shift: group(&mut blocks, per_virus("shift"), 0.1, scalar),
            phi: group(&mut blocks, phi_names, 0.7, vector),
            s: group(&mut blocks, per_virus("s"), 1.0, scalar),
            lambda: group(&mut blocks, vec!["lambda".into()], 1.0, scalar),
            rho: group(&mut blocks, vec!["rho".into()], 1.0, scalar),
            sigma: group(&mut blocks, per_virus("sigma"), 0.2, scalar),
            gamma: group(&mut blocks, gamma_names, 0.2, scalar),
        };

        let update_rho = spec.kind == ProximityKind::Autoregressive
            && config.fixed_rho.is_none()
            && !config.frozen.rho;

        let mut chain = Self {
            panel,
            spec: *spec,
            hyper: *hyper,
            config,
            update_rho,
            state,
            years,
            viruses,
            omega,
            omega_log_det,
            cov_factor,
            precision,
            exp_sums: vec![0.0; viruses],
            y_sums,
            precond,
            blocks,
            ids,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        chain.refresh_exp_sums();
        Ok(chain)
    }

    fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    fn accept(&mut self, log_ratio: f64) -> bool {
        if log_ratio.is_nan() {
            return false;
        }
        log_ratio >= 0.0 || self.rng.random::<f64>().ln() < log_ratio
    }

    fn refresh_exp_sums(&mut self) {
        let v_count = self.viruses;
        self.exp_sums.iter_mut().for_each(|x| *x = 0.0);
        for (i, (&e, &phi)) in self.panel.expected().iter().zip(&self.state.phi).enumerate() {
            self.exp_sums[i % v_count] += e * phi.exp();
        }
    }

    /// `φ_t − s ∘ φ_{t−1}`, month-major.
    fn residual(&self, t: usize) -> Vec<f64> {
        let block = MONTHS * self.viruses;
        let cur = &self.state.phi[t * block..(t + 1) * block];
        if t == 0 {
            return cur.to_vec();
        }
        let prev = &self.state.phi[(t - 1) * block..t * block];
        cur.iter()
            .zip(prev)
            .enumerate()
            .map(|(i, (c, p))| c - self.state.s[i % self.viruses] * p)
            .collect()
    }

    /// Change in `rᵀ(Ω ⊗ Λ)r` when column `v` of the residual moves by `d`.
    fn column_delta(&self, r: &[f64], v: usize, d: &[f64]) -> f64 {
        let vc = self.viruses;
        let g: Vec<f64> = (0..MONTHS)
            .map(|m| (0..vc).map(|u| r[m * vc + u] * self.precision[(u, v)]).sum())
            .collect();
        let mut cross = 0.0;
        let mut own = 0.0;
        for m in 0..MONTHS {
            let row = self.omega.row(m);
            let og: f64 = row.iter().zip(&g).map(|(o, x)| o * x).sum();
            let od: f64 = row.iter().zip(d).map(|(o, x)| o * x).sum();
            cross += d[m] * og;
            own += d[m] * od;
        }
        2.0 * cross + self.precision[(v, v)] * own
    }

    fn update_alpha(&mut self, v: usize, post: bool) {
        let id = self.ids.alpha + v;
        let delta = self.blocks[id].scale() * self.normal();
        let old = self.state.alpha[v];
        let new = old + delta;
        let h = &self.hyper;
        let dll = self.y_sums[v] * delta - self.exp_sums[v] * (new.exp() - old.exp());
        let dprior = -0.5
            * (((new - h.alpha_prior_mean) / h.alpha_prior_sd).powi(2)
                - ((old - h.alpha_prior_mean) / h.alpha_prior_sd).powi(2));
        let ok = self.accept(dll + dprior);
        if ok {
            self.state.alpha[v] = new;
        }
        self.blocks[id].record(ok, post);
    }

    /// Moves `α_v` up and every `φ_·tv` down by the same amount; the likelihood is unchanged.
    fn update_shift(&mut self, v: usize, post: bool) {
        let id = self.ids.shift + v;
        let delta = self.blocks[id].scale() * self.normal();
        let mut dquad = 0.0;
        for t in 0..self.years {
            let c = if t == 0 { 1.0 } else { 1.0 - self.state.s[v] };
            if c == 0.0 {
                continue;
            }
            let r = self.residual(t);
            dquad += self.column_delta(&r, v, &[-delta * c; MONTHS]);
        }
        let h = &self.hyper;
        let old = self.state.alpha[v];
        let new = old + delta;
        let dprior = -0.5
            * (((new - h.alpha_prior_mean) / h.alpha_prior_sd).powi(2)
                - ((old - h.alpha_prior_mean) / h.alpha_prior_sd).powi(2));
        let ok = self.accept(dprior - 0.5 * dquad);
        if ok {
            self.state.alpha[v] = new;
            for t in 0..self.years {
                for m in 0..MONTHS {
                    self.state.phi[cell_index(m, t, v, self.viruses)] -= delta;
                }
            }
            self.exp_sums[v] *= (-delta).exp();
        }
        self.blocks[id].record(ok, post);
    }

    fn update_phi(&mut self, t: usize, v: usize, post: bool) {
        let id = self.ids.phi + t * self.viruses + v;
        let scale = self.blocks[id].scale();
        let vc = self.viruses;
        let mut d = [0.0; MONTHS];
        for (m, dm) in d.iter_mut().enumerate() {
            *dm = scale * self.precond[cell_index(m, t, v, vc)] * self.normal();
        }
        let ea = self.state.alpha[v].exp();
        let mut dll = 0.0;
        let mut dexp = 0.0;
        for (m, dm) in d.iter().enumerate() {
            let i = cell_index(m, t, v, vc);
            let e = self.panel.expected()[i];
            let phi = self.state.phi[i];
            let change = e * ((phi + dm).exp() - phi.exp());
            dll += self.panel.observed()[i] as f64 * dm - ea * change;
            dexp += change;
        }
        let mut dquad = self.column_delta(&self.residual(t), v, &d);
        if t + 1 < self.years {
            let s = self.state.s[v];
            if s != 0.0 {
                let next: Vec<f64> = d.iter().map(|x| -s * x).collect();
                dquad += self.column_delta(&self.residual(t + 1), v, &next);
            }
        }
        let ok = self.accept(dll - 0.5 * dquad);
        if ok {
            for (m, dm) in d.iter().enumerate() {
                self.state.phi[cell_index(m, t, v, vc)] += dm;
            }
            self.exp_sums[v] += dexp;
        }
        self.blocks[id].record(ok, post);
    }

    fn update_s(&mut self, v: usize, post: bool) {
        let id = self.ids.s + v;
        let b = self.hyper.s_bounds;
        let old = self.state.s[v];
        let x = bounds_to_logit(old, b);
        let new = logit_to_bounds(x + self.blocks[id].scale() * self.normal(), b);
        if !(new > b.lo && new < b.hi) {
            self.blocks[id].record(false, post);
            return;
        }
        let mut dquad = 0.0;
        for t in 1..self.years {
            let d: Vec<f64> = (0..MONTHS)
                .map(|m| -(new - old) * self.state.phi[cell_index(m, t - 1, v, self.viruses)])
                .collect();
            dquad += self.column_delta(&self.residual(t), v, &d);
        }
        let ok = self.accept(-0.5 * dquad + logit_jacobian(new, b) - logit_jacobian(old, b));
        if ok {
            self.state.s[v] = new;
        }
        self.blocks[id].record(ok, post);
    }

    /// `M = Σ_t R_t Λ R_tᵀ` (12 x 12).
    fn month_scatter(&self) -> DenseMatrix {
        let vc = self.viruses;
        let mut m_acc = DenseMatrix::zeros(MONTHS, MONTHS);
        for t in 0..self.years {
            let r = self.residual(t);
            let g: Vec<f64> = (0..MONTHS * vc)
                .map(|i| {
                    let (m, v) = (i / vc, i % vc);
                    (0..vc).map(|u| r[m * vc + u] * self.precision[(u, v)]).sum()
                })
                .collect();
            for a in 0..MONTHS {
                for b in 0..MONTHS {
                    m_acc[(a, b)] += (0..vc).map(|u| g[a * vc + u] * r[b * vc + u]).sum::<f64>();
                }
            }
        }
        m_acc
    }

    /// `S = Σ_t R_tᵀ Ω R_t` (V x V).
    fn virus_scatter(&self) -> DenseMatrix {
        let vc = self.viruses;
        let mut s_acc = DenseMatrix::zeros(vc, vc);
        for t in 0..self.years {
            let r = self.residual(t);
            for a in 0..MONTHS {
                for b in 0..MONTHS {
                    let o = self.omega[(a, b)];
                    if o == 0.0 {
                        continue;
                    }
                    for u in 0..vc {
                        let ru = o * r[a * vc + u];
                        for w in 0..vc {
                            s_acc[(u, w)] += ru * r[b * vc + w];
                        }
                    }
                }
            }
        }
        s_acc
    }

    fn frobenius(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        crate::linalg::dot(a.as_slice(), b.as_slice())
    }

    /// Updates λ and (when free) ρ, both of which only move Ω.
    fn update_omega_params(&mut self, post: bool) {
        let scatter = self.month_scatter();
        let weight = 0.5 * (self.years * self.viruses) as f64;
        let mut current_quad = Self::frobenius(&self.omega, &scatter);

        let frozen = self.config.frozen;
        let mut params = Vec::new();
        if !frozen.lambda {
            params.push(self.ids.lambda);
        }
        if self.update_rho {
            params.push(self.ids.rho);
        }
        for id in params {
            let is_lambda = id == self.ids.lambda;
            let b = if is_lambda { self.hyper.lambda_bounds } else { self.hyper.rho_bounds };
            let old = if is_lambda { self.state.lambda } else { self.state.rho };
            let x = bounds_to_logit(old, b);
            let new = logit_to_bounds(x + self.blocks[id].scale() * self.normal(), b);
            let (lambda, rho) = if is_lambda { (new, self.state.rho) } else { (self.state.lambda, new) };
            let proposal = (|| {
                if !(new > b.lo && new < b.hi) || !(lambda < 1.0) || !(rho > 0.0 && rho < 1.0) {
                    return None;
                }
                let w = proximity_matrix(&self.spec, rho).ok()?;
                let omega = build_omega(&w, lambda).ok()?;
                let log_det = cholesky_factor(&omega).ok()?.gram_log_det();
                Some((omega, log_det))
            })();
            let Some((omega, log_det)) = proposal else {
                self.blocks[id].record(false, post);
                continue;
            };
            let quad = Self::frobenius(&omega, &scatter);
            let log_ratio = weight * (log_det - self.omega_log_det) - 0.5 * (quad - current_quad)
                + logit_jacobian(new, b)
                - logit_jacobian(old, b);
            let ok = self.accept(log_ratio);
            if ok {
                if is_lambda {
                    self.state.lambda = new;
                } else {
                    self.state.rho = new;
                }
                self.omega = omega;
                self.omega_log_det = log_det;
                current_quad = quad;
            }
            self.blocks[id].record(ok, post);
        }
    }

    /// Updates each σ_v and each free Γ entry; all of them only move Λ.
    fn update_covariance_params(&mut self, post: bool) {
        let scatter = self.virus_scatter();
        let vc = self.viruses;
        let weight = 0.5 * (MONTHS * self.years) as f64;
        let mut current_trace = trace_inverse_product(&self.cov_factor, &scatter);
        let mut current_log_det = self.cov_factor.gram_log_det();
        let h = self.hyper;
        let frozen = self.config.frozen;

        let mut try_state = |chain: &mut Self, id: usize, candidate: ModelState, log_prior_and_jacobian: f64| {
            let factor = candidate.covariance_factor();
            let trace = trace_inverse_product(&factor, &scatter);
            let log_det = factor.gram_log_det();
            // year normalizer carries −(12/2) log det Λ⁻¹ per year
            let log_ratio = -weight * (log_det - current_log_det) - 0.5 * (trace - current_trace)
                + log_prior_and_jacobian;
            let ok = log_ratio.is_finite() && chain.accept(log_ratio);
            if ok {
                chain.state = candidate;
                chain.cov_factor = factor;
                current_trace = trace;
                current_log_det = log_det;
            }
            chain.blocks[id].record(ok, post);
        };

        if !frozen.sigma {
            for v in 0..vc {
                let id = self.ids.sigma + v;
                let old = self.state.sigma[v];
                let new = old * (self.blocks[id].scale() * self.normal()).exp();
                let mut candidate = self.state.clone();
                candidate.sigma[v] = new;
                let extra = gamma_log_kernel(new, h.sigma_prior_shape, h.sigma_prior_rate)
                    - gamma_log_kernel(old, h.sigma_prior_shape, h.sigma_prior_rate)
                    + (new.ln() - old.ln());
                try_state(self, id, candidate, extra);
            }
        }
        if !frozen.gamma {
            let mut id = self.ids.gamma;
            for i in 1..vc {
                for j in 0..i {
                    let old = self.state.gamma.get(i, j);
                    let new = old + self.blocks[id].scale() * self.normal();
                    let mut candidate = self.state.clone();
                    candidate.gamma.set(i, j, new);
                    let sd = h.gamma_entry_prior_sd;
                    let extra = -0.5 * ((new / sd).powi(2) - (old / sd).powi(2));
                    try_state(self, id, candidate, extra);
                    id += 1;
                }
            }
        }
        self.precision = precision_from_factor(&self.cov_factor);
    }

    fn sweep(&mut self, post: bool) {
        self.refresh_exp_sums();
        let frozen = self.config.frozen;
        for v in 0..self.viruses {
            if !frozen.alpha {
                self.update_alpha(v, post);
                if !frozen.phi {
                    self.update_shift(v, post);
                }
            }
        }
        if !frozen.phi {
            for t in 0..self.years {
                for v in 0..self.viruses {
                    self.update_phi(t, v, post);
                }
            }
        }
        if !frozen.s && self.years > 1 {
            for v in 0..self.viruses {
                self.update_s(v, post);
            }
        }
        if !frozen.lambda || self.update_rho {
            self.update_omega_params(post);
        }
        if !frozen.sigma || !frozen.gamma {
            self.update_covariance_params(post);
        }
    }

    pub fn run(mut self) -> ChainOutput {
        let cfg = self.config;
        let mut draws = Vec::with_capacity((cfg.n_iterations - cfg.burn_in) / cfg.thin);
        for iter in 1..=cfg.n_iterations {
            let post = iter > cfg.burn_in;
            self.sweep(post);
            if !post && iter % cfg.adapt_window == 0 {
                let round = iter / cfg.adapt_window;
                self.blocks.iter_mut().for_each(|b| b.adapt(round));
            }
            if post && (iter - cfg.burn_in) % cfg.thin == 0 {
                draws.push((iter, self.state.clone()));
            }
        }
        let accept_rates = self
            .blocks
            .iter()
            .filter(|b| b.proposed > 0)
            .map(|b| (b.name.clone(), b.accepted as f64 / b.proposed as f64))
            .collect();
        ChainOutput { draws, accept_rates }
    }
}
