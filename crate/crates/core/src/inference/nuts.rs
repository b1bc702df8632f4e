//! Multinomial no-U-turn Hamiltonian Monte Carlo with a diagonal metric.
//!
//! Trajectories are built by repeated doubling with the generalized U-turn
//! criterion checked across and between subtrees; states are drawn from the
//! trajectory by multinomial weighting (biased progressive sampling at the top
//! level, uniform progressive sampling inside subtrees). Warmup adapts the step
//! size by dual averaging and the inverse metric by windowed variance
//! estimation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::LogDensity;

const MAX_ENERGY_ERROR: f64 = 1000.0;

pub struct DualAverage {
    target: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    mu: f64,
    s_bar: f64,
    x_bar: f64,
    count: f64,
}

impl DualAverage {
    pub fn new(target: f64, step: f64) -> Self {
        DualAverage {
            target,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            mu: (10.0 * step).ln(),
            s_bar: 0.0,
            x_bar: 0.0,
            count: 0.0,
        }
    }

    pub fn restart(&mut self, step: f64) {
        self.mu = (10.0 * step).ln();
        self.s_bar = 0.0;
        self.x_bar = 0.0;
        self.count = 0.0;
    }

    /// Feeds one acceptance statistic; returns the next step size to try.
    pub fn learn(&mut self, accept_stat: f64) -> f64 {
        self.count += 1.0;
        let stat = accept_stat.min(1.0);
        let eta = 1.0 / (self.count + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - stat);
        let x = self.mu - self.s_bar * self.count.sqrt() / self.gamma;
        let x_eta = self.count.powf(-self.kappa);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    pub fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Stan-style warmup schedule: a fast initial buffer, doubling slow windows
/// for metric estimation, and a fast terminal buffer.
struct Windows {
    warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window_end: usize,
    counter: usize,
}

impl Windows {
    fn new(warmup: usize) -> Self {
        let (mut init, mut term, mut base) = (75usize, 50usize, 25usize);
        if warmup < 20 {
            init = warmup;
            term = 0;
            base = 0;
        } else if init + term + base > warmup {
            init = (0.15 * warmup as f64) as usize;
            term = (0.1 * warmup as f64) as usize;
            base = warmup - (init + term);
        }
        Windows {
            warmup,
            init_buffer: init,
            term_buffer: term,
            window_size: base,
            next_window_end: (init + base).saturating_sub(1),
            counter: 0,
        }
    }

    fn in_slow_window(&self) -> bool {
        self.window_size > 0
            && self.counter >= self.init_buffer
            && self.counter < self.warmup - self.term_buffer
            && self.counter != self.warmup
    }

    fn at_window_end(&self) -> bool {
        self.window_size > 0 && self.counter == self.next_window_end && self.counter != self.warmup
    }

    fn advance_window(&mut self) {
        let last = self.warmup - self.term_buffer - 1;
        if self.next_window_end == last {
            return;
        }
        self.window_size *= 2;
        self.next_window_end = self.counter + self.window_size;
        if self.next_window_end != last && self.next_window_end + 2 * self.window_size >= self.warmup - self.term_buffer {
            self.next_window_end = last;
        }
    }
}

/// Welford accumulator for per-coordinate variance.
struct VarianceEstimator {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl VarianceEstimator {
    fn new(dim: usize) -> Self {
        VarianceEstimator {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / self.n;
            *s += d * (v - *m);
        }
    }

    /// Regularized variance, shrunk toward 1e-3 as in Stan.
    fn regularized(&self) -> Vec<f64> {
        let n = self.n;
        self.m2
            .iter()
            .map(|s| {
                let var = s / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }

    fn restart(&mut self) {
        self.n = 0.0;
        self.mean.iter_mut().for_each(|m| *m = 0.0);
        self.m2.iter_mut().for_each(|m| *m = 0.0);
    }
}

#[derive(Clone, Debug)]
struct State {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TransitionStats {
    pub accept_stat: f64,
    pub n_leapfrog: usize,
    pub depth: usize,
    pub divergent: bool,
}

/// Sampler settings for one chain.
#[derive(Clone, Debug)]
pub struct ChainSettings {
    pub warmup: usize,
    pub draws: usize,
    pub target_accept: f64,
    pub max_depth: usize,
    pub seed: u64,
    pub chain: usize,
    /// Initial values drawn uniform(-init_radius, init_radius).
    pub init_radius: f64,
}

#[derive(Clone, Debug)]
pub struct ChainOutput {
    /// Post-warmup unconstrained draws, one vector per iteration.
    pub draws: Vec<Vec<f64>>,
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    pub mean_accept_stat: f64,
    pub mean_tree_depth: f64,
    pub max_depth_hits: usize,
    pub leapfrogs: usize,
}

struct Sampler<'a, D: LogDensity> {
    target: &'a D,
    inv_metric: Vec<f64>,
    step: f64,
    max_depth: usize,
    rng: ChaCha8Rng,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl<D: LogDensity> Sampler<'_, D> {
    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p
            .iter()
            .zip(&self.inv_metric)
            .map(|(pi, m)| pi * pi * m)
            .sum::<f64>()
    }

    fn hamiltonian(&self, s: &State) -> f64 {
        let h = -s.logp + self.kinetic(&s.p);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(a, m)| a * m).collect()
    }

    fn sample_momentum(&mut self, s: &mut State) {
        for (pi, m) in s.p.iter_mut().zip(&self.inv_metric) {
            let z: f64 = self.rng.sample(StandardNormal);
            *pi = z / m.sqrt();
        }
    }

    fn leapfrog(&self, s: &mut State, eps: f64) {
        for (p, g) in s.p.iter_mut().zip(&s.grad) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in s.q.iter_mut().zip(&s.p).zip(&self.inv_metric) {
            *q += eps * m * p;
        }
        s.logp = self.target.logp_grad(&s.q, &mut s.grad);
        if !s.logp.is_finite() {
            s.logp = f64::NEG_INFINITY;
        }
        for (p, g) in s.p.iter_mut().zip(&s.grad) {
            *p += 0.5 * eps * g;
        }
    }

    /// Doubles/halves the step size until a single leapfrog step crosses an
    /// acceptance probability of 0.8.
    fn init_step_size(&mut self, current: &State) {
        let mut s = current.clone();
        self.sample_momentum(&mut s);
        let h0 = self.hamiltonian(&s);
        self.leapfrog(&mut s, self.step);
        let delta = h0 - self.hamiltonian(&s);
        let direction = if delta > 0.8f64.ln() { 1 } else { -1 };
        for _ in 0..100 {
            let mut s = current.clone();
            self.sample_momentum(&mut s);
            let h0 = self.hamiltonian(&s);
            self.leapfrog(&mut s, self.step);
            let delta = h0 - self.hamiltonian(&s);
            if direction == 1 && !(delta > 0.8f64.ln()) {
                break;
            }
            if direction == -1 && !(delta < 0.8f64.ln()) {
                break;
            }
            if direction == 1 {
                self.step *= 2.0;
            } else {
                self.step *= 0.5;
            }
            if self.step > 1e7 || self.step < 1e-12 {
                break;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &mut self,
        depth: usize,
        z: &mut State,
        z_propose: &mut State,
        p_sharp_beg: &mut Vec<f64>,
        p_sharp_end: &mut Vec<f64>,
        rho: &mut [f64],
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        h0: f64,
        eps: f64,
        n_leapfrog: &mut usize,
        log_sum_weight: &mut f64,
        sum_metro_prob: &mut f64,
        divergent: &mut bool,
    ) -> bool {
        if depth == 0 {
            self.leapfrog(z, eps);
            *n_leapfrog += 1;
            let h = self.hamiltonian(z);
            if h - h0 > MAX_ENERGY_ERROR {
                *divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, h0 - h);
            *sum_metro_prob += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            z_propose.clone_from(z);
            *p_sharp_beg = self.p_sharp(&z.p);
            p_sharp_end.clone_from(p_sharp_beg);
            for (r, p) in rho.iter_mut().zip(&z.p) {
                *r += p;
            }
            p_beg.clone_from(&z.p);
            p_end.clone_from(p_beg);
            return !*divergent;
        }

        let dim = z.q.len();
        let mut log_sum_weight_init = f64::NEG_INFINITY;
        let mut p_init_end = vec![0.0; dim];
        let mut p_sharp_init_end = vec![0.0; dim];
        let mut rho_init = vec![0.0; dim];
        let valid_init = self.build_tree(
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            h0,
            eps,
            n_leapfrog,
            &mut log_sum_weight_init,
            sum_metro_prob,
            divergent,
        );
        if !valid_init {
            return false;
        }

        let mut z_propose_final = z.clone();
        let mut log_sum_weight_final = f64::NEG_INFINITY;
        let mut p_final_beg = vec![0.0; dim];
        let mut p_sharp_final_beg = vec![0.0; dim];
        let mut rho_final = vec![0.0; dim];
        let valid_final = self.build_tree(
            depth - 1,
            z,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            h0,
            eps,
            n_leapfrog,
            &mut log_sum_weight_final,
            sum_metro_prob,
            divergent,
        );
        if !valid_final {
            return false;
        }

        let log_sum_weight_subtree = log_sum_exp(log_sum_weight_init, log_sum_weight_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, log_sum_weight_subtree);
        let accept = (log_sum_weight_final - log_sum_weight_subtree).exp();
        if self.rng.random::<f64>() < accept {
            std::mem::swap(z_propose, &mut z_propose_final);
        }

        let rho_subtree: Vec<f64> = rho_init.iter().zip(&rho_final).map(|(a, b)| a + b).collect();
        for (r, s) in rho.iter_mut().zip(&rho_subtree) {
            *r += s;
        }
        let mut persist = u_turn_ok(p_sharp_beg, p_sharp_end, &rho_subtree);
        let rho_ext: Vec<f64> = rho_init.iter().zip(&p_final_beg).map(|(a, b)| a + b).collect();
        persist &= u_turn_ok(p_sharp_beg, &p_sharp_final_beg, &rho_ext);
        let rho_ext: Vec<f64> = rho_final.iter().zip(&p_init_end).map(|(a, b)| a + b).collect();
        persist &= u_turn_ok(&p_sharp_init_end, p_sharp_end, &rho_ext);
        persist
    }

    fn transition(&mut self, current: &mut State) -> TransitionStats {
        self.sample_momentum(current);
        let dim = current.q.len();
        let h0 = self.hamiltonian(current);

        let mut z_fwd = current.clone();
        let mut z_bck = current.clone();
        let mut z_sample = current.clone();
        let mut z_propose = current.clone();

        let mut p_fwd_fwd = current.p.clone();
        let mut p_sharp_fwd_fwd = self.p_sharp(&current.p);
        let mut p_fwd_bck = current.p.clone();
        let mut p_sharp_fwd_bck = p_sharp_fwd_fwd.clone();
        let mut p_bck_fwd = current.p.clone();
        let mut p_sharp_bck_fwd = p_sharp_fwd_fwd.clone();
        let mut p_bck_bck = current.p.clone();
        let mut p_sharp_bck_bck = p_sharp_fwd_fwd.clone();

        let mut rho = current.p.clone();
        let mut log_sum_weight = 0.0;
        let mut n_leapfrog = 0;
        let mut sum_metro_prob = 0.0;
        let mut depth = 0;
        let mut divergent = false;

        while depth < self.max_depth {
            let mut rho_fwd = vec![0.0; dim];
            let mut rho_bck = vec![0.0; dim];
            let mut log_sum_weight_subtree = f64::NEG_INFINITY;
            let valid = if self.rng.random::<f64>() > 0.5 {
                rho_bck.clone_from(&rho);
                p_bck_fwd.clone_from(&p_fwd_bck);
                p_sharp_bck_fwd.clone_from(&p_sharp_fwd_bck);
                self.build_tree(
                    depth,
                    &mut z_fwd,
                    &mut z_propose,
                    &mut p_sharp_fwd_bck,
                    &mut p_sharp_fwd_fwd,
                    &mut rho_fwd,
                    &mut p_fwd_bck,
                    &mut p_fwd_fwd,
                    h0,
                    self.step,
                    &mut n_leapfrog,
                    &mut log_sum_weight_subtree,
                    &mut sum_metro_prob,
                    &mut divergent,
                )
            } else {
                rho_fwd.clone_from(&rho);
                p_fwd_bck.clone_from(&p_bck_fwd);
                p_sharp_fwd_bck.clone_from(&p_sharp_bck_fwd);
                self.build_tree(
                    depth,
                    &mut z_bck,
                    &mut z_propose,
                    &mut p_sharp_bck_fwd,
                    &mut p_sharp_bck_bck,
                    &mut rho_bck,
                    &mut p_bck_fwd,
                    &mut p_bck_bck,
                    h0,
                    -self.step,
                    &mut n_leapfrog,
                    &mut log_sum_weight_subtree,
                    &mut sum_metro_prob,
                    &mut divergent,
                )
            };
            if !valid {
                break;
            }
            depth += 1;

            if log_sum_weight_subtree > log_sum_weight {
                z_sample.clone_from(&z_propose);
            } else {
                let accept = (log_sum_weight_subtree - log_sum_weight).exp();
                if self.rng.random::<f64>() < accept {
                    z_sample.clone_from(&z_propose);
                }
            }
            log_sum_weight = log_sum_exp(log_sum_weight, log_sum_weight_subtree);

            for ((r, b), f) in rho.iter_mut().zip(&rho_bck).zip(&rho_fwd) {
                *r = b + f;
            }
            let mut persist = u_turn_ok(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
            let rho_ext: Vec<f64> = rho_bck.iter().zip(&p_fwd_bck).map(|(a, b)| a + b).collect();
            persist &= u_turn_ok(&p_sharp_bck_bck, &p_sharp_fwd_bck, &rho_ext);
            let rho_ext: Vec<f64> = rho_fwd.iter().zip(&p_bck_fwd).map(|(a, b)| a + b).collect();
            persist &= u_turn_ok(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &rho_ext);
            if !persist {
                break;
            }
        }

        *current = z_sample;
        TransitionStats {
            accept_stat: if n_leapfrog > 0 {
                sum_metro_prob / n_leapfrog as f64
            } else {
                0.0
            },
            n_leapfrog,
            depth,
            divergent,
        }
    }
}

fn u_turn_ok(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Derives the per-chain generator from (seed, chain index).
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64 + 1);
    rng
}

/// Runs one chain: warmup with adaptation, then `draws` post-warmup
/// transitions.
pub fn run_chain<D: LogDensity>(target: &D, settings: &ChainSettings) -> Result<ChainOutput> {
    let dim = target.dim();
    let mut rng = chain_rng(settings.seed, settings.chain);

    let mut current = None;
    for _ in 0..100 {
        let q: Vec<f64> = (0..dim)
            .map(|_| rng.random_range(-settings.init_radius..=settings.init_radius))
            .collect();
        let mut grad = vec![0.0; dim];
        let logp = target.logp_grad(&q, &mut grad);
        if logp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            current = Some(State {
                q,
                p: vec![0.0; dim],
                grad,
                logp,
            });
            break;
        }
    }
    let mut current = current.ok_or_else(|| {
        Error::Sampler(format!(
            "chain {}: no finite initial point after 100 attempts",
            settings.chain
        ))
    })?;

    let mut sampler = Sampler {
        target,
        inv_metric: vec![1.0; dim],
        step: 1.0,
        max_depth: settings.max_depth,
        rng,
    };
    sampler.init_step_size(&current);
    let mut adapt = DualAverage::new(settings.target_accept, sampler.step);
    let mut windows = Windows::new(settings.warmup);
    let mut estimator = VarianceEstimator::new(dim);
    let mut warmup_divergences = 0;

    for _ in 0..settings.warmup {
        let stats = sampler.transition(&mut current);
        warmup_divergences += stats.divergent as usize;
        sampler.step = adapt.learn(stats.accept_stat);
        if windows.in_slow_window() {
            estimator.add(&current.q);
        }
        if windows.at_window_end() {
            windows.advance_window();
            sampler.inv_metric = estimator.regularized();
            estimator.restart();
            sampler.init_step_size(&current);
            adapt.restart(sampler.step);
        }
        windows.counter += 1;
    }
    if settings.warmup > 0 {
        sampler.step = adapt.final_step();
    }

    let mut out = ChainOutput {
        draws: Vec::with_capacity(settings.draws),
        divergences: 0,
        warmup_divergences,
        step_size: sampler.step,
        inv_metric: sampler.inv_metric.clone(),
        mean_accept_stat: 0.0,
        mean_tree_depth: 0.0,
        max_depth_hits: 0,
        leapfrogs: 0,
    };
    for _ in 0..settings.draws {
        let stats = sampler.transition(&mut current);
        out.divergences += stats.divergent as usize;
        out.mean_accept_stat += stats.accept_stat;
        out.mean_tree_depth += stats.depth as f64;
        out.max_depth_hits += (stats.depth >= settings.max_depth) as usize;
        out.leapfrogs += stats.n_leapfrog;
        out.draws.push(current.q.clone());
    }
    if settings.draws > 0 {
        out.mean_accept_stat /= settings.draws as f64;
        out.mean_tree_depth /= settings.draws as f64;
    }
    Ok(out)
}
