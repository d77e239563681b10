use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::EvalDataset;
use crate::error::{Error, Result};
use crate::formula::ModelLayout;
use crate::rng::{rng_for, Rng};

use super::diagnostics::{ess, split_rhat, SamplerDiagnostics};
use super::draws::PosteriorDraws;
use super::model::{LogDensity, ModelData, Standardized};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcOptions {
    pub chains: usize,
    pub warmup: usize,
    pub max_depth: usize,
    pub target_accept: f64,
    /// Half-width of the uniform initialization box on the unconstrained scale.
    pub init_radius: f64,
    pub cache_loglik: bool,
}

impl Default for McmcOptions {
    fn default() -> Self {
        McmcOptions {
            chains: 4,
            warmup: 1000,
            max_depth: 10,
            target_accept: 0.8,
            init_radius: 2.0,
            cache_loglik: false,
        }
    }
}

const MAX_DELTA_H: f64 = 1000.0;

#[derive(Clone)]
struct Point {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    lp: f64,
}

struct DualAveraging {
    mu: f64,
    s_bar: f64,
    x_bar: f64,
    counter: f64,
    delta: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps: f64, delta: f64) -> Self {
        DualAveraging {
            mu: (10.0 * eps).ln(),
            s_bar: 0.0,
            x_bar: 0.0,
            counter: 0.0,
            delta,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        self.counter += 1.0;
        let stat = accept.min(1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - stat);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let x_eta = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Windowed diagonal metric adaptation schedule.
struct Windows {
    warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window: usize,
    counter: usize,
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Windows {
    fn new(warmup: usize, dim: usize) -> Self {
        let (mut init, mut term, mut base) = (75, 50, 25);
        if warmup < 20 {
            (init, term, base) = (warmup, 0, 0);
        } else if init + term + base > warmup {
            init = (0.15 * warmup as f64) as usize;
            term = (0.1 * warmup as f64) as usize;
            base = warmup - init - term;
        }
        Windows {
            warmup,
            init_buffer: init,
            term_buffer: term,
            window_size: base,
            next_window: (init + base).saturating_sub(1),
            counter: 0,
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn in_window(&self) -> bool {
        self.window_size > 0
            && self.counter >= self.init_buffer
            && self.counter < self.warmup - self.term_buffer
            && self.counter != self.warmup
    }

    fn end_of_window(&self) -> bool {
        self.window_size > 0 && self.counter == self.next_window && self.counter != self.warmup
    }

    fn compute_next_window(&mut self) {
        let last = self.warmup - self.term_buffer - 1;
        if self.next_window == last {
            return;
        }
        self.window_size *= 2;
        self.next_window = self.counter + self.window_size;
        if self.next_window != last && self.next_window + 2 * self.window_size >= self.warmup - self.term_buffer {
            self.next_window = last;
        }
    }

    /// Records a warmup draw; returns a new inverse metric at the end of a window.
    fn observe(&mut self, q: &[f64]) -> Option<Vec<f64>> {
        if self.in_window() {
            self.n += 1.0;
            for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(q) {
                let d = x - *m;
                *m += d / self.n;
                *s += d * (x - *m);
            }
        }
        let mut out = None;
        if self.end_of_window() {
            self.compute_next_window();
            let n = self.n;
            out = Some(
                self.m2
                    .iter()
                    .map(|s| {
                        let var = if n > 1.0 { s / (n - 1.0) } else { 1.0 };
                        (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                    })
                    .collect(),
            );
            self.n = 0.0;
            self.mean.iter_mut().for_each(|v| *v = 0.0);
            self.m2.iter_mut().for_each(|v| *v = 0.0);
        }
        self.counter += 1;
        out
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

/// Ends of a trajectory: momentum and sharp momentum (`M^-1 p`).
struct Edge {
    p: Vec<f64>,
    p_sharp: Vec<f64>,
}

struct Sampler<'a, L: LogDensity> {
    target: &'a L,
    inv_metric: Vec<f64>,
    eps: f64,
    max_depth: usize,
    rng: Rng,
    n_leapfrog: usize,
    sum_metro: f64,
    divergent: bool,
}

impl<L: LogDensity> Sampler<'_, L> {
    fn evaluate(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        let lp = self.target.log_density_grad(q, grad);
        if lp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            lp
        } else {
            f64::NEG_INFINITY
        }
    }

    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(&self.inv_metric).map(|(p, m)| p * p * m).sum::<f64>()
    }

    fn hamiltonian(&self, z: &Point) -> f64 {
        -z.lp + self.kinetic(&z.p)
    }

    fn sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(p, m)| p * m).collect()
    }

    fn leapfrog(&self, z: &mut Point, eps: f64) {
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(&self.inv_metric) {
            *q += eps * m * p;
        }
        z.lp = self.evaluate(&z.q, &mut z.grad);
        if z.lp.is_finite() {
            for (p, g) in z.p.iter_mut().zip(&z.grad) {
                *p += 0.5 * eps * g;
            }
        }
    }

    fn sample_momentum(&mut self, z: &mut Point) {
        for (p, m) in z.p.iter_mut().zip(&self.inv_metric) {
            let n: f64 = StandardNormal.sample(&mut self.rng);
            *p = n / m.sqrt();
        }
    }

    /// Heuristic initial step size: double or halve until the one-step
    /// acceptance crosses 0.8.
    fn init_stepsize(&mut self, z: &Point) {
        let mut z = z.clone();
        self.sample_momentum(&mut z);
        let h0 = self.hamiltonian(&z);
        let start = z.clone();
        self.leapfrog(&mut z, self.eps);
        let delta = |h: f64| if h.is_nan() { f64::NEG_INFINITY } else { h0 - h };
        let direction = if delta(self.hamiltonian(&z)) > 0.8f64.ln() { 1 } else { -1 };
        for _ in 0..100 {
            z = start.clone();
            self.sample_momentum(&mut z);
            let h0 = self.hamiltonian(&z);
            self.leapfrog(&mut z, self.eps);
            let d = {
                let h = self.hamiltonian(&z);
                if h.is_nan() {
                    f64::NEG_INFINITY
                } else {
                    h0 - h
                }
            };
            if direction == 1 && !(d > 0.8f64.ln()) {
                break;
            }
            if direction == -1 && !(d < 0.8f64.ln()) {
                break;
            }
            self.eps = if direction == 1 { 2.0 * self.eps } else { 0.5 * self.eps };
            if self.eps > 1e7 || self.eps < 1e-12 {
                break;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &mut self,
        depth: usize,
        z: &mut Point,
        propose: &mut Point,
        beg: &mut Edge,
        end: &mut Edge,
        rho: &mut Vec<f64>,
        h0: f64,
        sign: f64,
        log_sum_weight: &mut f64,
    ) -> bool {
        if depth == 0 {
            self.leapfrog(z, sign * self.eps);
            self.n_leapfrog += 1;
            let mut h = self.hamiltonian(z);
            if h.is_nan() {
                h = f64::INFINITY;
            }
            if h - h0 > MAX_DELTA_H {
                self.divergent = true;
            }
            *log_sum_weight = log_add(*log_sum_weight, h0 - h);
            self.sum_metro += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            *propose = z.clone();
            let ps = self.sharp(&z.p);
            *beg = Edge {
                p: z.p.clone(),
                p_sharp: ps.clone(),
            };
            *end = Edge { p: z.p.clone(), p_sharp: ps };
            for (r, p) in rho.iter_mut().zip(&z.p) {
                *r += p;
            }
            return !self.divergent;
        }
        let dim = z.q.len();
        let zeros = || Edge {
            p: vec![0.0; dim],
            p_sharp: vec![0.0; dim],
        };

        let mut init_end = zeros();
        let mut rho_init = vec![0.0; dim];
        let mut lsw_init = f64::NEG_INFINITY;
        if !self.build_tree(depth - 1, z, propose, beg, &mut init_end, &mut rho_init, h0, sign, &mut lsw_init) {
            return false;
        }

        let mut propose_final = z.clone();
        let mut final_beg = zeros();
        let mut rho_final = vec![0.0; dim];
        let mut lsw_final = f64::NEG_INFINITY;
        if !self.build_tree(
            depth - 1,
            z,
            &mut propose_final,
            &mut final_beg,
            end,
            &mut rho_final,
            h0,
            sign,
            &mut lsw_final,
        ) {
            return false;
        }

        let lsw_subtree = log_add(lsw_init, lsw_final);
        *log_sum_weight = log_add(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree || self.rng.random::<f64>() < (lsw_final - lsw_subtree).exp() {
            *propose = propose_final;
        }

        let rho_subtree = add(&rho_init, &rho_final);
        for (r, s) in rho.iter_mut().zip(&rho_subtree) {
            *r += s;
        }
        let mut persist = criterion(&beg.p_sharp, &end.p_sharp, &rho_subtree);
        persist &= criterion(&beg.p_sharp, &final_beg.p_sharp, &add(&rho_init, &final_beg.p));
        persist &= criterion(&init_end.p_sharp, &end.p_sharp, &add(&rho_final, &init_end.p));
        persist
    }

    /// One NUTS transition from `z`. Returns the new point, the mean
    /// Metropolis acceptance statistic and the tree depth reached.
    fn transition(&mut self, z: &Point) -> (Point, f64, usize) {
        let dim = z.q.len();
        let mut z0 = z.clone();
        self.sample_momentum(&mut z0);
        self.n_leapfrog = 0;
        self.sum_metro = 0.0;
        self.divergent = false;
        let h0 = self.hamiltonian(&z0);

        let mut z_fwd = z0.clone();
        let mut z_bck = z0.clone();
        let ps = self.sharp(&z0.p);
        // Outer edges of the whole trajectory and the inner edges adjacent to
        // the most recent merge.
        let mut fwd_fwd = Edge {
            p: z0.p.clone(),
            p_sharp: ps.clone(),
        };
        let mut fwd_bck = Edge {
            p: z0.p.clone(),
            p_sharp: ps.clone(),
        };
        let mut bck_fwd = Edge {
            p: z0.p.clone(),
            p_sharp: ps.clone(),
        };
        let mut bck_bck = Edge {
            p: z0.p.clone(),
            p_sharp: ps,
        };
        let mut rho = z0.p.clone();
        let mut log_sum_weight = 0.0;
        let mut sample = z0.clone();
        let mut depth = 0;

        while depth < self.max_depth {
            let mut rho_fwd = vec![0.0; dim];
            let mut rho_bck = vec![0.0; dim];
            let mut lsw_subtree = f64::NEG_INFINITY;
            let mut propose = z0.clone();
            let valid;
            if self.rng.random::<f64>() > 0.5 {
                rho_bck.clone_from(&rho);
                // The old trajectory becomes the backward part; its forward
                // edge is the old outermost forward point.
                bck_fwd = Edge {
                    p: fwd_fwd.p.clone(),
                    p_sharp: fwd_fwd.p_sharp.clone(),
                };
                valid = self.build_tree(
                    depth,
                    &mut z_fwd,
                    &mut propose,
                    &mut fwd_bck,
                    &mut fwd_fwd,
                    &mut rho_fwd,
                    h0,
                    1.0,
                    &mut lsw_subtree,
                );
            } else {
                rho_fwd.clone_from(&rho);
                fwd_bck = Edge {
                    p: bck_bck.p.clone(),
                    p_sharp: bck_bck.p_sharp.clone(),
                };
                valid = self.build_tree(
                    depth,
                    &mut z_bck,
                    &mut propose,
                    &mut bck_fwd,
                    &mut bck_bck,
                    &mut rho_bck,
                    h0,
                    -1.0,
                    &mut lsw_subtree,
                );
            }
            if !valid {
                break;
            }
            depth += 1;
            if lsw_subtree > log_sum_weight || self.rng.random::<f64>() < (lsw_subtree - log_sum_weight).exp() {
                sample = propose;
            }
            log_sum_weight = log_add(log_sum_weight, lsw_subtree);
            rho = add(&rho_bck, &rho_fwd);
            let mut persist = criterion(&bck_bck.p_sharp, &fwd_fwd.p_sharp, &rho);
            persist &= criterion(&bck_bck.p_sharp, &fwd_bck.p_sharp, &add(&rho_bck, &fwd_bck.p));
            persist &= criterion(&bck_fwd.p_sharp, &fwd_fwd.p_sharp, &add(&rho_fwd, &bck_fwd.p));
            if !persist {
                break;
            }
        }
        let accept = if self.n_leapfrog > 0 {
            self.sum_metro / self.n_leapfrog as f64
        } else {
            0.0
        };
        (sample, accept, depth)
    }
}

/// Output of one chain on the unconstrained scale.
pub(crate) struct Chain {
    pub draws: Vec<Vec<f64>>,
    pub accept: f64,
    pub divergences: usize,
    pub depth_hits: usize,
    pub step_size: f64,
}

/// Runs one adaptive NUTS chain against an arbitrary differentiable target.
pub(crate) fn run_chain<L: LogDensity>(
    target: &L,
    n_draws: usize,
    opts: &McmcOptions,
    mut rng: Rng,
) -> Result<Chain> {
    let dim = target.dim();
    let mut grad = vec![0.0; dim];
    let mut q = vec![0.0; dim];
    let mut lp = f64::NEG_INFINITY;
    for _ in 0..100 {
        for v in q.iter_mut() {
            *v = rng.random_range(-opts.init_radius..=opts.init_radius);
        }
        lp = target.log_density_grad(&q, &mut grad);
        if lp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            break;
        }
    }
    if !lp.is_finite() {
        return Err(Error::Data("could not find a finite initial point for the sampler".into()));
    }
    let mut sampler = Sampler {
        target,
        inv_metric: vec![1.0; dim],
        eps: 1.0,
        max_depth: opts.max_depth,
        rng,
        n_leapfrog: 0,
        sum_metro: 0.0,
        divergent: false,
    };
    let mut z = Point {
        q,
        p: vec![0.0; dim],
        grad,
        lp,
    };
    sampler.init_stepsize(&z);
    let mut da = DualAveraging::new(sampler.eps, opts.target_accept);
    let mut windows = Windows::new(opts.warmup, dim);
    for _ in 0..opts.warmup {
        let (next, accept, _) = sampler.transition(&z);
        z = next;
        sampler.eps = da.update(accept);
        if let Some(metric) = windows.observe(&z.q) {
            sampler.inv_metric = metric;
            sampler.init_stepsize(&z);
            da = DualAveraging::new(sampler.eps, opts.target_accept);
        }
    }
    if opts.warmup > 0 {
        sampler.eps = da.final_step();
    }
    let mut out = Chain {
        draws: Vec::with_capacity(n_draws),
        accept: 0.0,
        divergences: 0,
        depth_hits: 0,
        step_size: sampler.eps,
    };
    for _ in 0..n_draws {
        let (next, accept, depth) = sampler.transition(&z);
        z = next;
        out.accept += accept / n_draws.max(1) as f64;
        out.divergences += sampler.divergent as usize;
        out.depth_hits += (depth >= opts.max_depth) as usize;
        out.draws.push(z.q.clone());
    }
    Ok(out)
}

/// Per-chain draw counts summing to `draws`.
fn split_draws(draws: usize, chains: usize) -> Vec<usize> {
    (0..chains).map(|c| draws / chains + usize::from(c < draws % chains)).collect()
}

/// Fits any model with multinomial NUTS, chains in parallel with independent
/// RNG streams derived from `(seed, chain)`; draws are concatenated by chain.
pub fn sample_mcmc(
    layout: &ModelLayout,
    d: &EvalDataset,
    draws: usize,
    seed: u64,
    opts: &McmcOptions,
) -> Result<(PosteriorDraws, SamplerDiagnostics)> {
    if opts.chains == 0 || draws < opts.chains {
        return Err(Error::Config("need at least one draw per chain".into()));
    }
    if !(opts.target_accept > 0.0 && opts.target_accept < 1.0) || opts.max_depth == 0 {
        return Err(Error::Config("invalid sampler options".into()));
    }
    let data = ModelData::new(layout, d)?;
    let target = Standardized::new(&data);
    let counts = split_draws(draws, opts.chains);
    let chains: Vec<Chain> = counts
        .par_iter()
        .enumerate()
        .map(|(c, &n)| run_chain(&target, n, opts, rng_for(seed, "nuts", c as u64)))
        .collect::<Result<_>>()?;

    let constrained: Vec<Vec<Vec<f64>>> = chains
        .iter()
        .map(|c| c.draws.iter().map(|q| data.constrain(&target.to_theta(q))).collect())
        .collect();
    let dim = data.params.dim();
    let mut max_rhat: f64 = 1.0;
    let mut min_ess = f64::INFINITY;
    for j in 0..dim {
        let series: Vec<Vec<f64>> = constrained
            .iter()
            .map(|c| c.iter().map(|v| v[j]).collect())
            .collect();
        let r = split_rhat(&series);
        if r.is_finite() {
            max_rhat = max_rhat.max(r);
        }
        let e = ess(&series);
        if e.is_finite() {
            min_ess = min_ess.min(e);
        }
    }
    let divergences: usize = chains.iter().map(|c| c.divergences).sum();
    let max_tree_depth_hits: usize = chains.iter().map(|c| c.depth_hits).sum();
    let mut warnings = Vec::new();
    if divergences > 0 {
        warnings.push(format!("{divergences} divergent transitions after warmup"));
    }
    if max_rhat > 1.05 {
        warnings.push(format!("split R-hat {max_rhat:.3} exceeds 1.05"));
    }
    if min_ess < 100.0 {
        warnings.push(format!("minimum effective sample size {min_ess:.0} is below 100"));
    }
    if max_tree_depth_hits > 0 {
        warnings.push(format!("{max_tree_depth_hits} transitions hit the maximum tree depth"));
    }
    let diag = SamplerDiagnostics {
        divergences,
        mean_accept: chains.iter().map(|c| c.accept).sum::<f64>() / chains.len() as f64,
        max_tree_depth_hits,
        max_rhat,
        min_ess,
        step_sizes: chains.iter().map(|c| c.step_size).collect(),
        warnings,
    };

    let values: Vec<f64> = constrained.into_iter().flatten().flatten().collect();
    let mut out = PosteriorDraws::new(
        data.params.clone(),
        values,
        d.len(),
        layout.fingerprint().to_string(),
        d.content_hash(),
    )?;
    if opts.cache_loglik {
        out.set_loglik(super::cache_loglik(&data, &out))?;
    }
    Ok((out, diag))
}
