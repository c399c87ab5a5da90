//! Losses, the adversarial schedule and the optimisation loop.
//!
//! One global step `t` always updates the discriminators (every
//! `discriminator_every` steps, by default every step) and updates the
//! generator only when `t % generator_every == 0`. Batch elements run on a
//! local worker pool; gradients come back in batch order and are summed in
//! that order, so runs are bit-reproducible for a fixed seed and worker
//! count independent of scheduling.

pub mod losses;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{take_suppressed_polar_grads, with_f32_rounding, Tensor};
use crate::datagen::sub_seed;
use crate::error::{Error, Result};
use crate::estimation::{fuse_cross_branch_tensor, pdsac_tensor, PdsacConfig};
use crate::geometry::{PointCloud, RigidTransform};
use crate::metrics::EdgeMode;
use crate::networks::{
    cloud_tensor, init_discriminators, init_generator, save_checkpoint, CheckpointMeta, Generator, NetworkConfig,
    ParamStore, Precision,
};

pub use losses::{
    loss_absolute, loss_relative, loss_transform, total_loss, AdversarialForm, LossBreakdown, ADV_WEIGHT,
};

pub const HISTORY_HEADER: &str = "step,abs,relative,cyc,adv,transform,total,disc_loss,wall_ms";
pub const GEN_PREFIX: &str = "gen.";
pub const DISC_PREFIX: &str = "disc.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanSchedule {
    pub generator_every: usize,
    pub discriminator_every: usize,
}

impl Default for GanSchedule {
    fn default() -> Self {
        Self { generator_every: 5, discriminator_every: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Overrides `epochs` when set: total number of global steps.
    pub max_steps: Option<usize>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub gan_schedule: GanSchedule,
    pub adversarial: AdversarialForm,
    pub edge_mode: EdgeMode,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub precision: Precision,
    /// Worker threads; `None` uses every core.
    pub workers: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            max_steps: None,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            gan_schedule: GanSchedule::default(),
            adversarial: AdversarialForm::default(),
            edge_mode: EdgeMode::default(),
            checkpoint_every: 0,
            precision: Precision::F64,
            workers: None,
        }
    }
}

fn cfg_err(key: &str, message: &str) -> Error {
    Error::Config { key: format!("train.{key}"), message: message.into() }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(cfg_err("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(cfg_err("batch_size", "must be positive"));
        }
        if self.max_steps == Some(0) {
            return Err(cfg_err("max_steps", "must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(cfg_err("learning_rate", "must be a positive real"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(cfg_err("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(cfg_err("beta2", "must lie in [0, 1)"));
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(cfg_err("adam_eps", "must be a positive real"));
        }
        if self.gan_schedule.generator_every == 0 {
            return Err(cfg_err("gan_schedule.generator_every", "must be at least 1"));
        }
        if self.gan_schedule.discriminator_every == 0 {
            return Err(cfg_err("gan_schedule.discriminator_every", "must be at least 1"));
        }
        if self.workers == Some(0) {
            return Err(cfg_err("workers", "must be positive"));
        }
        Ok(())
    }

    pub fn total_steps(&self, n_pairs: usize) -> usize {
        self.max_steps.unwrap_or_else(|| self.epochs * n_pairs.div_ceil(self.batch_size))
    }
}

/// One registration pair with its ground truth (`B = apply(A0, t_gt)` frames).
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub id: String,
    pub a: PointCloud,
    pub b: PointCloud,
    pub t_gt: RigidTransform,
}

/// Bias-corrected adaptive-moment optimiser over a whole [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = (0..store.len()).map(|i| vec![0.0; store.value(i).len()]).collect();
        Self { lr, beta1, beta2, eps, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.value_mut(i);
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// One logged generator step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: LossBreakdown,
    /// Discriminator loss of the same step, when it updated.
    pub disc_loss: Option<f64>,
    /// Milliseconds since training started.
    pub wall_ms: f64,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in rows {
        let l = &r.loss;
        let disc = r.disc_loss.map(|d| d.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{:.3}",
            r.step, l.abs, l.relative, l.cyc, l.adv, l.transform, l.total, disc, r.wall_ms
        );
    }
    out
}

/// Everything a training run needs besides the pairs.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub pdsac: PdsacConfig,
    /// Checkpoints, history and failure dumps go here when set.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub generator: ParamStore,
    pub discriminators: ParamStore,
    pub history: Vec<HistoryRow>,
    pub steps: usize,
    pub generator_updates: usize,
    /// Polar-factor gradients zeroed by the degeneracy guard.
    pub suppressed_grads: usize,
}

struct Cached {
    version: usize,
    a_g: Arc<Vec<f64>>,
    b_g: Arc<Vec<f64>>,
}

struct GenResult {
    loss: LossBreakdown,
    grads: Vec<Vec<f64>>,
    suppressed: usize,
}

struct DiscResult {
    loss: f64,
    grads: Vec<Vec<f64>>,
}

/// Seed for one pdsac call inside a training step.
fn pdsac_seed(seed: u64, step: usize, element: usize, branch: u64) -> u64 {
    sub_seed(sub_seed(seed, 1_000_000 + step as u64), element as u64 * 2 + branch)
}

/// Generator loss of one pair with every generator parameter trainable
/// and the discriminators fixed.
pub fn generator_loss_graph(
    gen: &crate::networks::Params,
    disc: &crate::networks::Params,
    cfg: &NetworkConfig,
    train: &TrainConfig,
    pdsac: &PdsacConfig,
    pair: &TrainPair,
    seeds: (u64, u64),
) -> Result<(Tensor, LossBreakdown)> {
    let (a, b) = (cloud_tensor(&pair.a), cloud_tensor(&pair.b));
    let g = Generator::new(cfg, gen);
    let out = g.forward(&a, &b)?;
    let a_g = out.a_g;
    let b_g = out.b_g.expect("both branches decoded");
    let abs = losses::absolute_tensor(&a, &b, &a_g, &b_g)?;
    let rel = losses::relative_tensor(&a, &a_g, &b, &b_g, train.edge_mode)?;
    let cyc = losses::emd_tensor(&g.branch(&a_g, &a)?, &a)?.add(&losses::emd_tensor(&g.branch(&b_g, &b)?, &b)?)?;
    let adv = losses::adversarial_g_tensor(disc, cfg, &a_g, &b_g, train.adversarial)?;
    let (t_a, _) = pdsac_tensor(&a, &a_g, pdsac.m, pdsac.k, seeds.0)?;
    let (t_b, _) = pdsac_tensor(&b, &b_g, pdsac.m, pdsac.k, seeds.1)?;
    let t_est = fuse_cross_branch_tensor(&t_a, &t_b)?;
    let tr = losses::transform_tensor_loss(&t_est, &pair.t_gt)?;
    let total = losses::total_tensor([&abs, &rel, &cyc, &adv, &tr])?;
    let loss = LossBreakdown {
        abs: abs.item(),
        relative: rel.item(),
        cyc: cyc.item(),
        adv: adv.item(),
        transform: tr.item(),
        total: total.item(),
    };
    Ok((total, loss))
}

fn generator_element(
    gen: &ParamStore,
    disc: &ParamStore,
    setup: &TrainSetup,
    pair: &TrainPair,
    seeds: (u64, u64),
) -> Result<GenResult> {
    with_f32_rounding(setup.train.precision == Precision::F32, || {
        take_suppressed_polar_grads();
        let gp = gen.leaves(|_| true);
        let dp = disc.leaves(|_| false);
        let (total, loss) = generator_loss_graph(&gp, &dp, &setup.network, &setup.train, &setup.pdsac, pair, seeds)?;
        total.backward()?;
        Ok(GenResult { loss, grads: gp.grads(), suppressed: take_suppressed_polar_grads() as usize })
    })
}

fn discriminator_element(disc: &ParamStore, setup: &TrainSetup, pair: &TrainPair, cached: &Cached) -> Result<DiscResult> {
    with_f32_rounding(setup.train.precision == Precision::F32, || {
        let n = setup.network.n_points;
        let dp = disc.leaves(|_| true);
        let a_g = Tensor::from_shared(cached.a_g.clone(), &[n, 3], false)?;
        let b_g = Tensor::from_shared(cached.b_g.clone(), &[n, 3], false)?;
        let loss = losses::discriminator_tensor(
            &dp,
            &setup.network,
            &cloud_tensor(&pair.a),
            &cloud_tensor(&pair.b),
            &a_g,
            &b_g,
        )?;
        loss.backward()?;
        Ok(DiscResult { loss: loss.item(), grads: dp.grads() })
    })
}

fn generate_cached(gen: &ParamStore, setup: &TrainSetup, pair: &TrainPair, version: usize) -> Result<Cached> {
    with_f32_rounding(setup.train.precision == Precision::F32, || {
        let gp = gen.leaves(|_| false);
        let out = Generator::new(&setup.network, &gp).forward(&cloud_tensor(&pair.a), &cloud_tensor(&pair.b))?;
        Ok(Cached {
            version,
            a_g: out.a_g.shared_values(),
            b_g: out.b_g.expect("both branches decoded").shared_values(),
        })
    })
}

/// Mean of per-element gradients, summed in element order.
fn mean_grads(per: Vec<Vec<Vec<f64>>>) -> Vec<Vec<f64>> {
    let n = per.len() as f64;
    let mut iter = per.into_iter();
    let mut acc = iter.next().expect("non-empty batch");
    for g in iter {
        for (a, b) in acc.iter_mut().zip(g) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
    for a in acc.iter_mut() {
        a.iter_mut().for_each(|x| *x /= n);
    }
    acc
}

/// Generator and discriminator parameters in one store, prefixed.
pub fn combined_store(gen: &ParamStore, disc: &ParamStore) -> Result<ParamStore> {
    let mut all = ParamStore::new();
    all.extend_prefixed(GEN_PREFIX, gen)?;
    all.extend_prefixed(DISC_PREFIX, disc)?;
    Ok(all)
}

pub fn checkpoint_meta(cfg: &NetworkConfig, step: usize, precision: Precision) -> CheckpointMeta {
    let config_json = cfg.canonical_json();
    let config_hash = crate::networks::config_hash(&config_json);
    CheckpointMeta { step, precision, config_json, config_hash }
}

/// Loads a training checkpoint and checks it against `cfg` when given.
pub fn load_trained(dir: &Path, cfg: Option<&NetworkConfig>) -> Result<(NetworkConfig, ParamStore, ParamStore)> {
    let (store, meta) = crate::networks::load_checkpoint(dir)?;
    let stored: NetworkConfig = serde_json::from_str(&meta.config_json)?;
    if let Some(cfg) = cfg {
        if cfg.hash() != stored.hash() {
            return Err(Error::Compatibility(format!(
                "checkpoint network config hash {} does not match configured {}",
                stored.hash(),
                cfg.hash()
            )));
        }
    }
    Ok((stored, store.strip_prefix(GEN_PREFIX), store.strip_prefix(DISC_PREFIX)))
}

#[derive(Serialize)]
struct FailureDump<'a> {
    step: usize,
    phase: &'a str,
    detail: &'a str,
    pairs: Vec<DumpPair<'a>>,
}

#[derive(Serialize)]
struct DumpPair<'a> {
    id: &'a str,
    a: Vec<f64>,
    b: Vec<f64>,
    t_gt: [f64; 16],
    loss: Option<LossBreakdown>,
}

fn non_finite(
    setup: &TrainSetup,
    step: usize,
    phase: &str,
    detail: String,
    batch: &[&TrainPair],
    losses: Option<&[LossBreakdown]>,
) -> Error {
    if let Some(dir) = &setup.out_dir {
        let dump = FailureDump {
            step,
            phase,
            detail: &detail,
            pairs: batch
                .iter()
                .enumerate()
                .map(|(j, p)| DumpPair {
                    id: &p.id,
                    a: p.a.to_flat(),
                    b: p.b.to_flat(),
                    t_gt: p.t_gt.to_row_major(),
                    loss: losses.map(|l| l[j]),
                })
                .collect(),
        };
        let path = dir.join(format!("nonfinite_step_{step:06}.json"));
        if let Ok(text) = serde_json::to_string_pretty(&dump) {
            let _ = fs::create_dir_all(dir).and_then(|_| fs::write(&path, text));
        }
    }
    Error::NonFinite { step, detail: format!("{phase}: {detail}") }
}

/// Trains from freshly initialised parameters.
pub fn train(setup: &TrainSetup, pairs: &[TrainPair]) -> Result<TrainOutcome> {
    let seed = setup.train.seed;
    let gen = init_generator(&setup.network, sub_seed(seed, 1))?;
    let disc = init_discriminators(&setup.network, sub_seed(seed, 2))?;
    train_from(setup, pairs, gen, disc)
}

/// Trains starting from the given parameters.
pub fn train_from(setup: &TrainSetup, pairs: &[TrainPair], mut gen: ParamStore, mut disc: ParamStore) -> Result<TrainOutcome> {
    setup.train.validate()?;
    setup.network.validate()?;
    setup.pdsac.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("training needs at least one pair"));
    }
    for p in pairs {
        for pc in [&p.a, &p.b] {
            if pc.len() != setup.network.n_points {
                return Err(Error::Config {
                    key: "network.n_points".into(),
                    message: format!("pair {} has {} points, network expects {}", p.id, pc.len(), setup.network.n_points),
                });
            }
        }
    }
    let tc = &setup.train;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(tc.workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
    let mut gen_opt = Adam::new(&gen, tc.learning_rate, tc.beta1, tc.beta2, tc.adam_eps);
    let mut disc_opt = Adam::new(&disc, tc.learning_rate, tc.beta1, tc.beta2, tc.adam_eps);
    let total_steps = tc.total_steps(pairs.len());
    let per_epoch = pairs.len().div_ceil(tc.batch_size);
    let mut order: Vec<usize> = Vec::new();
    let mut cache: HashMap<usize, Cached> = HashMap::new();
    let mut version = 0usize;
    let mut history = Vec::new();
    let mut suppressed = 0usize;
    let mut generator_updates = 0usize;
    let start = Instant::now();

    for t in 0..total_steps {
        let (epoch, within) = (t / per_epoch, t % per_epoch);
        if within == 0 {
            order = (0..pairs.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(tc.seed, 10_000 + epoch as u64)));
        }
        let idx: Vec<usize> = (0..tc.batch_size).map(|j| order[(within * tc.batch_size + j) % pairs.len()]).collect();
        let batch: Vec<&TrainPair> = idx.iter().map(|&i| &pairs[i]).collect();

        let mut disc_loss = None;
        if t % tc.gan_schedule.discriminator_every == 0 {
            let mut missing: Vec<usize> = idx.iter().copied().filter(|i| cache.get(i).is_none_or(|c| c.version != version)).collect();
            missing.sort_unstable();
            missing.dedup();
            let fresh: Vec<Result<Cached>> =
                pool.install(|| missing.par_iter().map(|&i| generate_cached(&gen, setup, &pairs[i], version)).collect());
            for (i, c) in missing.into_iter().zip(fresh) {
                cache.insert(i, c?);
            }
            let results: Vec<Result<DiscResult>> =
                pool.install(|| idx.par_iter().map(|i| discriminator_element(&disc, setup, &pairs[*i], &cache[i])).collect());
            let results: Vec<DiscResult> = results.into_iter().collect::<Result<_>>()?;
            let loss = results.iter().map(|r| r.loss).sum::<f64>() / results.len() as f64;
            if !loss.is_finite() {
                return Err(non_finite(setup, t, "discriminator", format!("loss {loss}"), &batch, None));
            }
            disc_opt.step(&mut disc, &mean_grads(results.into_iter().map(|r| r.grads).collect()));
            if !disc.all_finite() {
                return Err(non_finite(setup, t, "discriminator", "parameters became non-finite".into(), &batch, None));
            }
            disc_loss = Some(loss);
        }

        if t % tc.gan_schedule.generator_every == 0 {
            let results: Vec<Result<GenResult>> = pool.install(|| {
                idx.par_iter()
                    .enumerate()
                    .map(|(j, &i)| {
                        let seeds = (pdsac_seed(tc.seed, t, j, 0), pdsac_seed(tc.seed, t, j, 1));
                        generator_element(&gen, &disc, setup, &pairs[i], seeds)
                    })
                    .collect()
            });
            let results: Vec<GenResult> = results.into_iter().collect::<Result<_>>()?;
            let per: Vec<LossBreakdown> = results.iter().map(|r| r.loss).collect();
            let loss = LossBreakdown::mean(&per);
            if !loss.is_finite() {
                return Err(non_finite(setup, t, "generator", format!("{loss:?}"), &batch, Some(&per)));
            }
            suppressed += results.iter().map(|r| r.suppressed).sum::<usize>();
            gen_opt.step(&mut gen, &mean_grads(results.into_iter().map(|r| r.grads).collect()));
            if !gen.all_finite() {
                return Err(non_finite(setup, t, "generator", "parameters became non-finite".into(), &batch, Some(&per)));
            }
            version += 1;
            generator_updates += 1;
            history.push(HistoryRow { step: t, loss, disc_loss, wall_ms: start.elapsed().as_secs_f64() * 1e3 });
        }

        if let Some(dir) = &setup.out_dir {
            if tc.checkpoint_every > 0 && (t + 1) % tc.checkpoint_every == 0 && t + 1 < total_steps {
                let ck = dir.join("checkpoints").join(format!("step_{:06}", t + 1));
                save_checkpoint(&ck, &combined_store(&gen, &disc)?, &checkpoint_meta(&setup.network, t + 1, tc.precision))?;
            }
        }
    }

    if let Some(dir) = &setup.out_dir {
        fs::create_dir_all(dir)?;
        save_checkpoint(
            &dir.join("final"),
            &combined_store(&gen, &disc)?,
            &checkpoint_meta(&setup.network, total_steps, tc.precision),
        )?;
        fs::write(dir.join("history.csv"), history_csv(&history))?;
    }
    Ok(TrainOutcome {
        generator: gen,
        discriminators: disc,
        history,
        steps: total_steps,
        generator_updates,
        suppressed_grads: suppressed,
    })
}

#[cfg(test)]
mod tests;
